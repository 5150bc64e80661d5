//! Experiment stages over a work directory.
//!
//! Layout under `workdir`:
//!
//! ```text
//! data/{train,test}.tsv, data/{train,test}/*.wav     synth
//! mixtures/{pretrain,eval_clean,eval_2mix,eval_3mix}.tsv   mix
//! tokenizer/{codebook.txt,clean_tokens.tsv,nhot_targets.tsv,mixture_tokens.tsv}
//! pretrain/<mode>/{train_log.tsv,ckpt_<step>/{backbone.ckpt,config.txt}}
//! adapt/<mode>/<strategy>/shots<k>/{repeat<r>.ckpt,epoch_losses.tsv}
//! eval/<condition>/<mode>_<strategy>_<k>.tsv
//! report/{report.tsv,report.txt}
//! ```
//!
//! Every stage directory holds a `provenance.json` stamp; downstream stages
//! recompute the stamp they expect and refuse to run on a mismatch.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::adapt::{
    average_checkpoints, build_adaptation_examples, embed_all, labels_matrix, train_head, KwsHead,
    LabeledUtterance, Strategy,
};
use crate::backbone::Backbone;
use crate::config::ExperimentConfig;
use crate::corpus::{generate_synthetic_corpus, load_manifest, sample_few_shot, Manifest, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::evalkit::{
    compute_eer, emit_report, top_k_accuracy, trials_from_scores, Condition, EvalReport, RepeatMetrics,
    ReportFormat,
};
use crate::mixing::{
    materialize_all, plan_eval_mixture_set, plan_pretrain_mixtures, read_mixture_manifest,
    write_mixture_manifest, AudioStore, MixturePlan, MixtureSpec, Waveform,
};
use crate::pretrain::{pretrain_run, Mode, PretrainExample, StepLog, Targets};
use crate::rng::child_seed;
use crate::tokenizer::{
    fit_codebook, format_nhot_line, format_token_line, make_mixture_targets, make_nhot_targets,
    parse_nhot_line, parse_token_line, tokenize_frames, Codebook, FeatureExtractor, FeatureMatrix, NHotTargets,
    TokenSequence,
};

pub const STAGE_VERSION: u32 = 1;
const STAMP: &str = "provenance.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Mix,
    Tokenize,
    Pretrain,
    Adapt,
    Eval,
    Report,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Synth => "synth-data",
            Stage::Mix => "mix-build",
            Stage::Tokenize => "tokenize",
            Stage::Pretrain => "pretrain",
            Stage::Adapt => "adapt",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    /// Config sections a stage's outputs depend on.
    fn sections(&self) -> &'static [&'static str] {
        match self {
            Stage::Synth => &["corpus"],
            Stage::Mix => &["corpus", "mixing"],
            Stage::Tokenize => &["corpus", "mixing", "tokenizer"],
            Stage::Pretrain => &["corpus", "mixing", "tokenizer", "backbone", "pretrain"],
            Stage::Adapt => &["corpus", "mixing", "tokenizer", "backbone", "pretrain", "adapt"],
            Stage::Eval | Stage::Report => &["corpus", "mixing", "tokenizer", "backbone", "pretrain", "adapt", "eval"],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn expected(cfg: &ExperimentConfig, stage: Stage) -> Self {
        Self {
            stage: stage.name().to_string(),
            version: STAGE_VERSION,
            config_hash: cfg.section_hash(stage.sections()),
            seed: cfg.seed,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(dir.join(STAMP), e.to_string()))?;
        std::fs::write(dir.join(STAMP), text + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Option<Provenance>> {
        let path = dir.join(STAMP);
        match std::fs::read_to_string(&path) {
            Ok(t) => serde_json::from_str(&t)
                .map(Some)
                .map_err(|e| Error::format(path, e.to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Fails unless `dir` carries exactly the stamp `cfg` implies for `stage`.
    pub fn verify(cfg: &ExperimentConfig, stage: Stage, dir: &Path) -> Result<()> {
        let want = Provenance::expected(cfg, stage);
        match Provenance::read(dir)? {
            None => Err(Error::MissingArtifact {
                path: dir.join(STAMP),
                what: format!("provenance of stage `{stage}` (run it first)"),
            }),
            Some(got) if got == want => Ok(()),
            Some(got) => Err(Error::Provenance(format!(
                "{} was produced by {} v{} with config {} seed {}, current config expects {} v{} with {} seed {}",
                dir.display(),
                got.stage,
                got.version,
                &got.config_hash[..12.min(got.config_hash.len())],
                got.seed,
                want.stage,
                want.version,
                &want.config_hash[..12],
                want.seed
            ))),
        }
    }
}

/// Paths of every artifact under one work directory.
#[derive(Debug, Clone)]
pub struct Workdir {
    pub root: PathBuf,
    pub corpus: PathBuf,
}

impl Workdir {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            root: cfg.workdir.clone(),
            corpus: cfg.corpus_root(),
        }
    }

    pub fn manifest(&self, split: Split) -> PathBuf {
        self.corpus.join(format!("{split}.tsv"))
    }
    pub fn mixtures(&self) -> PathBuf {
        self.root.join("mixtures")
    }
    pub fn mixture_manifest(&self, name: &str) -> PathBuf {
        self.mixtures().join(format!("{name}.tsv"))
    }
    pub fn tokenizer(&self) -> PathBuf {
        self.root.join("tokenizer")
    }
    pub fn codebook(&self) -> PathBuf {
        self.tokenizer().join("codebook.txt")
    }
    pub fn clean_tokens(&self) -> PathBuf {
        self.tokenizer().join("clean_tokens.tsv")
    }
    pub fn nhot_targets(&self) -> PathBuf {
        self.tokenizer().join("nhot_targets.tsv")
    }
    pub fn mixture_tokens(&self) -> PathBuf {
        self.tokenizer().join("mixture_tokens.tsv")
    }
    pub fn pretrain(&self, mode: Mode) -> PathBuf {
        self.root.join("pretrain").join(mode.as_str())
    }
    pub fn checkpoint(&self, mode: Mode, step: usize) -> PathBuf {
        self.pretrain(mode).join(format!("ckpt_{step}"))
    }
    pub fn adapt(&self, mode: Mode, strategy: Strategy, shots: usize) -> PathBuf {
        self.root
            .join("adapt")
            .join(mode.as_str())
            .join(strategy.as_str())
            .join(format!("shots{shots}"))
    }
    pub fn head(&self, mode: Mode, strategy: Strategy, shots: usize, repeat: usize) -> PathBuf {
        self.adapt(mode, strategy, shots).join(format!("repeat{repeat}.ckpt"))
    }
    pub fn eval(&self, condition: Condition) -> PathBuf {
        self.root.join("eval").join(condition.as_str())
    }
    pub fn eval_file(&self, condition: Condition, mode: Mode, strategy: Strategy, shots: usize) -> PathBuf {
        self.eval(condition).join(format!("{mode}_{strategy}_{shots}.tsv"))
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

// Seed tags per stage.
const TAG_SYNTH: u64 = 0x10;
const TAG_MIX: u64 = 0x20;
const TAG_KMEANS: u64 = 0x30;
const TAG_INIT: u64 = 0x40;
const TAG_STEPS: u64 = 0x41;
const TAG_FEWSHOT: u64 = 0x50;
const TAG_EXAMPLES: u64 = 0x51;
const TAG_HEAD: u64 = 0x52;
const TAG_EVAL: u64 = 0x60;

fn missing(path: PathBuf, what: &str) -> Error {
    Error::MissingArtifact {
        path,
        what: what.to_string(),
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(missing(path.to_path_buf(), what))
    }
}

fn load_split(wd: &Workdir, split: Split) -> Result<Manifest> {
    let path = wd.manifest(split);
    require(&path, &format!("{split} manifest (run `synth-data` or set paths.corpus)"))?;
    load_manifest(&path)
}

/// Checks the corpus stamp when the corpus was synthesized by this tool.
fn verify_corpus(cfg: &ExperimentConfig, wd: &Workdir) -> Result<()> {
    if Provenance::read(&wd.corpus)?.is_some() {
        Provenance::verify(cfg, Stage::Synth, &wd.corpus)?;
    }
    Ok(())
}

pub fn run_synth(cfg: &ExperimentConfig) -> Result<String> {
    let wd = Workdir::new(cfg);
    let seed = child_seed(cfg.seed, &[TAG_SYNTH]);
    let c = &cfg.corpus;
    let mut counts = Vec::new();
    for (split, per_class) in [(Split::Train, c.train_per_class), (Split::Test, c.test_per_class)] {
        let m = generate_synthetic_corpus(
            &SynthSpec {
                n_keywords: c.n_keywords,
                per_class,
                duration_s: c.duration_s,
                sample_rate: c.sample_rate,
                seed: child_seed(seed, &[split as u64]),
                split,
                layout: c.layout,
            },
            &wd.corpus,
        )?;
        counts.push(m.records.len());
    }
    Provenance::expected(cfg, Stage::Synth).write(&wd.corpus)?;
    Ok(format!(
        "synth-data: {} train / {} test utterances, {} keywords -> {}",
        counts[0],
        counts[1],
        c.n_keywords,
        wd.corpus.display()
    ))
}

pub fn run_mix_build(cfg: &ExperimentConfig) -> Result<String> {
    let wd = Workdir::new(cfg);
    verify_corpus(cfg, &wd)?;
    let train = load_split(&wd, Split::Train)?;
    let test = load_split(&wd, Split::Test)?;
    let seed = child_seed(cfg.seed, &[TAG_MIX]);
    let m = &cfg.mixing;
    let pretrain = plan_pretrain_mixtures(&train, m.clean_fraction, m.pretrain_count, seed)?;
    let clean: Vec<MixturePlan> = test
        .records
        .iter()
        .map(|r| MixturePlan {
            id: r.id.clone(),
            spec: MixtureSpec::clean(r.id.clone()),
            label: crate::mixing::one_hot(r.keyword, test.keyword_count()),
        })
        .collect();
    let two = plan_eval_mixture_set(&test, 2, m.eval_2mix_count, child_seed(seed, &[TAG_EVAL]))?;
    let three = plan_eval_mixture_set(&test, 3, m.eval_3mix_count, child_seed(seed, &[TAG_EVAL]))?;
    std::fs::create_dir_all(wd.mixtures())?;
    write_mixture_manifest(&pretrain, &wd.mixture_manifest("pretrain"))?;
    write_mixture_manifest(&clean, &wd.mixture_manifest("eval_clean"))?;
    write_mixture_manifest(&two, &wd.mixture_manifest("eval_2mix"))?;
    write_mixture_manifest(&three, &wd.mixture_manifest("eval_3mix"))?;
    Provenance::expected(cfg, Stage::Mix).write(&wd.mixtures())?;
    let mixed = pretrain.iter().filter(|p| p.spec.cardinality() > 1).count();
    Ok(format!(
        "mix-build: {} pre-training examples ({} 2-mix), eval sets clean {} / 2mix {} / 3mix {}",
        pretrain.len(),
        mixed,
        clean.len(),
        two.len(),
        three.len()
    ))
}

fn extractor(cfg: &ExperimentConfig) -> Result<FeatureExtractor> {
    FeatureExtractor::new(cfg.tokenizer.features.clone())
}

fn features_of(ex: &FeatureExtractor, store: &AudioStore, ids: &[&str]) -> Result<Vec<FeatureMatrix>> {
    ids.iter().map(|id| ex.extract(store.get(id)?, id)).collect()
}

/// Per-source clean tokens of a mixture, each source cut to the mixture length.
fn source_tokens(
    plan: &MixturePlan,
    mix_len: usize,
    store: &AudioStore,
    ex: &FeatureExtractor,
    cb: &Codebook,
) -> Result<Vec<TokenSequence>> {
    plan.spec
        .ordered_pairs()
        .iter()
        .map(|(id, _)| {
            let w = store.get(id)?.truncated(mix_len);
            tokenize_frames(&ex.extract(&w, id)?, cb)
        })
        .collect()
}

pub fn run_tokenize(cfg: &ExperimentConfig) -> Result<String> {
    let wd = Workdir::new(cfg);
    verify_corpus(cfg, &wd)?;
    Provenance::verify(cfg, Stage::Mix, &wd.mixtures())?;
    let train = load_split(&wd, Split::Train)?;
    let store = AudioStore::load(&train, &wd.corpus)?;
    let ex = extractor(cfg)?;
    let ids: Vec<&str> = train.records.iter().map(|r| r.id.as_str()).collect();
    let feats = features_of(&ex, &store, &ids)?;
    let cb = fit_codebook(
        &feats,
        cfg.tokenizer.codebook_size,
        cfg.tokenizer.kmeans_iters,
        child_seed(cfg.seed, &[TAG_KMEANS]),
        &cfg.tokenizer.features,
    )?;
    std::fs::create_dir_all(wd.tokenizer())?;
    cb.save(&wd.codebook())?;

    let mut clean = String::new();
    for f in &feats {
        clean.push_str(&format_token_line(&f.source_id, &tokenize_frames(f, &cb)?));
        clean.push('\n');
    }
    std::fs::write(wd.clean_tokens(), clean)?;

    let plans = read_mixture_manifest(&wd.mixture_manifest("pretrain"))?;
    let mixtures = materialize_all(&plans, &store)?;
    let (mut nhot, mut mpc) = (String::new(), String::new());
    for (plan, m) in plans.iter().zip(&mixtures) {
        let per_source = source_tokens(plan, m.waveform.len(), &store, &ex, &cb)?;
        let z = make_nhot_targets(&per_source, cb.size())?;
        nhot.push_str(&format_nhot_line(&m.id, &z));
        nhot.push('\n');
        let mf = ex.extract(&m.waveform, &m.id)?;
        mpc.push_str(&format_token_line(&m.id, &make_mixture_targets(&mf, &cb)?));
        mpc.push('\n');
    }
    std::fs::write(wd.nhot_targets(), nhot)?;
    std::fs::write(wd.mixture_tokens(), mpc)?;
    Provenance::expected(cfg, Stage::Tokenize).write(&wd.tokenizer())?;
    Ok(format!(
        "tokenize: C={} codebook over {} clean frames; targets for {} clean utterances and {} mixtures",
        cb.size(),
        feats.iter().map(FeatureMatrix::len).sum::<usize>(),
        feats.len(),
        mixtures.len()
    ))
}

fn read_lines(path: &Path, what: &str) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => missing(path.to_path_buf(), what),
        _ => Error::Io(e),
    })
}

fn read_token_file(path: &Path, what: &str) -> Result<HashMap<String, TokenSequence>> {
    let text = read_lines(path, what)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| parse_token_line(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

fn read_nhot_file(path: &Path, units: usize) -> Result<HashMap<String, NHotTargets>> {
    let text = read_lines(path, "n-hot targets (run `tokenize` first)")?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| parse_nhot_line(l, units).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Pre-training inputs for `mode`: clean utterances for clean_nll, the
/// pre-training mixture set otherwise.
pub fn pretrain_examples(cfg: &ExperimentConfig, mode: Mode) -> Result<(Vec<PretrainExample>, Array2<f64>)> {
    let wd = Workdir::new(cfg);
    let units = cfg.tokenizer.codebook_size;
    // Dependency files are checked before the stamp so a missing artifact is named.
    let targets_path = match mode {
        Mode::CleanNll => wd.clean_tokens(),
        Mode::MtBce => wd.nhot_targets(),
        Mode::MpcNll => wd.mixture_tokens(),
    };
    let what = match mode {
        Mode::CleanNll => "clean token targets (run `tokenize` first)",
        Mode::MtBce => "n-hot targets (run `tokenize` first)",
        Mode::MpcNll => "mixture token targets (run `tokenize` first)",
    };
    require(&targets_path, what)?;
    Provenance::verify(cfg, Stage::Tokenize, &wd.tokenizer())?;
    let train = load_split(&wd, Split::Train)?;
    let store = AudioStore::load(&train, &wd.corpus)?;
    let ex = extractor(cfg)?;
    let ids: Vec<&str> = train.records.iter().map(|r| r.id.as_str()).collect();
    let clean_feats = features_of(&ex, &store, &ids)?;
    let stats_frames = crate::tokenizer::kmeans::stack_rows(clean_feats.iter().map(|f| &f.frames))?;

    let mut out = Vec::new();
    let check = |id: &str, t: usize, f: usize| {
        if t == f {
            Ok(())
        } else {
            Err(Error::Integrity(format!("{id}: {t} target frames for {f} feature frames")))
        }
    };
    match mode {
        Mode::CleanNll => {
            let tokens = read_token_file(&targets_path, what)?;
            for f in clean_feats {
                let t = tokens
                    .get(&f.source_id)
                    .ok_or_else(|| Error::Integrity(format!("no clean tokens for {}", f.source_id)))?;
                check(&f.source_id, t.len(), f.len())?;
                out.push(PretrainExample {
                    id: f.source_id.clone(),
                    features: f.frames,
                    targets: Targets::Tokens(t.clone()),
                });
            }
        }
        Mode::MtBce | Mode::MpcNll => {
            let plans = read_mixture_manifest(&wd.mixture_manifest("pretrain"))?;
            let mixtures = materialize_all(&plans, &store)?;
            let nhot = if mode == Mode::MtBce {
                read_nhot_file(&targets_path, units)?
            } else {
                HashMap::new()
            };
            let tokens = if mode == Mode::MpcNll {
                read_token_file(&targets_path, what)?
            } else {
                HashMap::new()
            };
            for m in mixtures {
                let f = ex.extract(&m.waveform, &m.id)?;
                let targets = if mode == Mode::MtBce {
                    Targets::NHot(
                        nhot.get(&m.id)
                            .ok_or_else(|| Error::Integrity(format!("no n-hot targets for {}", m.id)))?
                            .clone(),
                    )
                } else {
                    Targets::Tokens(
                        tokens
                            .get(&m.id)
                            .ok_or_else(|| Error::Integrity(format!("no mixture tokens for {}", m.id)))?
                            .clone(),
                    )
                };
                check(&m.id, targets.frames(), f.len())?;
                out.push(PretrainExample {
                    id: m.id,
                    features: f.frames,
                    targets,
                });
            }
        }
    }
    Ok((out, stats_frames))
}

pub fn run_pretrain(cfg: &ExperimentConfig, mode: Mode) -> Result<(String, Vec<StepLog>)> {
    let wd = Workdir::new(cfg);
    let (examples, stats) = pretrain_examples(cfg, mode)?;
    let mut backbone = Backbone::new(cfg.backbone_config(), child_seed(cfg.seed, &[TAG_INIT]))?;
    backbone.set_input_statistics(&stats);
    let pc = cfg.pretrain_config(mode, child_seed(cfg.seed, &[TAG_STEPS]));
    let dir = wd.pretrain(mode);
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    let echo = cfg.echo();
    let log = pretrain_run(&pc, &examples, &mut backbone, &mut |step, b| {
        let ck = wd.checkpoint(mode, step);
        std::fs::create_dir_all(&ck)?;
        b.save(&ck.join("backbone.ckpt"))?;
        std::fs::write(ck.join("config.txt"), &echo)?;
        Ok(())
    })?;
    let mut text = String::from("#step\tmode\tloss\tmasked_frames\tlr\n");
    for l in &log {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    std::fs::write(dir.join("train_log.tsv"), text)?;
    Provenance::expected(cfg, Stage::Pretrain).write(&dir)?;
    let summary = match crate::pretrain::loss_window_means(&log, 100.min(log.len())) {
        Some((first, last)) => format!(
            "pretrain[{mode}]: {} steps on {} examples, loss {first:.4} -> {last:.4} (first/last 100-step means)",
            log.len(),
            examples.len()
        ),
        None => format!("pretrain[{mode}]: initial checkpoint only"),
    };
    Ok((summary, log))
}

/// Final pre-trained backbone of `mode`.
pub fn load_backbone(cfg: &ExperimentConfig, mode: Mode) -> Result<Backbone> {
    let wd = Workdir::new(cfg);
    let path = wd.checkpoint(mode, cfg.pretrain.steps).join("backbone.ckpt");
    require(&path, &format!("{mode} backbone checkpoint (run `pretrain --mode {mode}` first)"))?;
    Provenance::verify(cfg, Stage::Pretrain, &wd.pretrain(mode))?;
    Backbone::load(&path)
}

fn head_metadata(strategy: Strategy, shots: usize, repeat: usize, seed: u64, backbone_digest: &str) -> String {
    serde_json::json!({
        "kind": "kws_head",
        "strategy": strategy.as_str(),
        "shots": shots,
        "repeat_index": repeat,
        "seed": seed,
        "backbone_digest": backbone_digest,
    })
    .to_string()
}

pub fn run_adapt(cfg: &ExperimentConfig, mode: Mode, strategy: Strategy, shots: usize) -> Result<String> {
    let wd = Workdir::new(cfg);
    let backbone = load_backbone(cfg, mode)?;
    let digest = backbone.digest()?;
    let train = load_split(&wd, Split::Train)?;
    let store = AudioStore::load(&train, &wd.corpus)?;
    let ex = extractor(cfg)?;
    let k = train.keyword_count();
    let subsets = sample_few_shot(&train, shots, cfg.adapt.repeats, child_seed(cfg.seed, &[TAG_FEWSHOT]))?;
    let dir = wd.adapt(mode, strategy, shots);
    std::fs::create_dir_all(&dir)?;
    let mut losses = String::from("#repeat\tepoch\tbce\n");
    let mut finals = Vec::new();
    for sub in &subsets {
        let r = sub.repeat_index as u64;
        let utts = sub
            .record_ids
            .iter()
            .map(|id| {
                let rec = train.record(id).expect("subset ids come from the manifest");
                Ok(LabeledUtterance {
                    id: id.clone(),
                    waveform: store.get(id)?.clone(),
                    class: rec.keyword,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let examples = build_adaptation_examples(
            &utts,
            k,
            strategy,
            cfg.adapt.mixup_alpha,
            child_seed(cfg.seed, &[TAG_EXAMPLES, shots as u64, r]),
        )?;
        let waves: Vec<&Waveform> = examples.iter().map(|e| &e.waveform).collect();
        let emb = embed_all(&waves, &backbone, &ex)?;
        let mut ac = cfg.adapt_config(strategy, shots);
        ac.seed = child_seed(cfg.seed, &[TAG_HEAD, shots as u64, r]);
        let run = train_head(&emb, &labels_matrix(&examples)?, &ac)?;
        for (e, l) in run.epoch_losses.iter().enumerate() {
            losses.push_str(&format!("{r}\t{}\t{l:.9}\n", e + 1));
        }
        finals.push(*run.epoch_losses.last().expect("epochs >= 10"));
        let head = average_checkpoints(&run.heads)?;
        head.save(
            &wd.head(mode, strategy, shots, sub.repeat_index),
            &head_metadata(strategy, shots, sub.repeat_index, ac.seed, &digest),
        )?;
    }
    if backbone.digest()? != digest {
        return Err(Error::Integrity("backbone changed during adaptation".into()));
    }
    std::fs::write(dir.join("epoch_losses.tsv"), losses)?;
    Provenance::expected(cfg, Stage::Adapt).write(&dir)?;
    Ok(format!(
        "adapt[{mode}/{strategy}/{shots}-shot]: {} repeats, final-epoch BCE mean {:.4}",
        subsets.len(),
        finals.iter().sum::<f64>() / finals.len() as f64
    ))
}

fn eval_set_name(c: Condition) -> &'static str {
    match c {
        Condition::Clean => "eval_clean",
        Condition::Mix2 => "eval_2mix",
        Condition::Mix3 => "eval_3mix",
    }
}

/// Selection of adapted systems to evaluate; `None` means every configured value.
#[derive(Debug, Clone, Default)]
pub struct Selection {
    pub modes: Option<Vec<Mode>>,
    pub strategies: Option<Vec<Strategy>>,
    pub shots: Option<Vec<usize>>,
}

impl Selection {
    fn modes(&self, cfg: &ExperimentConfig) -> Vec<Mode> {
        self.modes.clone().unwrap_or_else(|| cfg.pretrain.modes.clone())
    }
    fn strategies(&self, cfg: &ExperimentConfig) -> Vec<Strategy> {
        self.strategies.clone().unwrap_or_else(|| cfg.adapt.strategies.clone())
    }
    fn shots(&self, cfg: &ExperimentConfig) -> Vec<usize> {
        self.shots.clone().unwrap_or_else(|| cfg.adapt.shots.clone())
    }
}

/// Scores every utterance of an evaluation set with every selected head.
pub fn run_eval(cfg: &ExperimentConfig, condition: Condition, sel: &Selection) -> Result<Vec<EvalReport>> {
    let wd = Workdir::new(cfg);
    Provenance::verify(cfg, Stage::Mix, &wd.mixtures())?;
    let test = load_split(&wd, Split::Test)?;
    let store = AudioStore::load(&test, &wd.corpus)?;
    let plans = read_mixture_manifest(&wd.mixture_manifest(eval_set_name(condition)))?;
    let mixtures = materialize_all(&plans, &store)?;
    let ids: Vec<String> = mixtures.iter().map(|m| m.id.clone()).collect();
    let labels: Vec<Vec<bool>> = mixtures.iter().map(|m| m.label.clone()).collect();
    let waves: Vec<&Waveform> = mixtures.iter().map(|m| &m.waveform).collect();
    let ex = extractor(cfg)?;
    let dir = wd.eval(condition);
    std::fs::create_dir_all(&dir)?;
    let mut reports = Vec::new();
    for mode in sel.modes(cfg) {
        let backbone = load_backbone(cfg, mode)?;
        let emb = embed_all(&waves, &backbone, &ex)?;
        for strategy in sel.strategies(cfg) {
            for shots in sel.shots(cfg) {
                let adir = wd.adapt(mode, strategy, shots);
                require(
                    &adir.join(STAMP),
                    &format!("adapted heads (run `adapt --mode {mode} --strategy {strategy} --shots {shots}` first)"),
                )?;
                Provenance::verify(cfg, Stage::Adapt, &adir)?;
                let mut repeats = Vec::new();
                let mut text = String::from("#repeat\taccuracy\teer\n");
                for r in 0..cfg.adapt.repeats {
                    let head = KwsHead::load(&wd.head(mode, strategy, shots, r))?;
                    let probs = head.probabilities(&emb);
                    let scores: Vec<Vec<f64>> = probs.axis_iter(Axis(0)).map(|row| row.to_vec()).collect();
                    let accuracy = top_k_accuracy(&scores, &labels, condition.cardinality())?;
                    let eer = compute_eer(&trials_from_scores(&ids, &scores, &labels)?)?;
                    text.push_str(&format!("{r}\t{accuracy:.9}\t{eer:.9}\n"));
                    repeats.push(RepeatMetrics { accuracy, eer });
                }
                std::fs::write(wd.eval_file(condition, mode, strategy, shots), text)?;
                reports.push(EvalReport {
                    condition,
                    pretrain: mode.to_string(),
                    strategy: strategy.to_string(),
                    shots,
                    repeats,
                });
            }
        }
    }
    Provenance::expected(cfg, Stage::Eval).write(&dir)?;
    Ok(reports)
}

fn read_eval_file(path: &Path) -> Result<Vec<RepeatMetrics>> {
    let text = read_lines(path, "evaluation results (run `eval` first)")?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = |r: String| Error::format(path, format!("line {}: {r}", i + 1));
            if f.len() != 3 {
                return Err(bad("expected 3 fields".into()));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(e.to_string()));
            Ok(RepeatMetrics {
                accuracy: num(f[1])?,
                eer: num(f[2])?,
            })
        })
        .collect()
}

/// Collects evaluation results into `report/report.{tsv,txt}`; returns the text table.
pub fn run_report(cfg: &ExperimentConfig) -> Result<(String, Vec<EvalReport>)> {
    let wd = Workdir::new(cfg);
    let mut reports = Vec::new();
    for &condition in &cfg.eval.conditions {
        Provenance::verify(cfg, Stage::Eval, &wd.eval(condition))?;
        for &mode in &cfg.pretrain.modes {
            for &strategy in &cfg.adapt.strategies {
                for &shots in &cfg.adapt.shots {
                    reports.push(EvalReport {
                        condition,
                        pretrain: mode.to_string(),
                        strategy: strategy.to_string(),
                        shots,
                        repeats: read_eval_file(&wd.eval_file(condition, mode, strategy, shots))?,
                    });
                }
            }
        }
    }
    let dir = wd.report();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("report.tsv"), emit_report(&reports, ReportFormat::Tsv))?;
    let table = emit_report(&reports, ReportFormat::TextTable);
    std::fs::write(dir.join("report.txt"), &table)?;
    Provenance::expected(cfg, Stage::Report).write(&dir)?;
    Ok((table, reports))
}

/// Every stage in order; returns the rendered table and the per-system reports.
pub fn run_all(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&str)) -> Result<(String, Vec<EvalReport>)> {
    let is_synthetic = cfg.corpus_dir.as_os_str().is_empty();
    if is_synthetic {
        progress(&run_synth(cfg)?);
    }
    progress(&run_mix_build(cfg)?);
    progress(&run_tokenize(cfg)?);
    for &mode in &cfg.pretrain.modes {
        progress(&run_pretrain(cfg, mode)?.0);
    }
    for &mode in &cfg.pretrain.modes {
        for &strategy in &cfg.adapt.strategies {
            for &shots in &cfg.adapt.shots {
                progress(&run_adapt(cfg, mode, strategy, shots)?);
            }
        }
    }
    for &condition in &cfg.eval.conditions {
        let reports = run_eval(cfg, condition, &Selection::default())?;
        for r in &reports {
            progress(&eval_summary(r));
        }
    }
    run_report(cfg)
}

pub fn eval_summary(r: &EvalReport) -> String {
    let (a, e) = (r.accuracy(), r.eer());
    format!(
        "eval[{}] {}/{}/{}-shot: Top-{} ACC {:.2} ± {:.2}, EER {:.2} ± {:.2} (%)",
        r.condition,
        r.pretrain,
        r.strategy,
        r.shots,
        r.k(),
        a.mean * 100.0,
        a.dispersion * 100.0,
        e.mean * 100.0,
        e.dispersion * 100.0
    )
}

/// Clean features for a list of waveforms, used by tests and the demo.
pub fn features_for(cfg: &ExperimentConfig, w: &Waveform) -> Result<FeatureMatrix> {
    extractor(cfg)?.extract(w, "")
}

/// One directional comparison between systems of a toy run.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderingCheck {
    pub name: String,
    pub holds: bool,
    pub detail: String,
}

fn find<'a>(reports: &'a [EvalReport], c: Condition, mode: Mode, strategy: Strategy) -> Result<&'a EvalReport> {
    reports
        .iter()
        .find(|r| r.condition == c && r.pretrain == mode.as_str() && r.strategy == strategy.as_str())
        .ok_or_else(|| Error::MissingArtifact {
            path: PathBuf::from(format!("eval/{c}/{mode}_{strategy}")),
            what: "evaluation results for the directional checks".into(),
        })
}

/// The orderings a toy run is expected to show: mixture adaptation helps on
/// 2-mix under every pre-training mode, mt_bce + MT beats clean_nll + Clean by
/// `margin` Top-2 points and has the lowest 2-mix EER, and the gain carries
/// over to 3-mix in at least `min_repeats` paired repeats.
pub fn directional_checks(reports: &[EvalReport], margin: f64, min_repeats: usize) -> Result<Vec<OrderingCheck>> {
    let modes = [Mode::CleanNll, Mode::MtBce];
    let mut out = Vec::new();
    for mode in modes {
        let mt = find(reports, Condition::Mix2, mode, Strategy::Mt)?.accuracy().mean;
        let clean = find(reports, Condition::Mix2, mode, Strategy::Clean)?.accuracy().mean;
        out.push(OrderingCheck {
            name: format!("2mix Top-2: {mode}+mt >= {mode}+clean"),
            holds: mt >= clean,
            detail: format!("{:.2} vs {:.2}", mt * 100.0, clean * 100.0),
        });
    }
    let best = find(reports, Condition::Mix2, Mode::MtBce, Strategy::Mt)?;
    let base = find(reports, Condition::Mix2, Mode::CleanNll, Strategy::Clean)?;
    let gap = best.accuracy().mean - base.accuracy().mean;
    out.push(OrderingCheck {
        name: format!("2mix Top-2: mt_bce+mt - clean_nll+clean >= {:.0} points", margin * 100.0),
        holds: gap >= margin,
        detail: format!("{:.2} points", gap * 100.0),
    });
    let mut eers = Vec::new();
    for mode in modes {
        for s in [Strategy::Clean, Strategy::Mt] {
            eers.push((format!("{mode}+{s}"), find(reports, Condition::Mix2, mode, s)?.eer().mean));
        }
    }
    let best_eer = best.eer().mean;
    out.push(OrderingCheck {
        name: "2mix EER: mt_bce+mt lowest".into(),
        holds: eers.iter().all(|(_, e)| best_eer <= *e),
        detail: eers
            .iter()
            .map(|(n, e)| format!("{n} {:.2}", e * 100.0))
            .collect::<Vec<_>>()
            .join(", "),
    });
    let best3 = find(reports, Condition::Mix3, Mode::MtBce, Strategy::Mt)?;
    let base3 = find(reports, Condition::Mix3, Mode::CleanNll, Strategy::Clean)?;
    let wins = best3
        .repeats
        .iter()
        .zip(&base3.repeats)
        .filter(|(a, b)| a.accuracy > b.accuracy)
        .count();
    out.push(OrderingCheck {
        name: format!("3mix Top-3: mt_bce+mt > clean_nll+clean in >= {min_repeats} repeats"),
        holds: wins >= min_repeats,
        detail: format!(
            "{wins}/{} repeats, means {:.2} vs {:.2}",
            best3.repeats.len(),
            best3.accuracy().mean * 100.0,
            base3.accuracy().mean * 100.0
        ),
    });
    Ok(out)
}
