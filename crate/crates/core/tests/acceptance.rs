//! Acceptance criteria 1-10. Each test prints one `criterion N: PASS|FAIL` line
//! straight to stderr so it shows up without `--nocapture`.

use std::io::Write as _;
use std::time::Instant;

use mtkws_core::adapt::{average_checkpoints, train_head, AdaptConfig, KwsHead, Strategy};
use mtkws_core::backbone::{
    flatten, posterior_softmax, unit_probability_sigmoid, Backbone, BackboneConfig, HiddenSequence, Params,
    PredictionHead,
};
use mtkws_core::config::ExperimentConfig;
use mtkws_core::corpus::{synth_utterance, TemplateLayout};
use mtkws_core::evalkit::{compute_eer, top_k_accuracy, Trial};
use mtkws_core::mixing::{mix_waveforms, Waveform};
use mtkws_core::pipeline::{self, directional_checks, Workdir};
use mtkws_core::pretrain::{loss_clean_nll, loss_mt_bce, loss_with_grad, Mode, Targets};
use mtkws_core::rng::{seeded, Rng};
use mtkws_core::tokenizer::kmeans::kmeans;
use mtkws_core::tokenizer::{fit_codebook, make_nhot_targets, tokenize_frames, FeatureConfig, FeatureExtractor, NHotTargets, TokenSequence};
use ndarray::Array2;
use rand::Rng as _;

fn report(n: usize, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

// ---------------------------------------------------------------------------
// Scalar-loop oracles. Sums use Neumaier compensation.

fn ksum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

fn oracle_scores(o: &[f64], a: &[Vec<f64>], e: &[Vec<f64>], tau: f64) -> Vec<f64> {
    let d = o.len();
    let ao: Vec<f64> = (0..d).map(|i| ksum((0..d).map(|j| a[i][j] * o[j]))).collect();
    let nao = ksum(ao.iter().map(|v| v * v)).sqrt();
    e.iter()
        .map(|ec| {
            let ne = ksum(ec.iter().map(|v| v * v)).sqrt();
            ksum((0..d).map(|i| ao[i] * ec[i])) / (nao * ne) / tau
        })
        .collect()
}

fn oracle_log_softmax(s: &[f64], z: usize) -> f64 {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    s[z] - m - ksum(s.iter().map(|v| (v - m).exp())).ln()
}

fn oracle_softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = ksum(s.iter().map(|v| (v - m).exp()));
    s.iter().map(|v| (v - m).exp() / z).collect()
}

fn oracle_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn random_matrix(rng: &mut Rng, r: usize, c: usize) -> Vec<Vec<f64>> {
    (0..r).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn to_array(m: &[Vec<f64>]) -> Array2<f64> {
    Array2::from_shape_fn((m.len(), m[0].len()), |(i, j)| m[i][j])
}

struct LossInstance {
    o: Vec<Vec<f64>>,
    masked: Vec<usize>,
    a: Vec<Vec<f64>>,
    e: Vec<Vec<f64>>,
    tau: f64,
    tokens: Vec<usize>,
    nhot: Vec<Vec<bool>>,
}

fn loss_instance(rng: &mut Rng) -> LossInstance {
    let t = rng.gen_range(2..12);
    let d = rng.gen_range(2..9);
    let c = rng.gen_range(2..10);
    let mut masked: Vec<usize> = (0..t).filter(|_| rng.gen_bool(0.4)).collect();
    if masked.is_empty() {
        masked.push(rng.gen_range(0..t));
    }
    let nhot = (0..t)
        .map(|_| {
            let mut row: Vec<bool> = (0..c).map(|_| rng.gen_bool(0.3)).collect();
            row[rng.gen_range(0..c)] = true;
            row
        })
        .collect();
    LossInstance {
        o: random_matrix(rng, t, d),
        masked,
        a: random_matrix(rng, d, d),
        e: random_matrix(rng, c, d),
        tau: [0.1, 0.05, 0.5, 1.0][rng.gen_range(0..4)],
        tokens: (0..t).map(|_| rng.gen_range(0..c)).collect(),
        nhot,
    }
}

impl LossInstance {
    fn head(&self) -> PredictionHead {
        PredictionHead {
            projection: to_array(&self.a),
            unit_embeddings: to_array(&self.e),
            temperature: self.tau,
        }
    }
    fn hidden(&self) -> HiddenSequence {
        HiddenSequence {
            vectors: to_array(&self.o),
            masked_positions: self.masked.clone(),
        }
    }
    fn oracle_nll(&self) -> f64 {
        ksum(self.masked.iter().map(|&t| {
            -oracle_log_softmax(&oracle_scores(&self.o[t], &self.a, &self.e, self.tau), self.tokens[t])
        }))
    }
    fn oracle_bce(&self) -> f64 {
        ksum(self.masked.iter().flat_map(|&t| {
            let s = oracle_scores(&self.o[t], &self.a, &self.e, self.tau);
            let z = self.nhot[t].clone();
            s.into_iter().zip(z).map(|(v, on)| {
                let p = oracle_sigmoid(v);
                if on {
                    -p.max(1e-12).ln()
                } else {
                    -(1.0 - p).max(1e-12).ln()
                }
            })
        }))
    }
}

#[test]
fn criterion_1_equation_oracles() {
    let start = Instant::now();
    let mut rng = seeded(1001, &[]);
    let mut worst = [0.0f64; 5];
    for _ in 0..200 {
        let inst = loss_instance(&mut rng);
        let head = inst.head();
        let h = inst.hidden();
        let tokens = TokenSequence { tokens: inst.tokens.clone() };
        let nhot = NHotTargets::from_rows(
            &inst
                .nhot
                .iter()
                .map(|r| r.iter().enumerate().filter(|(_, b)| **b).map(|(c, _)| c).collect())
                .collect::<Vec<Vec<usize>>>(),
            inst.e.len(),
        )
        .unwrap();
        worst[0] = worst[0].max(rel(loss_clean_nll(&h, &tokens, &head).unwrap().total, inst.oracle_nll()));
        worst[1] = worst[1].max(rel(loss_mt_bce(&h, &nhot, &head).unwrap().total, inst.oracle_bce()));

        let c = rng.gen_range(1..20);
        let scale = [1.0, 10.0, 50.0][rng.gen_range(0..3)];
        let s: Vec<f64> = (0..c).map(|_| rng.gen_range(-scale..scale)).collect();
        for (x, y) in posterior_softmax(&s).iter().zip(oracle_softmax(&s)) {
            worst[2] = worst[2].max(rel(*x, y));
        }
        for (x, &v) in unit_probability_sigmoid(&s).iter().zip(&s) {
            worst[3] = worst[3].max(rel(*x, oracle_sigmoid(v)));
        }

        let n = rng.gen_range(1..4);
        let len = rng.gen_range(1..200);
        let sources: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..len + rng.gen_range(0..20)).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let scales: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..0.9)).collect();
        let waves: Vec<Waveform> = sources.iter().map(|s| Waveform::new(s.clone(), 16000).unwrap()).collect();
        let refs: Vec<&Waveform> = waves.iter().collect();
        let mixed = mix_waveforms(&refs, &scales).unwrap();
        let shortest = sources.iter().map(Vec::len).min().unwrap();
        assert_eq!(mixed.len(), shortest);
        for i in 0..shortest {
            let mut acc = 0.0;
            for (s, w) in sources.iter().zip(&scales) {
                acc += w * s[i];
            }
            let want = acc.clamp(-1.0, 1.0);
            let got = mixed.samples()[i];
            let err = if want == 0.0 { got.abs() } else { rel(got, want) };
            worst[4] = worst[4].max(err);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.iter().all(|w| *w < 1e-9) && secs < 60.0;
    report(
        1,
        pass,
        &format!(
            "max rel err nll {:.1e}, bce {:.1e}, softmax {:.1e}, sigmoid {:.1e}, mix {:.1e} ({secs:.1}s)",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    );
    assert!(pass, "{worst:?}");
}

// ---------------------------------------------------------------------------

fn tiny_backbone(seed: u64) -> Backbone {
    let config = BackboneConfig {
        input_dim: 4,
        local_channels: vec![6, 8],
        local_kernels: vec![3, 3],
        model_dim: 8,
        layers: 1,
        heads: 2,
        ffn_dim: 16,
        dropout: 0.0,
        codebook_size: 5,
        temperature: 0.1,
        positional_encoding: true,
    };
    let mut b = Backbone::new(config, seed).unwrap();
    let mut rng = seeded(seed, &[1]);
    let stats = Array2::from_shape_fn((20, 4), |_| rng.gen_range(-2.0..2.0));
    b.set_input_statistics(&stats);
    b
}

fn loss_value(b: &Backbone, x: &Array2<f64>, mask: &[usize], mode: Mode, targets: &Targets) -> f64 {
    let (o, _) = b.forward_train(x, mask, None).unwrap();
    match targets {
        Targets::Tokens(t) => loss_clean_nll(&o, t, &b.head).unwrap().total,
        Targets::NHot(n) => {
            assert_eq!(mode, Mode::MtBce);
            loss_mt_bce(&o, n, &b.head).unwrap().total
        }
    }
}

fn analytic(b: &Backbone, x: &Array2<f64>, mask: &[usize], mode: Mode, targets: &Targets) -> (f64, Vec<f64>) {
    let (o, cache) = b.forward_train(x, mask, None).unwrap();
    let mut grad = b.zeros_like();
    let (v, d_o) = loss_with_grad(mode, &o, targets, &b.head, &mut grad.head).unwrap();
    b.backward(&cache, &d_o, &mut grad);
    (v.total, flatten(&grad))
}

fn nudge(p: &mut dyn Params, index: usize, delta: f64) {
    let mut i = 0;
    p.visit_mut(&mut |s| {
        if index >= i && index < i + s.len() {
            s[index - i] += delta;
        }
        i += s.len();
    });
}

fn random_targets(rng: &mut Rng, mode: Mode, t: usize, c: usize) -> Targets {
    match mode {
        Mode::MtBce => {
            let rows: Vec<Vec<usize>> = (0..t)
                .map(|_| {
                    let mut r: Vec<usize> = (0..c).filter(|_| rng.gen_bool(0.3)).collect();
                    if r.is_empty() {
                        r.push(rng.gen_range(0..c));
                    }
                    r
                })
                .collect();
            Targets::NHot(NHotTargets::from_rows(&rows, c).unwrap())
        }
        _ => Targets::Tokens(TokenSequence {
            tokens: (0..t).map(|_| rng.gen_range(0..c)).collect(),
        }),
    }
}

/// Denominator floor for relative error. Central differences at h = 1e-5 carry
/// round-off near 1e-10, which swamps a 1e-6 floor when the true gradient is 0.
const REL_FLOOR: f64 = 1e-5;

#[test]
fn criterion_2_gradient_check() {
    let start = Instant::now();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut where_ = String::new();
    let mut checked = 0;
    let mut worst_large = 0.0f64;
    for (k, mode) in [Mode::CleanNll, Mode::MtBce].into_iter().enumerate() {
        let b = tiny_backbone(40 + k as u64);
        let mut rng = seeded(50 + k as u64, &[]);
        let x = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-2.0..2.0));
        let mask = vec![1, 2, 4];
        let targets = random_targets(&mut rng, mode, 6, 5);
        let (_, g) = analytic(&b, &x, &mask, mode, &targets);
        for (i, &gi) in g.iter().enumerate() {
            let mut plus = b.clone();
            nudge(&mut plus, i, h);
            let mut minus = b.clone();
            nudge(&mut minus, i, -h);
            let num = (loss_value(&plus, &x, &mask, mode, &targets) - loss_value(&minus, &x, &mask, mode, &targets))
                / (2.0 * h);
            let err = (gi - num).abs() / gi.abs().max(num.abs()).max(REL_FLOOR);
            if gi.abs().max(num.abs()) > 1e-3 {
                worst_large = worst_large.max(err);
            }
            if err > worst {
                worst = err;
                where_ = format!("{mode} param {i}: analytic {gi:.6e} numeric {num:.6e}");
            }
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && secs < 120.0;
    report(
        2,
        pass,
        &format!(
            "{checked} parameters, max rel err {worst:.2e} at {where_}; {worst_large:.2e} over |g| > 1e-3 ({secs:.1}s)"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_mask_locality() {
    let mut failures = 0;
    for i in 0..100u64 {
        let mut rng = seeded(300, &[i]);
        let b = tiny_backbone(300 + i);
        let t = rng.gen_range(3..10);
        let x = Array2::from_shape_fn((t, 4), |_| rng.gen_range(-2.0..2.0));
        let mut mask: Vec<usize> = (0..t).filter(|_| rng.gen_bool(0.4)).collect();
        if mask.is_empty() {
            mask.push(0);
        }
        if mask.len() == t {
            mask.pop();
        }
        for mode in Mode::ALL {
            let a = random_targets(&mut rng, mode, t, 5);
            let other = random_targets(&mut rng, mode, t, 5);
            // Copy masked rows of `a` into `other`; unmasked rows stay different.
            let b_targets = match (&a, other) {
                (Targets::Tokens(ta), Targets::Tokens(mut tb)) => {
                    for &m in &mask {
                        tb.tokens[m] = ta.tokens[m];
                    }
                    Targets::Tokens(tb)
                }
                (Targets::NHot(na), Targets::NHot(mut nb)) => {
                    for &m in &mask {
                        for c in 0..5 {
                            nb.set(m, c, na.get(m, c));
                        }
                    }
                    Targets::NHot(nb)
                }
                _ => unreachable!(),
            };
            let (la, ga) = analytic(&b, &x, &mask, mode, &a);
            let (lb, gb) = analytic(&b, &x, &mask, mode, &b_targets);
            if la.to_bits() != lb.to_bits() || ga.iter().zip(&gb).any(|(p, q)| p.to_bits() != q.to_bits()) {
                failures += 1;
            }
        }
    }
    let pass = failures == 0;
    report(3, pass, &format!("100 instances x 3 modes, {failures} differ"));
    assert!(pass);
}

#[test]
fn criterion_4_single_source_reduction() {
    let ex = FeatureExtractor::new(FeatureConfig::default()).unwrap();
    let feats: Vec<_> = (0..100)
        .map(|i| {
            let w = synth_utterance(i % 10, i, 10, 0.5, 16000, 404, &TemplateLayout::default()).unwrap();
            ex.extract(&w, &format!("u{i}")).unwrap()
        })
        .collect();
    let cb = fit_codebook(&feats[..20], 16, 20, 9, &FeatureConfig::default()).unwrap();
    let mut bad = 0;
    for f in &feats {
        let tokens = tokenize_frames(f, &cb).unwrap();
        let z = make_nhot_targets(std::slice::from_ref(&tokens), cb.size()).unwrap();
        for (t, &tok) in tokens.tokens.iter().enumerate() {
            let row = z.row(t);
            let one_hot = row.iter().filter(|b| **b).count() == 1 && row[tok];
            if !one_hot {
                bad += 1;
            }
        }
    }
    let pass = bad == 0;
    report(4, pass, &format!("100 utterances, {bad} frames not one-hot at their token"));
    assert!(pass);
}

// ---------------------------------------------------------------------------

fn oracle_eer(present: &[f64], absent: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = present.iter().chain(absent).copied().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let mut best_gap = f64::INFINITY;
    let mut best = f64::NAN;
    for &th in &thresholds {
        let frr = present.iter().filter(|s| **s < th).count() as f64 / present.len() as f64;
        let far = absent.iter().filter(|s| **s >= th).count() as f64 / absent.len() as f64;
        let gap = (far - frr).abs();
        if gap < best_gap {
            best_gap = gap;
            best = (far + frr) / 2.0;
        }
    }
    best
}

fn oracle_top_k_accuracy(scores: &[Vec<f64>], truth: &[Vec<bool>], k: usize) -> f64 {
    let mut hits = 0;
    for (s, y) in scores.iter().zip(truth) {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
        let mut picked = vec![false; s.len()];
        for &i in &idx[..k] {
            picked[i] = true;
        }
        if &picked == y {
            hits += 1;
        }
    }
    hits as f64 / scores.len() as f64
}

#[test]
fn criterion_5_metric_oracles() {
    let start = Instant::now();
    let mut rng = seeded(505, &[]);
    let (mut eer_bad, mut topk_bad) = (0, 0);
    for case in 0..1000 {
        let n = rng.gen_range(1..8);
        let kw = rng.gen_range(2..7);
        let k = rng.gen_range(1..kw.min(4));
        // Coarse grids force ties.
        let grid = if case % 2 == 0 { 4.0 } else { 1000.0 };
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..kw).map(|_| (rng.gen_range(0.0f64..1.0) * grid).floor() / grid).collect())
            .collect();
        let truth: Vec<Vec<bool>> = (0..n)
            .map(|_| {
                let mut y = vec![false; kw];
                let mut idx: Vec<usize> = (0..kw).collect();
                for j in 0..k {
                    let pick = rng.gen_range(j..kw);
                    idx.swap(j, pick);
                    y[idx[j]] = true;
                }
                y
            })
            .collect();
        if top_k_accuracy(&scores, &truth, k).unwrap() != oracle_top_k_accuracy(&scores, &truth, k) {
            topk_bad += 1;
        }
        let trials: Vec<Trial> = scores
            .iter()
            .zip(&truth)
            .enumerate()
            .flat_map(|(u, (s, y))| {
                s.iter().zip(y).enumerate().map(move |(kw, (&score, &present))| Trial {
                    utterance_id: u.to_string(),
                    keyword: kw,
                    score,
                    present,
                })
            })
            .collect();
        let present: Vec<f64> = trials.iter().filter(|t| t.present).map(|t| t.score).collect();
        let absent: Vec<f64> = trials.iter().filter(|t| !t.present).map(|t| t.score).collect();
        if compute_eer(&trials).unwrap() != oracle_eer(&present, &absent) {
            eer_bad += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = eer_bad == 0 && topk_bad == 0 && secs < 60.0;
    report(
        5,
        pass,
        &format!("1000 sets each, EER mismatches {eer_bad}, Top-k mismatches {topk_bad} ({secs:.2}s)"),
    );
    assert!(pass);
}

#[test]
fn criterion_6_kmeans_properties() {
    let mut problems = Vec::new();
    for i in 0..50u64 {
        let mut rng = seeded(600, &[i]);
        let n = rng.gen_range(20..120);
        let d = rng.gen_range(1..6);
        let k = rng.gen_range(2..8);
        let points = Array2::from_shape_fn((n, d), |_| rng.gen_range(-3.0..3.0));
        let fit = kmeans(&points, k, 30, &mut rng).unwrap();
        if fit.inertia_history.windows(2).any(|w| w[1] > w[0]) {
            problems.push(format!("instance {i}: inertia rose"));
        }
        for (p, &a) in points.outer_iter().zip(&fit.assignments) {
            let dist = |c: usize| -> f64 {
                p.iter().zip(fit.centroids.row(c)).map(|(x, y)| (x - y) * (x - y)).sum()
            };
            let best = (0..k).map(dist).fold(f64::INFINITY, f64::min);
            if dist(a) > best {
                problems.push(format!("instance {i}: point not at nearest centroid"));
                break;
            }
        }
    }
    let pass = problems.is_empty();
    report(6, pass, &format!("50 instances, {} violations", problems.len()));
    assert!(pass, "{problems:?}");
}

// ---------------------------------------------------------------------------

fn reduced_config(workdir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.workdir = workdir.to_path_buf();
    for (k, v) in [
        ("corpus.n_keywords", "5"),
        ("corpus.train_per_class", "8"),
        ("corpus.test_per_class", "4"),
        ("mixing.pretrain_count", "60"),
        ("mixing.eval_2mix_count", "20"),
        ("mixing.eval_3mix_count", "20"),
        ("tokenizer.codebook_size", "16"),
        ("tokenizer.kmeans_iters", "20"),
        ("backbone.local_channels", "32,32"),
        ("backbone.model_dim", "32"),
        ("backbone.ffn_dim", "64"),
        ("pretrain.steps", "40"),
        ("pretrain.warmup_steps", "5"),
        ("pretrain.batch_size", "4"),
        ("pretrain.checkpoint_every", "20"),
        ("adapt.shots", "5"),
        ("adapt.repeats", "2"),
        ("adapt.epochs", "12"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

#[test]
fn criterion_7_determinism() {
    let start = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut tables = Vec::new();
    for dir in [a.path(), b.path()] {
        let cfg = reduced_config(dir);
        pipeline::run_all(&cfg, &mut |_| {}).unwrap();
        tables.push(std::fs::read(Workdir::new(&cfg).report().join("report.tsv")).unwrap());
    }
    let pass = tables[0] == tables[1] && !tables[0].is_empty();
    report(
        7,
        pass,
        &format!(
            "two runs of the reduced pipeline, report.tsv {} ({:.1}s)",
            if pass { "byte-identical" } else { "differs" },
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

/// Criteria 8 and 9 share one toy run.
#[test]
fn criteria_8_and_9_toy_table() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.workdir = dir.path().to_path_buf();
    cfg.set("adapt.strategies", "clean,mt").unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.corpus.n_keywords * cfg.corpus.train_per_class, 200);
    assert_eq!(cfg.corpus.n_keywords * cfg.corpus.test_per_class, 100);
    assert_eq!((cfg.tokenizer.codebook_size, cfg.backbone.model_dim, cfg.backbone.layers), (32, 64, 2));
    assert_eq!((cfg.pretrain.steps, cfg.adapt.shots.clone(), cfg.adapt.repeats), (2000, vec![15], 5));

    let (table, reports) = pipeline::run_all(&cfg, &mut |line| {
        let _ = std::io::stderr().write_all(format!("  {line}\n").as_bytes());
    })
    .unwrap();
    let _ = std::io::stderr().write_all(table.as_bytes());
    let secs = start.elapsed().as_secs_f64();
    let checks = directional_checks(&reports, 0.10, 4).unwrap();
    for c in &checks {
        let _ = std::io::stderr().write_all(
            format!("  [{}] {} ({})\n", if c.holds { "ok" } else { "FAIL" }, c.name, c.detail).as_bytes(),
        );
    }
    let (table1, three_mix) = checks.split_at(4);
    let pass8 = table1.iter().all(|c| c.holds) && secs <= 900.0;
    report(
        8,
        pass8,
        &format!(
            "{}/4 orderings hold ({secs:.0}s)",
            table1.iter().filter(|c| c.holds).count()
        ),
    );
    let pass9 = three_mix[0].holds;
    report(9, pass9, &three_mix[0].detail);
    assert!(pass8, "{checks:?}");
    assert!(pass9, "{checks:?}");
}

#[test]
fn criterion_10_adaptation_fidelity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = reduced_config(dir.path());
    pipeline::run_synth(&cfg).unwrap();
    pipeline::run_mix_build(&cfg).unwrap();
    pipeline::run_tokenize(&cfg).unwrap();
    pipeline::run_pretrain(&cfg, Mode::MtBce).unwrap();
    let before = pipeline::load_backbone(&cfg, Mode::MtBce).unwrap();
    let before_params = flatten(&before);
    pipeline::run_adapt(&cfg, Mode::MtBce, Strategy::Mt, 5).unwrap();
    let after = pipeline::load_backbone(&cfg, Mode::MtBce).unwrap();
    let after_params = flatten(&after);
    let frozen = before.digest().unwrap() == after.digest().unwrap()
        && before_params.len() == after_params.len()
        && before_params.iter().zip(&after_params).all(|(a, b)| a.to_bits() == b.to_bits());

    // Averaging against a float64 parameterwise mean of the last ten epochs.
    let mut rng = seeded(1010, &[]);
    let emb = Array2::from_shape_fn((24, 12), |_| rng.gen_range(-1.0..1.0));
    let labels = Array2::from_shape_fn((24, 4), |(i, j)| if i % 4 == j { 1.0 } else { 0.0 });
    let mut ac = AdaptConfig::new(Strategy::Clean, 6, 3);
    ac.epochs = 15;
    ac.hidden = 16;
    let run = train_head(&emb, &labels, &ac).unwrap();
    let avg = flatten(&average_checkpoints(&run.heads).unwrap());
    let last: Vec<Vec<f64>> = run.heads[5..].iter().map(|h| flatten(h)).collect();
    let mut worst = 0.0f64;
    for (i, &a) in avg.iter().enumerate() {
        let mean = ksum(last.iter().map(|p| p[i])) / 10.0;
        worst = worst.max((a - mean).abs());
    }
    let exact_copies = average_checkpoints(&vec![run.heads[0].clone(); 10]).unwrap() == run.heads[0];
    let head_file = Workdir::new(&cfg).head(Mode::MtBce, Strategy::Mt, 5, 0);
    let loaded = KwsHead::load(&head_file).is_ok();

    let pass = frozen && worst <= 1e-12 && exact_copies && loaded;
    report(
        10,
        pass,
        &format!(
            "backbone {}, averaging max abs dev {worst:.1e}, identical heads average to themselves: {exact_copies}",
            if frozen { "bit-identical" } else { "CHANGED" }
        ),
    );
    assert!(pass);
}
