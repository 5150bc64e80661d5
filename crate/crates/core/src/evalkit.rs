//! Presence-detection EER, cardinality-matched Top-k accuracy, repeat
//! aggregation, and report rendering.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub utterance_id: String,
    pub keyword: usize,
    pub score: f64,
    pub present: bool,
}

/// Builds one trial per (utterance, keyword) pair.
pub fn trials_from_scores(ids: &[String], scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<Vec<Trial>> {
    if ids.len() != scores.len() || scores.len() != labels.len() {
        return Err(Error::Precondition("ids, scores and labels differ in length".into()));
    }
    let mut out = Vec::new();
    for ((id, s), y) in ids.iter().zip(scores).zip(labels) {
        if s.len() != y.len() {
            return Err(Error::Precondition(format!("{id}: score and label widths differ")));
        }
        for (k, (&score, &present)) in s.iter().zip(y).enumerate() {
            out.push(Trial {
                utterance_id: id.clone(),
                keyword: k,
                score,
                present,
            });
        }
    }
    Ok(out)
}

/// Pooled EER over all trials. Thresholds are the distinct scores; a trial is
/// accepted when `score >= θ`.
pub fn compute_eer(trials: &[Trial]) -> Result<f64> {
    if let Some(t) = trials.iter().find(|t| !t.score.is_finite()) {
        return Err(Error::Precondition(format!("non-finite score for {}", t.utterance_id)));
    }
    let mut present: Vec<f64> = trials.iter().filter(|t| t.present).map(|t| t.score).collect();
    let mut absent: Vec<f64> = trials.iter().filter(|t| !t.present).map(|t| t.score).collect();
    if present.is_empty() || absent.is_empty() {
        return Err(Error::UndefinedMetric(
            "EER needs at least one present and one absent trial".into(),
        ));
    }
    present.sort_by(f64::total_cmp);
    absent.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = present.iter().chain(&absent).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let (np, na) = (present.len() as f64, absent.len() as f64);
    let (mut ip, mut ia) = (0usize, 0usize);
    let mut best: Option<(f64, f64)> = None;
    for &theta in &thresholds {
        // Counts of scores strictly below θ.
        while ip < present.len() && present[ip] < theta {
            ip += 1;
        }
        while ia < absent.len() && absent[ia] < theta {
            ia += 1;
        }
        let frr = ip as f64 / np;
        let far = (absent.len() - ia) as f64 / na;
        let gap = (far - frr).abs();
        if best.map_or(true, |(g, _)| gap < g) {
            best = Some((gap, (far + frr) / 2.0));
        }
    }
    Ok(best.expect("at least one threshold").1)
}

/// Indices of the `k` largest scores; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Fraction of utterances whose top-`k` keyword set equals the true set.
pub fn top_k_accuracy(scores: &[Vec<f64>], truth: &[Vec<bool>], k: usize) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::Precondition("scores and labels differ in length".into()));
    }
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("no utterances".into()));
    }
    let mut correct = 0usize;
    for (i, (s, y)) in scores.iter().zip(truth).enumerate() {
        let want: Vec<usize> = y.iter().enumerate().filter_map(|(c, &b)| b.then_some(c)).collect();
        if want.len() != k || s.len() != y.len() {
            return Err(Error::Precondition(format!(
                "utterance {i}: label has {} keywords, k = {k}",
                want.len()
            )));
        }
        if top_k(s, k) == want {
            correct += 1;
        }
    }
    Ok(correct as f64 / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation.
    pub dispersion: f64,
    /// Set when fewer than two values were available.
    pub warning: bool,
}

pub fn aggregate_runs(values: &[f64]) -> Aggregate {
    let n = values.len();
    if n == 0 {
        return Aggregate {
            mean: f64::NAN,
            dispersion: 0.0,
            warning: true,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        log::warn!("dispersion over a single repeat is reported as 0");
        return Aggregate {
            mean,
            dispersion: 0.0,
            warning: true,
        };
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Aggregate {
        mean,
        dispersion: var.sqrt(),
        warning: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Clean,
    Mix2,
    Mix3,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Clean, Condition::Mix2, Condition::Mix3];

    pub fn cardinality(&self) -> usize {
        match self {
            Condition::Clean => 1,
            Condition::Mix2 => 2,
            Condition::Mix3 => 3,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Mix2 => "2mix",
            Condition::Mix3 => "3mix",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown condition `{s}` (expected clean, 2mix or 3mix)"))
    }
}

/// Accuracy and EER of a single adaptation repeat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepeatMetrics {
    pub accuracy: f64,
    pub eer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub condition: Condition,
    pub pretrain: String,
    pub strategy: String,
    pub shots: usize,
    pub repeats: Vec<RepeatMetrics>,
}

impl EvalReport {
    pub fn k(&self) -> usize {
        self.condition.cardinality()
    }

    pub fn accuracy(&self) -> Aggregate {
        aggregate_runs(&self.repeats.iter().map(|r| r.accuracy).collect::<Vec<_>>())
    }

    pub fn eer(&self) -> Aggregate {
        aggregate_runs(&self.repeats.iter().map(|r| r.eer).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Tsv,
    TextTable,
}

pub const TSV_HEADER: &str = "condition\tpretrain\tstrategy\tshots\tacc_mean\tacc_disp\teer_mean\teer_disp";
pub const DISPERSION_LINE: &str = "#dispersion: sample_std";

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn sorted(reports: &[EvalReport]) -> Vec<&EvalReport> {
    let mut r: Vec<&EvalReport> = reports.iter().collect();
    r.sort_by(|a, b| {
        (a.condition, &a.pretrain, &a.strategy, std::cmp::Reverse(a.shots)).cmp(&(
            b.condition,
            &b.pretrain,
            &b.strategy,
            std::cmp::Reverse(b.shots),
        ))
    });
    r
}

pub fn emit_report(reports: &[EvalReport], format: ReportFormat) -> String {
    let reports = sorted(reports);
    let mut out = String::new();
    match format {
        ReportFormat::Tsv => {
            out.push_str(DISPERSION_LINE);
            out.push('\n');
            out.push_str(TSV_HEADER);
            out.push('\n');
            for r in reports {
                let (a, e) = (r.accuracy(), r.eer());
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    r.condition,
                    r.pretrain,
                    r.strategy,
                    r.shots,
                    pct(a.mean),
                    pct(a.dispersion),
                    pct(e.mean),
                    pct(e.dispersion)
                );
            }
        }
        ReportFormat::TextTable => {
            let mut shots: Vec<usize> = reports.iter().map(|r| r.shots).collect();
            shots.sort_unstable_by(|a, b| b.cmp(a));
            shots.dedup();
            for cond in Condition::ALL {
                let block: Vec<&&EvalReport> = reports.iter().filter(|r| r.condition == cond).collect();
                if block.is_empty() {
                    continue;
                }
                let _ = writeln!(out, "[{cond}] Top-{} ACC / EER (%, mean ± sample std)", cond.cardinality());
                let _ = write!(out, "{:<12}{:<10}", "pretrain", "strategy");
                for s in &shots {
                    let _ = write!(out, "{:>18}{:>18}", format!("{s}-shot ACC"), format!("{s}-shot EER"));
                }
                out.push('\n');
                let mut rows: Vec<(&str, &str)> =
                    block.iter().map(|r| (r.pretrain.as_str(), r.strategy.as_str())).collect();
                rows.dedup();
                for (p, st) in rows {
                    let _ = write!(out, "{p:<12}{st:<10}");
                    for s in &shots {
                        match block.iter().find(|r| r.pretrain == p && r.strategy == st && r.shots == *s) {
                            Some(r) => {
                                let (a, e) = (r.accuracy(), r.eer());
                                let _ = write!(
                                    out,
                                    "{:>18}{:>18}",
                                    format!("{}±{}", pct(a.mean), pct(a.dispersion)),
                                    format!("{}±{}", pct(e.mean), pct(e.dispersion))
                                );
                            }
                            None => {
                                let _ = write!(out, "{:>18}{:>18}", "-", "-");
                            }
                        }
                    }
                    out.push('\n');
                }
                out.push('\n');
            }
        }
    }
    out
}

/// A parsed row of a report TSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub condition: Condition,
    pub pretrain: String,
    pub strategy: String,
    pub shots: usize,
    pub acc_mean: f64,
    pub acc_disp: f64,
    pub eer_mean: f64,
    pub eer_disp: f64,
}

pub fn parse_report_tsv(text: &str) -> Result<Vec<ReportRow>> {
    let bad = |line: usize, reason: String| Error::MalformedManifest { line, reason };
    let mut rows = Vec::new();
    let mut seen_header = false;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !seen_header {
            if line != TSV_HEADER {
                return Err(bad(n, "unexpected report header".into()));
            }
            seen_header = true;
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(bad(n, format!("expected 8 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(n, e.to_string()));
        rows.push(ReportRow {
            condition: f[0].parse().map_err(|e| bad(n, e))?,
            pretrain: f[1].to_string(),
            strategy: f[2].to_string(),
            shots: f[3].parse().map_err(|e: std::num::ParseIntError| bad(n, e.to_string()))?,
            acc_mean: num(f[4])?,
            acc_disp: num(f[5])?,
            eer_mean: num(f[6])?,
            eer_disp: num(f[7])?,
        });
    }
    Ok(rows)
}
