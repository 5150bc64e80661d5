//! Clean-speech acoustic units: log-mel features, a k-means codebook, per-frame
//! tokens, and n-hot targets formed by the union of per-source tokens.

mod features;
pub mod kmeans;

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

pub use features::{extract_features, FeatureConfig, FeatureExtractor, FeatureMatrix};

use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// C×F
    pub centroids: Array2<f64>,
    pub feature_config: FeatureConfig,
}

impl Codebook {
    pub fn new(centroids: Array2<f64>, feature_config: FeatureConfig) -> Result<Self> {
        if centroids.nrows() < 2 {
            return Err(Error::Precondition("codebook needs at least 2 units".into()));
        }
        for i in 0..centroids.nrows() {
            for j in 0..i {
                if centroids.row(i) == centroids.row(j) {
                    return Err(Error::Integrity(format!("centroids {j} and {i} coincide")));
                }
            }
        }
        Ok(Self {
            centroids,
            feature_config,
        })
    }

    pub fn size(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// Text form: `C F`, C rows of F floats, then a `#feature_config` line.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.size(), self.dim());
        for row in self.centroids.outer_iter() {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        let _ = writeln!(out, "#feature_config {}", self.feature_config);
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Codebook> {
        let bad = |r: String| Error::format(path, r);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty codebook file".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|v| v.parse().map_err(|e| bad(format!("header: {e}"))))
            .collect::<Result<_>>()?;
        let [c, f] = dims[..] else {
            return Err(bad("header must be `C F`".into()));
        };
        let mut centroids = Array2::zeros((c, f));
        for i in 0..c {
            let line = lines.next().ok_or_else(|| bad(format!("missing centroid row {i}")))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse().map_err(|e| bad(format!("row {i}: {e}"))))
                .collect::<Result<_>>()?;
            if vals.len() != f {
                return Err(bad(format!("row {i} has {} values, expected {f}", vals.len())));
            }
            for (j, v) in vals.into_iter().enumerate() {
                centroids[[i, j]] = v;
            }
        }
        let footer = lines
            .next()
            .and_then(|l| l.strip_prefix("#feature_config "))
            .ok_or_else(|| bad("missing #feature_config footer".into()))?;
        let feature_config = footer.parse::<FeatureConfig>().map_err(bad)?;
        Codebook::new(centroids, feature_config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Codebook> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                path: path.to_path_buf(),
                what: "codebook".into(),
            },
            _ => Error::Io(e),
        })?;
        Codebook::parse(&text, path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// T×C binary matrix of active units per frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NHotTargets {
    frames: usize,
    units: usize,
    bits: Vec<bool>,
}

impl NHotTargets {
    pub fn from_rows(rows: &[Vec<usize>], units: usize) -> Result<Self> {
        let mut bits = vec![false; rows.len() * units];
        for (t, row) in rows.iter().enumerate() {
            for &c in row {
                if c >= units {
                    return Err(Error::Precondition(format!("unit {c} outside codebook of {units}")));
                }
                bits[t * units + c] = true;
            }
        }
        Ok(Self {
            frames: rows.len(),
            units,
            bits,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn row(&self, t: usize) -> &[bool] {
        &self.bits[t * self.units..(t + 1) * self.units]
    }

    pub fn get(&self, t: usize, c: usize) -> bool {
        self.bits[t * self.units + c]
    }

    pub fn set(&mut self, t: usize, c: usize, v: bool) {
        self.bits[t * self.units + c] = v;
    }

    /// Active unit indices of frame `t`, ascending.
    pub fn active(&self, t: usize) -> Vec<usize> {
        self.row(t)
            .iter()
            .enumerate()
            .filter_map(|(c, b)| b.then_some(c))
            .collect()
    }
}

/// Fits a codebook on frames pooled from clean utterances.
pub fn fit_codebook(
    features: &[FeatureMatrix],
    size: usize,
    iters: usize,
    seed: u64,
    feature_config: &FeatureConfig,
) -> Result<Codebook> {
    let points = kmeans::stack_rows(features.iter().map(|f| &f.frames))?;
    let fit = kmeans::kmeans(&points, size, iters, &mut seeded(seed, &[0x4b4d]))?;
    log::info!(
        "k-means: {} frames, C={size}, {} iterations, inertia {:.4}",
        points.nrows(),
        fit.iterations,
        fit.inertia()
    );
    Codebook::new(fit.centroids, feature_config.clone())
}

pub fn tokenize_frames(features: &FeatureMatrix, cb: &Codebook) -> Result<TokenSequence> {
    if features.dim() != cb.dim() {
        return Err(Error::Precondition(format!(
            "feature dim {} does not match codebook dim {}",
            features.dim(),
            cb.dim()
        )));
    }
    Ok(TokenSequence {
        tokens: features
            .frames
            .outer_iter()
            .map(|row| kmeans::nearest(row, &cb.centroids).0)
            .collect(),
    })
}

/// Frame-wise union of per-source token sequences.
pub fn make_nhot_targets(per_source: &[TokenSequence], units: usize) -> Result<NHotTargets> {
    let first = per_source
        .first()
        .ok_or_else(|| Error::Precondition("no source token sequences".into()))?;
    let t = first.len();
    if let Some(s) = per_source.iter().find(|s| s.len() != t) {
        return Err(Error::Precondition(format!(
            "token sequence lengths differ ({} vs {t})",
            s.len()
        )));
    }
    let mut out = NHotTargets {
        frames: t,
        units,
        bits: vec![false; t * units],
    };
    for s in per_source {
        for (f, &c) in s.tokens.iter().enumerate() {
            if c >= units {
                return Err(Error::Precondition(format!("token {c} outside codebook of {units}")));
            }
            out.set(f, c, true);
        }
    }
    Ok(out)
}

/// Single-label targets from the mixed signal itself (mixed-pattern baseline).
pub fn make_mixture_targets(mixture_features: &FeatureMatrix, cb: &Codebook) -> Result<TokenSequence> {
    tokenize_frames(mixture_features, cb)
}

/// `id<TAB>tok:run tok:run ...`
pub fn format_token_line(id: &str, seq: &TokenSequence) -> String {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &t in &seq.tokens {
        match runs.last_mut() {
            Some((tok, n)) if *tok == t => *n += 1,
            _ => runs.push((t, 1)),
        }
    }
    let body: Vec<String> = runs.iter().map(|(t, n)| format!("{t}:{n}")).collect();
    format!("{id}\t{}", body.join(" "))
}

pub fn parse_token_line(line: &str) -> std::result::Result<(String, TokenSequence), String> {
    let (id, body) = line.split_once('\t').ok_or("missing tab")?;
    let mut tokens = Vec::new();
    for run in body.split_whitespace() {
        let (t, n) = run.split_once(':').ok_or_else(|| format!("bad run `{run}`"))?;
        let t: usize = t.parse().map_err(|e| format!("{run}: {e}"))?;
        let n: usize = n.parse().map_err(|e| format!("{run}: {e}"))?;
        tokens.extend(std::iter::repeat(t).take(n));
    }
    Ok((id.to_string(), TokenSequence { tokens }))
}

/// `id<TAB>u,u u u,u ...`: frames separated by spaces, active units by commas.
pub fn format_nhot_line(id: &str, targets: &NHotTargets) -> String {
    let frames: Vec<String> = (0..targets.frames())
        .map(|t| {
            targets
                .active(t)
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect();
    format!("{id}\t{}", frames.join(" "))
}

pub fn parse_nhot_line(line: &str, units: usize) -> std::result::Result<(String, NHotTargets), String> {
    let (id, body) = line.split_once('\t').ok_or("missing tab")?;
    let rows = body
        .split(' ')
        .filter(|s| !s.is_empty())
        .map(|frame| {
            frame
                .split(',')
                .map(|u| u.parse::<usize>().map_err(|e| format!("unit `{u}`: {e}")))
                .collect::<std::result::Result<Vec<_>, _>>()
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let t = NHotTargets::from_rows(&rows, units).map_err(|e| e.to_string())?;
    Ok((id.to_string(), t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn seq(t: &[usize]) -> TokenSequence {
        TokenSequence { tokens: t.to_vec() }
    }

    fn cb(c: Array2<f64>) -> Codebook {
        Codebook::new(c, FeatureConfig::default()).unwrap()
    }

    #[test]
    fn nhot_by_hand() {
        let t = make_nhot_targets(&[seq(&[3, 3, 5]), seq(&[3, 7, 7])], 10).unwrap();
        assert_eq!(t.active(0), vec![3]);
        assert_eq!(t.active(1), vec![3, 7]);
        assert_eq!(t.active(2), vec![5, 7]);
    }

    #[test]
    fn nhot_single_source_is_one_hot() {
        let t = make_nhot_targets(&[seq(&[2, 9])], 10).unwrap();
        assert_eq!(t.active(0), vec![2]);
        assert_eq!(t.active(1), vec![9]);
        let twice = make_nhot_targets(&[seq(&[2, 9]), seq(&[2, 9])], 10).unwrap();
        assert_eq!(twice, t);
        assert!(make_nhot_targets(&[seq(&[1]), seq(&[1, 2])], 10).is_err());
    }

    #[test]
    fn tokenize_exact_and_tie() {
        let c = cb(array![[0.0, 0.0], [1.0, 0.0], [5.0, 5.0], [3.0, 0.0], [9.0, 9.0], [7.0, 1.0]]);
        let f = FeatureMatrix::new(array![[7.0, 1.0], [2.0, 0.0]], 100.0, "x").unwrap();
        assert_eq!(tokenize_frames(&f, &c).unwrap().tokens, vec![5, 1]);
        let wrong = FeatureMatrix::new(array![[1.0, 2.0, 3.0]], 100.0, "x").unwrap();
        assert!(tokenize_frames(&wrong, &c).is_err());
    }

    #[test]
    fn codebook_rejects_duplicates() {
        assert!(Codebook::new(array![[1.0], [1.0]], FeatureConfig::default()).is_err());
        assert!(Codebook::new(array![[1.0]], FeatureConfig::default()).is_err());
    }

    #[test]
    fn codebook_text_round_trip() {
        let c = cb(array![[0.1, -2.5e-7], [1.0 / 3.0, 7.0]]);
        assert_eq!(Codebook::parse(&c.to_text(), Path::new("cb")).unwrap(), c);
    }

    proptest! {
        #[test]
        fn token_and_nhot_lines_round_trip(
            a in proptest::collection::vec(0usize..6, 1..30),
            b_seed in any::<u64>(),
        ) {
            let b: Vec<usize> = a.iter().enumerate().map(|(i, x)| (x + (b_seed as usize >> (i % 7))) % 6).collect();
            let s = seq(&a);
            let (id, back) = parse_token_line(&format_token_line("u1", &s)).unwrap();
            prop_assert_eq!(id, "u1");
            prop_assert_eq!(back, s.clone());
            let n = make_nhot_targets(&[s, seq(&b)], 6).unwrap();
            let (_, nb) = parse_nhot_line(&format_nhot_line("m", &n), 6).unwrap();
            prop_assert_eq!(nb, n);
        }
    }
}
