//! Out-of-distribution scores (higher means more in-distribution) and the
//! per-example score dump.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dismax::LogitsPlus;
use crate::model::Network;
use crate::numerics::softmax_slice;
use crate::{Error, Exec, Result, Tensor};

/// `−Σ P_i ln P_i` with `0 · ln 0 = 0`.
pub fn entropy(p: &Tensor) -> Result<f64> {
    entropy_slice(p.data())
}

fn entropy_slice(p: &[f64]) -> Result<f64> {
    if p.iter().any(|v| *v < 0.0) {
        return Err(Error::data("negative probability"));
    }
    if (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::data("probabilities do not sum to 1"));
    }
    Ok(-p
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>())
}

/// Maximum probability score.
pub fn score_mps(p: &Tensor) -> Result<f64> {
    entropy_slice(p.data())?;
    Ok(p.data().iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Minimum distance score, negated: `−min_j D_j`.
pub fn score_mds(distances: &Tensor) -> Result<f64> {
    mds_slice(distances.data())
}

fn mds_slice(d: &[f64]) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::shape("no distances"));
    }
    Ok(-d.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Max-mean logit entropy score: `max_j L_j + mean_j L_j − H(P)`.
pub fn score_mmles(logits: &LogitsPlus, p: &Tensor) -> Result<f64> {
    if logits.values.len() != p.len() {
        return Err(Error::shape(format!(
            "{} logits vs {} probabilities",
            logits.values.len(),
            p.len()
        )));
    }
    mmles_slice(logits.values.data(), p.data())
}

fn mmles_slice(l: &[f64], p: &[f64]) -> Result<f64> {
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = l.iter().sum::<f64>() / l.len() as f64;
    Ok(max + mean - entropy_slice(p)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Mps,
    Mds,
    Mmles,
    /// Negative entropy.
    Entropy,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 4] = [
        ScoreKind::Mps,
        ScoreKind::Mds,
        ScoreKind::Mmles,
        ScoreKind::Entropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Mps => "MPS",
            ScoreKind::Mds => "MDS",
            ScoreKind::Mmles => "MMLES",
            ScoreKind::Entropy => "NegEntropy",
        }
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mps" => Ok(ScoreKind::Mps),
            "mds" => Ok(ScoreKind::Mds),
            "mmles" => Ok(ScoreKind::Mmles),
            "entropy" | "negentropy" => Ok(ScoreKind::Entropy),
            other => Err(Error::config(format!("unknown score kind '{other}'"))),
        }
    }
}

pub const ID_SPLIT: &str = "id";

/// One scored example.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    /// `id` or the name of an OOD set.
    pub split: String,
    pub true_class: Option<usize>,
    pub pred_class: usize,
    pub logits_plus: Vec<f64>,
    /// Not stored in the CSV form.
    pub distances: Option<Vec<f64>>,
    /// Probabilities at the scoring temperature (`T = 1`, no entropic scale).
    pub probabilities: Vec<f64>,
    pub score_mps: f64,
    pub score_mds: f64,
    pub score_mmles: f64,
    pub entropy: f64,
}

impl ScoreRow {
    fn from_outputs(
        split: &str,
        true_class: Option<usize>,
        logits: Vec<f64>,
        distances: Vec<f64>,
    ) -> Result<Self> {
        let probabilities = softmax_slice(&logits, 1.0);
        let entropy = entropy_slice(&probabilities)?;
        let score_mps = probabilities
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let pred_class = argmax(&logits);
        let score_mmles = mmles_slice(&logits, &probabilities)?;
        let score_mds = mds_slice(&distances)?;
        let row = ScoreRow {
            split: split.to_string(),
            true_class,
            pred_class,
            logits_plus: logits,
            distances: Some(distances),
            probabilities,
            score_mps,
            score_mds,
            score_mmles,
            entropy,
        };
        if ![row.score_mps, row.score_mds, row.score_mmles, row.entropy]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::numeric("non-finite score"));
        }
        Ok(row)
    }

    pub fn score(&self, kind: ScoreKind) -> f64 {
        match kind {
            ScoreKind::Mps => self.score_mps,
            ScoreKind::Mds => self.score_mds,
            ScoreKind::Mmles => self.score_mmles,
            ScoreKind::Entropy => -self.entropy,
        }
    }
}

/// Index of the first maximal entry.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Scored examples in a stable order: the ID split first, then each OOD set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreDump {
    pub rows: Vec<ScoreRow>,
}

/// Rows per inference chunk.
const SCORE_CHUNK: usize = 256;

/// Scores every example of `data` with the entropic scale removed.
pub fn score_dataset(
    exec: Exec,
    network: &Network,
    data: &Dataset,
    split: &str,
) -> Result<Vec<ScoreRow>> {
    let n = data.len();
    let chunks = exec.map_chunks(n, SCORE_CHUNK, |start, end| -> Result<Vec<ScoreRow>> {
        let idx: Vec<usize> = (start..end).collect();
        let x = data.examples().select_rows(&idx)?;
        let outs = network.infer(&x)?;
        outs.into_iter()
            .zip(start..end)
            .map(|(o, i)| {
                ScoreRow::from_outputs(split, data.labels().map(|l| l[i]), o.logits, o.distances)
            })
            .collect()
    });
    let mut rows = Vec::with_capacity(n);
    for c in chunks {
        rows.extend(c?);
    }
    Ok(rows)
}

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

impl ScoreDump {
    pub fn id_rows(&self) -> impl Iterator<Item = &ScoreRow> {
        self.rows.iter().filter(|r| r.split == ID_SPLIT)
    }

    /// OOD split names in first-appearance order.
    pub fn ood_splits(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.rows {
            if r.split != ID_SPLIT && !names.contains(&r.split) {
                names.push(r.split.clone());
            }
        }
        names
    }

    pub fn scores(&self, split: &str, kind: ScoreKind) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.score(kind))
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.rows.first().map_or(0, |r| r.logits_plus.len())
    }

    /// CSV with header
    /// `split,true_class,pred_class,score_mps,score_mds,score_mmles,entropy,logit_plus_0,...`;
    /// floats carry 17 significant digits.
    pub fn to_csv(&self) -> String {
        let n = self.num_classes();
        let mut out =
            String::from("split,true_class,pred_class,score_mps,score_mds,score_mmles,entropy");
        for j in 0..n {
            write!(out, ",logit_plus_{j}").unwrap();
        }
        out.push('\n');
        for r in &self.rows {
            let truth = r.true_class.map(|c| c.to_string()).unwrap_or_default();
            write!(
                out,
                "{},{},{},{},{},{},{}",
                r.split,
                truth,
                r.pred_class,
                fmt_float(r.score_mps),
                fmt_float(r.score_mds),
                fmt_float(r.score_mmles),
                fmt_float(r.entropy)
            )
            .unwrap();
            for v in &r.logits_plus {
                write!(out, ",{}", fmt_float(*v)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::format("line 1: empty score dump"))?;
        let cols: Vec<&str> = header.split(',').collect();
        const FIXED: [&str; 7] = [
            "split",
            "true_class",
            "pred_class",
            "score_mps",
            "score_mds",
            "score_mmles",
            "entropy",
        ];
        if cols.len() < FIXED.len() + 2 || cols[..FIXED.len()] != FIXED {
            return Err(Error::format("line 1: unexpected score dump header"));
        }
        for (j, c) in cols[FIXED.len()..].iter().enumerate() {
            if *c != format!("logit_plus_{j}") {
                return Err(Error::format(format!("line 1: unexpected column '{c}'")));
            }
        }
        let n = cols.len() - FIXED.len();
        let mut rows = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::format(format!("line {lineno}: {what}"));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols.len() {
                return Err(bad(&format!(
                    "expected {} fields, found {}",
                    cols.len(),
                    f.len()
                )));
            }
            let float = |s: &str, name: &str| -> Result<f64> {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad(&format!("invalid {name} '{s}'")))
            };
            let true_class = if f[1].is_empty() {
                None
            } else {
                Some(f[1].parse().map_err(|_| bad("invalid true_class"))?)
            };
            let pred_class: usize = f[2].parse().map_err(|_| bad("invalid pred_class"))?;
            if pred_class >= n || true_class.is_some_and(|c| c >= n) {
                return Err(bad("class index out of range"));
            }
            let logits_plus = f[7..]
                .iter()
                .map(|s| float(s, "logit"))
                .collect::<Result<Vec<_>>>()?;
            rows.push(ScoreRow {
                split: f[0].to_string(),
                true_class,
                pred_class,
                probabilities: softmax_slice(&logits_plus, 1.0),
                logits_plus,
                distances: None,
                score_mps: float(f[3], "score_mps")?,
                score_mds: float(f[4], "score_mds")?,
                score_mmles: float(f[5], "score_mmles")?,
                entropy: float(f[6], "entropy")?,
            });
        }
        Ok(ScoreDump { rows })
    }
}
