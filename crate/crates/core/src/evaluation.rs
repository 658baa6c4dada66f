//! Detection and classification metrics. In-distribution is the positive
//! class throughout; scores are oriented higher-is-ID.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::scoring::{ScoreDump, ScoreKind};
use crate::{Error, Exec, Result};

fn check_sides(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::data("both ID and OOD scores must be nonempty"));
    }
    if id.iter().chain(ood).any(|v| !v.is_finite()) {
        return Err(Error::data("scores must be finite"));
    }
    Ok(())
}

/// Scores labelled ID (`true`) / OOD, sorted by descending score.
fn labelled_desc(id: &[f64], ood: &[f64]) -> Vec<(f64, bool)> {
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|s| (*s, true))
        .chain(ood.iter().map(|s| (*s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    all
}

/// Probability that a random ID score exceeds a random OOD score, ties
/// counting one half (Mann-Whitney U with mid-ranks).
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_sides(id, ood)?;
    let all = labelled_desc(id, ood);
    // walk tie groups from the top; each ID item beats every OOD item below
    // its group and ties half of those inside it
    let mut ood_above = 0usize;
    let mut wins = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut gi, mut go) = (0usize, 0usize);
        while j < all.len() && all[j].0.total_cmp(&all[i].0) == Ordering::Equal {
            if all[j].1 {
                gi += 1
            } else {
                go += 1
            }
            j += 1;
        }
        let ood_below = ood.len() - ood_above - go;
        wins += gi as f64 * (ood_below as f64 + 0.5 * go as f64);
        ood_above += go;
        i = j;
    }
    Ok(wins / (id.len() as f64 * ood.len() as f64))
}

/// Area under the precision-recall curve with ID as positive: a
/// descending sweep over distinct thresholds summing
/// `(recall_k − recall_{k−1}) · precision_k`.
pub fn aupr(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_sides(id, ood)?;
    let all = labelled_desc(id, ood);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0.total_cmp(&all[i].0) == Ordering::Equal {
            if all[j].1 {
                tp += 1
            } else {
                fp += 1
            }
            j += 1;
        }
        let recall = tp as f64 / id.len() as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(area)
}

/// Threshold kept by [`tnr_at_tpr95`]: the largest `t` with at least 95 %
/// of ID scores `≥ t`.
pub fn tpr95_threshold(id: &[f64]) -> Result<f64> {
    if id.is_empty() {
        return Err(Error::data("ID scores must be nonempty"));
    }
    let mut sorted = id.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    let k = (95 * n).div_ceil(100).max(1);
    Ok(sorted[k - 1])
}

/// Fraction of OOD scores below the 95 %-TPR threshold.
pub fn tnr_at_tpr95(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_sides(id, ood)?;
    let t = tpr95_threshold(id)?;
    Ok(ood.iter().filter(|s| **s < t).count() as f64 / ood.len() as f64)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::data(format!(
            "{} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::data("accuracy of an empty set"));
    }
    Ok(pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

/// ROC points `(FPR, TPR)` over distinct thresholds, starting at (0, 0).
pub fn roc_points(id: &[f64], ood: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_sides(id, ood)?;
    let all = labelled_desc(id, ood);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut pts = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0.total_cmp(&all[i].0) == Ordering::Equal {
            if all[j].1 {
                tp += 1
            } else {
                fp += 1
            }
            j += 1;
        }
        pts.push((fp as f64 / ood.len() as f64, tp as f64 / id.len() as f64));
        i = j;
    }
    Ok(pts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodMetrics {
    pub name: String,
    pub count: usize,
    pub auroc: f64,
    pub aupr: f64,
    pub tnr_at_tpr95: f64,
}

/// Metrics for one method and score kind across OOD sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub method: String,
    pub score: ScoreKind,
    pub id_count: usize,
    pub acc: f64,
    pub ece: Option<f64>,
    pub ood: Vec<OodMetrics>,
}

/// Detection metrics of `dump` for one score kind; OOD sets are processed
/// with `exec`.
pub fn detection_report(
    exec: Exec,
    method: &str,
    dump: &ScoreDump,
    kind: ScoreKind,
    ece: Option<f64>,
) -> Result<DetectionReport> {
    let (pred, truth): (Vec<usize>, Vec<usize>) = dump
        .id_rows()
        .map(|r| {
            r.true_class
                .map(|t| (r.pred_class, t))
                .ok_or_else(|| Error::data("ID row without a true class"))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let acc = accuracy(&pred, &truth)?;
    let id = dump.scores(crate::scoring::ID_SPLIT, kind);
    let names = dump.ood_splits();
    let ood = exec
        .map_slice(&names, |name| -> Result<OodMetrics> {
            let o = dump.scores(name, kind);
            Ok(OodMetrics {
                name: name.clone(),
                count: o.len(),
                auroc: auroc(&id, &o)?,
                aupr: aupr(&id, &o)?,
                tnr_at_tpr95: tnr_at_tpr95(&id, &o)?,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(DetectionReport {
        method: method.to_string(),
        score: kind,
        id_count: id.len(),
        acc,
        ece,
        ood,
    })
}

/// Aligned text table: one row per report, per OOD set the columns
/// TNR@TPR95 / AUROC / AUPR in percent, then ACC and ECE.
pub fn render_table(reports: &[DetectionReport]) -> String {
    let mut sets: Vec<String> = Vec::new();
    for r in reports {
        for o in &r.ood {
            if !sets.contains(&o.name) {
                sets.push(o.name.clone());
            }
        }
    }
    let label = |r: &DetectionReport| format!("{} ({})", r.method, r.score.name());
    let width = reports
        .iter()
        .map(|r| label(r).len())
        .max()
        .unwrap_or(0)
        .max("method (score)".len());
    let cell = 7;
    let group = 3 * cell + 2;
    let mut out = String::new();
    write!(out, "{:<width$}", "").unwrap();
    for s in &sets {
        write!(out, " | {s:^group$}").unwrap();
    }
    writeln!(out, " | {:>cell$} {:>cell$}", "", "").unwrap();
    write!(out, "{:<width$}", "method (score)").unwrap();
    for _ in &sets {
        write!(
            out,
            " | {:>cell$} {:>cell$} {:>cell$}",
            "TNR@95", "AUROC", "AUPR"
        )
        .unwrap();
    }
    writeln!(out, " | {:>cell$} {:>cell$}", "ACC", "ECE").unwrap();
    let rule = out.lines().last().map_or(0, str::len);
    writeln!(out, "{}", "-".repeat(rule)).unwrap();
    for r in reports {
        write!(out, "{:<width$}", label(r)).unwrap();
        for s in &sets {
            match r.ood.iter().find(|o| &o.name == s) {
                Some(o) => write!(
                    out,
                    " | {:>cell$.2} {:>cell$.2} {:>cell$.2}",
                    100.0 * o.tnr_at_tpr95,
                    100.0 * o.auroc,
                    100.0 * o.aupr
                )
                .unwrap(),
                None => write!(out, " | {:>cell$} {:>cell$} {:>cell$}", "-", "-", "-").unwrap(),
            }
        }
        let ece = r
            .ece
            .map_or("-".to_string(), |e| format!("{:.2}", 100.0 * e));
        writeln!(out, " | {:>cell$.2} {:>cell$}", 100.0 * r.acc, ece).unwrap();
    }
    out
}
