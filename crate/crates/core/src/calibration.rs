//! Expected calibration error and post-training temperature search.

use serde::{Deserialize, Serialize};

use crate::dismax::TEMPERATURE_BOUNDS;
use crate::scoring::argmax;
use crate::{Error, Exec, Result, Tensor};

pub const DEFAULT_BINS: usize = 15;
/// Points in the coarse log-spaced grid.
pub const GRID_POINTS: usize = 200;
/// Width at which the golden-section refinement stops.
pub const GOLDEN_TOL: f64 = 1e-4;
/// Grid local minima whose brackets are refined.
pub const REFINED_BRACKETS: usize = 4;
/// Points in the scan of each refined bracket.
pub const FINE_POINTS: usize = 64;

/// Bin-weighted mean `|accuracy − confidence|` over equal-width bins of
/// `[0, 1]`. Bins are right-closed: a confidence of exactly `k/bins` falls
/// in bin `k − 1`, and 0 falls in the first bin.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if confidences.len() != correct.len() {
        return Err(Error::data(format!(
            "{} confidences vs {} correctness flags",
            confidences.len(),
            correct.len()
        )));
    }
    if confidences.is_empty() {
        return Err(Error::data("ECE of an empty set"));
    }
    if bins == 0 {
        return Err(Error::config("ECE needs at least one bin"));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::data(format!("confidence {c} outside [0, 1]")));
        }
        let b = ((c * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += usize::from(ok);
    }
    let n = confidences.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (hits[b] as f64 / m - conf_sum[b] / m).abs()
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub t_star: f64,
    pub ece_before: f64,
    pub ece_after: f64,
    pub evaluations: usize,
}

/// Maximum softmax probability of each row at temperature `t`.
pub fn confidences_at(logits: &Tensor, t: f64) -> Result<Vec<f64>> {
    let (n, c) = logits.dims2()?;
    Ok((0..n)
        .map(|i| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            1.0 / row.iter().map(|v| ((v - max) / t).exp()).sum::<f64>()
        })
        .collect())
}

/// ECE of `logits` at temperature `t`.
pub struct EceObjective<'a> {
    logits: &'a Tensor,
    correct: Vec<bool>,
    bins: usize,
}

impl<'a> EceObjective<'a> {
    pub fn new(logits: &'a Tensor, labels: &[usize], bins: usize) -> Result<Self> {
        let (n, c) = logits.dims2()?;
        if n == 0 {
            return Err(Error::data("empty validation set"));
        }
        if labels.len() != n {
            return Err(Error::data(format!("{} labels for {n} rows", labels.len())));
        }
        let correct = (0..n)
            .map(|i| argmax(&logits.data()[i * c..(i + 1) * c]) == labels[i])
            .collect();
        Ok(EceObjective {
            logits,
            correct,
            bins,
        })
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        ece(&confidences_at(self.logits, t)?, &self.correct, self.bins)
    }

    pub fn accuracy(&self) -> f64 {
        self.correct.iter().filter(|c| **c).count() as f64 / self.correct.len() as f64
    }
}

/// `count` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| {
            if i == 0 {
                lo
            } else if i + 1 == count {
                hi
            } else {
                (a + (b - a) * i as f64 / (count - 1) as f64).exp()
            }
        })
        .collect()
}

/// Indices of the lowest grid local minima, at most [`REFINED_BRACKETS`],
/// in grid order. Plateaus count once, at their first point.
fn refinement_brackets(values: &[f64]) -> Vec<usize> {
    let n = values.len();
    let mut minima: Vec<usize> = (0..n)
        .filter(|&i| {
            let left = i == 0 || values[i - 1] > values[i];
            let right = i + 1 == n || values[i + 1] >= values[i];
            left && right
        })
        .collect();
    minima.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    minima.truncate(REFINED_BRACKETS);
    minima.sort_unstable();
    minima
}

/// Golden-section search of `[a, b]` down to [`GOLDEN_TOL`]; every
/// evaluation is reported to `seen`. Returns the number of evaluations.
fn golden_section(
    objective: &EceObjective<'_>,
    mut a: f64,
    mut b: f64,
    mut seen: impl FnMut(f64, f64),
) -> Result<usize> {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = objective.eval(c)?;
    let mut fd = objective.eval(d)?;
    seen(c, fc);
    seen(d, fd);
    let mut count = 2;
    while b - a > GOLDEN_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = objective.eval(c)?;
            seen(c, fc);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = objective.eval(d)?;
            seen(d, fd);
        }
        count += 1;
    }
    Ok(count)
}

/// Minimizes ECE over `T ∈ bounds`.
///
/// The search evaluates `T = 1` (the uncalibrated reference), then a
/// log-spaced grid. The brackets around the lowest grid local minima are
/// each scanned with a finer grid and then narrowed by golden-section
/// search. The first evaluation achieving the minimum wins.
pub fn calibrate_temperature(
    exec: Exec,
    logits: &Tensor,
    labels: &[usize],
    bins: usize,
    bounds: (f64, f64),
) -> Result<CalibrationResult> {
    let (lo, hi) = bounds;
    if !(lo > 0.0 && lo < hi && hi.is_finite()) {
        return Err(Error::config(format!(
            "invalid temperature bounds ({lo}, {hi})"
        )));
    }
    let objective = EceObjective::new(logits, labels, bins)?;

    let ece_before = objective.eval(1.0f64.clamp(lo, hi))?;
    let mut best = (1.0f64.clamp(lo, hi), ece_before);
    let mut evaluations = 1;
    let consider = |t: f64, e: f64, best: &mut (f64, f64)| {
        if e < best.1 {
            *best = (t, e);
        }
    };

    let grid = log_grid(lo, hi, GRID_POINTS);
    let values = exec
        .map_slice(&grid, |&t| objective.eval(t))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    evaluations += grid.len();
    for (&t, &e) in grid.iter().zip(&values) {
        consider(t, e, &mut best);
    }

    for i in refinement_brackets(&values) {
        let (a, b) = (grid[i.saturating_sub(1)], grid[(i + 1).min(grid.len() - 1)]);
        // the objective is piecewise constant with narrow dips, so scan the
        // bracket before narrowing it
        let fine = log_grid(a, b, FINE_POINTS);
        let fine_values = exec
            .map_slice(&fine, |&t| objective.eval(t))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        evaluations += fine.len();
        let mut j = 0;
        for (k, (&t, &e)) in fine.iter().zip(&fine_values).enumerate() {
            consider(t, e, &mut best);
            if e < fine_values[j] {
                j = k;
            }
        }
        let (a, b) = (fine[j.saturating_sub(1)], fine[(j + 1).min(fine.len() - 1)]);
        evaluations += golden_section(&objective, a, b, |t, e| consider(t, e, &mut best))?;
    }

    Ok(CalibrationResult {
        t_star: best.0,
        ece_before,
        ece_after: best.1,
        evaluations,
    })
}

/// [`calibrate_temperature`] with the default bins and bounds.
pub fn calibrate_default(logits: &Tensor, labels: &[usize]) -> Result<CalibrationResult> {
    calibrate_temperature(
        Exec::default(),
        logits,
        labels,
        DEFAULT_BINS,
        TEMPERATURE_BOUNDS,
    )
}
