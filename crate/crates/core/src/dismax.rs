//! The DisMax head: isometric distances to learnable prototypes, enhanced
//! logits (logits+), temperature-scaled probabilities and the
//! cross-entropy term of the loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{l2_normalize, softmax_slice, Tape, Var, LOG_FLOOR, NORM_EPS};
use crate::{Error, Result, Tensor};

/// Admissible temperature range.
pub const TEMPERATURE_BOUNDS: (f64, f64) = (0.001, 100.0);
/// Standard deviation of the initial prototype entries.
pub const PROTOTYPE_INIT_STD: f64 = 0.1;
pub const DEFAULT_ENTROPIC_SCALE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisMaxHead {
    #[serde(with = "crate::codec::tensor")]
    prototypes: Tensor,
    /// Shape `[1]`; only its absolute value enters the distances.
    #[serde(with = "crate::codec::tensor")]
    distance_scale: Tensor,
    entropic_scale: f64,
    temperature: f64,
}

impl DisMaxHead {
    pub fn new(
        prototypes: Tensor,
        distance_scale: f64,
        entropic_scale: f64,
        temperature: f64,
    ) -> Result<Self> {
        let (n, _) = prototypes.dims2()?;
        if n < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {n}")));
        }
        let head = DisMaxHead {
            prototypes,
            distance_scale: Tensor::scalar(distance_scale)?,
            entropic_scale,
            temperature: 1.0,
        };
        head.check_entropic_scale()?;
        let mut head = head;
        head.set_temperature(temperature)?;
        Ok(head)
    }

    /// Gaussian prototypes (σ = 0.1), `d_s = 1`, `T = 1`.
    pub fn init(
        num_classes: usize,
        feature_dim: usize,
        entropic_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if feature_dim < 1 {
            return Err(Error::config("feature_dim must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, PROTOTYPE_INIT_STD).unwrap();
        let data = (0..num_classes * feature_dim.max(1))
            .map(|_| normal.sample(&mut rng))
            .collect();
        let prototypes = Tensor::new(vec![num_classes.max(1), feature_dim], data)?;
        DisMaxHead::new(prototypes, 1.0, entropic_scale, 1.0)
    }

    fn check_entropic_scale(&self) -> Result<()> {
        if self.entropic_scale > 0.0 && self.entropic_scale.is_finite() {
            Ok(())
        } else {
            Err(Error::config(format!(
                "entropic scale must be positive, got {}",
                self.entropic_scale
            )))
        }
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn distance_scale(&self) -> f64 {
        self.distance_scale.data()[0]
    }

    pub fn entropic_scale(&self) -> f64 {
        self.entropic_scale
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, t: f64) -> Result<()> {
        let (lo, hi) = TEMPERATURE_BOUNDS;
        if !(lo..=hi).contains(&t) {
            return Err(Error::config(format!(
                "temperature {t} outside [{lo}, {hi}]"
            )));
        }
        self.temperature = t;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub(crate) fn parameters(&self) -> Vec<&Tensor> {
        vec![&self.prototypes, &self.distance_scale]
    }

    pub(crate) fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.prototypes, &mut self.distance_scale]
    }

    fn normalized_prototypes(&self) -> Vec<Vec<f64>> {
        let f = self.feature_dim();
        (0..self.num_classes())
            .map(|j| {
                let p = &self.prototypes.data()[j * f..(j + 1) * f];
                normalize_slice(p)
            })
            .collect()
    }

    /// Isometric distances for every row of a `[B, F]` feature matrix,
    /// returned as `[B, N]`.
    pub fn distances_batch(&self, features: &Tensor) -> Result<Tensor> {
        let (b, f) = features.dims2()?;
        if f != self.feature_dim() {
            return Err(Error::shape(format!(
                "features have {f} columns, head expects {}",
                self.feature_dim()
            )));
        }
        let protos = self.normalized_prototypes();
        let scale = self.distance_scale().abs();
        let mut data = Vec::with_capacity(b * protos.len());
        for i in 0..b {
            let fhat = normalize_slice(features.row(i));
            data.extend(protos.iter().map(|p| scale * chord(&fhat, p)));
        }
        Tensor::new(vec![b, protos.len()], data)
    }
}

fn normalize_slice(v: &[f64]) -> Vec<f64> {
    let s = v.iter().map(|x| x * x).sum::<f64>().sqrt() + NORM_EPS;
    v.iter().map(|x| x / s).collect()
}

fn chord(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

/// `|d_s| · ‖f̂ − p̂_j‖` for every class `j`.
pub fn isometric_distances(features: &Tensor, head: &DisMaxHead) -> Result<Tensor> {
    if features.rank() != 1 || features.len() != head.feature_dim() {
        return Err(Error::shape(format!(
            "feature vector shape {:?}, head expects [{}]",
            features.shape(),
            head.feature_dim()
        )));
    }
    let fhat = l2_normalize(features)?;
    let scale = head.distance_scale().abs();
    let data = head
        .normalized_prototypes()
        .iter()
        .map(|p| scale * chord(fhat.data(), p))
        .collect();
    Tensor::vector(data)
}

/// Enhanced logits with the distances they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsPlus {
    pub values: Tensor,
    pub source_distances: Tensor,
}

/// `L_j = −(D_j + mean(D))`.
pub fn logits_plus(distances: &Tensor) -> Result<LogitsPlus> {
    if distances.rank() != 1 {
        return Err(Error::shape(format!(
            "distances must be rank 1, got {:?}",
            distances.shape()
        )));
    }
    let values = logits_plus_slice(distances.data());
    Ok(LogitsPlus {
        values: Tensor::vector(values)?,
        source_distances: distances.clone(),
    })
}

pub(crate) fn logits_plus_slice(d: &[f64]) -> Vec<f64> {
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.iter().map(|x| -(x + mean)).collect()
}

/// Softmax of `E_s · L / T`.
pub fn dismax_probabilities(
    logits: &LogitsPlus,
    entropic_scale: f64,
    temperature: f64,
) -> Result<Tensor> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if entropic_scale.is_nan() || entropic_scale <= 0.0 {
        return Err(Error::config(format!(
            "entropic scale must be positive, got {entropic_scale}"
        )));
    }
    Tensor::vector(softmax_slice(
        logits.values.data(),
        entropic_scale / temperature,
    ))
}

/// A loss value and whether its logarithm argument had to be clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub clamped: bool,
}

/// `−ln p_k`, where the probabilities are formed first (at `T = 1`) and the
/// logarithm is taken afterwards as a separate step.
pub fn cross_entropy_term(
    logits: &LogitsPlus,
    class: usize,
    entropic_scale: f64,
) -> Result<LossTerm> {
    let p = dismax_probabilities(logits, entropic_scale, 1.0)?;
    let pk = *p.data().get(class).ok_or_else(|| {
        Error::data(format!(
            "class {class} out of range for {} classes",
            p.len()
        ))
    })?;
    let clamped = pk < LOG_FLOOR;
    Ok(LossTerm {
        value: -pk.max(LOG_FLOOR).ln(),
        clamped,
    })
}

/// Tape variables for a head's trainable parameters.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub prototypes: Var,
    pub distance_scale: Var,
}

/// Records distances `[B, N]` and logits+ `[B, N]` for a feature batch.
pub fn record_logits_plus(tape: &mut Tape, features: Var, head: HeadVars) -> Result<(Var, Var)> {
    let fhat = tape.l2_normalize_rows(features)?;
    let phat = tape.l2_normalize_rows(head.prototypes)?;
    let chords = tape.pairwise_distance(fhat, phat)?;
    let scale = tape.abs(head.distance_scale)?;
    let distances = tape.mul(chords, scale)?;
    let mean = tape.row_mean(distances)?;
    let shifted = tape.add(distances, mean)?;
    let logits = tape.scale(shifted, -1.0)?;
    Ok((distances, logits))
}

/// Records the mean cross-entropy `−ln p_k` over a batch of logits with
/// one-hot `targets`, keeping probability and logarithm as separate nodes.
pub fn record_cross_entropy(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    entropic_scale: f64,
) -> Result<Var> {
    let (b, n) = tape.value(logits).dims2()?;
    if targets.len() != b {
        return Err(Error::shape(format!(
            "{} targets for {b} rows",
            targets.len()
        )));
    }
    let mut onehot = vec![0.0; b * n];
    for (i, &k) in targets.iter().enumerate() {
        if k >= n {
            return Err(Error::data(format!(
                "class {k} out of range for {n} classes"
            )));
        }
        onehot[i * n + k] = 1.0;
    }
    let probs = tape.softmax_rows(logits, entropic_scale)?;
    let logp = tape.log(probs)?;
    let mask = tape.constant(Tensor::new(vec![b, n], onehot)?);
    let picked = tape.mul(logp, mask)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_gradient;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn head_with(protos: Vec<f64>, n: usize, ds: f64) -> DisMaxHead {
        let f = protos.len() / n;
        DisMaxHead::new(Tensor::matrix(n, f, protos).unwrap(), ds, 10.0, 1.0).unwrap()
    }

    fn lp(values: Vec<f64>) -> LogitsPlus {
        let n = values.len();
        LogitsPlus {
            values: Tensor::vector(values).unwrap(),
            source_distances: Tensor::zeros(&[n]),
        }
    }

    #[test]
    fn distance_examples() {
        // class 0 parallel, class 1 orthogonal, class 2 antipodal
        let head = head_with(vec![2.0, 0.0, 0.0, 5.0, -1.0, 0.0], 3, 1.0);
        let d = isometric_distances(&Tensor::vector(vec![3.0, 0.0]).unwrap(), &head).unwrap();
        assert_abs_diff_eq!(d.data()[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.data()[1], 2f64.sqrt(), epsilon = 1e-12);
        let head = head_with(vec![2.0, 0.0, -1.0, 0.0], 2, -2.0);
        let d = isometric_distances(&Tensor::vector(vec![3.0, 0.0]).unwrap(), &head).unwrap();
        assert_abs_diff_eq!(d.data()[1], 4.0, epsilon = 1e-11);
        assert!(matches!(
            isometric_distances(&Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap(), &head),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn logits_plus_examples() {
        let l = logits_plus(&Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(l.values.data(), &[0.0, 0.0, 0.0]);
        let l = logits_plus(&Tensor::vector(vec![1.0, 3.0]).unwrap()).unwrap();
        assert_eq!(l.values.data(), &[-3.0, -5.0]);
        let l = logits_plus(&Tensor::vector(vec![2.0, 2.0, 2.0]).unwrap()).unwrap();
        assert_eq!(l.values.data(), &[-4.0, -4.0, -4.0]);
        assert!(matches!(
            logits_plus(&Tensor::zeros(&[1, 2])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn probability_examples() {
        let p = dismax_probabilities(&lp(vec![-1.0; 4]), 7.0, 0.3).unwrap();
        for v in p.data() {
            assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-15);
        }
        let p = dismax_probabilities(&lp(vec![-3.0, -5.0]), 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(p.data()[0], 1.0 / (1.0 + (-2f64).exp()), epsilon = 1e-15);
        let q = dismax_probabilities(&lp(vec![-1.0, -3.0]), 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(p.data()[0], q.data()[0], epsilon = 1e-15);
        assert!(matches!(
            dismax_probabilities(&lp(vec![0.0, 0.0]), 1.0, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let t = cross_entropy_term(&lp(vec![0.0, 0.0]), 1, 10.0).unwrap();
        assert_abs_diff_eq!(t.value, 2f64.ln(), epsilon = 1e-15);
        let t = cross_entropy_term(&lp(vec![-3.0, -5.0]), 0, 1.0).unwrap();
        assert_abs_diff_eq!(
            t.value,
            -(1.0 / (1.0 + (-2f64).exp())).ln(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(t.value, 0.1269, epsilon = 1e-4);
        let t = cross_entropy_term(&lp(vec![0.0, -100.0]), 0, 10.0).unwrap();
        assert!(t.value < 1e-12 && !t.clamped);
        let t = cross_entropy_term(&lp(vec![0.0, -100.0]), 1, 10.0).unwrap();
        assert!(t.clamped);
        assert_abs_diff_eq!(t.value, -LOG_FLOOR.ln(), epsilon = 1e-9);
        assert!(matches!(
            cross_entropy_term(&lp(vec![0.0, 0.0]), 2, 1.0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn head_validation() {
        assert!(DisMaxHead::new(Tensor::zeros(&[1, 3]), 1.0, 10.0, 1.0).is_err());
        assert!(DisMaxHead::new(Tensor::zeros(&[2, 3]), 1.0, 0.0, 1.0).is_err());
        assert!(DisMaxHead::new(Tensor::zeros(&[2, 3]), 1.0, 10.0, 1000.0).is_err());
        let a = DisMaxHead::init(4, 3, 10.0, 5).unwrap();
        assert_eq!(a, DisMaxHead::init(4, 3, 10.0, 5).unwrap());
        assert_ne!(a, DisMaxHead::init(4, 3, 10.0, 6).unwrap());
    }

    #[test]
    fn tape_and_direct_paths_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = DisMaxHead::init(5, 4, 10.0, 1).unwrap();
        let feats =
            Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let fv = tape.constant(feats.clone());
        let hv = HeadVars {
            prototypes: tape.param(head.prototypes().clone()),
            distance_scale: tape.param(Tensor::scalar(head.distance_scale()).unwrap()),
        };
        let (dv, lv) = record_logits_plus(&mut tape, fv, hv).unwrap();
        let batch = head.distances_batch(&feats).unwrap();
        assert_eq!(tape.value(dv), &batch);
        for i in 0..3 {
            let f = Tensor::vector(feats.row(i).to_vec()).unwrap();
            let d = isometric_distances(&f, &head).unwrap();
            assert_eq!(d.data(), batch.row(i));
            assert_eq!(
                logits_plus(&d).unwrap().values.data(),
                tape.value(lv).row(i)
            );
        }
    }

    #[test]
    fn cross_entropy_gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = if seed % 2 == 0 { 2 } else { 5 };
            let f = if seed % 3 == 0 { 3 } else { 8 };
            let protos = Tensor::matrix(
                n,
                f,
                (0..n * f).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let feats = Tensor::matrix(
                2,
                f,
                (0..2 * f).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let ds = Tensor::scalar(rng.random_range(0.5..2.0)).unwrap();
            let targets = [0, n - 1];
            let loss = |p: &Tensor, x: &Tensor, s: &Tensor| {
                let mut tape = Tape::new();
                let pv = tape.param(p.clone());
                let xv = tape.param(x.clone());
                let sv = tape.param(s.clone());
                let hv = HeadVars {
                    prototypes: pv,
                    distance_scale: sv,
                };
                let (_, l) = record_logits_plus(&mut tape, xv, hv).unwrap();
                let ce = record_cross_entropy(&mut tape, l, &targets, 2.0).unwrap();
                let g = tape.backward(ce).unwrap();
                (
                    tape.value(ce).data()[0],
                    [
                        g.get_or_zeros(pv, p),
                        g.get_or_zeros(xv, x),
                        g.get_or_zeros(sv, s),
                    ],
                )
            };
            let (_, grads) = loss(&protos, &feats, &ds);
            let fd = [
                finite_diff_gradient(|t| loss(t, &feats, &ds).0, &protos, 1e-6).unwrap(),
                finite_diff_gradient(|t| loss(&protos, t, &ds).0, &feats, 1e-6).unwrap(),
                finite_diff_gradient(|t| loss(&protos, &feats, t).0, &ds, 1e-6).unwrap(),
            ];
            for (a, n) in grads.iter().zip(&fd) {
                for (x, y) in a.data().iter().zip(n.data()) {
                    assert!((x - y).abs() / x.abs().max(1.0) < 1e-4, "{x} vs {y}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn logits_plus_shift_is_minus_mean(d in proptest::collection::vec(0.0f64..10.0, 1..10)) {
            let l = logits_plus(&Tensor::vector(d.clone()).unwrap()).unwrap();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            for (lj, dj) in l.values.data().iter().zip(&d) {
                prop_assert_eq!(*lj, -(dj + mean));
                prop_assert!(*lj <= 1e-12);
            }
        }

        #[test]
        fn probability_decreases_with_own_distance(
            d in proptest::collection::vec(0.0f64..4.0, 2..8),
            bump in 0.01f64..2.0,
        ) {
            let p = dismax_probabilities(&logits_plus(&Tensor::vector(d.clone()).unwrap()).unwrap(), 1.0, 1.0).unwrap();
            let mut d2 = d.clone();
            d2[0] += bump;
            let q = dismax_probabilities(&logits_plus(&Tensor::vector(d2).unwrap()).unwrap(), 1.0, 1.0).unwrap();
            prop_assert!(q.data()[0] < p.data()[0]);
        }
    }
}
