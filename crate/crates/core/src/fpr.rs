//! Fractional probability regularization.
//!
//! Four training images are tiled into one 2×2 mosaic; the mosaic's target
//! distribution puts a quarter of the mass on each source label, and the
//! regularizer is the KL divergence from that target to the prediction.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dismax::LossTerm;
use crate::model::{Network, NetworkVars};
use crate::numerics::{Tape, Var, LOG_FLOOR};
use crate::{Error, Exec, Result, Tensor};

/// Row and column split of an `h × w` image: top/left quadrants take the
/// floor of the half.
pub fn quadrant_split(h: usize, w: usize) -> (usize, usize) {
    (h / 2, w / 2)
}

/// Index of the source image (0 = top-left, 1 = top-right, 2 = bottom-left,
/// 3 = bottom-right) that supplies pixel `(r, c)`.
pub fn quadrant_of(r: usize, c: usize, h: usize, w: usize) -> usize {
    let (top, left) = quadrant_split(h, w);
    usize::from(r >= top) * 2 + usize::from(c >= left)
}

/// Mosaic over flat `h × w × c` row-major buffers.
pub fn compose_mosaic_slices(srcs: [&[f64]; 4], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * c];
    for r in 0..h {
        for col in 0..w {
            let q = quadrant_of(r, col, h, w);
            let at = (r * w + col) * c;
            out[at..at + c].copy_from_slice(&srcs[q][at..at + c]);
        }
    }
    out
}

/// 2×2 mosaic of four `H × W × C` images; each contributes its own
/// corresponding quadrant (cropped, not resized).
pub fn compose_mosaic(imgs: [&Tensor; 4]) -> Result<Tensor> {
    let shape = imgs[0].shape();
    let [h, w, c] = *shape else {
        return Err(Error::shape(format!(
            "mosaic images must be H×W×C, got {shape:?}"
        )));
    };
    if let Some(bad) = imgs.iter().find(|t| t.shape() != shape) {
        return Err(Error::shape(format!(
            "mosaic sources disagree: {:?} vs {:?}",
            shape,
            bad.shape()
        )));
    }
    let data = compose_mosaic_slices(imgs.map(|t| t.data()), h, w, c);
    Tensor::new(shape.to_vec(), data)
}

/// `Q[i] = (1/4) · #{m : labels[m] = i}`.
pub fn fpr_target(labels: [usize; 4], num_classes: usize) -> Result<Tensor> {
    let mut q = vec![0.0; num_classes];
    for &y in &labels {
        if y >= num_classes {
            return Err(Error::data(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        q[y] += 0.25;
    }
    Tensor::vector(q)
}

fn check_distribution(p: &Tensor, what: &str) -> Result<()> {
    if p.data().iter().any(|v| *v < 0.0) || (p.sum() - 1.0).abs() > 1e-9 {
        return Err(Error::data(format!(
            "{what} is not a probability distribution"
        )));
    }
    Ok(())
}

/// `Σ_i Q_i (ln Q_i − ln P_i)` over the support of `Q`.
pub fn kl_regularizer(predicted: &Tensor, target: &Tensor) -> Result<LossTerm> {
    if predicted.shape() != target.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            predicted.shape(),
            target.shape()
        )));
    }
    check_distribution(predicted, "prediction")?;
    check_distribution(target, "target")?;
    let mut clamped = false;
    let mut value = 0.0;
    for (p, q) in predicted.data().iter().zip(target.data()) {
        if *q > 0.0 {
            clamped |= *p < LOG_FLOOR;
            value += q * (q.ln() - p.max(LOG_FLOOR).ln());
        }
    }
    Ok(LossTerm { value, clamped })
}

/// A mosaic with its source labels and fractional target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompoundExample {
    #[serde(with = "crate::codec::tensor")]
    pub image: Tensor,
    pub source_labels: [usize; 4],
    #[serde(with = "crate::codec::tensor")]
    pub target: Tensor,
}

impl CompoundExample {
    pub fn new(sources: [&Tensor; 4], labels: [usize; 4], num_classes: usize) -> Result<Self> {
        Ok(CompoundExample {
            image: compose_mosaic(sources)?,
            source_labels: labels,
            target: fpr_target(labels, num_classes)?,
        })
    }
}

/// Compound examples built from a pool of flat images (the second half of a
/// batch). The pool is shuffled and consumed in groups of four; indices of
/// the fewer-than-four leftovers are returned separately.
pub fn build_compound_batch<R: Rng>(
    exec: Exec,
    pool: &[usize],
    images: &Tensor,
    labels: &[usize],
    image_shape: [usize; 3],
    num_classes: usize,
    rng: &mut R,
) -> Result<(Vec<CompoundExample>, Vec<usize>)> {
    let [h, w, c] = image_shape;
    if images.dims2()?.1 != h * w * c {
        return Err(Error::shape("image rows do not match the mosaic shape"));
    }
    let mut order = pool.to_vec();
    order.shuffle(rng);
    let groups = order.len() / 4;
    let leftover = order[groups * 4..].to_vec();
    let built = exec.map_range(groups, |g| {
        let idx = [
            order[4 * g],
            order[4 * g + 1],
            order[4 * g + 2],
            order[4 * g + 3],
        ];
        let data = compose_mosaic_slices(idx.map(|i| images.row(i)), h, w, c);
        let labels = idx.map(|i| labels[i]);
        Ok(CompoundExample {
            image: Tensor::new(vec![h, w, c], data)?,
            source_labels: labels,
            target: fpr_target(labels, num_classes)?,
        })
    });
    Ok((built.into_iter().collect::<Result<_>>()?, leftover))
}

/// Records `α · mean_m KL(Q_m ‖ P_m)` where `P_m` is the training-time
/// prediction (entropic scale kept, `T = 1`) on mosaic `m`.
pub fn record_fpr_loss(
    tape: &mut Tape,
    network: &Network,
    vars: &NetworkVars,
    batch: &[CompoundExample],
    alpha: f64,
) -> Result<Option<Var>> {
    if batch.is_empty() || alpha == 0.0 {
        return Ok(None);
    }
    let n = network.num_classes();
    let dim = batch[0].image.len();
    let mut xs = Vec::with_capacity(batch.len() * dim);
    let mut qs = Vec::with_capacity(batch.len() * n);
    let mut entropy_part = 0.0;
    for ex in batch {
        if ex.target.len() != n || ex.image.len() != dim {
            return Err(Error::shape("compound batch is not homogeneous"));
        }
        xs.extend_from_slice(ex.image.data());
        qs.extend_from_slice(ex.target.data());
        entropy_part += ex
            .target
            .data()
            .iter()
            .filter(|q| **q > 0.0)
            .map(|q| q * q.ln())
            .sum::<f64>();
    }
    let m = batch.len() as f64;
    let x = tape.constant(Tensor::new(vec![batch.len(), dim], xs)?);
    let (_, logits) = network.record(tape, vars, x)?;
    let probs = tape.softmax_rows(logits, network.head.training_scale())?;
    let logp = tape.log(probs)?;
    let q = tape.constant(Tensor::new(vec![batch.len(), n], qs)?);
    let cross = tape.mul(logp, q)?;
    let cross = tape.sum(cross)?;
    let neg = tape.scale(cross, -1.0)?;
    let constant = tape.constant(Tensor::scalar(entropy_part)?);
    let kl_sum = tape.add(neg, constant)?;
    Ok(Some(tape.scale(kl_sum, alpha / m)?))
}

/// Value of the α-weighted mean KL over a compound batch; zero for an empty
/// batch.
pub fn fpr_batch_loss(batch: &[CompoundExample], network: &Network, alpha: f64) -> Result<f64> {
    if alpha < 0.0 {
        return Err(Error::config(format!(
            "alpha must be nonnegative, got {alpha}"
        )));
    }
    let mut tape = Tape::new();
    let vars = network.register(&mut tape);
    Ok(
        match record_fpr_loss(&mut tape, network, &vars, batch, alpha)? {
            Some(v) => tape.value(v).data()[0],
            None => 0.0,
        },
    )
}
