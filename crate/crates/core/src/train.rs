//! Minibatch SGD with Nesterov momentum for the SoftMax baseline, DisMax,
//! and DisMax with fractional probability regularization.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::dismax::{record_cross_entropy, DisMaxHead, DEFAULT_ENTROPIC_SCALE};
use crate::fpr::{build_compound_batch, record_fpr_loss};
use crate::model::{init_extractor, Checkpoint, Head, LinearHead, Network, TrainingMetadata};
use crate::numerics::Tape;
use crate::scoring::argmax;
use crate::{Error, Exec, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SoftmaxBaseline,
    Dismax,
    DismaxFpr,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::SoftmaxBaseline => "softmax-baseline",
            LossKind::Dismax => "dismax",
            LossKind::DismaxFpr => "dismax-fpr",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax-baseline" | "softmax" => Ok(LossKind::SoftmaxBaseline),
            "dismax" => Ok(LossKind::Dismax),
            "dismax-fpr" => Ok(LossKind::DismaxFpr),
            other => Err(Error::config(format!("unknown loss '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// Epochs at whose start the learning rate is divided by
    /// `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub entropic_scale: f64,
    pub alpha: f64,
    pub seed: u64,
    /// Hidden layer widths; the last entry is the feature dimension.
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    /// Share of the training data held out for calibration.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Dismax,
            epochs: 50,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-4,
            lr_decay_epochs: vec![25, 40],
            lr_decay_factor: 10.0,
            entropic_scale: DEFAULT_ENTROPIC_SCALE,
            alpha: 1.0,
            seed: 0,
            hidden_dims: vec![256, 128],
            num_classes: 10,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    /// The long schedule: 300 epochs, decay at 150 / 200 / 250.
    pub fn full_schedule() -> Self {
        TrainConfig {
            epochs: 300,
            lr_decay_epochs: vec![150, 200, 250],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("lr_decay_factor", self.lr_decay_factor),
            ("entropic_scale", self.entropic_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("alpha", self.alpha),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        if self.momentum >= 1.0 {
            return Err(Error::config("momentum must be below 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.loss == LossKind::DismaxFpr && !self.batch_size.is_multiple_of(2) {
            return Err(Error::config("dismax-fpr needs an even batch_size"));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::config("hidden_dims must be nonempty and positive"));
        }
        if *self.hidden_dims.last().unwrap() < 2 {
            return Err(Error::config("feature dimension must be at least 2"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if !(0.0 < self.val_fraction && self.val_fraction < 1.0) {
            return Err(Error::config("val_fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr / self.lr_decay_factor.powi(decays as i32)
    }

    pub fn init_network(&self, input_dim: usize) -> Result<Network> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden_dims);
        let extractor = init_extractor(&dims, self.seed)?;
        let feature_dim = extractor.feature_dim();
        let head_seed = self.seed.wrapping_add(1);
        let head = match self.loss {
            LossKind::SoftmaxBaseline => {
                Head::Linear(LinearHead::init(self.num_classes, feature_dim, head_seed)?)
            }
            LossKind::Dismax | LossKind::DismaxFpr => Head::DisMax(DisMaxHead::init(
                self.num_classes,
                feature_dim,
                self.entropic_scale,
                head_seed,
            )?),
        };
        Network::new(extractor, head)
    }
}

/// SGD with (optionally Nesterov) momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    nesterov: bool,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, nesterov: bool, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            nesterov,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// One update: `g ← ∇ + λp`, `v ← μv + g`, `p ← p − lr·(g + μv)` with
    /// Nesterov, else `p ← p − lr·v`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("one gradient per parameter required"));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            for ((w, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let g = gi + self.weight_decay * *w;
                *vi = self.momentum * *vi + g;
                let step = if self.nesterov {
                    g + self.momentum * *vi
                } else {
                    *vi
                };
                *w -= lr * step;
            }
            if !p.all_finite() {
                return Err(Error::numeric(
                    "parameter update produced non-finite values",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Accuracy over the plain (non-mosaic) examples seen this epoch.
    pub acc: f64,
    pub log_clamps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
}

fn check_dataset(config: &TrainConfig, data: &Dataset) -> Result<()> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::config(format!("training set '{}' has no labels", data.name())))?;
    if data.num_classes() != Some(config.num_classes) {
        return Err(Error::config(format!(
            "training set has {:?} classes, config expects {}",
            data.num_classes(),
            config.num_classes
        )));
    }
    if labels.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if config.loss == LossKind::DismaxFpr {
        match data.image_shape() {
            Some([h, w, _]) if h >= 2 && w >= 2 => {}
            _ => {
                return Err(Error::config(
                    "dismax-fpr needs image-shaped examples at least 2×2",
                ))
            }
        }
    }
    Ok(())
}

/// Trains on `data` (already stripped of its validation split). The result
/// is a deterministic function of `config` and `data`.
pub fn train(exec: Exec, config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset(config, data)?;
    let labels = data.labels().unwrap();
    let mut network = config.init_network(data.dim())?;
    let mut sgd = Sgd::new(config.momentum, config.nesterov, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let scale = network.head.training_scale();

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches, mut correct, mut seen, mut clamps) =
            (0.0, 0usize, 0usize, 0usize, 0usize);
        for batch in order.chunks(config.batch_size) {
            let (plain, compounds) = if config.loss == LossKind::DismaxFpr {
                let (first, second) = batch.split_at(batch.len() / 2);
                let (compounds, leftover) = build_compound_batch(
                    exec,
                    second,
                    data.examples(),
                    labels,
                    data.image_shape().unwrap(),
                    config.num_classes,
                    &mut rng,
                )?;
                let mut plain = first.to_vec();
                plain.extend(leftover);
                (plain, compounds)
            } else {
                (batch.to_vec(), Vec::new())
            };

            let mut tape = Tape::new();
            let vars = network.register(&mut tape);
            let mut terms = Vec::new();
            if !plain.is_empty() {
                let x = tape.constant(data.examples().select_rows(&plain)?);
                let (_, logits) = network.record(&mut tape, &vars, x)?;
                let targets: Vec<usize> = plain.iter().map(|&i| labels[i]).collect();
                terms.push(record_cross_entropy(&mut tape, logits, &targets, scale)?);
                let lv = tape.value(logits);
                for (r, &t) in targets.iter().enumerate() {
                    correct += usize::from(argmax(lv.row(r)) == t);
                }
                seen += targets.len();
            }
            if let Some(kl) = record_fpr_loss(&mut tape, &network, &vars, &compounds, config.alpha)?
            {
                terms.push(kl);
            }
            let Some(mut loss) = terms.first().copied() else {
                continue;
            };
            for t in &terms[1..] {
                loss = tape.add(loss, *t)?;
            }
            let grads = tape.backward(loss)?;
            let grad_tensors: Vec<Tensor> = network
                .parameters()
                .iter()
                .zip(&vars.all)
                .map(|(p, v)| grads.get_or_zeros(*v, p))
                .collect();
            sgd.step(&mut network.parameters_mut(), &grad_tensors, lr)?;
            loss_sum += tape.value(loss).data()[0];
            batches += 1;
            clamps += tape.log_clamps();
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            lr,
            loss: loss_sum / batches.max(1) as f64,
            acc: correct as f64 / seen.max(1) as f64,
            log_clamps: clamps,
        };
        log::info!(
            "epoch {:>3}/{}  lr {:.4}  loss {:.6}  acc {:.4}",
            entry.epoch,
            config.epochs,
            entry.lr,
            entry.loss,
            entry.acc
        );
        if clamps > 0 {
            log::warn!(
                "epoch {}: {clamps} probabilities clamped before log",
                entry.epoch
            );
        }
        history.push(entry);
    }

    let metadata = TrainingMetadata {
        loss: config.loss.name().to_string(),
        seed: config.seed,
        epochs: config.epochs,
        config_hash: config.hash(),
        val_fraction: config.val_fraction,
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(network, metadata),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, synth_glyphs, GlyphFamily};

    fn small(loss: LossKind) -> TrainConfig {
        TrainConfig {
            loss,
            epochs: 3,
            batch_size: 16,
            hidden_dims: vec![16, 8],
            num_classes: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let odd = TrainConfig {
            loss: LossKind::DismaxFpr,
            batch_size: 63,
            ..TrainConfig::default()
        };
        assert!(matches!(odd.validate(), Err(Error::Config(_))));
        let neg = TrainConfig {
            lr: -1.0,
            ..TrainConfig::default()
        };
        assert!(neg.validate().is_err());
        assert_eq!(TrainConfig::default().lr_at(24), 0.1);
        assert!((TrainConfig::default().lr_at(25) - 0.01).abs() < 1e-15);
        assert!((TrainConfig::default().lr_at(45) - 0.001).abs() < 1e-15);
        let full = TrainConfig::full_schedule();
        assert_eq!(
            (full.epochs, full.lr_decay_epochs.as_slice()),
            (300, &[150, 200, 250][..])
        );
    }

    #[test]
    fn nesterov_step_matches_hand_computation() {
        let mut sgd = Sgd::new(0.9, true, 0.1);
        let mut p = Tensor::vector(vec![1.0]).unwrap();
        let g = Tensor::vector(vec![0.5]).unwrap();
        sgd.step(&mut [&mut p], std::slice::from_ref(&g), 0.1)
            .unwrap();
        // g' = 0.5 + 0.1 = 0.6, v = 0.6, step = 0.6 + 0.54 = 1.14
        assert!((p.data()[0] - (1.0 - 0.114)).abs() < 1e-15);
        sgd.step(&mut [&mut p], &[g], 0.1).unwrap();
        let w = 1.0 - 0.114;
        let g2 = 0.5 + 0.1 * w;
        let v2 = 0.9 * 0.6 + g2;
        assert!((p.data()[0] - (w - 0.1 * (g2 + 0.9 * v2))).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = synth_blobs(3, 4, 10, 0.5, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..small(LossKind::Dismax)
        };
        let out = train(Exec::Sequential, &cfg, &data).unwrap();
        assert_eq!(out.checkpoint.network, cfg.init_network(4).unwrap());
        assert!(out.history.is_empty());
    }

    #[test]
    fn class_mismatch_fails_before_training() {
        let data = synth_blobs(4, 4, 10, 0.5, 1).unwrap();
        let e = train(Exec::Sequential, &small(LossKind::Dismax), &data).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let e = train(
            Exec::Sequential,
            &small(LossKind::DismaxFpr),
            &synth_blobs(3, 4, 10, 0.5, 1).unwrap(),
        )
        .unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn training_is_deterministic_for_every_loss() {
        let glyphs = synth_glyphs(Exec::Sequential, GlyphFamily::Shapes, 96, 3).unwrap();
        for loss in [
            LossKind::SoftmaxBaseline,
            LossKind::Dismax,
            LossKind::DismaxFpr,
        ] {
            let cfg = TrainConfig {
                num_classes: 8,
                epochs: 2,
                ..small(loss)
            };
            let runs: Vec<String> = Exec::available()
                .iter()
                .chain(Exec::available())
                .map(|&e| {
                    train(e, &cfg, &glyphs)
                        .unwrap()
                        .checkpoint
                        .to_json()
                        .unwrap()
                })
                .collect();
            assert!(
                runs.iter().all(|r| r == &runs[0]),
                "{loss:?} not deterministic"
            );
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let data = synth_blobs(3, 4, 20, 0.5, 2).unwrap();
        for loss in [LossKind::SoftmaxBaseline, LossKind::Dismax] {
            let cfg = small(loss);
            let net = cfg.init_network(4).unwrap();
            let mut tape = Tape::new();
            let vars = net.register(&mut tape);
            let x = tape.constant(data.examples().clone());
            let (_, logits) = net.record(&mut tape, &vars, x).unwrap();
            let ce = record_cross_entropy(&mut tape, logits, data.labels().unwrap(), 10.0).unwrap();
            let g = tape.backward(ce).unwrap();
            for (p, v) in net.parameters().iter().zip(&vars.all) {
                let gv = g.get_or_zeros(*v, p);
                assert!(
                    gv.data().iter().any(|x| *x != 0.0),
                    "{loss:?}: dead parameter {:?}",
                    p.shape()
                );
            }
        }
    }

    #[test]
    fn dismax_separates_blobs() {
        let data = synth_blobs(2, 2, 100, 0.3, 5).unwrap();
        let cfg = TrainConfig {
            loss: LossKind::Dismax,
            epochs: 50,
            batch_size: 32,
            hidden_dims: vec![16, 8],
            num_classes: 2,
            ..TrainConfig::default()
        };
        let out = train(Exec::default(), &cfg, &data).unwrap();
        assert!(
            out.history.last().unwrap().acc >= 0.99,
            "{:?}",
            out.history.last()
        );
    }
}
