//! Feature extractor, classification heads and checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::calibration::CalibrationResult;
use crate::dismax::{record_logits_plus, DisMaxHead, HeadVars, TEMPERATURE_BOUNDS};
use crate::numerics::{Tape, Var};
use crate::{Error, Result, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// MLP with ReLU on hidden layers and an identity feature layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    layer_dims: Vec<usize>,
    /// `[in, out]` per layer.
    #[serde(with = "crate::codec::tensors")]
    weights: Vec<Tensor>,
    /// `[out]` per layer.
    #[serde(with = "crate::codec::tensors")]
    biases: Vec<Tensor>,
}

fn check_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::config("need at least input and feature dimensions"));
    }
    if let Some(d) = layer_dims.iter().find(|&&d| d < 1) {
        return Err(Error::config(format!("layer dimension {d} < 1")));
    }
    if *layer_dims.last().unwrap() < 2 {
        return Err(Error::config("feature dimension must be at least 2"));
    }
    Ok(())
}

/// Weights drawn from `N(0, 1/fan_in)`, zero biases.
pub fn init_extractor(layer_dims: &[usize], seed: u64) -> Result<FeatureExtractor> {
    check_dims(layer_dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for pair in layer_dims.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let std = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect();
        weights.push(Tensor::new(vec![fan_in, fan_out], data)?);
        biases.push(Tensor::zeros(&[fan_out]));
    }
    Ok(FeatureExtractor {
        layer_dims: layer_dims.to_vec(),
        weights,
        biases,
    })
}

impl FeatureExtractor {
    pub fn from_parts(
        layer_dims: Vec<usize>,
        weights: Vec<Tensor>,
        biases: Vec<Tensor>,
    ) -> Result<Self> {
        check_dims(&layer_dims)?;
        if weights.len() != layer_dims.len() - 1 || biases.len() != weights.len() {
            return Err(Error::shape("one weight and one bias per layer required"));
        }
        for (l, pair) in layer_dims.windows(2).enumerate() {
            if weights[l].shape() != [pair[0], pair[1]] || biases[l].shape() != [pair[1]] {
                return Err(Error::shape(format!(
                    "layer {l}: weight {:?} / bias {:?} incompatible with {pair:?}",
                    weights[l].shape(),
                    biases[l].shape()
                )));
            }
        }
        Ok(FeatureExtractor {
            layer_dims,
            weights,
            biases,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    /// Feature vectors for a single input (`[in]`) or a batch (`[B, in]`).
    pub fn forward_features(&self, x: &Tensor) -> Result<Tensor> {
        let single = x.rank() == 1;
        let mut h = x.as_matrix()?;
        if h.dims2()?.1 != self.input_dim() {
            return Err(Error::shape(format!(
                "input has last dimension {}, extractor expects {}",
                h.dims2()?.1,
                self.input_dim()
            )));
        }
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.matmul(w)?;
            let cols = b.len();
            let relu = l != last;
            let bias = b.data();
            let data: Vec<f64> = h
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let z = v + bias[i % cols];
                    if relu {
                        z.max(0.0)
                    } else {
                        z
                    }
                })
                .collect();
            let shape = h.shape().to_vec();
            h = Tensor::new(shape, data)?;
        }
        if single {
            h.reshape(vec![self.feature_dim()])
        } else {
            Ok(h)
        }
    }

    /// Records the forward pass for a `[B, in]` input.
    pub fn record(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let layers = self.weights.len();
        if vars.len() != 2 * layers {
            return Err(Error::shape(
                "extractor needs one weight and one bias var per layer",
            ));
        }
        let mut h = x;
        for l in 0..layers {
            h = tape.matmul(h, vars[2 * l])?;
            h = tape.add(h, vars[2 * l + 1])?;
            if l + 1 != layers {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Plain affine classifier used by the SoftMax baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    #[serde(with = "crate::codec::tensor")]
    weight: Tensor,
    #[serde(with = "crate::codec::tensor")]
    bias: Tensor,
    temperature: f64,
}

impl LinearHead {
    pub fn init(num_classes: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::config(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (feature_dim as f64).sqrt();
        let data = (0..feature_dim * num_classes)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect();
        Ok(LinearHead {
            weight: Tensor::new(vec![feature_dim, num_classes], data)?,
            bias: Tensor::zeros(&[num_classes]),
            temperature: 1.0,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

/// The classifier on top of the features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    DisMax(DisMaxHead),
    Linear(LinearHead),
}

/// Inference outputs of a head for one example, with the entropic scale
/// already removed.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// Logits+ for DisMax, affine logits for the baseline.
    pub logits: Vec<f64>,
    /// Isometric distances for DisMax; negated logits for the baseline.
    pub distances: Vec<f64>,
}

impl Head {
    pub fn num_classes(&self) -> usize {
        match self {
            Head::DisMax(h) => h.num_classes(),
            Head::Linear(h) => h.weight.shape()[1],
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Head::DisMax(h) => h.feature_dim(),
            Head::Linear(h) => h.weight.shape()[0],
        }
    }

    /// Multiplier applied to the logits during training only.
    pub fn training_scale(&self) -> f64 {
        match self {
            Head::DisMax(h) => h.entropic_scale(),
            Head::Linear(_) => 1.0,
        }
    }

    pub fn temperature(&self) -> f64 {
        match self {
            Head::DisMax(h) => h.temperature(),
            Head::Linear(h) => h.temperature,
        }
    }

    pub fn set_temperature(&mut self, t: f64) -> Result<()> {
        match self {
            Head::DisMax(h) => h.set_temperature(t),
            Head::Linear(h) => {
                let (lo, hi) = TEMPERATURE_BOUNDS;
                if !(lo..=hi).contains(&t) {
                    return Err(Error::config(format!(
                        "temperature {t} outside [{lo}, {hi}]"
                    )));
                }
                h.temperature = t;
                Ok(())
            }
        }
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        match self {
            Head::DisMax(h) => h.parameters(),
            Head::Linear(h) => vec![&h.weight, &h.bias],
        }
    }

    pub(crate) fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Head::DisMax(h) => h.parameters_mut(),
            Head::Linear(h) => vec![&mut h.weight, &mut h.bias],
        }
    }

    /// Per-row outputs for a `[B, F]` feature matrix.
    pub fn infer(&self, features: &Tensor) -> Result<Vec<HeadOutput>> {
        let (b, f) = features.dims2()?;
        if f != self.feature_dim() {
            return Err(Error::shape(format!(
                "features have {f} columns, head expects {}",
                self.feature_dim()
            )));
        }
        match self {
            Head::DisMax(h) => {
                let d = h.distances_batch(features)?;
                Ok((0..b)
                    .map(|i| HeadOutput {
                        logits: crate::dismax::logits_plus_slice(d.row(i)),
                        distances: d.row(i).to_vec(),
                    })
                    .collect())
            }
            Head::Linear(h) => {
                let z = features.matmul(&h.weight)?;
                Ok((0..b)
                    .map(|i| {
                        let logits: Vec<f64> = z
                            .row(i)
                            .iter()
                            .zip(h.bias.data())
                            .map(|(a, c)| a + c)
                            .collect();
                        let distances = logits.iter().map(|v| -v).collect();
                        HeadOutput { logits, distances }
                    })
                    .collect())
            }
        }
    }

    /// Records training logits (before the training scale) for `[B, F]`
    /// features; `vars` are this head's parameter leaves.
    pub fn record(&self, tape: &mut Tape, vars: &[Var], features: Var) -> Result<Var> {
        match self {
            Head::DisMax(_) => {
                let hv = HeadVars {
                    prototypes: vars[0],
                    distance_scale: vars[1],
                };
                Ok(record_logits_plus(tape, features, hv)?.1)
            }
            Head::Linear(_) => {
                let z = tape.matmul(features, vars[0])?;
                tape.add(z, vars[1])
            }
        }
    }
}

/// Extractor plus head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub extractor: FeatureExtractor,
    pub head: Head,
}

/// Leaf variables for every trainable tensor of a [`Network`], in
/// [`Network::parameters`] order.
#[derive(Debug, Clone)]
pub struct NetworkVars {
    pub all: Vec<Var>,
    extractor_len: usize,
}

impl Network {
    pub fn new(extractor: FeatureExtractor, head: Head) -> Result<Self> {
        if extractor.feature_dim() != head.feature_dim() {
            return Err(Error::shape(format!(
                "extractor emits {} features, head expects {}",
                extractor.feature_dim(),
                head.feature_dim()
            )));
        }
        Ok(Network { extractor, head })
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    /// Trainable tensors: per layer weight then bias, then head parameters.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for (w, b) in self.extractor.weights.iter().zip(&self.extractor.biases) {
            out.push(w);
            out.push(b);
        }
        out.extend(self.head.parameters());
        out
    }

    pub(crate) fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for (w, b) in self
            .extractor
            .weights
            .iter_mut()
            .zip(self.extractor.biases.iter_mut())
        {
            out.push(w);
            out.push(b);
        }
        out.extend(self.head.parameters_mut());
        out
    }

    /// Replaces parameter `index` (in [`Network::parameters`] order) with a
    /// tensor of the same shape.
    pub fn set_parameter(&mut self, index: usize, value: Tensor) -> Result<()> {
        let mut params = self.parameters_mut();
        let slot = params
            .get_mut(index)
            .ok_or_else(|| Error::shape(format!("no parameter {index}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {index} is {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        **slot = value;
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape) -> NetworkVars {
        let all = self
            .parameters()
            .into_iter()
            .map(|t| tape.param(t.clone()))
            .collect();
        NetworkVars {
            all,
            extractor_len: 2 * self.extractor.weights.len(),
        }
    }

    /// Records features and training logits for a `[B, in]` batch.
    pub fn record(&self, tape: &mut Tape, vars: &NetworkVars, x: Var) -> Result<(Var, Var)> {
        let (ext, head) = vars.all.split_at(vars.extractor_len);
        let features = self.extractor.record(tape, ext, x)?;
        let logits = self.head.record(tape, head, features)?;
        Ok((features, logits))
    }

    /// Inference outputs for a `[B, in]` batch.
    pub fn infer(&self, x: &Tensor) -> Result<Vec<HeadOutput>> {
        let feats = self.extractor.forward_features(&x.as_matrix()?)?;
        self.head.infer(&feats)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub loss: String,
    pub seed: u64,
    pub epochs: usize,
    pub config_hash: String,
    /// Fraction of the training data held out for calibration.
    pub val_fraction: f64,
}

/// Everything needed to score and calibrate a trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub network: Network,
    pub calibration: Option<CalibrationResult>,
    pub metadata: TrainingMetadata,
}

impl Checkpoint {
    pub fn new(network: Network, metadata: TrainingMetadata) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            network,
            calibration: None,
            metadata,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint format_version {}",
                ck.format_version
            )));
        }
        // re-validate cross-field shapes
        Network::new(ck.network.extractor.clone(), ck.network.head.clone())?;
        Ok(ck)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = init_extractor(&[4, 8, 3], 7).unwrap();
        let shapes: Vec<_> = a.weights().iter().map(|w| w.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![4, 8], vec![8, 3]]);
        assert_eq!(a, init_extractor(&[4, 8, 3], 7).unwrap());
        assert_ne!(a, init_extractor(&[4, 8, 3], 8).unwrap());
        assert!(matches!(
            init_extractor(&[4, 0, 3], 1),
            Err(Error::Config(_))
        ));
        assert!(matches!(init_extractor(&[4, 1], 1), Err(Error::Config(_))));
    }

    #[test]
    fn zero_and_identity_extractors() {
        let zero = FeatureExtractor::from_parts(
            vec![3, 4, 2],
            vec![Tensor::zeros(&[3, 4]), Tensor::zeros(&[4, 2])],
            vec![Tensor::zeros(&[4]), Tensor::zeros(&[2])],
        )
        .unwrap();
        let x = Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(zero.forward_features(&x).unwrap().data(), &[0.0, 0.0]);

        let ident = FeatureExtractor::from_parts(
            vec![3, 3],
            vec![Tensor::identity(3)],
            vec![Tensor::zeros(&[3])],
        )
        .unwrap();
        // the feature layer has no ReLU, so negatives survive
        assert_eq!(ident.forward_features(&x).unwrap().data(), x.data());
        assert!(matches!(
            ident.forward_features(&Tensor::vector(vec![1.0, 2.0]).unwrap()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn two_layer_forward_matches_straight_line_recomputation() {
        let ext = init_extractor(&[3, 4, 2], 0).unwrap();
        let x = [0.5, -1.0, 2.0];
        // independent recomputation with explicit loops
        let (w0, b0) = (ext.weights()[0].data(), ext.biases()[0].data());
        let (w1, b1) = (ext.weights()[1].data(), ext.biases()[1].data());
        let mut hidden = [0.0; 4];
        for j in 0..4 {
            let mut s = b0[j];
            for i in 0..3 {
                s += x[i] * w0[i * 4 + j];
            }
            hidden[j] = if s > 0.0 { s } else { 0.0 };
        }
        let mut out = [0.0; 2];
        for j in 0..2 {
            let mut s = b1[j];
            for i in 0..4 {
                s += hidden[i] * w1[i * 2 + j];
            }
            out[j] = s;
        }
        let got = ext
            .forward_features(&Tensor::vector(x.to_vec()).unwrap())
            .unwrap();
        for (g, e) in got.data().iter().zip(out) {
            assert_abs_diff_eq!(*g, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn tape_forward_matches_inference() {
        let ext = init_extractor(&[5, 6, 3], 2).unwrap();
        let head = Head::DisMax(DisMaxHead::init(4, 3, 10.0, 2).unwrap());
        let net = Network::new(ext, head).unwrap();
        let x = Tensor::matrix(2, 5, (0..10).map(|i| i as f64 / 7.0 - 0.5).collect()).unwrap();
        let mut tape = Tape::new();
        let vars = net.register(&mut tape);
        let xv = tape.constant(x.clone());
        let (_, logits) = net.record(&mut tape, &vars, xv).unwrap();
        let outs = net.infer(&x).unwrap();
        for (i, o) in outs.iter().enumerate() {
            for (a, b) in o.logits.iter().zip(tape.value(logits).row(i)) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let ext = init_extractor(&[5, 6, 3], 2).unwrap();
        let mut head = Head::DisMax(DisMaxHead::init(4, 3, 10.0, 2).unwrap());
        head.set_temperature(0.123456789).unwrap();
        let net = Network::new(ext, head).unwrap();
        let meta = TrainingMetadata {
            loss: "dismax".into(),
            seed: 9,
            epochs: 3,
            config_hash: "abc".into(),
            val_fraction: 0.1,
        };
        let ck = Checkpoint::new(net, meta);
        let json = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&json).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json().unwrap(), json);
        let bad = json.replace("\"format_version\": 1", "\"format_version\": 99");
        assert!(matches!(Checkpoint::from_json(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn mismatched_head_is_rejected() {
        let ext = init_extractor(&[5, 3], 2).unwrap();
        let head = Head::Linear(LinearHead::init(3, 4, 0).unwrap());
        assert!(matches!(Network::new(ext, head), Err(Error::Shape(_))));
    }
}
