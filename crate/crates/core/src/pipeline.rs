//! Checkpoint-level operations: held-out calibration and OOD evaluation.

use crate::calibration::{
    calibrate_temperature, confidences_at, ece, CalibrationResult, DEFAULT_BINS,
};
use crate::data::Dataset;
use crate::dismax::TEMPERATURE_BOUNDS;
use crate::evaluation::{detection_report, DetectionReport};
use crate::model::{Checkpoint, Network};
use crate::scoring::{argmax, score_dataset, ScoreDump, ScoreKind, ID_SPLIT};
use crate::train::{train, TrainConfig, TrainOutcome};
use crate::{Error, Exec, Result, Tensor};

/// Splits a labelled training set into the part used for fitting and the
/// held-out calibration part, as recorded in the checkpoint metadata.
pub fn holdout_split(data: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    data.split_train_val(val_fraction, seed)
}

/// Holds out the validation split, then trains on the rest.
pub fn train_with_holdout(
    exec: Exec,
    config: &TrainConfig,
    data: &Dataset,
) -> Result<TrainOutcome> {
    let (fit, _) = holdout_split(data, config.val_fraction, config.seed)?;
    train(exec, config, &fit)
}

/// Validation split of `data` for a trained checkpoint.
pub fn validation_split(checkpoint: &Checkpoint, data: &Dataset) -> Result<Dataset> {
    let m = &checkpoint.metadata;
    Ok(holdout_split(data, m.val_fraction, m.seed)?.1)
}

/// `[n, classes]` matrix of logits (logits+ for DisMax heads).
pub fn logits_matrix(exec: Exec, network: &Network, data: &Dataset) -> Result<Tensor> {
    let rows = score_dataset(exec, network, data, ID_SPLIT)?;
    let n = network.num_classes();
    let flat: Vec<f64> = rows
        .iter()
        .flat_map(|r| r.logits_plus.iter().copied())
        .collect();
    Tensor::new(vec![rows.len(), n], flat)
}

/// Fits the temperature on `val` and stores it in the checkpoint. Running it
/// again on the same data gives the same result.
pub fn calibrate(
    exec: Exec,
    checkpoint: &mut Checkpoint,
    val: &Dataset,
) -> Result<CalibrationResult> {
    let labels = val
        .labels()
        .ok_or_else(|| Error::data(format!("validation set '{}' has no labels", val.name())))?;
    if val.is_empty() {
        return Err(Error::data("empty validation split"));
    }
    let logits = logits_matrix(exec, &checkpoint.network, val)?;
    let result = calibrate_temperature(exec, &logits, labels, DEFAULT_BINS, TEMPERATURE_BOUNDS)?;
    checkpoint.network.head.set_temperature(result.t_star)?;
    checkpoint.calibration = Some(result);
    Ok(result)
}

/// ECE on a labelled set at the network's current temperature.
pub fn ece_at_temperature(exec: Exec, network: &Network, data: &Dataset) -> Result<f64> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::data("ECE needs labels"))?;
    let logits = logits_matrix(exec, network, data)?;
    let conf = confidences_at(&logits, network.head.temperature())?;
    let (_, c) = logits.dims2()?;
    let correct: Vec<bool> = (0..labels.len())
        .map(|i| argmax(&logits.data()[i * c..(i + 1) * c]) == labels[i])
        .collect();
    ece(&conf, &correct, DEFAULT_BINS)
}

/// Scores the ID test set and every OOD set, and reports each requested
/// score kind. With `with_ece` the checkpoint must be calibrated.
pub fn evaluate(
    exec: Exec,
    checkpoint: &Checkpoint,
    id_test: &Dataset,
    ood_sets: &[Dataset],
    kinds: &[ScoreKind],
    with_ece: bool,
) -> Result<(Vec<DetectionReport>, ScoreDump)> {
    if with_ece && checkpoint.calibration.is_none() {
        return Err(Error::MissingCalibration(
            "checkpoint has no fitted temperature; run `calibrate` first".into(),
        ));
    }
    if id_test.labels().is_none() {
        return Err(Error::data(format!(
            "ID test set '{}' has no labels",
            id_test.name()
        )));
    }
    if id_test.num_classes() != Some(checkpoint.network.num_classes()) {
        return Err(Error::data(format!(
            "ID test set has {:?} classes, checkpoint has {}",
            id_test.num_classes(),
            checkpoint.network.num_classes()
        )));
    }
    if ood_sets.is_empty() {
        return Err(Error::config("at least one OOD set is required"));
    }
    let network = &checkpoint.network;
    let mut dump = ScoreDump {
        rows: score_dataset(exec, network, id_test, ID_SPLIT)?,
    };
    for (i, ood) in ood_sets.iter().enumerate() {
        let name = if ood.name() == ID_SPLIT {
            format!("ood{i}")
        } else {
            ood.name().to_string()
        };
        if ood.dim() != id_test.dim() {
            return Err(Error::data(format!(
                "OOD set '{name}' has dimension {} not {}",
                ood.dim(),
                id_test.dim()
            )));
        }
        dump.rows.extend(score_dataset(exec, network, ood, &name)?);
    }
    let ece = if with_ece {
        Some(ece_at_temperature(exec, network, id_test)?)
    } else {
        None
    };
    let method = checkpoint.metadata.loss.clone();
    let reports = kinds
        .iter()
        .map(|&k| detection_report(exec, &method, &dump, k, ece))
        .collect::<Result<Vec<_>>>()?;
    Ok((reports, dump))
}

/// Metrics recomputed from saved score dumps, one `(method, dump)` per run.
/// ECE is not recoverable from a dump and is left empty.
pub fn report(
    exec: Exec,
    dumps: &[(String, ScoreDump)],
    kinds: &[ScoreKind],
) -> Result<Vec<DetectionReport>> {
    let mut out = Vec::new();
    for (method, dump) in dumps {
        for &k in kinds {
            out.push(detection_report(exec, method, dump, k, None)?);
        }
    }
    Ok(out)
}
