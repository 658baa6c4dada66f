use dismax_core::data::{
    load_idx, synth_blobs, synth_glyphs, synth_ood, write_idx, Dataset, GlyphFamily,
};
use dismax_core::evaluation::render_table;
use dismax_core::model::Checkpoint;
use dismax_core::pipeline::{calibrate, evaluate, train_with_holdout, validation_split};
use dismax_core::scoring::{ScoreDump, ScoreKind};
use dismax_core::train::{LossKind, TrainConfig};
use dismax_core::Exec;

fn blob_config(loss: LossKind) -> TrainConfig {
    TrainConfig {
        loss,
        epochs: 10,
        lr: 0.01,
        batch_size: 32,
        hidden_dims: vec![32, 16],
        num_classes: 4,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn calibrated(loss: LossKind, data: &Dataset) -> Checkpoint {
    let cfg = blob_config(loss);
    let mut ck = train_with_holdout(Exec::default(), &cfg, data)
        .unwrap()
        .checkpoint;
    let val = validation_split(&ck, data).unwrap();
    calibrate(Exec::default(), &mut ck, &val).unwrap();
    ck
}

#[test]
fn far_ood_is_separated_and_identical_ood_is_chance() {
    let train = synth_blobs(4, 32, 150, 0.7, 21).unwrap();
    let (id_test, same) = synth_blobs(4, 32, 1000, 0.7, 21)
        .unwrap()
        .split_train_val(0.5, 77)
        .unwrap();
    let far = synth_ood(32, 500, 50.0, 5).unwrap().with_name("far");
    for loss in [LossKind::SoftmaxBaseline, LossKind::Dismax] {
        let ck = calibrated(loss, &train);
        let (reports, dump) = evaluate(
            Exec::default(),
            &ck,
            &id_test,
            &[far.clone(), same.clone().with_name("same")],
            &ScoreKind::ALL,
            true,
        )
        .unwrap();
        assert_eq!(dump.rows.len(), id_test.len() + far.len() + same.len());
        for r in &reports {
            // the linear head saturates far from the data, so only DisMax is held to this
            if loss == LossKind::Dismax {
                assert!(r.ood[0].auroc >= 0.99, "{:?}: {}", r.score, r.ood[0].auroc);
            }
            assert!(
                (r.ood[1].auroc - 0.5).abs() <= 0.05,
                "{loss:?} {:?}: {}",
                r.score,
                r.ood[1].auroc
            );
        }
    }
}

#[test]
fn ood_equal_to_id_gives_exactly_half() {
    let train = synth_blobs(4, 8, 60, 0.7, 2).unwrap();
    let ck = calibrated(LossKind::Dismax, &train);
    let test = synth_blobs(4, 8, 20, 0.7, 9).unwrap();
    let (reports, _) = evaluate(
        Exec::default(),
        &ck,
        &test,
        &[test.clone().with_name("copy")],
        &ScoreKind::ALL,
        true,
    )
    .unwrap();
    for r in reports {
        assert_eq!(r.ood[0].auroc, 0.5);
    }
}

#[test]
fn calibration_preserves_accuracy() {
    let train = synth_blobs(4, 8, 80, 1.5, 4).unwrap();
    let test = synth_blobs(4, 8, 40, 1.5, 5).unwrap();
    let ood = synth_ood(8, 50, 10.0, 1).unwrap();
    let cfg = blob_config(LossKind::Dismax);
    let mut ck = train_with_holdout(Exec::default(), &cfg, &train)
        .unwrap()
        .checkpoint;
    let (before, _) = evaluate(
        Exec::default(),
        &ck,
        &test,
        std::slice::from_ref(&ood),
        &[ScoreKind::Mps],
        false,
    )
    .unwrap();
    let val = validation_split(&ck, &train).unwrap();
    let result = calibrate(Exec::default(), &mut ck, &val).unwrap();
    assert!(result.ece_after <= result.ece_before);
    let (after, _) =
        evaluate(Exec::default(), &ck, &test, &[ood], &[ScoreKind::Mps], true).unwrap();
    assert_eq!(before[0].acc, after[0].acc);
    assert_eq!(before[0].ood, after[0].ood);
}

#[test]
fn execution_modes_agree_bitwise() {
    let train = synth_blobs(4, 8, 50, 0.7, 8).unwrap();
    let ood = synth_ood(8, 40, 5.0, 8).unwrap();
    let outputs: Vec<(String, String)> = Exec::available()
        .iter()
        .map(|&exec| {
            let cfg = blob_config(LossKind::Dismax);
            let mut ck = train_with_holdout(exec, &cfg, &train).unwrap().checkpoint;
            let val = validation_split(&ck, &train).unwrap();
            calibrate(exec, &mut ck, &val).unwrap();
            let (_, dump) = evaluate(
                exec,
                &ck,
                &train,
                std::slice::from_ref(&ood),
                &ScoreKind::ALL,
                true,
            )
            .unwrap();
            (ck.to_json().unwrap(), dump.to_csv())
        })
        .collect();
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn checkpoint_and_dump_survive_serialization() {
    let train = synth_blobs(4, 8, 40, 0.7, 1).unwrap();
    let ood = synth_ood(8, 30, 6.0, 2).unwrap();
    let ck = calibrated(LossKind::SoftmaxBaseline, &train);
    let reloaded = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
    assert_eq!(ck, reloaded);
    let (r1, d1) = evaluate(
        Exec::default(),
        &ck,
        &train,
        std::slice::from_ref(&ood),
        &ScoreKind::ALL,
        true,
    )
    .unwrap();
    let (r2, d2) = evaluate(
        Exec::default(),
        &reloaded,
        &train,
        &[ood],
        &ScoreKind::ALL,
        true,
    )
    .unwrap();
    assert_eq!(r1, r2);
    assert_eq!(d1.to_csv(), d2.to_csv());
    let parsed = ScoreDump::from_csv(&d1.to_csv()).unwrap();
    assert_eq!(parsed.to_csv(), d1.to_csv());
    assert_eq!(render_table(&r1), render_table(&r2));
}

#[test]
fn fpr_training_runs_on_idx_images() {
    let dir = tempfile::tempdir().unwrap();
    let glyphs = synth_glyphs(Exec::default(), GlyphFamily::Digits, 200, 4).unwrap();
    let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    write_idx(&glyphs, &img, Some(&lab)).unwrap();
    let loaded = load_idx(&img, Some(&lab)).unwrap();
    assert_eq!(loaded.examples(), glyphs.examples());
    let cfg = TrainConfig {
        loss: LossKind::DismaxFpr,
        epochs: 2,
        batch_size: 32,
        hidden_dims: vec![32, 16],
        num_classes: 10,
        ..TrainConfig::default()
    };
    let out = train_with_holdout(Exec::default(), &cfg, &loaded).unwrap();
    assert_eq!(out.history.len(), 2);
    assert!(out.history.iter().all(|h| h.loss.is_finite()));
}
