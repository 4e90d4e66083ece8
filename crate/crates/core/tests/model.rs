mod common;

use rand::Rng;

use pim::model::{
    evaluate_loss, finetune, heads_for, init_classifier_model, predict, pretrain, pretrain_session,
    sample_few_shot, LossWeights, Objective, PimModel, Task, TrainConfig, TrainSession,
};
use pim::nn::Archive;
use pim::pseudo_labels::LimbPair;
use pim::timeseries::{SensorPosition, Window};
use pim::PimError;

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        batch_size: 16,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn bce(z: &[f64], t: &[f64]) -> f64 {
    z.iter()
        .zip(t)
        .map(|(&z, &t)| z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln())
        .sum::<f64>()
        / z.len() as f64
}

fn ce(z: &[f64], t: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[t]
}

#[test]
fn total_loss_is_the_weighted_family_sum() {
    let data = common::small_data();
    let heads = heads_for(&data.labeler).unwrap();
    let model = PimModel::new(&common::small_encoder(), &heads, 12, 50, 1e-3, 9).unwrap();
    let windows: Vec<&Window> = data.pretrain.iter().take(10).collect();
    let x = model.batch_input(&windows).unwrap();
    let emb = model.embed(&x, false, &mut common::rng(0)).unwrap();

    let (mut sym, mut ang, mut mot) = (Vec::new(), Vec::new(), Vec::new());
    for head in &model.heads {
        let logits = head.forward(&emb).unwrap().0;
        let mut loss = 0.0;
        for (row, w) in logits.rows().zip(&windows) {
            let p = w.pseudo.as_ref().unwrap();
            loss += match head.spec.task {
                Task::Angle => {
                    let bins = p.angle_bins[&SensorPosition::new(head.spec.key.as_str())];
                    let mut t = vec![0.0; 33];
                    for (axis, b) in bins.iter().enumerate() {
                        t[axis * 11 + b] = 1.0;
                    }
                    bce(row, &t)
                }
                Task::Speed => ce(
                    row,
                    p.speed_bins[&SensorPosition::new(head.spec.key.as_str())],
                ),
                Task::Symmetry => ce(
                    row,
                    p.symmetry_bins[&LimbPair::parse(&head.spec.key).unwrap()],
                ),
                Task::Classifier => unreachable!(),
            };
        }
        let loss = loss / windows.len() as f64;
        match head.spec.task {
            Task::Angle => ang.push(loss),
            Task::Speed => mot.push(loss),
            _ => sym.push(loss),
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ls, la, lm) = (mean(&sym), mean(&ang), mean(&mot));

    let mut r = common::rng(1);
    for _ in 0..20 {
        let w = LossWeights {
            alpha: r.random_range(0.0..3.0),
            beta: r.random_range(0.0..3.0),
            gamma: r.random_range(0.0..3.0),
        };
        let (terms, _) = model
            .loss_and_grads(
                &windows,
                &Objective::Pretrain(w),
                false,
                &mut common::rng(0),
                1.0,
                false,
            )
            .unwrap();
        let want = w.alpha * ls + w.beta * la + w.gamma * lm;
        assert!(
            (terms.total - want).abs() < 1e-12,
            "{} vs {want}",
            terms.total
        );
        assert!((terms.symmetry - ls).abs() < 1e-12);
        assert!((terms.angle - la).abs() < 1e-12);
        assert!((terms.motion - lm).abs() < 1e-12);
    }
}

#[test]
fn pretraining_ignores_activity_labels() {
    let data = common::small_data();
    let heads = heads_for(&data.labeler).unwrap();
    let train: Vec<Window> = data.pretrain[..40].to_vec();
    let val: Vec<Window> = data.pretrain[40..56].to_vec();
    let scramble = |ws: &[Window], seed: u64| -> Vec<Window> {
        let mut r = common::rng(seed);
        ws.iter()
            .map(|w| {
                let mut w = w.clone();
                w.label = if r.random_bool(0.5) {
                    Some(r.random_range(0..9))
                } else {
                    None
                };
                w
            })
            .collect()
    };
    let run = |t: &[Window], v: &[Window]| {
        let out = pretrain(
            t,
            v,
            &heads,
            &common::small_encoder(),
            &quick_cfg(2),
            LossWeights::default(),
        )
        .unwrap();
        out.best
            .to_archive(serde_json::Value::Null)
            .unwrap()
            .to_bytes()
            .unwrap()
    };
    assert_eq!(
        run(&train, &val),
        run(&scramble(&train, 1), &scramble(&val, 2))
    );
}

#[test]
fn resumed_session_matches_uninterrupted_run() {
    let data = common::small_data();
    let heads = heads_for(&data.labeler).unwrap();
    let train: Vec<Window> = data.pretrain[..48].to_vec();
    let val: Vec<Window> = data.pretrain[48..60].to_vec();
    let enc = common::small_encoder();

    let mut straight =
        pretrain_session(&train, &heads, &enc, &quick_cfg(5), LossWeights::default()).unwrap();
    straight.run(&train, &val).unwrap();

    let mut first =
        pretrain_session(&train, &heads, &enc, &quick_cfg(5), LossWeights::default()).unwrap();
    first.run_epoch(&train, &val).unwrap();
    first.run_epoch(&train, &val).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.pim");
    first.save(&path).unwrap();
    let mut resumed = TrainSession::load(&path).unwrap();
    assert_eq!(resumed.epoch, 2);
    resumed.run(&train, &val).unwrap();
    assert_eq!(resumed.epoch, 5);

    assert_eq!(resumed.history, straight.history);
    assert_eq!(resumed.model.weights_hash(), straight.model.weights_hash());
    assert_eq!(resumed.best_epoch, straight.best_epoch);
    assert_eq!(
        resumed.to_archive().unwrap().to_bytes().unwrap(),
        straight.to_archive().unwrap().to_bytes().unwrap()
    );
}

#[test]
fn zero_loss_weights_leave_parameters_unchanged() {
    let data = common::small_data();
    let heads = heads_for(&data.labeler).unwrap();
    let zero = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
    };
    let train = &data.pretrain[..32];
    let mut s =
        pretrain_session(train, &heads, &common::small_encoder(), &quick_cfg(2), zero).unwrap();
    let before = s.model.weights_hash();
    s.run(train, &[]).unwrap();
    assert_eq!(s.model.weights_hash(), before);
    assert_eq!(s.history[1].train_loss, 0.0);
}

#[test]
fn equal_seeds_give_identical_losses() {
    let data = common::small_data();
    let heads = heads_for(&data.labeler).unwrap();
    let train = &data.pretrain[..32];
    let run = || {
        let mut s = pretrain_session(
            train,
            &heads,
            &common::small_encoder(),
            &quick_cfg(3),
            LossWeights::default(),
        )
        .unwrap();
        s.run(train, &data.pretrain[32..40]).unwrap();
        s.history
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let bits = |h: &[pim::model::EpochRecord]| {
        h.iter().map(|e| e.train_loss.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn baseline_and_pretrained_differ_only_in_the_encoder() {
    let data = common::small_data();
    let heads = heads_for(&data.labeler).unwrap();
    let enc = common::small_encoder();
    let pre = pretrain(
        &data.pretrain[..32],
        &[],
        &heads,
        &enc,
        &quick_cfg(1),
        LossWeights::default(),
    )
    .unwrap()
    .best;
    let cfg = quick_cfg(1);
    let a = init_classifier_model(Some(&pre), &enc, 12, 50, 4, &cfg).unwrap();
    let b = init_classifier_model(None, &enc, 12, 50, 4, &cfg).unwrap();
    assert_ne!(a.encoder.weights_hash(), b.encoder.weights_hash());
    assert_eq!(a.encoder.weights_hash(), pre.encoder.weights_hash());
    assert_eq!(a.heads.len(), 1);
    assert_eq!(a.heads[0].named_params("h"), b.heads[0].named_params("h"));
    assert_eq!(a.adam, b.adam);
    assert!(a
        .encoder
        .params()
        .iter()
        .all(|p| p.adam_m.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn label_outside_class_range_is_rejected() {
    let data = common::small_data();
    let train: Vec<Window> = data.downstream.iter().take(8).cloned().collect();
    let max = train.iter().filter_map(|w| w.label).max().unwrap();
    assert!(matches!(
        finetune(None, &train, &[], max, &quick_cfg(1)),
        Err(PimError::IndexOutOfRange { .. })
    ));
}

#[test]
fn checkpoint_shape_mismatch_is_rejected() {
    let data = common::small_data();
    let heads = heads_for(&data.labeler).unwrap();
    let enc = common::small_encoder();
    let pre = PimModel::new(&enc, &heads, 12, 60, 1e-3, 0).unwrap();
    let train: Vec<Window> = data.downstream.iter().take(8).cloned().collect();
    assert!(matches!(
        finetune(Some(&pre), &train, &[], 4, &quick_cfg(1)),
        Err(PimError::ShapeMismatch(_))
    ));
}

#[test]
fn predicted_probabilities_are_distributions() {
    let data = common::small_data();
    let train: Vec<Window> = data.downstream.iter().step_by(5).cloned().collect();
    let mut cfg = quick_cfg(3);
    cfg.max_epochs = 3;
    let out = finetune(None, &train, &[], 4, &cfg).unwrap();
    let p = predict(&out.model, &data.downstream).unwrap();
    assert_eq!(p.class_ids.len(), data.downstream.len());
    for (row, &c) in p.probabilities.iter().zip(&p.class_ids) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v <= row[c]));
    }
}

#[test]
fn few_shot_sampling_is_balanced_and_seeded() {
    let data = common::small_data();
    let pool = &data.downstream;
    let a = sample_few_shot(pool, 3, 7).unwrap();
    let b = sample_few_shot(pool, 3, 7).unwrap();
    let c = sample_few_shot(pool, 3, 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    for class in 0..4 {
        assert_eq!(a.iter().filter(|w| w.label == Some(class)).count(), 3);
    }
    assert!(a.iter().all(|w| pool.contains(w)));
    // a class smaller than k contributes everything it has
    let tiny: Vec<Window> = pool
        .iter()
        .filter(|w| w.label != Some(0))
        .cloned()
        .chain(pool.iter().filter(|w| w.label == Some(0)).take(2).cloned())
        .collect();
    let s = sample_few_shot(&tiny, 5, 1).unwrap();
    assert_eq!(s.iter().filter(|w| w.label == Some(0)).count(), 2);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let data = common::small_data();
    let heads = heads_for(&data.labeler).unwrap();
    let mut s = pretrain_session(
        &data.pretrain[..16],
        &heads,
        &common::small_encoder(),
        &quick_cfg(1),
        LossWeights::default(),
    )
    .unwrap();
    s.run(&data.pretrain[..16], &[]).unwrap();
    let bytes = s
        .model
        .to_archive(serde_json::json!({"k": 1}))
        .unwrap()
        .to_bytes()
        .unwrap();
    let (back, extra) = PimModel::from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(extra["k"], 1);
    for (a, b) in back.params().iter().zip(s.model.params()) {
        assert_eq!(
            (&a.value, &a.adam_m, &a.adam_v),
            (&b.value, &b.adam_m, &b.adam_v)
        );
    }
    assert_eq!(back.params().len(), s.model.params().len());
    assert_eq!(back.adam, s.model.adam);
    assert_eq!(
        back.to_archive(serde_json::json!({"k": 1}))
            .unwrap()
            .to_bytes()
            .unwrap(),
        bytes
    );
}

#[test]
fn evaluation_loss_is_deterministic() {
    let data = common::small_data();
    let heads = heads_for(&data.labeler).unwrap();
    let m = PimModel::new(&common::small_encoder(), &heads, 12, 50, 1e-3, 2).unwrap();
    let obj = Objective::Pretrain(LossWeights::default());
    let a = evaluate_loss(&m, &data.pretrain, &obj).unwrap();
    let b = evaluate_loss(&m, &data.pretrain, &obj).unwrap();
    assert_eq!(a.total.to_bits(), b.total.to_bits());
}
