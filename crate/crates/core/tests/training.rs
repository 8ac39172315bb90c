mod common;

use common::*;
use mlb_seg_core::data::{generate, Dataset, GenConfig, Sample, ShapeFamily, Split};
use mlb_seg_core::meta::{baseline_train, init_labels, mlb_step, WeightMapPair, Weighting};
use mlb_seg_core::metrics::dice;
use mlb_seg_core::model::{model_forward, pseudo_label, ModelParams};
use mlb_seg_core::optim::Sgd;
use mlb_seg_core::teacher::TeacherState;
use mlb_seg_core::train::{evaluate, Trainer};
use mlb_seg_core::{HyperConfig, LabelMask, Tensor};
use rand::Rng;

fn one_shape(h: usize, w: usize, seed: u64) -> Dataset {
    let cfg = GenConfig {
        height: h,
        width: w,
        count: 1,
        family: ShapeFamily::Ellipse,
        noise: 0.05,
    };
    generate(&cfg, Split::Clean, &mut rng(seed)).unwrap()
}

#[test]
fn baseline_overfits_a_single_sample() {
    let data = one_shape(16, 16, 3);
    let cfg = HyperConfig {
        baseline_lr: 0.05,
        epochs_baseline: 300,
        batch_baseline: 1,
        width: 4,
        ..Default::default()
    };
    let theta = baseline_train(&data, &cfg, &mut rng(1)).unwrap();
    let s = &data.samples[0];
    let pred = pseudo_label(&model_forward(&theta, &s.image).unwrap()).unwrap();
    let d = dice(&pred, s.mask.as_ref().unwrap()).unwrap();
    assert!(d >= 0.95, "dice {d}");

    // An unlabeled copy gets the clean mask back as its initialized label.
    let unlabeled = Dataset {
        split: Split::Unlabeled,
        samples: vec![Sample {
            image: s.image.clone(),
            mask: None,
        }],
    };
    let init = init_labels(&theta, &unlabeled).unwrap();
    assert_eq!(init.samples[0].mask.as_ref().unwrap(), &pred);
}

#[test]
fn baseline_training_lowers_the_loss_and_is_deterministic() {
    let data = generate(
        &GenConfig {
            height: 16,
            width: 16,
            count: 6,
            family: ShapeFamily::Mixed,
            noise: 0.05,
        },
        Split::Clean,
        &mut rng(4),
    )
    .unwrap();
    let cfg = HyperConfig {
        baseline_lr: 0.05,
        epochs_baseline: 20,
        width: 2,
        ..Default::default()
    };
    let a = baseline_train(&data, &cfg, &mut rng(9)).unwrap();
    let b = baseline_train(&data, &cfg, &mut rng(9)).unwrap();
    assert_eq!(a, b);
    let init = baseline_train(
        &data,
        &HyperConfig {
            epochs_baseline: 0,
            ..cfg.clone()
        },
        &mut rng(9),
    )
    .unwrap();
    assert!(mean_ce_loop(&a, &data.samples) < mean_ce_loop(&init, &data.samples));
    let empty = Dataset {
        split: Split::Clean,
        samples: vec![],
    };
    assert!(baseline_train(&empty, &cfg, &mut rng(9)).is_err());
}

#[test]
fn init_labels_preserve_order_and_count() {
    let mut r = rng(5);
    let theta = random_params(2, &mut r);
    let unlabeled = Dataset {
        split: Split::Unlabeled,
        samples: (0..5)
            .map(|_| Sample {
                image: random_image(8, 8, &mut r),
                mask: None,
            })
            .collect(),
    };
    let init = init_labels(&theta, &unlabeled).unwrap();
    assert_eq!(init.split, Split::Initialized);
    for (a, b) in init.samples.iter().zip(&unlabeled.samples) {
        assert_eq!(a.image, b.image);
        assert_eq!(
            a.mask.as_ref().unwrap(),
            &pseudo_label(&model_forward(&theta, &b.image).unwrap()).unwrap()
        );
    }
}

/// Weighted bootstrapping loss by loops, with pseudo labels held fixed.
fn weighted_loop(theta: &ModelParams, batch: &[Sample], labels_p: &[LabelMask], weights: &[WeightMapPair]) -> f64 {
    let mut total = 0.0;
    for ((s, yp), w) in batch.iter().zip(labels_p).zip(weights) {
        let z = model_forward(theta, &s.image).unwrap();
        let ln = ce_loop(&z, s.mask.as_ref().unwrap());
        let lp = ce_loop(&z, yp);
        for i in 0..ln.len() {
            total += w.n.data()[i] * ln[i] + w.p.data()[i] * lp[i];
        }
    }
    total
}

#[test]
fn planted_weight_step_matches_loop_oracle() {
    let mut r = rng(6);
    let theta = random_params(1, &mut r);
    let batch = random_samples(2, 6, 6, &mut r);
    let planted: Vec<WeightMapPair> = (0..2)
        .map(|_| WeightMapPair {
            n: Tensor::from_fn(&[6, 6], |_| r.random::<f64>() / 36.0),
            p: Tensor::from_fn(&[6, 6], |_| r.random::<f64>() / 36.0),
        })
        .collect();
    let cfg = HyperConfig {
        lambda_aug: 0.0,
        lambda_st: 0.0,
        ..Default::default()
    };
    let labels_p: Vec<LabelMask> = batch
        .iter()
        .map(|s| pseudo_label(&model_forward(&theta, &s.image).unwrap()).unwrap())
        .collect();

    let mut student = theta.clone();
    let mut opt = Sgd::new(&student, cfg.alpha, cfg.momentum, cfg.weight_decay);
    let mut teacher = TeacherState::new(theta.clone(), cfg.ema_decay).unwrap();
    let report = mlb_step(
        &mut student,
        &mut opt,
        Some(&mut teacher),
        &batch,
        &batch,
        &cfg,
        &Weighting::Planted(planted.clone()),
        &mut r,
    )
    .unwrap();
    assert_eq!(report.labels_p, labels_p);
    assert!((report.bootstrap_loss - weighted_loop(&theta, &batch, &labels_p, &planted)).abs() <= 1e-12);

    // theta - alpha * (grad + wd * theta), the first momentum step
    let g = fd_grad(&theta, 1e-5, |t| weighted_loop(t, &batch, &labels_p, &planted));
    let want: Vec<f64> = theta
        .flatten()
        .iter()
        .zip(&g)
        .map(|(t, g)| t - cfg.alpha * (g + cfg.weight_decay * t))
        .collect();
    for (a, b) in student.flatten().iter().zip(&want) {
        assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
    }
    // teacher moved after the update
    let d = cfg.ema_decay;
    for ((t, s), q) in teacher
        .params
        .flatten()
        .iter()
        .zip(student.flatten())
        .zip(theta.flatten())
    {
        assert!((t - (d * q + (1.0 - d) * s)).abs() <= 1e-14);
    }
}

fn small_task(seed: u64) -> (Dataset, Dataset, Dataset) {
    let mut r = rng(seed);
    let g = |count| GenConfig {
        height: 16,
        width: 16,
        count,
        family: ShapeFamily::Mixed,
        noise: 0.1,
    };
    let meta = generate(&g(3), Split::Meta, &mut r).unwrap();
    let noisy = generate(&g(6), Split::Initialized, &mut r).unwrap();
    let eval = generate(&g(4), Split::Eval, &mut r).unwrap();
    (meta, noisy, eval)
}

#[test]
fn training_steps_are_deterministic_per_seed() {
    let (meta, noisy, _) = small_task(7);
    let cfg = HyperConfig {
        width: 2,
        ple: mlb_seg_core::ple::parse_specs("zoom-in:1,flip-h").unwrap(),
        ..Default::default()
    };
    let run = || {
        let theta = random_params(2, &mut rng(1));
        let mut t = Trainer::new(theta, cfg.clone(), Weighting::Meta, true).unwrap();
        let stats = t.run_epoch(&noisy, &meta, &mut rng(2), |_, _, _| {}).unwrap();
        (t, stats)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    assert_eq!(sa.steps, 2);
    assert!(sa.aug_loss > 0.0 && sa.st_loss > 0.0);
}

#[test]
fn meta_step_weights_satisfy_the_normalization_invariants() {
    let (meta, noisy, eval) = small_task(8);
    let theta = random_params(2, &mut rng(3));
    let cfg = HyperConfig {
        width: 2,
        ..Default::default()
    };
    let mut t = Trainer::new(theta, cfg, Weighting::Meta, false).unwrap();
    let mut sums = Vec::new();
    t.run_epoch(&noisy, &meta, &mut rng(4), |_, _, rep| {
        let sn: f64 = rep.weights.iter().map(|w| w.n.sum()).sum();
        let sp: f64 = rep.weights.iter().map(|w| w.p.sum()).sum();
        let nonneg = rep
            .weights
            .iter()
            .all(|w| w.n.data().iter().chain(w.p.data()).all(|&v| v >= 0.0));
        sums.push((sn, sp, nonneg));
    })
    .unwrap();
    for (sn, sp, nonneg) in sums {
        assert!(nonneg);
        assert!(sn == 0.0 || (sn - 1.0).abs() <= 1e-6);
        assert!(sp == 0.0 || (sp - 1.0).abs() <= 1e-6);
    }
    let (summary, reports) = evaluate(&t.student, &eval).unwrap();
    assert_eq!(reports.len(), 4);
    assert!((0.0..=1.0).contains(&summary.dice));
}
