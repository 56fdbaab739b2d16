use efcp_core::tasks::QuadraticTask;
use efcp_core::{run, OptimizerKind, RunConfig, Task};

fn quadratic(optimizer: OptimizerKind, lr: f64, steps: usize) -> RunConfig {
    RunConfig {
        optimizer,
        lr,
        steps,
        dim: 20,
        weight_decay: 0.01,
        seed: 4,
        ..RunConfig::default()
    }
}

/// Straight-line SGD with momentum, written without the library's helpers.
fn reference_sgd(task: &QuadraticTask, lr: f64, mu: f64, wd: f64, steps: usize) -> Vec<f64> {
    let d = task.dim();
    let mut theta = vec![0.0; d];
    let mut v = vec![0.0; d];
    let mut losses = Vec::new();
    for t in 0..steps {
        losses.push(task.loss(&theta, t).unwrap());
        let g = task.grad(&theta, t).unwrap();
        for i in 0..d {
            v[i] = mu * v[i] + g[i];
            theta[i] = (1.0 - wd * lr) * theta[i] - lr * v[i];
        }
    }
    losses
}

fn reference_adam(task: &QuadraticTask, lr: f64, wd: f64, steps: usize) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let d = task.dim();
    let mut theta = vec![0.0; d];
    let (mut m, mut v) = (vec![0.0; d], vec![0.0; d]);
    let mut losses = Vec::new();
    for t in 0..steps {
        losses.push(task.loss(&theta, t).unwrap());
        let g = task.grad(&theta, t).unwrap();
        let k = (t + 1) as i32;
        for i in 0..d {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = m[i] / (1.0 - b1.powi(k));
            let vhat = v[i] / (1.0 - b2.powi(k));
            theta[i] = (1.0 - wd * lr) * theta[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    losses
}

fn assert_traces_match(ours: &[f64], reference: &[f64]) {
    assert_eq!(ours.len(), reference.len());
    for (t, (a, b)) in ours.iter().zip(reference).enumerate() {
        assert!(
            (a - b).abs() <= 1e-12 * b.abs().max(1e-300),
            "step {t}: {a} vs {b}"
        );
    }
}

#[test]
fn sgd_matches_reference_trace() {
    let cfg = quadratic(OptimizerKind::Sgd, 0.05, 100);
    let task = QuadraticTask::synthetic(cfg.dim, 0.0, cfg.seed).unwrap();
    let ours: Vec<f64> = run(&cfg).unwrap().records.iter().map(|r| r.loss).collect();
    assert_traces_match(&ours, &reference_sgd(&task, 0.05, cfg.momentum, 0.01, 100));
}

#[test]
fn adam_matches_reference_trace() {
    let cfg = quadratic(OptimizerKind::Adam, 0.02, 100);
    let task = QuadraticTask::synthetic(cfg.dim, 0.0, cfg.seed).unwrap();
    let ours: Vec<f64> = run(&cfg).unwrap().records.iter().map(|r| r.loss).collect();
    assert_traces_match(&ours, &reference_adam(&task, 0.02, 0.01, 100));
}

#[test]
fn dmfac_is_monotone_after_warmup() {
    let m = 16;
    for lambda in [1e-2, 1e-1, 1.0] {
        let cfg = RunConfig {
            optimizer: OptimizerKind::Dmfac,
            lr: 1e-3,
            lambda,
            m,
            steps: 300,
            dim: 50,
            ..RunConfig::default()
        };
        let losses: Vec<f64> = run(&cfg).unwrap().records.iter().map(|r| r.loss).collect();
        for t in m + 1..losses.len() {
            assert!(
                losses[t] <= losses[t - 1],
                "lambda {lambda}: loss rose at step {t}: {} -> {}",
                losses[t - 1],
                losses[t]
            );
        }
    }
}

#[test]
fn dense_and_sparse_mfac_agree_on_quadratic() {
    let base = RunConfig {
        lr: 3e-4,
        lambda: 1e-4,
        m: 16,
        steps: 300,
        dim: 50,
        density: 0.1,
        ..RunConfig::default()
    };
    let dense = run(&RunConfig {
        optimizer: OptimizerKind::Dmfac,
        ..base.clone()
    })
    .unwrap()
    .final_loss;
    let sparse = run(&base).unwrap().final_loss;
    assert!(
        (sparse - dense).abs() <= 0.1 * dense,
        "dmfac {dense} vs smfac {sparse}"
    );
}

#[test]
fn every_record_is_finite_and_ef_tracks_compression() {
    let cfg = RunConfig {
        lr: 1e-2,
        lambda: 1e-2,
        steps: 50,
        density: 0.1,
        ..RunConfig::default()
    };
    let out = run(&cfg).unwrap();
    assert_eq!(out.records.len(), 50);
    for (t, r) in out.records.iter().enumerate() {
        assert_eq!(r.t, t);
        for v in [r.loss, r.grad_norm, r.upd_norm, r.ef_norm] {
            assert!(v.is_finite());
        }
        assert_eq!(r.ms, 0.0);
    }
    assert!(out.records.iter().any(|r| r.ef_norm > 0.0));

    let dense = run(&RunConfig {
        optimizer: OptimizerKind::Dmfac,
        ..cfg
    })
    .unwrap();
    assert!(dense.records.iter().all(|r| r.ef_norm == 0.0));
}

#[test]
fn config_json_round_trips() {
    let cfg = RunConfig {
        optimizer: OptimizerKind::Lrmfac,
        clip: Some(10.0),
        task: "csv:data/train.csv".parse().unwrap(),
        ..RunConfig::default()
    };
    let text = serde_json::to_string(&cfg).unwrap();
    let back: RunConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    assert!(serde_json::from_str::<RunConfig>(r#"{"densty": 0.1}"#).is_err());
}
