#![allow(dead_code)]

use std::path::Path;

use clbench::config::{ExperimentConfig, Scenario, SyntheticConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(rows, cols, |_, _| r.sample::<f64, _>(rand_distr::StandardNormal))
}

/// Ten-class, five-task online stream over 32x32x3 synthetic images with an
/// mlp2 encoder: the desk-scale comparison setting.
pub fn online_config(method: &str, seed: u64, out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        dataset_names: vec!["synthetic".into()],
        init_cls_num: 0,
        inc_cls_num: 2,
        task_num: 5,
        scenario: Scenario::TaskAgnostic,
        online: true,
        epochs: 1,
        batch_size: 10,
        method: method.into(),
        optimizer: clbench::config::OptimizerConfig {
            name: clbench::config::OptimizerKind::Sgd,
            learning_rate: 0.01,
            decay_schedule: clbench::config::DecaySchedule::Constant,
        },
        backbone: clbench::config::BackboneConfig {
            arch: clbench::config::Arch::Mlp2,
            hidden: vec![100, 100],
            feature_dim: 100,
        },
        seed,
        output_dir: out.to_path_buf(),
        synthetic: SyntheticConfig {
            num_classes: 10,
            input_shape: vec![3, 32, 32],
            train_per_class: 500,
            test_per_class: 100,
            latent_dim: 16,
            class_sep: 1.0,
            noise: 1.0,
            data_seed: 0,
        },
        ..ExperimentConfig::default()
    }
}

/// Small two-task blob stream that trains in well under a second.
pub fn toy_config(method: &str, seed: u64, out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        dataset_names: vec!["synthetic".into()],
        init_cls_num: 0,
        inc_cls_num: 2,
        task_num: 2,
        scenario: Scenario::TaskAgnostic,
        online: false,
        epochs: 3,
        batch_size: 10,
        method: method.into(),
        buffer: clbench::config::BufferConfig { strategy: None, capacity: Some(40), budget_bytes: None },
        backbone: clbench::config::BackboneConfig {
            arch: clbench::config::Arch::Mlp2,
            hidden: vec![32, 32],
            feature_dim: 32,
        },
        seed,
        output_dir: out.to_path_buf(),
        synthetic: SyntheticConfig {
            num_classes: 4,
            input_shape: vec![16],
            train_per_class: 100,
            test_per_class: 50,
            latent_dim: 4,
            class_sep: 3.0,
            noise: 1.0,
            data_seed: 0,
        },
        ..ExperimentConfig::default()
    }
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Greedy mean matching over plain vectors: at step `j` take the unused
/// sample whose inclusion puts the running mean closest (squared distance)
/// to the class mean, lowest index on ties up to round-off.
pub fn herding_oracle(rows: &[Vec<f64>], m: usize) -> Vec<usize> {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mu: Vec<f64> = (0..d).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    let mut chosen: Vec<usize> = Vec::new();
    for step in 1..=m {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for (i, row) in rows.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let mut dist = 0.0;
            for k in 0..d {
                let s: f64 = chosen.iter().map(|&c| rows[c][k]).sum::<f64>() + row[k];
                dist += (mu[k] - s / step as f64).powi(2);
            }
            if dist < best_d * (1.0 - 1e-9) {
                best_d = dist;
                best = i;
            }
        }
        chosen.push(best);
    }
    chosen
}

pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut p = x.to_vec();
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let up = f(&p);
        p[i] = x[i] - h;
        let down = f(&p);
        p[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    out
}
