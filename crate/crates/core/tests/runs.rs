//! End-to-end behaviour of the runner on small synthetic streams.

mod common;

use std::fs;

use clbench::algorithms::composed::Projector;
use clbench::algorithms::{ComposedLearner, Hook, Learner, TaskInfo};
use clbench::config::{Scenario, SyntheticConfig};
use clbench::datastream::{iterate_stream, DataPool, TaskSpec};
use clbench::memorybudget::{ledger_from_run, StorageKind};
use clbench::runner::{
    execute, prepare, run_experiment, run_suite, suite_run_dir, sweep_memory, RunOptions, RunRecord,
};
use clbench::util::{median, sample_std};
use clbench::{Batch, Error};
use common::toy_config;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn quiet() -> RunOptions {
    RunOptions { write_outputs: false }
}

#[test]
fn toy_run_shape_and_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let rec = run_experiment(&toy_config("er", 1, dir.path())).unwrap();
    assert_eq!(rec.matrix.rows().iter().map(Vec::len).sum::<usize>(), 3);
    assert!(!rec.ledger.entries.is_empty());
    assert!(rec.completed);
    for f in ["record.json", "matrix.csv", "metrics.json", "ledger.json", "config.resolved.yaml", "events.log"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    assert_eq!(RunRecord::load(&dir.path().join("record.json")).unwrap(), rec);
}

#[test]
fn lifecycle_trace_per_task() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config("finetune", 2, dir.path());
    let art = execute(&cfg, quiet()).unwrap();
    let mut expected = Vec::new();
    for task in &art.sequence.tasks {
        let k = iterate_stream(task, art.sequence.stream_mode, cfg.batch_size, cfg.seed).unwrap().len();
        expected.push((task.task_index, Hook::BeforeTask));
        expected.extend(std::iter::repeat_n((task.task_index, Hook::Observe), k));
        expected.push((task.task_index, Hook::AfterTask));
    }
    assert_eq!(art.trace(), expected.as_slice());
}

#[test]
fn inference_does_not_mutate_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let art = execute(&toy_config("er", 3, dir.path()), quiet()).unwrap();
    let before = art.learner.learner().model().flat_params();
    let refs: Vec<_> = art.sequence.tasks[0].test_refs.iter().map(|r| r.sample).collect();
    art.learner.inference(&art.pool.gather(&refs), &[0, 1, 2, 3]).unwrap();
    assert_eq!(art.learner.learner().model().flat_params(), before);
}

#[test]
fn rerun_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    for method in ["finetune", "ewc", "er", "icarl", "gpm", "ranpac"] {
        let cfg = toy_config(method, 4, dir.path());
        let a = execute(&cfg, quiet()).unwrap().record;
        let b = execute(&a.config, quiet()).unwrap().record;
        let bits = |r: &RunRecord| -> Vec<u64> { r.matrix.rows().iter().flatten().map(|v| v.to_bits()).collect() };
        assert_eq!(bits(&a), bits(&b), "{method}");
        assert_eq!(a.digest, b.digest);
    }
}

#[test]
fn finetune_forgets_first_task() {
    let dir = tempfile::tempdir().unwrap();
    let drops: Vec<f64> = SEEDS
        .iter()
        .map(|&s| {
            let m = execute(&toy_config("finetune", s, dir.path()), quiet()).unwrap().record.matrix;
            m.get(0, 0).unwrap() - m.get(1, 0).unwrap()
        })
        .collect();
    assert!(median(&drops) >= 0.10, "{drops:?}");
}

#[test]
fn erace_keeps_up_with_er() {
    let dir = tempfile::tempdir().unwrap();
    let last = |method: &str| -> Vec<f64> {
        SEEDS
            .iter()
            .map(|&s| {
                let cfg = toy_config(method, s, dir.path());
                execute(&cfg, quiet()).unwrap().record.metrics.unwrap().last_acc
            })
            .collect()
    };
    let (ace, er) = (last("er_ace"), last("er"));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&ace) >= mean(&er) - 0.02, "er_ace {ace:?} vs er {er:?}");
}

#[test]
fn task_aware_dominates_task_agnostic() {
    let dir = tempfile::tempdir().unwrap();
    for s in SEEDS {
        let mut cfg = toy_config("finetune", s, dir.path());
        cfg.task_num = 2;
        let agnostic = execute(&cfg, quiet()).unwrap();
        cfg.scenario = Scenario::TaskAware;
        let aware = execute(&cfg, quiet()).unwrap();
        // Same trained model, so the comparison is paired.
        assert_eq!(
            agnostic.learner.learner().model().flat_params(),
            aware.learner.learner().model().flat_params()
        );
        for (ra, rg) in aware.record.matrix.rows().iter().zip(agnostic.record.matrix.rows()) {
            for (a, g) in ra.iter().zip(rg) {
                assert!(a >= g, "seed {s}: aware {ra:?} vs agnostic {rg:?}");
            }
        }
    }
}

#[test]
fn stubs_fail_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("stub");
    let err = run_experiment(&toy_config("l2p", 1, &out)).unwrap_err();
    assert!(matches!(err, Error::MethodUnavailable { .. }), "{err}");
    assert!(!out.exists());
    assert!(matches!(run_experiment(&toy_config("nope", 1, &out)), Err(Error::UnknownMethod(_))));
}

#[test]
fn suite_std_matches_persisted_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config("er", 0, &dir.path().join("er"));
    let report = run_suite(std::slice::from_ref(&cfg), &SEEDS, true).unwrap();
    let row = &report.rows[0];
    assert_eq!(row.seeds, SEEDS);
    let persisted: Vec<f64> = SEEDS
        .iter()
        .map(|&s| RunRecord::load(&suite_run_dir(&cfg, s).join("record.json")).unwrap().metrics.unwrap().last_acc)
        .collect();
    assert_eq!(persisted, row.last_acc);
    let mean = persisted.iter().sum::<f64>() / 5.0;
    let std = (persisted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
    assert!((row.last_std - std).abs() < 1e-12);
    assert!((row.last_std - sample_std(&persisted)).abs() < 1e-12);
    assert!(report.to_table().contains("er"));

    let same = run_suite(std::slice::from_ref(&cfg), &[7, 7, 7], false).unwrap();
    assert_eq!(same.rows[0].last_std, 0.0);
}

#[test]
fn sweep_capacities_follow_image_size() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config("er", 0, dir.path());
    cfg.synthetic = SyntheticConfig { input_shape: vec![3, 32, 32], train_per_class: 20, test_per_class: 10, ..cfg.synthetic };
    cfg.epochs = 1;
    let report = sweep_memory("er", &[2.0, 6.144, 20.0], &cfg, &[0]).unwrap();
    let caps: Vec<usize> = report.rows.iter().map(|r| r.value.unwrap()).collect();
    assert_eq!(caps, vec![651, 2000, 6510]);
    for r in &report.rows {
        assert!(r.achieved_units <= (r.target_mb.unwrap() * 1e6) as u64);
        assert_eq!(r.knob.as_deref(), Some("buffer.capacity"));
    }
    assert!(fs::read_to_string(dir.path().join("sweep.csv")).unwrap().lines().count() == 4);

    let ewc = sweep_memory("ewc", &[2.0, 6.144, 20.0], &cfg, &[0]).unwrap();
    assert_eq!(ewc.rows.len(), 1);
    assert!(ewc.rows[0].target_mb.is_none() && ewc.rows[0].value.is_none());
}

fn batch_of(pool: &DataPool, task: &TaskSpec, refs: &[clbench::datastream::LabeledRef]) -> Batch {
    let samples: Vec<_> = refs.iter().map(|r| r.sample).collect();
    Batch::new(pool.gather(&samples), refs.iter().map(|r| r.label).collect(), task.task_index)
}

#[test]
fn gpm_ledger_matches_basis_arrays() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, pool, seq) = prepare(&toy_config("gpm", 5, dir.path())).unwrap();
    let mut l = ComposedLearner::from_config(&cfg, pool.input_shape()).unwrap();
    let mut seen = Vec::new();
    for task in &seq.tasks {
        seen.extend(task.sorted_classes());
        seen.sort_unstable();
        let info = TaskInfo { task_index: task.task_index, classes: task.sorted_classes(), seen_classes: seen.clone() };
        l.before_task(&info).unwrap();
        for sb in iterate_stream(task, seq.stream_mode, cfg.batch_size, cfg.seed).unwrap() {
            let refs: Vec<_> = sb.refs.iter().zip(&sb.labels).map(|(&sample, &label)| clbench::datastream::LabeledRef { sample, label }).collect();
            l.observe(&batch_of(&pool, task, &refs)).unwrap();
        }
        l.after_task(&batch_of(&pool, task, &task.train_refs)).unwrap();
    }
    let Some(Projector::Gpm(state)) = &l.projector else { panic!("gpm learner without subspaces") };
    let walked: u64 = state.bases.iter().map(|b| (b.nrows() * b.ncols()) as u64).sum();
    assert!(walked > 0);
    let ledger = ledger_from_run(l.buffer_manifest().as_ref(), &l.census(), &l.state_descriptors()).unwrap();
    assert_eq!(ledger.units_of(StorageKind::Feature).unwrap(), 4 * walked);
}
