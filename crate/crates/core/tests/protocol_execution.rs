use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use combts::harness::ExperimentConfig;
use combts::protocol::{execute, read_log, RunRecord, RunStatus};

const TINY: &str = r#"
name = "tiny"
stage = "encoder"
variants = ["identity", "mlp"]
k = 4
plan_seed = 5

[training]
epochs = 3
patience = 2
batch_size = 16

[space]
datasets = ["a", "b"]
lookbacks = [24]
horizons = [8, 12]
layers = [1, 2]
latent_dims = [8]
learning_rates = [1e-2, 3e-3]
embeddings = ["patch"]
patch_lens = [8]
strides = [4]

[datasets.a]
synthetic = { length = 300, variates = 2, period = 12, noise = 0.1, seed = 1 }
split = { ratio = { train = 0.6, val = 0.2 } }

[datasets.b]
synthetic = { length = 300, variates = 1, period = 8, noise = 0.1, seed = 2 }
split = { ratio = { train = 0.6, val = 0.2 } }
"#;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY).unwrap()
}

fn run(cfg: &ExperimentConfig, workers: usize, log: Option<&std::path::Path>) -> Vec<RunRecord> {
    let plan = cfg.plan().unwrap();
    let catalog = cfg.load_datasets(std::path::Path::new(".")).unwrap();
    execute(&plan, &catalog, workers, log, None).unwrap()
}

fn losses(records: &[RunRecord]) -> Vec<(String, Option<f64>, Vec<f64>)> {
    records
        .iter()
        .map(|r| (r.run_key.clone(), r.test_mse, r.val_curve.clone()))
        .collect()
}

#[test]
fn every_variant_sees_the_same_conditions() {
    let records = run(&tiny(), 1, None);
    let mut by_eo: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in &records {
        by_eo.entry(&r.eo).or_default().insert(&r.ec_hash);
    }
    assert_eq!(by_eo.len(), 2);
    assert_eq!(by_eo["identity"], by_eo["mlp"]);
    assert!(records.iter().all(|r| r.status == RunStatus::Ok), "{records:?}");

    let mut strata: BTreeMap<(String, usize), usize> = BTreeMap::new();
    for r in records.iter().filter(|r| r.eo == "identity") {
        *strata.entry((r.ec.dataset.clone(), r.ec.horizon)).or_default() += 1;
    }
    assert_eq!(strata.len(), 4);
    assert!(strata.values().all(|&c| c == 1));
}

#[test]
fn results_do_not_depend_on_worker_count_or_repetition() {
    let cfg = tiny();
    let one = run(&cfg, 1, None);
    let four = run(&cfg, 4, None);
    let again = run(&cfg, 1, None);
    assert!(one.iter().all(|r| r.status == RunStatus::Ok));
    assert_eq!(losses(&one), losses(&four));
    for (a, b) in one.iter().zip(&again) {
        assert_eq!(a.val_curve.len(), b.val_curve.len());
        for (x, y) in a.val_curve.iter().zip(&b.val_curve) {
            assert!((x - y).abs() <= 1e-12);
        }
        assert_eq!(a.test_mse, b.test_mse);
    }
}

#[test]
fn resume_skips_completed_runs_and_ignores_a_torn_line() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("runs.jsonl");
    let cfg = tiny();
    let full = run(&cfg, 2, Some(&log));
    let text = std::fs::read_to_string(&log).unwrap();
    assert_eq!(text.lines().count(), full.len());

    // idempotent: nothing new is appended
    let again = run(&cfg, 2, Some(&log));
    assert_eq!(std::fs::read_to_string(&log).unwrap(), text);
    assert_eq!(losses(&full), losses(&again));

    // interrupted after three runs, the last append cut short
    let lines: Vec<&str> = text.lines().collect();
    let mut f = std::fs::File::create(&log).unwrap();
    for l in &lines[..3] {
        writeln!(f, "{l}").unwrap();
    }
    write!(f, "{}", &lines[3][..lines[3].len() / 2]).unwrap();
    drop(f);
    assert_eq!(read_log(&log).unwrap().len(), 3);
    let resumed = run(&cfg, 2, Some(&log));
    assert_eq!(losses(&full), losses(&resumed));
    let after = read_log(&log).unwrap();
    assert_eq!(after.len(), full.len());
    let keys: BTreeSet<_> = after.iter().map(|r| r.run_key.clone()).collect();
    assert_eq!(keys.len(), full.len());
}

#[test]
fn log_of_another_plan_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("runs.jsonl");
    let cfg = tiny();
    run(&cfg, 1, Some(&log));
    let other = cfg.with_seed(9);
    let plan = other.plan().unwrap();
    let catalog = other.load_datasets(std::path::Path::new(".")).unwrap();
    let err = execute(&plan, &catalog, 1, Some(&log), None).unwrap_err();
    assert!(err.to_string().contains("holds runs of plan"), "{err}");
}

#[test]
fn an_undersized_dataset_fails_only_its_own_runs() {
    let text = TINY.replace(
        "synthetic = { length = 300, variates = 1, period = 8, noise = 0.1, seed = 2 }",
        "synthetic = { length = 120, variates = 1, period = 8, noise = 0.1, seed = 2 }",
    );
    let records = run(&ExperimentConfig::from_toml(&text).unwrap(), 2, None);
    for r in &records {
        if r.ec.dataset == "b" {
            assert_eq!(r.status, RunStatus::Failed);
            assert!(r.reason.as_deref().unwrap().contains("insufficient data"), "{:?}", r.reason);
        } else {
            assert_eq!(r.status, RunStatus::Ok, "{:?}", r.reason);
        }
    }
}

#[test]
fn run_seed_depends_on_variant_and_condition_only() {
    let cfg = tiny();
    let plan = cfg.plan().unwrap();
    let runs = plan.runs();
    let seeds: BTreeSet<u64> = runs.iter().map(|r| r.run_seed).collect();
    assert_eq!(seeds.len(), runs.len());
    let again = cfg.plan().unwrap().runs();
    for (a, b) in runs.iter().zip(&again) {
        assert_eq!((a.run_seed, &a.run_key), (b.run_seed, &b.run_key));
    }
}
