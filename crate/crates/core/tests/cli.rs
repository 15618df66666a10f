use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
name = "cli"
stage = "encoder"
variants = ["identity", "mlp"]
k = 4
plan_seed = 1
seeds = [333, 2025]

[training]
epochs = 2
patience = 2
batch_size = 16

[space]
datasets = ["waves", "csv"]
lookbacks = [24]
horizons = [8, 12]
layers = [1, 2]
latent_dims = [8]
learning_rates = [1e-2]
embeddings = ["patch"]
patch_lens = [8]
strides = [4]

[datasets.waves]
synthetic = { length = 300, variates = 2, period = 12, noise = 0.1, seed = 1 }
split = { ratio = { train = 0.6, val = 0.2 } }

[datasets.csv]
path = "gen/series.csv"
split = { ratio = { train = 0.6, val = 0.2 } }
"#;

fn combts(args: &[&str], data_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_combts"))
        .args(args)
        .env("COMBTS_DATA_DIR", data_dir)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    assert!(!o.status.success(), "unexpected success: {}", String::from_utf8_lossy(&o.stdout));
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn run_report_significance_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let cfg = d.join("cli.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let csv = d.join("gen/series.csv");

    let out = stdout(&combts(
        &["gen-synthetic", "--out", &s(&csv), "--length", "300", "--variates", "1", "--period", "8"],
        d,
    ));
    assert!(out.contains("300 steps x 1 variates"), "{out}");

    let out = stdout(&combts(&["validate-config", "--config", &s(&cfg)], d));
    assert!(out.contains("encoder stage, 2 variants x 4 conditions = 8 runs"), "{out}");

    let runs = d.join("out");
    let args = ["run", "--config", &s(&cfg), "--out", &s(&runs), "--parallelism", "2"];
    let out = stdout(&combts(&args, d));
    assert!(out.contains("8 runs (8 new): 8 ok"), "{out}");
    assert!(out.lines().next().unwrap().starts_with("config "));
    let out = stdout(&combts(&args, d));
    assert!(out.contains("8 runs (0 new)"), "{out}");

    let out = stdout(&combts(&["report", &s(&runs)], d));
    assert!(out.contains("identity mu") && out.contains("mlp sigma") && out.contains("avg"), "{out}");
    let tsv = std::fs::read_to_string(runs.join("report.tsv")).unwrap();
    assert_eq!(
        tsv.lines().next().unwrap(),
        "group\tk_ok\tmu\tsigma\tlbest\tci_low\tci_high\texcluded"
    );

    let out = stdout(&combts(&["report", &s(&runs), "--group-by", "layers"], d));
    assert!(out.contains("1 mu") && out.contains("2 mu"), "{out}");

    let out = stdout(&combts(&["significance", &s(&runs), "identity", "mlp", "--alpha", "0.1"], d));
    assert!(out.contains("alpha=0.1") && out.contains("overall") && out.contains("waves"), "{out}");
    assert!(runs.join("significance.tsv").exists());

    let err = stderr(&combts(&["significance", &s(&runs), "identity", "transformer"], d));
    assert!(err.contains("no runs for \"transformer\""), "{err}");
}

#[test]
fn multiseed_writes_one_column_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("cli.toml");
    std::fs::write(&cfg, CONFIG.replace("\"waves\", \"csv\"", "\"waves\"")).unwrap();
    let out = d.join("ms");
    let text = stdout(&combts(
        &["multiseed", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--parallelism", "1"],
        d,
    ));
    assert!(text.contains("mu@333") && text.contains("mu@2025"), "{text}");
    assert!(text.contains("max cross-seed |delta mu|"), "{text}");
    assert!(out.join("seed-333/runs.jsonl").exists() && out.join("seed-2025/runs.jsonl").exists());
    assert!(out.join("multiseed.tsv").exists());
}

#[test]
fn diagnostics_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("cli.toml");
    let path = cfg.to_str().unwrap();

    let err = stderr(&combts(&["validate-config", "--config", path], d));
    assert!(err.contains("cli.toml"), "{err}");

    std::fs::write(&cfg, CONFIG.replace("k = 4", "k = 12")).unwrap();
    let err = stderr(&combts(&["run", "--config", path, "--out", d.join("x").to_str().unwrap()], d));
    assert!(err.contains("exceeds the stratum grid of 2"), "{err}");
    assert!(!d.join("x").exists(), "no output before the sample is feasible");

    std::fs::write(&cfg, CONFIG.replace("latent_dims = [8]", "latent_dims = [0]")).unwrap();
    let err = stderr(&combts(&["validate-config", "--config", path], d));
    assert!(err.contains("space.latent_dims"), "{err}");

    std::fs::write(&cfg, CONFIG).unwrap();
    let err = stderr(&combts(&["run", "--config", path, "--out", d.join("y").to_str().unwrap()], d));
    assert!(err.contains("gen/series.csv"), "{err}");

    std::fs::write(d.join("empty.jsonl"), "").unwrap();
    let err = stderr(&combts(&["report", d.join("empty.jsonl").to_str().unwrap()], d));
    assert!(err.contains("no run records"), "{err}");
}
