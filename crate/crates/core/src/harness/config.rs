//! TOML experiment configuration.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datasets::{apply_split, default_cycle_len, known_frequency, load_csv, standardize, SplitPolicy};
use crate::error::{Error, Result};
use crate::harness::synthetic::{generate, SyntheticSpec};
use crate::protocol::{
    build_plan, canonical_hash, sample_ecs, Catalog, EcSpace, ExperimentPlan, Stage, TrainingProtocol,
};

/// Where one dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    /// CSV path, relative to the dataset root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default = "yes")]
    pub date_column: bool,
    #[serde(default = "auto_split")]
    pub split: SplitPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency: Option<String>,
    /// Cycle length for the cycle transform; defaults from the frequency.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycle_len: Option<usize>,
}

fn yes() -> bool {
    true
}

fn auto_split() -> SplitPolicy {
    SplitPolicy::Auto
}

fn default_seeds() -> Vec<u64> {
    vec![333, 2025, 2026]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub stage: Stage,
    pub variants: Vec<String>,
    /// Number of sampled conditions.
    pub k: usize,
    #[serde(default)]
    pub plan_seed: u64,
    /// Seeds for multi-seed verification.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub training: TrainingProtocol,
    pub space: EcSpace,
    pub datasets: BTreeMap<String, DatasetSource>,
}

fn field_err(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{path}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        cfg.resolve_cycle_lens();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Structural checks that need no data.
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(field_err("name", "must not be empty"));
        }
        if self.variants.len() < 2 {
            return Err(field_err("variants", "at least two variants are compared"));
        }
        for (i, v) in self.variants.iter().enumerate() {
            self.stage
                .check_variant(v)
                .map_err(|e| field_err(&format!("variants[{i}]"), e))?;
        }
        if self.k == 0 {
            return Err(field_err("k", "must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(field_err("seeds", "must not be empty"));
        }
        let t = &self.training;
        if t.batch_size == 0 || t.epochs == 0 || t.patience == 0 {
            return Err(field_err("training", "batch_size, epochs and patience must be positive"));
        }
        if !(0.0..1.0).contains(&t.dropout) {
            return Err(field_err("training.dropout", format!("{} outside [0, 1)", t.dropout)));
        }
        self.space.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(m),
            other => field_err("space", other),
        })?;
        for (i, d) in self.space.datasets.iter().enumerate() {
            let src = self
                .datasets
                .get(d)
                .ok_or_else(|| field_err(&format!("space.datasets[{i}]"), format!("no [datasets.{d}] entry")))?;
            match (&src.path, &src.synthetic) {
                (Some(_), None) => {}
                (None, Some(s)) => s.validate().map_err(|e| field_err(&format!("datasets.{d}.synthetic"), e))?,
                _ => return Err(field_err(&format!("datasets.{d}"), "set exactly one of path or synthetic")),
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        canonical_hash(self).expect("configs serialize")
    }

    /// Output directory: `--out` first, then the config value, then `runs/<name>`.
    pub fn output_dir(&self, over: Option<&Path>) -> PathBuf {
        over.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }

    /// Fills `space.cycle_lens` for datasets it does not list: the source's
    /// `cycle_len`, the synthetic period, or one day at the known frequency.
    pub fn resolve_cycle_lens(&mut self) {
        for name in &self.space.datasets {
            let src = &self.datasets[name];
            let stem = src
                .path
                .as_ref()
                .and_then(|p| p.file_stem())
                .map(|s| s.to_string_lossy().into_owned());
            let frequency = src
                .frequency
                .clone()
                .or_else(|| known_frequency(name).map(String::from))
                .or_else(|| stem.as_deref().and_then(known_frequency).map(String::from));
            let cycle = src
                .cycle_len
                .or_else(|| src.synthetic.as_ref().map(|s| s.period))
                .or_else(|| frequency.as_deref().and_then(default_cycle_len))
                .unwrap_or(24);
            self.space.cycle_lens.entry(name.clone()).or_insert(cycle);
        }
    }

    /// Loads, splits and standardizes every dataset the space names.
    pub fn load_datasets(&self, data_root: &Path) -> Result<Catalog> {
        let mut catalog: Catalog = HashMap::new();
        for name in &self.space.datasets {
            let src = &self.datasets[name];
            let mut ds = match (&src.path, &src.synthetic) {
                (Some(p), _) => {
                    let full = if p.is_absolute() { p.clone() } else { data_root.join(p) };
                    load_csv(&full, src.date_column)?
                }
                (None, Some(s)) => generate(name, s)?,
                (None, None) => unreachable!("validated"),
            };
            ds.name = name.clone();
            if let Some(f) = &src.frequency {
                ds = ds.with_frequency(f.clone());
            }
            let ds = apply_split(ds, src.split)?;
            let (ds, _) = standardize(&ds)?;
            catalog.insert(name.clone(), Arc::new(ds));
        }
        Ok(catalog)
    }

    /// Samples the conditions and pairs them with every variant.
    pub fn plan(&self) -> Result<ExperimentPlan> {
        let ecs = sample_ecs(&self.space, self.stage, self.k, self.plan_seed)?;
        build_plan(self.stage, &self.variants, ecs, self.training.clone(), self.plan_seed)
    }

    /// Copy with the fixed condition seed replaced.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.space.seed = seed;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINI: &str = r#"
name = "mini"
stage = "encoder"
variants = ["identity", "transformer"]
k = 4
plan_seed = 3
seeds = [333, 2025]

[training]
epochs = 2

[space]
datasets = ["a", "b"]
lookbacks = [24]
horizons = [8, 12]
layers = [1]
latent_dims = [8]
learning_rates = [1e-3]
embeddings = ["patch"]

[datasets.a]
synthetic = { length = 400, variates = 2, period = 12, noise = 0.1, seed = 1 }

[datasets.b]
synthetic = { length = 400, variates = 1, period = 8, seed = 2 }
cycle_len = 16
"#;

    #[test]
    fn parses_and_hashes_stably() {
        let c = ExperimentConfig::from_toml(MINI).unwrap();
        assert_eq!(c.training.batch_size, 32);
        assert_eq!(c.training.epochs, 2);
        assert_eq!(c.hash(), ExperimentConfig::from_toml(MINI).unwrap().hash());
        assert_ne!(c.hash(), c.with_seed(1).hash());
        let plan = c.plan().unwrap();
        assert_eq!(plan.len(), 8);
    }

    #[test]
    fn errors_carry_field_paths() {
        let bad = MINI.replace(r#"variants = ["identity", "transformer"]"#, r#"variants = ["identity", "lstm"]"#);
        let err = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("variants[1]"), "{err}");

        let bad = MINI.replace(r#"datasets = ["a", "b"]"#, r#"datasets = ["a", "c"]"#);
        let err = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("space.datasets[1]"), "{err}");

        let bad = MINI.replace("lookbacks = [24]", "lookbacks = []");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("space.lookbacks"), "{err}");

        let bad = MINI.replace("k = 4", "k = 4\nbogus = 1");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");

        let bad = MINI.replace("epochs = 2", "epochs = 2\ndropout = 1.5");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("training.dropout"), "{err}");
    }

    #[test]
    fn infeasible_k_fails_at_planning() {
        let c = ExperimentConfig::from_toml(&MINI.replace("k = 4", "k = 8")).unwrap();
        assert!(matches!(c.plan(), Err(Error::InfeasibleSample(_))));
    }

    #[test]
    fn datasets_load_with_cycle_lengths() {
        let c = ExperimentConfig::from_toml(MINI).unwrap();
        let catalog = c.load_datasets(Path::new(".")).unwrap();
        assert_eq!(catalog["a"].variates(), 2);
        assert_eq!(c.space.cycle_lens["a"], 12);
        assert_eq!(c.space.cycle_lens["b"], 16);
        let (tr, va, te) = catalog["a"].split_bounds().unwrap().lengths();
        assert_eq!((tr, va, te), (280, 40, 80));
    }

    #[test]
    fn missing_csv_names_the_file() {
        let text = MINI.replace(
            "synthetic = { length = 400, variates = 1, period = 8, seed = 2 }",
            "path = \"nowhere/b.csv\"",
        );
        let c = ExperimentConfig::from_toml(&text).unwrap();
        let err = c.load_datasets(Path::new("/data")).unwrap_err();
        assert!(matches!(err, Error::MissingFile(p) if p == Path::new("/data/nowhere/b.csv")));
    }
}
