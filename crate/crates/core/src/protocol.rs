//! Paired Monte Carlo evaluation: condition space, stratified sampling, run
//! plans, and resumable parallel execution with a line-delimited run log.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::{mpsc, Arc};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::SeriesDataset;
use crate::embeddings::{EmbeddingKind, EmbeddingSpec};
use crate::encoders::{EncoderKind, EncoderSpec};
use crate::error::{Error, Result};
use crate::numcore::Rng;
use crate::pipeline::{train, Model, PipelineConfig, TrainSettings};
use crate::transforms::{TransformKind, TransformSpec};

/// Hex SHA-256 of the canonical JSON form of `value` (object keys sorted).
pub fn canonical_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(canonical_json(value)?.as_bytes()))
}

/// JSON with object keys in sorted order.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json::Value keeps objects in a BTreeMap
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// The pipeline stage whose variants are compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Embedding,
    Encoder,
    Transform,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Embedding => "embedding",
            Stage::Encoder => "encoder",
            Stage::Transform => "transform",
        }
    }

    /// Checks that `variant` names a module of this stage.
    pub fn check_variant(self, variant: &str) -> Result<()> {
        match self {
            Stage::Embedding => variant.parse::<EmbeddingKind>().map(drop),
            Stage::Encoder => variant.parse::<EncoderKind>().map(drop),
            Stage::Transform => variant.parse::<TransformKind>().map(drop),
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(Stage::Embedding),
            "encoder" => Ok(Stage::Encoder),
            "transform" => Ok(Stage::Transform),
            _ => Err(Error::Config(format!("unknown stage {s:?}"))),
        }
    }
}

fn default_embeddings() -> Vec<EmbeddingKind> {
    vec![EmbeddingKind::Patch]
}
fn default_encoders() -> Vec<EncoderKind> {
    vec![EncoderKind::Identity]
}
fn default_transforms() -> Vec<TransformKind> {
    vec![TransformKind::None]
}
fn default_kernels() -> Vec<usize> {
    vec![25]
}
fn default_levels() -> Vec<usize> {
    vec![3]
}
fn default_factors() -> Vec<usize> {
    vec![2]
}
fn default_patch_lens() -> Vec<usize> {
    vec![16]
}
fn default_strides() -> Vec<usize> {
    vec![8]
}

/// Candidate values per condition dimension. The list of the stage under
/// evaluation is ignored; the other stage lists are sampled like any other
/// dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EcSpace {
    pub datasets: Vec<String>,
    pub lookbacks: Vec<usize>,
    pub horizons: Vec<usize>,
    pub layers: Vec<usize>,
    pub latent_dims: Vec<usize>,
    pub learning_rates: Vec<f64>,
    #[serde(default = "default_embeddings")]
    pub embeddings: Vec<EmbeddingKind>,
    #[serde(default = "default_encoders")]
    pub encoders: Vec<EncoderKind>,
    #[serde(default = "default_transforms")]
    pub transforms: Vec<TransformKind>,
    #[serde(default = "default_kernels")]
    pub kernels: Vec<usize>,
    #[serde(default = "default_levels")]
    pub levels: Vec<usize>,
    #[serde(default = "default_factors")]
    pub factors: Vec<usize>,
    #[serde(default = "default_patch_lens")]
    pub patch_lens: Vec<usize>,
    #[serde(default = "default_strides")]
    pub strides: Vec<usize>,
    /// Cycle length per dataset; datasets not listed use 24.
    #[serde(default)]
    pub cycle_lens: BTreeMap<String, usize>,
    /// Fixed seed shared by every condition.
    #[serde(default)]
    pub seed: u64,
}

impl EcSpace {
    /// Checks that every list is non-empty and values are in range.
    pub fn validate(&self) -> Result<()> {
        let lens = [
            ("datasets", self.datasets.len()),
            ("lookbacks", self.lookbacks.len()),
            ("horizons", self.horizons.len()),
            ("layers", self.layers.len()),
            ("latent_dims", self.latent_dims.len()),
            ("learning_rates", self.learning_rates.len()),
            ("embeddings", self.embeddings.len()),
            ("encoders", self.encoders.len()),
            ("transforms", self.transforms.len()),
            ("kernels", self.kernels.len()),
            ("levels", self.levels.len()),
            ("factors", self.factors.len()),
            ("patch_lens", self.patch_lens.len()),
            ("strides", self.strides.len()),
        ];
        for (name, len) in lens {
            if len == 0 {
                return Err(Error::Config(format!("space.{name} must not be empty")));
            }
        }
        for (name, list) in [
            ("lookbacks", &self.lookbacks),
            ("horizons", &self.horizons),
            ("layers", &self.layers),
            ("latent_dims", &self.latent_dims),
            ("patch_lens", &self.patch_lens),
            ("strides", &self.strides),
            ("kernels", &self.kernels),
            ("factors", &self.factors),
        ] {
            if list.contains(&0) {
                return Err(Error::Config(format!("space.{name} must hold positive values")));
            }
            let unique: HashSet<_> = list.iter().collect();
            if unique.len() != list.len() {
                return Err(Error::Config(format!("space.{name} has duplicate values")));
            }
        }
        if let Some(lr) = self.learning_rates.iter().find(|&&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::Config(format!("space.learning_rates holds invalid value {lr}")));
        }
        let unique: HashSet<_> = self.datasets.iter().collect();
        if unique.len() != self.datasets.len() {
            return Err(Error::Config("space.datasets has duplicate names".into()));
        }
        Ok(())
    }
}

/// One sampled point of the condition space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationCondition {
    pub dataset: String,
    pub lookback: usize,
    pub horizon: usize,
    pub layers: usize,
    pub latent_dim: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Complementary stages; `None` for the stage under evaluation.
    pub embedding: Option<EmbeddingKind>,
    pub encoder: Option<EncoderKind>,
    pub transform: Option<TransformKind>,
    pub kernel: usize,
    pub levels: usize,
    pub factor: usize,
    pub cycle_len: usize,
    pub patch_len: usize,
    pub stride: usize,
}

impl EvaluationCondition {
    pub fn hash(&self) -> String {
        canonical_hash(self).expect("conditions serialize")
    }

    /// Value of a named field as text, for grouping.
    pub fn field(&self, name: &str) -> Option<String> {
        let v = serde_json::to_value(self).ok()?;
        match v.get(name)? {
            serde_json::Value::String(s) => Some(s.clone()),
            serde_json::Value::Null => Some("-".into()),
            other => Some(other.to_string()),
        }
    }
}

/// Draws `k` conditions, an equal quota per `(dataset, horizon)` stratum,
/// uniformly without replacement from the grid of the remaining dimensions.
/// The result is sorted by stratum and then grid position.
pub fn sample_ecs(space: &EcSpace, stage: Stage, k: usize, seed: u64) -> Result<Vec<EvaluationCondition>> {
    space.validate()?;
    let strata = space.datasets.len() * space.horizons.len();
    if k == 0 || !k.is_multiple_of(strata) {
        return Err(Error::InfeasibleSample(format!(
            "K={k} does not split evenly over {strata} (dataset, horizon) strata"
        )));
    }
    let quota = k / strata;
    let grid = Grid::new(space, stage);
    let card = grid.cardinality();
    if quota > card {
        return Err(Error::InfeasibleSample(format!(
            "quota {quota} per stratum exceeds the stratum grid of {card} conditions"
        )));
    }
    let mut rng = Rng::with_stream(seed, 7);
    let mut out = Vec::with_capacity(k);
    for dataset in &space.datasets {
        for &horizon in &space.horizons {
            let mut picks = rng.sample_indices(card, quota);
            picks.sort_unstable();
            out.extend(picks.into_iter().map(|i| grid.condition(space, dataset, horizon, i)));
        }
    }
    Ok(out)
}

/// Mixed-radix enumeration of one stratum's grid.
struct Grid {
    radices: Vec<usize>,
    stage: Stage,
}

impl Grid {
    fn new(space: &EcSpace, stage: Stage) -> Self {
        let stage_len = |s: Stage, len: usize| if s == stage { 1 } else { len };
        Grid {
            radices: vec![
                space.lookbacks.len(),
                space.layers.len(),
                space.latent_dims.len(),
                space.learning_rates.len(),
                stage_len(Stage::Embedding, space.embeddings.len()),
                stage_len(Stage::Encoder, space.encoders.len()),
                stage_len(Stage::Transform, space.transforms.len()),
                space.kernels.len(),
                space.levels.len(),
                space.factors.len(),
                space.patch_lens.len(),
                space.strides.len(),
            ],
            stage,
        }
    }

    fn cardinality(&self) -> usize {
        self.radices.iter().product()
    }

    fn condition(&self, space: &EcSpace, dataset: &str, horizon: usize, mut index: usize) -> EvaluationCondition {
        let mut digits = vec![0; self.radices.len()];
        for (d, &r) in digits.iter_mut().zip(&self.radices).rev() {
            *d = index % r;
            index /= r;
        }
        let unless = |s: Stage| (s != self.stage).then_some(());
        EvaluationCondition {
            dataset: dataset.to_string(),
            lookback: space.lookbacks[digits[0]],
            horizon,
            layers: space.layers[digits[1]],
            latent_dim: space.latent_dims[digits[2]],
            learning_rate: space.learning_rates[digits[3]],
            seed: space.seed,
            embedding: unless(Stage::Embedding).map(|_| space.embeddings[digits[4]]),
            encoder: unless(Stage::Encoder).map(|_| space.encoders[digits[5]]),
            transform: unless(Stage::Transform).map(|_| space.transforms[digits[6]]),
            kernel: space.kernels[digits[7]],
            levels: space.levels[digits[8]],
            factor: space.factors[digits[9]],
            cycle_len: space.cycle_lens.get(dataset).copied().unwrap_or(24),
            patch_len: space.patch_lens[digits[10]],
            stride: space.strides[digits[11]],
        }
    }
}

/// Fixed training protocol shared by every run of a plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingProtocol {
    #[serde(default = "batch_default")]
    pub batch_size: usize,
    #[serde(default = "epochs_default")]
    pub epochs: usize,
    #[serde(default = "patience_default")]
    pub patience: usize,
    #[serde(default = "dropout_default")]
    pub dropout: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

fn batch_default() -> usize {
    32
}
fn epochs_default() -> usize {
    30
}
fn patience_default() -> usize {
    3
}
fn dropout_default() -> f64 {
    0.1
}

impl Default for TrainingProtocol {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            patience: 3,
            dropout: 0.1,
            max_steps: None,
        }
    }
}

/// A variant paired with a condition, resolved to a concrete pipeline.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub index: usize,
    pub eo: String,
    pub ec: EvaluationCondition,
    pub ec_hash: String,
    pub run_key: String,
    pub run_seed: u64,
}

/// Every variant crossed with one shared condition list.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub stage: Stage,
    pub variants: Vec<String>,
    pub ecs: Vec<EvaluationCondition>,
    pub training: TrainingProtocol,
    pub plan_seed: u64,
    pub hash: String,
}

#[derive(Serialize)]
struct PlanIdentity<'a> {
    stage: Stage,
    variants: &'a [String],
    ec_hashes: Vec<String>,
    training: &'a TrainingProtocol,
    plan_seed: u64,
}

/// Pairs every variant with the same conditions.
pub fn build_plan(
    stage: Stage,
    variants: &[String],
    ecs: Vec<EvaluationCondition>,
    training: TrainingProtocol,
    plan_seed: u64,
) -> Result<ExperimentPlan> {
    if variants.len() < 2 {
        return Err(Error::Plan(format!("need at least two variants, got {}", variants.len())));
    }
    let mut seen = HashSet::new();
    for v in variants {
        stage.check_variant(v)?;
        if !seen.insert(v) {
            return Err(Error::Plan(format!("variant {v:?} listed twice")));
        }
    }
    if ecs.is_empty() {
        return Err(Error::Plan("no evaluation conditions".into()));
    }
    let mut ec_hashes: Vec<String> = ecs.iter().map(EvaluationCondition::hash).collect();
    let mut unique = HashSet::new();
    for (ec, h) in ecs.iter().zip(&ec_hashes) {
        if !unique.insert(h.clone()) {
            return Err(Error::Plan(format!("duplicate evaluation condition {}", canonical_json(ec)?)));
        }
    }
    ec_hashes.sort();
    let hash = canonical_hash(&PlanIdentity {
        stage,
        variants,
        ec_hashes,
        training: &training,
        plan_seed,
    })?;
    Ok(ExperimentPlan {
        stage,
        variants: variants.to_vec(),
        ecs,
        training,
        plan_seed,
        hash,
    })
}

impl ExperimentPlan {
    pub fn len(&self) -> usize {
        self.variants.len() * self.ecs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Runs in variant-major order.
    pub fn runs(&self) -> Vec<RunSpec> {
        let hashes: Vec<String> = self.ecs.iter().map(EvaluationCondition::hash).collect();
        let mut out = Vec::with_capacity(self.len());
        for eo in &self.variants {
            for (ec, h) in self.ecs.iter().zip(&hashes) {
                let key_src = format!("{}|{}|{eo}|{h}", self.hash, self.stage.as_str());
                let seed_src = format!("{}|{}|{eo}|{h}", self.plan_seed, self.stage.as_str());
                let digest = Sha256::digest(seed_src.as_bytes());
                out.push(RunSpec {
                    index: out.len(),
                    eo: eo.clone(),
                    ec: ec.clone(),
                    ec_hash: h.clone(),
                    run_key: sha256_hex(key_src.as_bytes())[..16].to_string(),
                    run_seed: u64::from_le_bytes(digest[..8].try_into().unwrap()),
                });
            }
        }
        out
    }

    /// The pipeline a run trains, for a dataset with `variates` series.
    pub fn pipeline_config(&self, eo: &str, ec: &EvaluationCondition, variates: usize) -> Result<PipelineConfig> {
        let pick = |stage: Stage, ec_value: Option<String>| -> Result<String> {
            if stage == self.stage {
                Ok(eo.to_string())
            } else {
                ec_value.ok_or_else(|| Error::Plan(format!("condition lacks a {} assignment", stage.as_str())))
            }
        };
        let embedding: EmbeddingKind = pick(Stage::Embedding, ec.embedding.map(|k| k.as_str().into()))?.parse()?;
        let encoder: EncoderKind = pick(Stage::Encoder, ec.encoder.map(|k| k.as_str().into()))?.parse()?;
        let transform: TransformKind = pick(Stage::Transform, ec.transform.map(|k| k.as_str().into()))?.parse()?;
        let mut emb = EmbeddingSpec::new(embedding, ec.latent_dim);
        if embedding == EmbeddingKind::Patch {
            emb.patch_len = Some(ec.patch_len);
            emb.stride = Some(ec.stride);
        }
        let mut tf = TransformSpec::new(transform);
        tf.kernel = ec.kernel;
        tf.levels = ec.levels;
        tf.factor = ec.factor;
        tf.cycle_len = ec.cycle_len;
        Ok(PipelineConfig {
            transform: tf,
            embedding: emb,
            encoder: EncoderSpec::new(encoder, ec.layers).with_dropout(self.training.dropout),
            lookback: ec.lookback,
            horizon: ec.horizon,
            variates,
        })
    }
}

/// Condition dimensions with no effect on a run's pipeline.
pub fn inert_dimensions(cfg: &PipelineConfig) -> Vec<String> {
    let mut out = Vec::new();
    if cfg.encoder.kind == EncoderKind::Identity {
        out.push("layers");
    }
    if !cfg.embedding.kind.uses_latent_dim() {
        out.push("latent_dim");
    }
    if cfg.embedding.kind != EmbeddingKind::Patch {
        out.extend(["patch_len", "stride"]);
    }
    if cfg.transform.kind != TransformKind::TrendSeasonal {
        out.push("kernel");
    }
    if cfg.transform.kind != TransformKind::MultiScale {
        out.extend(["levels", "factor"]);
    }
    if cfg.transform.kind != TransformKind::Cycle {
        out.push("cycle_len");
    }
    out.into_iter().map(String::from).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Diverged,
    Failed,
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub plan_hash: String,
    pub run_key: String,
    pub stage: Stage,
    pub eo: String,
    pub ec: EvaluationCondition,
    pub ec_hash: String,
    pub status: RunStatus,
    pub test_mse: Option<f64>,
    pub test_mae: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stopped_epoch: Option<usize>,
    pub steps: Option<usize>,
    pub val_curve: Vec<f64>,
    pub wall_time: f64,
    pub run_seed: u64,
    pub attention_axis: Option<String>,
    pub inert: Vec<String>,
    pub reason: Option<String>,
}

impl RunRecord {
    /// Test MSE of a successful run.
    pub fn loss(&self) -> Option<f64> {
        match self.status {
            RunStatus::Ok => self.test_mse,
            _ => None,
        }
    }
}

/// Standardized datasets by name.
pub type Catalog = HashMap<String, Arc<SeriesDataset>>;

/// Assembles, trains and evaluates one run. Failures become records.
pub fn execute_run(plan: &ExperimentPlan, run: &RunSpec, catalog: &Catalog) -> RunRecord {
    let started = std::time::Instant::now();
    let mut rec = RunRecord {
        plan_hash: plan.hash.clone(),
        run_key: run.run_key.clone(),
        stage: plan.stage,
        eo: run.eo.clone(),
        ec: run.ec.clone(),
        ec_hash: run.ec_hash.clone(),
        status: RunStatus::Failed,
        test_mse: None,
        test_mae: None,
        best_epoch: None,
        stopped_epoch: None,
        steps: None,
        val_curve: vec![],
        wall_time: 0.0,
        run_seed: run.run_seed,
        attention_axis: None,
        inert: vec![],
        reason: None,
    };
    let result = (|| -> Result<()> {
        let ds = catalog
            .get(&run.ec.dataset)
            .ok_or_else(|| Error::Config(format!("dataset {:?} is not loaded", run.ec.dataset)))?;
        let cfg = plan.pipeline_config(&run.eo, &run.ec, ds.variates())?;
        rec.inert = inert_dimensions(&cfg);
        let mut model = Model::assemble(&cfg, run.run_seed)?;
        rec.attention_axis = Some(model.attention_axis().as_str().to_string());
        let settings = TrainSettings {
            learning_rate: run.ec.learning_rate,
            batch_size: plan.training.batch_size,
            epochs: plan.training.epochs,
            patience: plan.training.patience,
            seed: run.run_seed,
            max_steps: plan.training.max_steps,
        };
        let out = train(&mut model, ds, &settings)?;
        rec.status = RunStatus::Ok;
        rec.test_mse = Some(out.test_mse);
        rec.test_mae = Some(out.test_mae);
        rec.best_epoch = Some(out.best_epoch);
        rec.stopped_epoch = Some(out.stopped_epoch);
        rec.steps = Some(out.steps);
        rec.val_curve = out.val_curve;
        Ok(())
    })();
    if let Err(e) = result {
        rec.status = if matches!(e, Error::Diverged(_)) {
            RunStatus::Diverged
        } else {
            RunStatus::Failed
        };
        rec.reason = Some(e.to_string());
    }
    rec.wall_time = started.elapsed().as_secs_f64();
    rec
}

/// Reads a run log. A truncated final line (an interrupted append) is
/// ignored; any other malformed line is an error.
pub fn read_log(path: &Path) -> Result<Vec<RunRecord>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RunRecord>(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() && !complete => break,
            Err(e) => {
                return Err(Error::Format(format!("{} line {}: {e}", path.display(), i + 1)));
            }
        }
    }
    Ok(out)
}

/// Drops a trailing partial line so that appends start on a fresh line.
fn truncate_partial_tail(path: &Path) -> Result<()> {
    let mut f = OpenOptions::new().read(true).write(true).open(path)?;
    let mut reader = BufReader::new(&mut f);
    let mut keep = 0u64;
    let mut pos = 0u64;
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        pos += n as u64;
        if buf.ends_with(b"\n") {
            keep = pos;
        }
    }
    if keep != pos {
        f.set_len(keep)?;
        f.seek(SeekFrom::End(0))?;
    }
    Ok(())
}

/// Progress callback: `(finished, total, record)`.
pub type Progress<'a> = &'a (dyn Fn(usize, usize, &RunRecord) + Sync);

/// Executes every run of `plan` not already recorded in `log`, on a pool of
/// `parallelism` workers. Each record is appended to the log as one line by
/// a single writer as soon as its run finishes. Returns all records of the
/// plan (previously logged and new) in plan order.
pub fn execute(
    plan: &ExperimentPlan,
    catalog: &Catalog,
    parallelism: usize,
    log: Option<&Path>,
    progress: Option<Progress<'_>>,
) -> Result<Vec<RunRecord>> {
    let runs = plan.runs();
    let mut done: HashMap<String, RunRecord> = HashMap::new();
    if let Some(path) = log {
        if path.exists() {
            for r in read_log(path)? {
                if r.plan_hash != plan.hash {
                    return Err(Error::Plan(format!(
                        "{} holds runs of plan {}, not {}",
                        path.display(),
                        r.plan_hash,
                        plan.hash
                    )));
                }
                done.insert(r.run_key.clone(), r);
            }
            truncate_partial_tail(path)?;
        }
    }
    let pending: Vec<&RunSpec> = runs.iter().filter(|r| !done.contains_key(&r.run_key)).collect();
    let total = pending.len();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let (tx, rx) = mpsc::channel::<RunRecord>();
    let writer = log
        .map(|p| OpenOptions::new().create(true).append(true).open(p))
        .transpose()?;
    let new_records = std::thread::scope(|scope| -> Result<Vec<RunRecord>> {
        let handle = scope.spawn(move || -> Result<Vec<RunRecord>> {
            let mut writer = writer;
            let mut got = Vec::new();
            for rec in rx {
                if let Some(f) = writer.as_mut() {
                    let mut line = serde_json::to_string(&rec)?;
                    line.push('\n');
                    f.write_all(line.as_bytes())?;
                    f.flush()?;
                }
                if let Some(cb) = progress {
                    cb(got.len() + 1, total, &rec);
                }
                got.push(rec);
            }
            Ok(got)
        });
        pool.install(|| {
            pending.par_iter().for_each_with(tx, |tx, run| {
                let rec = execute_run(plan, run, catalog);
                let _ = tx.send(rec);
            });
        });
        handle.join().expect("log writer thread panicked")
    })?;
    for r in new_records {
        done.insert(r.run_key.clone(), r);
    }
    Ok(runs.iter().filter_map(|r| done.remove(&r.run_key)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> EcSpace {
        EcSpace {
            datasets: vec!["a".into(), "b".into()],
            lookbacks: vec![96, 192, 336, 512],
            horizons: vec![96, 192, 336, 720],
            layers: vec![1, 2, 3],
            latent_dims: vec![64, 128, 256, 512],
            learning_rates: vec![1e-3, 1e-4],
            embeddings: default_embeddings(),
            encoders: vec![EncoderKind::Transformer, EncoderKind::Mlp],
            transforms: default_transforms(),
            kernels: default_kernels(),
            levels: default_levels(),
            factors: default_factors(),
            patch_lens: default_patch_lens(),
            strides: default_strides(),
            cycle_lens: BTreeMap::new(),
            seed: 2025,
        }
    }

    fn variants(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn one_per_stratum() {
        let ecs = sample_ecs(&space(), Stage::Encoder, 8, 1).unwrap();
        assert_eq!(ecs.len(), 8);
        let strata: HashSet<_> = ecs.iter().map(|e| (e.dataset.clone(), e.horizon)).collect();
        assert_eq!(strata.len(), 8);
        assert!(ecs.iter().all(|e| e.encoder.is_none() && e.embedding == Some(EmbeddingKind::Patch)));
    }

    #[test]
    fn full_grid_is_exhaustive() {
        let mut s = space();
        s.datasets.truncate(1);
        s.horizons.truncate(1);
        // stage list is excluded: 4·3·4·2 = 96 per stratum
        let ecs = sample_ecs(&s, Stage::Encoder, 96, 3).unwrap();
        let hashes: HashSet<_> = ecs.iter().map(EvaluationCondition::hash).collect();
        assert_eq!(hashes.len(), 96);
        let err = sample_ecs(&s, Stage::Encoder, 97, 3).unwrap_err();
        assert!(matches!(err, Error::InfeasibleSample(_)));
        let err = sample_ecs(&space(), Stage::Encoder, 8 * 97, 3).unwrap_err().to_string();
        assert!(err.contains("96"), "{err}");
    }

    #[test]
    fn sampling_is_seeded_and_quota_exact() {
        let a = sample_ecs(&space(), Stage::Encoder, 48, 5).unwrap();
        let b = sample_ecs(&space(), Stage::Encoder, 48, 5).unwrap();
        let c = sample_ecs(&space(), Stage::Encoder, 48, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for ecs in [&a, &c] {
            let mut counts: HashMap<(String, usize), usize> = HashMap::new();
            for e in ecs {
                *counts.entry((e.dataset.clone(), e.horizon)).or_default() += 1;
            }
            assert_eq!(counts.len(), 8);
            assert!(counts.values().all(|&n| n == 6));
        }
        assert!(matches!(sample_ecs(&space(), Stage::Encoder, 12, 1), Err(Error::InfeasibleSample(_))));
    }

    #[test]
    fn plan_pairs_every_variant_with_the_same_conditions() {
        let ecs = sample_ecs(&space(), Stage::Encoder, 16, 1).unwrap();
        let plan = build_plan(
            Stage::Encoder,
            &variants(&["identity", "transformer", "mlp"]),
            ecs,
            TrainingProtocol::default(),
            0,
        )
        .unwrap();
        assert_eq!(plan.len(), 48);
        let runs = plan.runs();
        let mut by_eo: HashMap<&str, Vec<&str>> = HashMap::new();
        for r in &runs {
            by_eo.entry(&r.eo).or_default().push(&r.ec_hash);
        }
        let mut sets: Vec<Vec<&str>> = by_eo.into_values().collect();
        for s in &mut sets {
            s.sort();
        }
        assert!(sets.windows(2).all(|w| w[0] == w[1]));
        let keys: HashSet<_> = runs.iter().map(|r| &r.run_key).collect();
        assert_eq!(keys.len(), 48);
    }

    #[test]
    fn plan_hash_tracks_conditions_and_variants() {
        let ecs = sample_ecs(&space(), Stage::Encoder, 8, 1).unwrap();
        let v = variants(&["identity", "transformer"]);
        let tp = TrainingProtocol::default();
        let base = build_plan(Stage::Encoder, &v, ecs.clone(), tp.clone(), 0).unwrap().hash;
        let mut reversed = ecs.clone();
        reversed.reverse();
        assert_eq!(build_plan(Stage::Encoder, &v, reversed, tp.clone(), 0).unwrap().hash, base);
        let mut changed = ecs.clone();
        changed[0].learning_rate = 0.5;
        assert_ne!(build_plan(Stage::Encoder, &v, changed, tp.clone(), 0).unwrap().hash, base);
        let v2 = variants(&["identity", "mlp"]);
        assert_ne!(build_plan(Stage::Encoder, &v2, ecs.clone(), tp.clone(), 0).unwrap().hash, base);

        let mut dup = ecs.clone();
        dup.push(ecs[0].clone());
        assert!(matches!(build_plan(Stage::Encoder, &v, dup, tp.clone(), 0), Err(Error::Plan(_))));
        assert!(matches!(
            build_plan(Stage::Encoder, &variants(&["identity"]), ecs.clone(), tp.clone(), 0),
            Err(Error::Plan(_))
        ));
        assert!(build_plan(Stage::Encoder, &variants(&["identity", "lstm"]), ecs, tp, 0).is_err());
    }

    #[test]
    fn single_condition_two_variants() {
        let ec = sample_ecs(&space(), Stage::Encoder, 8, 1).unwrap().remove(0);
        let plan = build_plan(
            Stage::Encoder,
            &variants(&["identity", "spectral"]),
            vec![ec.clone()],
            TrainingProtocol::default(),
            0,
        )
        .unwrap();
        let runs = plan.runs();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].ec, runs[1].ec);
        assert_ne!(runs[0].run_seed, runs[1].run_seed);
    }

    #[test]
    fn inert_dimensions_follow_the_pipeline() {
        let ec = sample_ecs(&space(), Stage::Encoder, 8, 1).unwrap().remove(0);
        let plan = build_plan(
            Stage::Encoder,
            &variants(&["identity", "transformer"]),
            vec![ec.clone()],
            TrainingProtocol::default(),
            0,
        )
        .unwrap();
        let id = inert_dimensions(&plan.pipeline_config("identity", &ec, 3).unwrap());
        assert!(id.contains(&"layers".to_string()));
        assert!(!id.contains(&"patch_len".to_string()));
        let tr = inert_dimensions(&plan.pipeline_config("transformer", &ec, 3).unwrap());
        assert!(!tr.contains(&"layers".to_string()));
        assert!(tr.contains(&"kernel".to_string()));
    }

    #[test]
    fn field_lookup_for_grouping() {
        let ec = sample_ecs(&space(), Stage::Encoder, 8, 1).unwrap().remove(0);
        assert_eq!(ec.field("dataset").unwrap(), "a");
        assert_eq!(ec.field("embedding").unwrap(), "patch");
        assert_eq!(ec.field("encoder").unwrap(), "-");
        assert_eq!(ec.field("horizon").unwrap(), "96");
        assert!(ec.field("nope").is_none());
    }

    #[test]
    fn partial_log_tail_is_ignored_and_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.jsonl");
        let ec = sample_ecs(&space(), Stage::Encoder, 8, 1).unwrap().remove(0);
        let rec = RunRecord {
            plan_hash: "p".into(),
            run_key: "k".into(),
            stage: Stage::Encoder,
            eo: "identity".into(),
            ec_hash: ec.hash(),
            ec,
            status: RunStatus::Ok,
            test_mse: Some(0.5),
            test_mae: Some(0.6),
            best_epoch: Some(1),
            stopped_epoch: Some(2),
            steps: Some(3),
            val_curve: vec![0.4],
            wall_time: 0.1,
            run_seed: 9,
            attention_axis: Some("L".into()),
            inert: vec![],
            reason: None,
        };
        let line = serde_json::to_string(&rec).unwrap();
        std::fs::write(&path, format!("{line}\n{}", &line[..line.len() / 2])).unwrap();
        assert_eq!(read_log(&path).unwrap(), vec![rec.clone()]);
        truncate_partial_tail(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), format!("{line}\n"));

        std::fs::write(&path, format!("{{broken\n{line}\n")).unwrap();
        assert!(matches!(read_log(&path), Err(Error::Format(_))));
    }
}
