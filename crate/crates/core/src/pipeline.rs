//! Pipeline assembly, training and evaluation.
//!
//! A model is `RevIN⁻¹ ∘ prior⁻¹ ∘ Σ_branches(decoder ∘ encoder ∘ embedding) ∘ prior ∘ RevIN`,
//! where the structural prior splits the normalized input into one or more
//! branches (one for none/cycle, seasonal and trend for the decomposition, one
//! per scale for multi-scale).

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::{iter_windows, SeriesDataset, Split};
use crate::decoder::{Decoder, FlattenPolicy};
use crate::embeddings::{Embedding, EmbeddingKind, EmbeddingSpec};
use crate::encoders::{Encoder, EncoderSpec, TokenAxis};
use crate::error::{Error, Result};
use crate::layers::{ForwardCtx, ParamBuilder};
use crate::numcore::{adam_step, AdamConfig, AdamState, Graph, ParamId, ParamStore, Rng, Tensor, Var};
use crate::transforms::{
    cycle_forward, cycle_invert, multiscale_graph, multiscale_lengths, revin_forward, revin_invert,
    trend_seasonal_graph, CycleBuffer, RevinAffine, TransformKind, TransformSpec,
};

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub transform: TransformSpec,
    pub embedding: EmbeddingSpec,
    pub encoder: EncoderSpec,
    pub lookback: usize,
    pub horizon: usize,
    pub variates: usize,
}

#[derive(Clone, Debug)]
struct Branch {
    lookback: usize,
    embedding: Embedding,
    encoder: Encoder,
    decoder: Decoder,
}

/// An assembled forecaster `(B, N, T, 1) → (B, N, P, 1)` with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: PipelineConfig,
    pub params: ParamStore,
    revin_affine: Option<(ParamId, ParamId)>,
    cycle: Option<CycleBuffer>,
    branches: Vec<Branch>,
}

fn stage_err(pair: &str, e: Error) -> Error {
    match e {
        Error::Parameter(m) | Error::Dimension(m) | Error::Config(m) => Error::Config(format!("{pair}: {m}")),
        other => other,
    }
}

impl Model {
    /// Builds every stage, registering parameters in a fixed order (transform,
    /// then embedding, encoder and decoder per branch), and dry-runs a zero
    /// batch to validate the shape contract.
    pub fn assemble(cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        let (t, p, n) = (cfg.lookback, cfg.horizon, cfg.variates);
        if t == 0 || p == 0 || n == 0 {
            return Err(Error::Config(format!(
                "lookback {t}, horizon {p} and variates {n} must all be positive"
            )));
        }
        cfg.embedding
            .validate()
            .map_err(|e| stage_err(&format!("embedding {}", cfg.embedding.kind.as_str()), e))?;
        let mut store = ParamStore::new();
        let mut rng = Rng::with_stream(seed, INIT_STREAM);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let tf = &cfg.transform;
        let revin_affine = tf.revin_affine.then(|| {
            let mut s = pb.scoped("revin");
            (
                s.constant("gamma", Tensor::full(&[1, n, 1, 1], 1.0)),
                s.constant("beta", Tensor::zeros(&[1, n, 1, 1])),
            )
        });
        let prior_pair = format!("transform {} / lookback {t}", tf.kind.as_str());
        let lookbacks = match tf.kind {
            TransformKind::None => vec![t],
            TransformKind::Cycle => {
                if tf.cycle_len == 0 {
                    return Err(Error::Config(format!("{prior_pair}: cycle length must be positive")));
                }
                vec![t]
            }
            TransformKind::TrendSeasonal => {
                crate::transforms::moving_average_matrix(t, tf.kernel).map_err(|e| stage_err(&prior_pair, e))?;
                vec![t, t]
            }
            TransformKind::MultiScale => {
                multiscale_lengths(t, tf.levels, tf.factor).map_err(|e| stage_err(&prior_pair, e))?
            }
        };
        let cycle = (tf.kind == TransformKind::Cycle).then(|| CycleBuffer {
            param: pb.constant("cycle.q", Tensor::zeros(&[tf.cycle_len, n])),
            cycle_len: tf.cycle_len,
            variates: n,
        });

        let emb_name = format!("embedding {}", cfg.embedding.kind.as_str());
        let enc_name = format!("encoder {}", cfg.encoder.kind.as_str());
        let mut branches = Vec::with_capacity(lookbacks.len());
        for (i, &lb) in lookbacks.iter().enumerate() {
            let mut s = pb.scoped(&format!("branch{i}"));
            let embedding = Embedding::build(&cfg.embedding, lb, &mut s)
                .map_err(|e| stage_err(&format!("{prior_pair} / {emb_name}"), e))?;
            let dims = cfg.embedding.output_dims(n, lb);
            let encoder = Encoder::build(&cfg.encoder, dims, &mut s)
                .map_err(|e| stage_err(&format!("{emb_name} (C, L, D) = {dims:?} / {enc_name}"), e))?;
            let feature_slots = cfg.embedding.kind == EmbeddingKind::ChannelAsFeature;
            let policy = FlattenPolicy::resolve(dims, n, feature_slots)
                .map_err(|e| stage_err(&format!("{enc_name} / decoder"), e))?;
            let decoder = Decoder::build(dims, n, p, policy, &mut s.scoped("decoder"))
                .map_err(|e| stage_err(&format!("{enc_name} / decoder"), e))?;
            branches.push(Branch {
                lookback: lb,
                embedding,
                encoder,
                decoder,
            });
        }
        let model = Model {
            cfg: cfg.clone(),
            params: store,
            revin_affine,
            cycle,
            branches,
        };
        let y = model
            .predict(&Tensor::zeros(&[1, n, t, 1]), &[0])
            .map_err(|e| stage_err("dry run", e))?;
        if y.shape() != [1, n, p, 1] || !y.all_finite() {
            return Err(Error::Config(format!(
                "dry run produced {:?}, expected finite (1, {n}, {p}, 1)",
                y.shape()
            )));
        }
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Token axis used by the encoder of the first branch.
    pub fn attention_axis(&self) -> TokenAxis {
        self.branches[0].encoder.axis
    }

    pub fn branch_lookbacks(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.lookback).collect()
    }

    /// Records the forward pass on `g`. `starts` are absolute window starts,
    /// used for cycle phases.
    pub fn forward(&self, g: &mut Graph, x: Var, starts: &[usize], ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        self.forward_with(g, &self.params, x, starts, ctx)
    }

    /// [`Model::forward`] reading parameter values from `params`, which must
    /// share this model's layout (e.g. a perturbed copy of `self.params`).
    pub fn forward_with(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        x: Var,
        starts: &[usize],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let tf = &self.cfg.transform;
        let affine = self.revin_affine.map(|(gamma, beta)| RevinAffine {
            gamma: g.param(params, gamma),
            beta: g.param(params, beta),
        });
        let (xn, state) = revin_forward(g, x, tf.revin_eps, affine)?;
        let q = self.cycle.map(|c| g.param(params, c.param));
        let inputs = match tf.kind {
            TransformKind::None => vec![xn],
            TransformKind::Cycle => vec![cycle_forward(g, xn, q.unwrap(), tf.cycle_len, starts)?],
            TransformKind::TrendSeasonal => {
                let (trend, seasonal) = trend_seasonal_graph(g, xn, tf.kernel)?;
                vec![seasonal, trend]
            }
            TransformKind::MultiScale => multiscale_graph(g, xn, tf.levels, tf.factor)?,
        };
        let mut out: Option<Var> = None;
        for (branch, input) in self.branches.iter().zip(inputs) {
            let z = branch.embedding.forward(g, params, input)?;
            let z = branch.encoder.forward(g, params, z, ctx)?;
            let y = branch.decoder.forward(g, params, z)?;
            out = Some(match out {
                Some(acc) => g.add(acc, y)?,
                None => y,
            });
        }
        let mut y = out.expect("at least one branch");
        if let Some(q) = q {
            y = cycle_invert(g, y, q, tf.cycle_len, starts, self.cfg.lookback)?;
        }
        revin_invert(g, y, &state, affine)
    }

    /// Inference-mode forecast for a `(B, N, T, 1)` batch.
    pub fn predict(&self, inputs: &Tensor, starts: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut rng = Rng::new(0);
        let mut ctx = ForwardCtx {
            training: false,
            rng: &mut rng,
        };
        let x = g.constant(inputs.clone());
        let y = self.forward(&mut g, x, starts, &mut ctx)?;
        Ok(g.value(y).clone())
    }
}

/// Fixed training protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Optional cap on optimizer steps; the epoch in progress is validated
    /// when it is reached.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 30,
            patience: 3,
            seed: 0,
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Mean training loss per epoch.
    pub train_curve: Vec<f64>,
    pub val_curve: Vec<f64>,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub steps: usize,
    pub test_mse: f64,
    pub test_mae: f64,
    pub wall_time: f64,
}

/// Running sums for element-averaged MSE and MAE.
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricAccumulator {
    sq: f64,
    ab: f64,
    count: usize,
}

impl MetricAccumulator {
    pub fn add(&mut self, pred: &Tensor, target: &Tensor) -> Result<()> {
        if pred.shape() != target.shape() {
            return Err(Error::Dimension(format!(
                "prediction {:?} vs target {:?}",
                pred.shape(),
                target.shape()
            )));
        }
        for (a, b) in pred.data().iter().zip(target.data()) {
            let d = a - b;
            self.sq += d * d;
            self.ab += d.abs();
        }
        self.count += pred.len();
        Ok(())
    }

    /// `(MSE, MAE)`; errors when nothing was added or a sum is not finite.
    pub fn finish(&self) -> Result<(f64, f64)> {
        if self.count == 0 {
            return Err(Error::InsufficientData("no predictions to score".into()));
        }
        let (mse, mae) = (self.sq / self.count as f64, self.ab / self.count as f64);
        if !mse.is_finite() || !mae.is_finite() {
            return Err(Error::Diverged("non-finite evaluation loss".into()));
        }
        Ok((mse, mae))
    }
}

/// Sample-weighted MSE and MAE over every window of `split`, averaged over
/// variates and horizon steps.
pub fn evaluate(model: &Model, ds: &SeriesDataset, split: Split, batch_size: usize) -> Result<(f64, f64)> {
    let (t, p) = (model.cfg.lookback, model.cfg.horizon);
    let mut acc = MetricAccumulator::default();
    for batch in iter_windows(ds, split, t, p, batch_size, None)? {
        let pred = model.predict(&batch.inputs, &batch.starts)?;
        acc.add(&pred, &batch.targets)?;
    }
    acc.finish()
}

/// Trains with Adam at a constant learning rate, validating after every epoch
/// and stopping after `patience` epochs without improvement. The best
/// validation parameters are restored before the test metrics are computed.
pub fn train(model: &mut Model, ds: &SeriesDataset, settings: &TrainSettings) -> Result<TrainOutcome> {
    let started = Instant::now();
    if ds.variates() != model.cfg.variates {
        return Err(Error::Config(format!(
            "model expects {} variates, dataset {} has {}",
            model.cfg.variates,
            ds.name,
            ds.variates()
        )));
    }
    let (t, p) = (model.cfg.lookback, model.cfg.horizon);
    // fail before training when any split is too short
    for split in [Split::Train, Split::Val, Split::Test] {
        iter_windows(ds, split, t, p, settings.batch_size, None)?;
    }
    let mut shuffle = Rng::with_stream(settings.seed, SHUFFLE_STREAM);
    let mut dropout = Rng::with_stream(settings.seed, DROPOUT_STREAM);
    let mut adam = AdamState::new(model.params.values());
    let adam_cfg = AdamConfig::default();

    let mut train_curve = Vec::new();
    let mut val_curve = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut stale = 0;
    let mut steps = 0;
    for epoch in 1..=settings.epochs {
        let mut total = 0.0;
        let mut seen = 0usize;
        for batch in iter_windows(ds, Split::Train, t, p, settings.batch_size, Some(&mut shuffle))? {
            let mut g = Graph::new();
            let mut ctx = ForwardCtx {
                training: true,
                rng: &mut dropout,
            };
            let x = g.constant(batch.inputs);
            let y = model.forward(&mut g, x, &batch.starts, &mut ctx)?;
            let target = g.constant(batch.targets);
            let loss = g.mse_loss(y, target)?;
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::Diverged(format!("non-finite training loss at epoch {epoch}, step {steps}")));
            }
            g.backward(loss)?;
            let grads = g.param_grads(&model.params);
            adam_step(model.params.values_mut(), &grads, &mut adam, settings.learning_rate, adam_cfg)?;
            total += lv * batch.starts.len() as f64;
            seen += batch.starts.len();
            steps += 1;
            if settings.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
        }
        train_curve.push(total / seen as f64);
        let (val, _) = evaluate(model, ds, Split::Val, settings.batch_size)?;
        val_curve.push(val);
        if val < best.0 {
            best = (val, epoch, model.params.clone());
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= settings.patience || settings.max_steps.is_some_and(|m| steps >= m) {
            break;
        }
    }
    let stopped_epoch = val_curve.len();
    let (_, best_epoch, params) = best;
    if best_epoch > 0 {
        model.params = params;
    }
    let (test_mse, test_mae) = evaluate(model, ds, Split::Test, settings.batch_size)?;
    Ok(TrainOutcome {
        train_curve,
        val_curve,
        best_epoch,
        stopped_epoch,
        steps,
        test_mse,
        test_mae,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{apply_split, standardize, SplitPolicy};
    use crate::embeddings::EmbeddingKind;
    use crate::encoders::EncoderKind;

    fn cfg(t: TransformKind, e: EmbeddingKind, enc: EncoderKind, lookback: usize, horizon: usize, n: usize) -> PipelineConfig {
        PipelineConfig {
            transform: TransformSpec::new(t),
            embedding: EmbeddingSpec::new(e, 8),
            encoder: EncoderSpec::new(enc, 1),
            lookback,
            horizon,
            variates: n,
        }
    }

    fn periodic(len: usize, n: usize, w: usize, noise: f64, seed: u64) -> SeriesDataset {
        let mut rng = Rng::new(seed);
        let mut values = Vec::with_capacity(len * n);
        for t in 0..len {
            for j in 0..n {
                let phase = 2.0 * std::f64::consts::PI * t as f64 / w as f64;
                let s = (phase + j as f64).sin() + 0.5 * (2.0 * phase).cos();
                values.push(s + noise * rng.normal());
            }
        }
        let ds = SeriesDataset::new("periodic", values, n).unwrap();
        apply_split(ds, SplitPolicy::Ratio { train: 0.7, val: 0.1 }).unwrap()
    }

    #[test]
    fn identity_pipeline_param_count_is_variate_independent() {
        for n in [1, 7, 21] {
            let m = Model::assemble(
                &cfg(TransformKind::None, EmbeddingKind::Identity, EncoderKind::Identity, 96, 24, n),
                0,
            )
            .unwrap();
            assert_eq!(m.param_count(), 96 * 24 + 24);
        }
    }

    #[test]
    fn identity_pipeline_is_a_linear_map_in_normalized_space() {
        let c = cfg(TransformKind::None, EmbeddingKind::Identity, EncoderKind::Identity, 12, 4, 2);
        let m = Model::assemble(&c, 3).unwrap();
        let mut rng = Rng::new(1);
        let x = Tensor::from_fn(&[1, 2, 12, 1], |_| rng.uniform_range(-2.0, 2.0));
        let y = m.predict(&x, &[0]).unwrap();
        let branch = &m.branches[0];
        let w = m.params.get(branch.decoder.head().weight);
        let b = m.params.get(branch.decoder.head().bias);
        for j in 0..2 {
            let win: Vec<f64> = (0..12).map(|t| x.at4(0, j, t, 0)).collect();
            let mean = win.iter().sum::<f64>() / 12.0;
            let std = (win.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 12.0 + 1e-5).sqrt();
            for p in 0..4 {
                let mut acc = b.data()[p];
                for t in 0..12 {
                    acc += (win[t] - mean) / std * w.data()[t * 4 + p];
                }
                assert!((y.at4(0, j, p, 0) - (acc * std + mean)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stage_incompatibility_names_the_pair() {
        let mut c = cfg(TransformKind::None, EmbeddingKind::Patch, EncoderKind::Transformer, 96, 24, 7);
        c.embedding.latent_dim = Some(12);
        c.encoder.heads = Some(5);
        let err = Model::assemble(&c, 0).unwrap_err().to_string();
        assert!(err.contains("embedding patch") && err.contains("encoder transformer"), "{err}");

        let mut c = cfg(TransformKind::TrendSeasonal, EmbeddingKind::Point, EncoderKind::Mlp, 8, 4, 1);
        c.transform.kernel = 25;
        let err = Model::assemble(&c, 0).unwrap_err().to_string();
        assert!(err.contains("transform trend_seasonal"), "{err}");
    }

    #[test]
    fn branch_layout_follows_the_prior() {
        let lbs = |t| {
            Model::assemble(&cfg(t, EmbeddingKind::Patch, EncoderKind::Mlp, 96, 24, 3), 0)
                .unwrap()
                .branch_lookbacks()
        };
        assert_eq!(lbs(TransformKind::None), vec![96]);
        assert_eq!(lbs(TransformKind::Cycle), vec![96]);
        assert_eq!(lbs(TransformKind::TrendSeasonal), vec![96, 96]);
        assert_eq!(lbs(TransformKind::MultiScale), vec![96, 48, 24, 12]);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = periodic(500, 2, 12, 0.1, 4);
        let (ds, _) = standardize(&ds).unwrap();
        let c = cfg(TransformKind::None, EmbeddingKind::Patch, EncoderKind::Transformer, 24, 8, 2);
        let mut m = Model::assemble(&c, 5).unwrap();
        let before = m.params.clone();
        let init = evaluate(&m, &ds, Split::Test, 32).unwrap();
        let s = TrainSettings {
            learning_rate: 0.0,
            epochs: 2,
            ..TrainSettings::default()
        };
        let out = train(&mut m, &ds, &s).unwrap();
        assert_eq!(m.params.values(), before.values());
        assert_eq!((out.test_mse, out.test_mae), init);
    }

    #[test]
    fn training_is_deterministic_and_early_stopping_is_consistent() {
        let ds = periodic(400, 2, 12, 0.2, 6);
        let (ds, _) = standardize(&ds).unwrap();
        let mut c = cfg(TransformKind::Cycle, EmbeddingKind::Point, EncoderKind::Mlp, 24, 8, 2);
        c.transform.cycle_len = 12;
        c.encoder.dropout = 0.1;
        let s = TrainSettings {
            epochs: 4,
            seed: 9,
            ..TrainSettings::default()
        };
        let run = || {
            let mut m = Model::assemble(&c, 9).unwrap();
            train(&mut m, &ds, &s).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.val_curve, b.val_curve);
        assert_eq!(a.train_curve, b.train_curve);
        assert_eq!(a.test_mse, b.test_mse);
        assert!(a.best_epoch >= 1 && a.best_epoch <= a.stopped_epoch && a.stopped_epoch <= 4);
        assert!(a.test_mae * a.test_mae <= a.test_mse);
    }

    #[test]
    fn undersized_split_fails_before_training() {
        let ds = periodic(100, 1, 12, 0.0, 1);
        let mut m = Model::assemble(&cfg(TransformKind::None, EmbeddingKind::Identity, EncoderKind::Identity, 24, 8, 1), 0).unwrap();
        assert!(matches!(train(&mut m, &ds, &TrainSettings::default()), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn shifted_predictions_score_one() {
        let ds = periodic(200, 2, 12, 0.3, 2);
        let mut acc = MetricAccumulator::default();
        for batch in iter_windows(&ds, Split::Test, 12, 4, 5, None).unwrap() {
            acc.add(&batch.targets.map(|v| v + 1.0), &batch.targets).unwrap();
        }
        assert_eq!(acc.finish().unwrap(), (1.0, 1.0));
        assert!(MetricAccumulator::default().finish().is_err());
    }

    #[test]
    fn mean_forecast_metrics() {
        let ds = periodic(200, 2, 12, 0.3, 2);
        let c = cfg(TransformKind::None, EmbeddingKind::Identity, EncoderKind::Identity, 12, 4, 2);
        let mut m = Model::assemble(&c, 0).unwrap();
        // zero head: every forecast is the window mean
        let head = *m.branches[0].decoder.head();
        *m.params.get_mut(head.weight) = Tensor::zeros(&[12, 4]);
        *m.params.get_mut(head.bias) = Tensor::zeros(&[4]);
        let (mse, mae) = evaluate(&m, &ds, Split::Test, 7).unwrap();
        let mut sq = 0.0;
        let mut ab = 0.0;
        let mut count = 0;
        for batch in iter_windows(&ds, Split::Test, 12, 4, 1000, None).unwrap() {
            for bi in 0..batch.size() {
                for j in 0..2 {
                    let mean = (0..12).map(|t| batch.inputs.at4(bi, j, t, 0)).sum::<f64>() / 12.0;
                    for p in 0..4 {
                        let d = mean - batch.targets.at4(bi, j, p, 0);
                        sq += d * d;
                        ab += d.abs();
                        count += 1;
                    }
                }
            }
        }
        assert!((mse - sq / count as f64).abs() < 1e-12);
        assert!((mae - ab / count as f64).abs() < 1e-12);
    }
}
