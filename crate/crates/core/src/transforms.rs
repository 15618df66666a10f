//! Input/output transformations: reversible instance normalization and the
//! three structural priors (residual cycle, trend-seasonal split, multi-scale
//! downsampling).

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numcore::{Graph, ParamId, Tensor, Var};

/// Structural prior applied inside RevIN.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    None,
    Cycle,
    TrendSeasonal,
    MultiScale,
}

impl TransformKind {
    pub const ALL: [TransformKind; 4] = [
        TransformKind::None,
        TransformKind::Cycle,
        TransformKind::TrendSeasonal,
        TransformKind::MultiScale,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TransformKind::None => "none",
            TransformKind::Cycle => "cycle",
            TransformKind::TrendSeasonal => "trend_seasonal",
            TransformKind::MultiScale => "multi_scale",
        }
    }
}

impl std::str::FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown transform {s:?}")))
    }
}

/// Transform stage configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    #[serde(default = "default_eps")]
    pub revin_eps: f64,
    #[serde(default)]
    pub revin_affine: bool,
    /// Moving-average kernel of the trend-seasonal split.
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_factor")]
    pub factor: usize,
    /// Cycle length `W` of the residual cycle buffer.
    #[serde(default = "default_cycle")]
    pub cycle_len: usize,
}

fn default_eps() -> f64 {
    1e-5
}
fn default_kernel() -> usize {
    25
}
fn default_levels() -> usize {
    3
}
fn default_factor() -> usize {
    2
}
fn default_cycle() -> usize {
    24
}

impl TransformSpec {
    pub fn new(kind: TransformKind) -> Self {
        Self {
            kind,
            revin_eps: default_eps(),
            revin_affine: false,
            kernel: default_kernel(),
            levels: default_levels(),
            factor: default_factor(),
            cycle_len: default_cycle(),
        }
    }
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self::new(TransformKind::None)
    }
}

/// Per-window statistics captured by [`revin_forward`].
#[derive(Clone, Debug)]
pub struct RevinState {
    /// `(B, N, 1, 1)` window means.
    pub mean: Tensor,
    /// `(B, N, 1, 1)` values of `sqrt(var + eps)`.
    pub std: Tensor,
    pub eps: f64,
}

/// Optional learnable per-variate affine map of RevIN.
#[derive(Clone, Copy, Debug)]
pub struct RevinAffine {
    pub gamma: Var,
    pub beta: Var,
}

/// Subtracts each `(b, n)` window mean and divides by `sqrt(var + eps)`.
/// Statistics are treated as constants.
pub fn revin_forward(
    g: &mut Graph,
    x: Var,
    eps: f64,
    affine: Option<RevinAffine>,
) -> Result<(Var, RevinState)> {
    let (b, n, t, d) = g.value(x).dims4()?;
    if t == 0 {
        return dim_err("RevIN needs a non-empty lookback");
    }
    let data = g.value(x).data();
    let mut mean = vec![0.0; b * n];
    let mut std = vec![0.0; b * n];
    let len = (t * d) as f64;
    for i in 0..b * n {
        let w = &data[i * t * d..(i + 1) * t * d];
        let m = w.iter().sum::<f64>() / len;
        let var = w.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / len;
        mean[i] = m;
        std[i] = (var + eps).sqrt();
    }
    let state = RevinState {
        mean: Tensor::new(&[b, n, 1, 1], mean)?,
        std: Tensor::new(&[b, n, 1, 1], std)?,
        eps,
    };
    let m = g.constant(state.mean.clone());
    let inv = g.constant(state.std.map(|s| 1.0 / s));
    let centered = g.sub(x, m)?;
    let mut out = g.mul(centered, inv)?;
    if let Some(a) = affine {
        out = g.mul(out, a.gamma)?;
        out = g.add(out, a.beta)?;
    }
    Ok((out, state))
}

/// `y · std + mean` per `(b, n)`, undoing the affine map first when present.
pub fn revin_invert(g: &mut Graph, y: Var, state: &RevinState, affine: Option<RevinAffine>) -> Result<Var> {
    let (b, n, _, _) = g.value(y).dims4()?;
    let (sb, sn, _, _) = state.mean.dims4()?;
    if (b, n) != (sb, sn) {
        return dim_err(format!(
            "RevIN state covers (B={sb}, N={sn}) but forecast has (B={b}, N={n})"
        ));
    }
    let mut y = y;
    if let Some(a) = affine {
        y = g.sub(y, a.beta)?;
        let eps2 = state.eps * state.eps;
        let gv = g.value(a.gamma).map(|v| 1.0 / (v + eps2));
        // d/dγ 1/(γ + eps²) = -out²
        let inv_gamma = g.custom(
            gv,
            &[a.gamma],
            Box::new(|up, _, out| vec![up.zip_map(out, |u, o| -u * o * o).unwrap()]),
        );
        y = g.mul(y, inv_gamma)?;
    }
    let s = g.constant(state.std.clone());
    let m = g.constant(state.mean.clone());
    let scaled = g.mul(y, s)?;
    g.add(scaled, m)
}

/// Trend and seasonal parts of a series.
#[derive(Clone, Debug)]
pub struct DecompositionOutput {
    pub trend: Tensor,
    pub seasonal: Tensor,
}

fn check_kernel(kernel: usize, t: usize) -> Result<()> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::Parameter(format!("moving-average kernel {kernel} must be odd")));
    }
    if kernel > 2 * t - 1 {
        return Err(Error::Parameter(format!(
            "moving-average kernel {kernel} exceeds 2T-1 = {}",
            2 * t - 1
        )));
    }
    Ok(())
}

/// `(T, T)` matrix of a centered moving average with edge replication.
pub fn moving_average_matrix(t: usize, kernel: usize) -> Result<Tensor> {
    check_kernel(kernel, t)?;
    let half = (kernel / 2) as isize;
    let w = 1.0 / kernel as f64;
    let mut m = Tensor::zeros(&[t, t]);
    let d = m.data_mut();
    for row in 0..t {
        for off in -half..=half {
            let col = (row as isize + off).clamp(0, t as isize - 1) as usize;
            d[row * t + col] += w;
        }
    }
    Ok(m)
}

/// Splits `x (B, N, T, 1)` into a moving-average trend and the remainder.
pub fn trend_seasonal_graph(g: &mut Graph, x: Var, kernel: usize) -> Result<(Var, Var)> {
    let (_, _, t, _) = g.value(x).dims4()?;
    let avg = g.constant(moving_average_matrix(t, kernel)?);
    let trend = g.matmul(avg, x)?;
    let seasonal = g.sub(x, trend)?;
    Ok((trend, seasonal))
}

pub fn trend_seasonal(x: &Tensor, kernel: usize) -> Result<DecompositionOutput> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (trend, seasonal) = trend_seasonal_graph(&mut g, xv, kernel)?;
    Ok(DecompositionOutput {
        trend: g.value(trend).clone(),
        seasonal: g.value(seasonal).clone(),
    })
}

/// Lookback lengths produced by [`multiscale_graph`].
pub fn multiscale_lengths(t: usize, levels: usize, factor: usize) -> Result<Vec<usize>> {
    if factor < 2 {
        return Err(Error::Parameter(format!("downsampling factor {factor} must be >= 2")));
    }
    let mut lens = vec![t];
    for _ in 0..levels {
        let next = lens.last().unwrap() / factor;
        if next == 0 {
            return Err(Error::Parameter(format!(
                "{levels} levels of factor {factor} reduce lookback {t} to length 0"
            )));
        }
        lens.push(next);
    }
    Ok(lens)
}

/// Scale 0 is `x`; scale `i` average-pools scale `i-1` over non-overlapping
/// windows of `factor`. When a length is not a multiple of `factor` the oldest
/// leftover steps are dropped.
pub fn multiscale_graph(g: &mut Graph, x: Var, levels: usize, factor: usize) -> Result<Vec<Var>> {
    let (b, n, t, d) = g.value(x).dims4()?;
    let lens = multiscale_lengths(t, levels, factor)?;
    let mut scales = vec![x];
    for w in lens.windows(2) {
        let (cur, next) = (w[0], w[1]);
        let prev = *scales.last().unwrap();
        let kept = next * factor;
        let trimmed = if kept == cur {
            prev
        } else {
            let idx: Vec<usize> = (cur - kept..cur).collect();
            g.index_select(prev, 2, &idx)?
        };
        let grouped = g.reshape(trimmed, &[b, n, next, factor * d])?;
        let summed = if d == 1 {
            g.sum_axis(grouped, 3)?
        } else {
            let r = g.reshape(grouped, &[b, n, next, factor, d])?;
            let s = g.sum_axis(r, 3)?;
            g.reshape(s, &[b, n, next, d])?
        };
        scales.push(g.scale(summed, 1.0 / factor as f64));
    }
    Ok(scales)
}

pub fn multiscale_downsample(x: &Tensor, levels: usize, factor: usize) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = multiscale_graph(&mut g, xv, levels, factor)?;
    Ok(vars.into_iter().map(|v| g.value(v).clone()).collect())
}

/// Learnable `(W, N)` periodic pattern indexed by absolute time.
#[derive(Clone, Copy, Debug)]
pub struct CycleBuffer {
    pub param: ParamId,
    pub cycle_len: usize,
    pub variates: usize,
}

/// Position of absolute step `t` within a cycle of length `w`.
pub fn cycle_phase(t: usize, w: usize) -> usize {
    t % w
}

/// `(B, N, len, 1)` view of `Q[(start_b + offset + t) mod W, n]`.
fn gather_cycle(g: &mut Graph, q: Var, cycle_len: usize, starts: &[usize], offset: usize, len: usize) -> Result<Var> {
    let (w, n) = match g.value(q).shape() {
        &[w, n] => (w, n),
        s => return dim_err(format!("cycle buffer must be (W, N), got {s:?}")),
    };
    if w != cycle_len {
        return dim_err(format!("cycle buffer has {w} rows, cycle length is {cycle_len}"));
    }
    let idx: Vec<usize> = starts
        .iter()
        .flat_map(|&s| (0..len).map(move |t| cycle_phase(s + offset + t, w)))
        .collect();
    let rows = g.index_select(q, 0, &idx)?;
    let r = g.reshape(rows, &[starts.len(), len, n])?;
    let p = g.permute(r, &[0, 2, 1])?;
    g.reshape(p, &[starts.len(), n, len, 1])
}

/// `x[b, n, t] - Q[(t0_b + t) mod W, n]`.
pub fn cycle_forward(g: &mut Graph, x: Var, q: Var, cycle_len: usize, starts: &[usize]) -> Result<Var> {
    let (b, n, t, _) = g.value(x).dims4()?;
    if starts.len() != b {
        return dim_err(format!("{} window starts for batch of {b}", starts.len()));
    }
    if g.value(q).shape().get(1) != Some(&n) {
        return dim_err(format!("cycle buffer {:?} does not match N={n}", g.value(q).shape()));
    }
    let pattern = gather_cycle(g, q, cycle_len, starts, 0, t)?;
    g.sub(x, pattern)
}

/// `y_res[b, n, p] + Q[(t0_b + T + p) mod W, n]`.
pub fn cycle_invert(
    g: &mut Graph,
    y: Var,
    q: Var,
    cycle_len: usize,
    starts: &[usize],
    lookback: usize,
) -> Result<Var> {
    let (b, _, p, _) = g.value(y).dims4()?;
    if starts.len() != b {
        return dim_err(format!("{} window starts for batch of {b}", starts.len()));
    }
    let pattern = gather_cycle(g, q, cycle_len, starts, lookback, p)?;
    g.add(y, pattern)
}
