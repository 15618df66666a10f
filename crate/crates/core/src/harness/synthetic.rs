//! Seeded synthetic series: harmonics of one base period, a linear trend and
//! Gaussian noise.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::SeriesDataset;
use crate::error::{Error, Result};
use crate::numcore::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub length: usize,
    pub variates: usize,
    /// Base period in steps.
    pub period: usize,
    /// Number of harmonics; harmonic `h` has amplitude `amplitude / h`.
    #[serde(default = "one")]
    pub harmonics: usize,
    #[serde(default = "unit")]
    pub amplitude: f64,
    /// Slope per step.
    #[serde(default)]
    pub trend: f64,
    /// Standard deviation of the additive noise.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn new(length: usize, variates: usize, period: usize) -> Self {
        Self {
            length,
            variates,
            period,
            harmonics: 1,
            amplitude: 1.0,
            trend: 0.0,
            noise: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.variates == 0 || self.period == 0 || self.harmonics == 0 {
            return Err(Error::Config(
                "synthetic length, variates, period and harmonics must be positive".into(),
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.amplitude.is_finite() && self.trend.is_finite()) {
            return Err(Error::Config("synthetic amplitude, trend and noise must be finite, noise non-negative".into()));
        }
        Ok(())
    }

    /// Variance of the noise-free periodic part per variate.
    pub fn signal_variance(&self) -> f64 {
        (1..=self.harmonics)
            .map(|h| (self.amplitude / h as f64).powi(2) / 2.0)
            .sum()
    }
}

/// Generates the series. Each variate gets its own seeded phase per harmonic;
/// noise draws follow in time-major order.
pub fn generate(name: &str, spec: &SyntheticSpec) -> Result<SeriesDataset> {
    spec.validate()?;
    let mut phase_rng = Rng::with_stream(spec.seed, 0);
    let phases: Vec<f64> = (0..spec.variates * spec.harmonics)
        .map(|_| phase_rng.uniform_range(0.0, 2.0 * std::f64::consts::PI))
        .collect();
    let mut noise_rng = Rng::with_stream(spec.seed, 1);
    let w = spec.period as f64;
    let mut values = Vec::with_capacity(spec.length * spec.variates);
    for t in 0..spec.length {
        for j in 0..spec.variates {
            let mut v = spec.trend * t as f64;
            for h in 1..=spec.harmonics {
                let arg = 2.0 * std::f64::consts::PI * h as f64 * t as f64 / w;
                v += spec.amplitude / h as f64 * (arg + phases[j * spec.harmonics + h - 1]).sin();
            }
            if spec.noise > 0.0 {
                v += spec.noise * noise_rng.normal();
            }
            values.push(v);
        }
    }
    SeriesDataset::new(name, values, spec.variates)
}

/// Writes a dataset as a headered CSV with a leading step column.
pub fn write_csv(ds: &SeriesDataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "step")?;
    for j in 0..ds.variates() {
        write!(out, ",v{j}")?;
    }
    writeln!(out)?;
    for t in 0..ds.len() {
        write!(out, "{t}")?;
        for j in 0..ds.variates() {
            write!(out, ",{}", ds.value(t, j))?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}
