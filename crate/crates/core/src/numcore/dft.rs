//! Naive discrete Fourier transform and a learnable per-frequency filter.

use num_complex::Complex64;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{dim_err, Result};

fn twiddles(n: usize, sign: f64) -> Vec<Complex64> {
    (0..n)
        .map(|j| {
            let angle = sign * 2.0 * std::f64::consts::PI * j as f64 / n as f64;
            Complex64::new(angle.cos(), angle.sin())
        })
        .collect()
}

/// O(n²) DFT. The inverse transform includes the `1/n` factor.
pub fn dft(x: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = x.len();
    if n == 0 {
        return vec![];
    }
    let w = twiddles(n, if inverse { 1.0 } else { -1.0 });
    let scale = if inverse { 1.0 / n as f64 } else { 1.0 };
    (0..n)
        .map(|k| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                acc += v * w[(k * t) % n];
            }
            acc * scale
        })
        .collect()
}

/// DFT of a real sequence.
pub fn dft_real(x: &[f64]) -> Vec<Complex64> {
    let c: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    dft(&c, false)
}

/// Real part of the inverse DFT.
pub fn idft_real(x: &[Complex64]) -> Vec<f64> {
    dft(x, true).into_iter().map(|c| c.re).collect()
}

/// Applies `f` to every 1-D line of `t` along `axis`, writing results into a
/// tensor of the same shape.
fn map_lines(t: &Tensor, axis: usize, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Tensor {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Tensor::zeros(shape);
    let mut line = vec![0.0; len];
    let (src, dst) = (t.data(), out.data_mut());
    for o in 0..outer {
        for i in 0..inner {
            for (j, v) in line.iter_mut().enumerate() {
                *v = src[(o * len + j) * inner + i];
            }
            let res = f(&line);
            for (j, v) in res.into_iter().enumerate() {
                dst[(o * len + j) * inner + i] = v;
            }
        }
    }
    out
}

impl Graph {
    /// `Re(IDFT(m ⊙ DFT(x)))` along `axis`, where `m = re + i·im` holds one
    /// complex multiplier per frequency bin.
    pub fn spectral_filter(&mut self, x: Var, re: Var, im: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return dim_err(format!("spectral axis {axis} out of range for {:?}", xv.shape()));
        }
        let n = xv.shape()[axis];
        for m in [re, im] {
            if self.value(m).shape() != [n] {
                return dim_err(format!(
                    "spectral multiplier shape {:?} does not match axis length {n}",
                    self.value(m).shape()
                ));
            }
        }
        let mult: Vec<Complex64> = self
            .value(re)
            .data()
            .iter()
            .zip(self.value(im).data())
            .map(|(&a, &b)| Complex64::new(a, b))
            .collect();
        let value = map_lines(xv, axis, |line| {
            let spec: Vec<Complex64> = dft_real(line).iter().zip(&mult).map(|(s, m)| s * m).collect();
            idft_real(&spec)
        });
        Ok(self.custom(
            value,
            &[x, re, im],
            Box::new(move |g, p, _| {
                let (xv, rev, imv) = (p[0], p[1], p[2]);
                let mult: Vec<Complex64> = rev
                    .data()
                    .iter()
                    .zip(imv.data())
                    .map(|(&a, &b)| Complex64::new(a, b))
                    .collect();
                let conj: Vec<Complex64> = mult.iter().map(|m| m.conj()).collect();
                // dL/dx = Re(IDFT(conj(m) ⊙ DFT(g)))
                let gx = map_lines(g, axis, |line| {
                    let spec: Vec<Complex64> = dft_real(line).iter().zip(&conj).map(|(s, c)| s * c).collect();
                    idft_real(&spec)
                });
                // dL/dm_k = (1/n) X_k conj(G_k), split into real/imag parts
                let mut gre = vec![0.0; n];
                let mut gim = vec![0.0; n];
                let shape = xv.shape();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut xl = vec![0.0; n];
                let mut gl = vec![0.0; n];
                for o in 0..outer {
                    for i in 0..inner {
                        for j in 0..n {
                            xl[j] = xv.data()[(o * n + j) * inner + i];
                            gl[j] = g.data()[(o * n + j) * inner + i];
                        }
                        let xs = dft_real(&xl);
                        let gs = dft_real(&gl);
                        for k in 0..n {
                            let prod = xs[k] * gs[k].conj() / n as f64;
                            gre[k] += prod.re;
                            gim[k] -= prod.im;
                        }
                    }
                }
                vec![
                    gx,
                    Tensor::new(&[n], gre).unwrap(),
                    Tensor::new(&[n], gim).unwrap(),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, Rng};

    #[test]
    fn constant_signal_has_only_dc() {
        let s = dft_real(&[2.0; 8]);
        assert!((s[0].re - 16.0).abs() < 1e-12);
        for c in &s[1..] {
            assert!(c.norm() < 1e-12);
        }
    }

    #[test]
    fn cosine_concentrates_at_k_and_n_minus_k() {
        let n = 16;
        let k = 3;
        let x: Vec<f64> = (0..n)
            .map(|t| (2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64).cos())
            .collect();
        let s = dft_real(&x);
        for (j, c) in s.iter().enumerate() {
            if j == k || j == n - k {
                assert!((c.re - n as f64 / 2.0).abs() < 1e-10);
            } else {
                assert!(c.norm() < 1e-10, "bin {j} = {c}");
            }
        }
    }

    #[test]
    fn round_trip_random() {
        let mut rng = Rng::new(16);
        for n in [1usize, 16, 97, 1024] {
            let x: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let back = idft_real(&dft_real(&x));
            let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "n={n} err={err}");
        }
    }

    #[test]
    fn unit_multipliers_are_identity() {
        let mut rng = Rng::new(4);
        let x = Tensor::from_fn(&[2, 5, 3], |_| rng.uniform_range(-1.0, 1.0));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let re = g.constant(Tensor::full(&[5], 1.0));
        let im = g.constant(Tensor::zeros(&[5]));
        let y = g.spectral_filter(xv, re, im, 1).unwrap();
        assert!(g.value(y).max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn spectral_filter_gradient() {
        let mut rng = Rng::new(21);
        let x = Tensor::from_fn(&[2, 6, 3], |_| rng.uniform_range(-1.0, 1.0));
        let re = Tensor::from_fn(&[6], |_| rng.uniform_range(0.5, 1.5));
        let im = Tensor::from_fn(&[6], |_| rng.uniform_range(-0.5, 0.5));
        let w = Tensor::from_fn(&[2, 6, 3], |i| (i as f64 * 0.7).sin());
        let err = grad_check(
            |g, v| {
                let y = g.spectral_filter(v[0], v[1], v[2], 1)?;
                let c = g.constant(w.clone());
                let p = g.mul(y, c)?;
                Ok(g.sum_all(p))
            },
            &[x, re, im],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }
}
