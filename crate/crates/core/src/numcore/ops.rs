//! Differentiable operations recorded on a [`Graph`].

use statrs::function::erf::erf;

use super::graph::{Graph, Var};
use super::rng::Rng;
use super::tensor::{
    broadcast_shape, broadcast_strides, for_each_broadcast, gemm, numel, sum_to_shape, Tensor,
};
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

fn broadcast_apply(a: &Tensor, b: &Tensor, out_shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let mut out = vec![0.0; numel(out_shape)];
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == out_shape && b.shape() == out_shape {
        for ((o, x), y) in out.iter_mut().zip(ad).zip(bd) {
            *o = f(*x, *y);
        }
    } else {
        for_each_broadcast(out_shape, &sa, &sb, |i, oa, ob| out[i] = f(ad[oa], bd[ob]));
    }
    Tensor::new(out_shape, out).expect("broadcast output shape")
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return dim_err(format!("axis {axis} out of range for shape {:?}", t.shape()));
    }
    Ok(())
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Batched matrix product with numpy broadcasting over the leading axes.
pub fn matmul_tensors(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || rb < 2 {
        return dim_err(format!(
            "matmul needs rank >= 2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (k2, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if k != k2 {
        return dim_err(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let lead_a = &a.shape()[..ra - 2];
    let lead_b = &b.shape()[..rb - 2];
    let lead = broadcast_shape(lead_a, lead_b).map_err(|_| {
        Error::Dimension(format!(
            "matmul leading dimensions do not broadcast: {:?} x {:?}",
            a.shape(),
            b.shape()
        ))
    })?;
    let mut out_shape = lead.clone();
    out_shape.extend([m, n]);
    let mut out = vec![0.0; numel(&out_shape)];
    if lead_b.is_empty() {
        // (…, m, k) x (k, n): one flat product.
        let rows = a.len() / k.max(1);
        if k > 0 {
            gemm(a.data(), b.data(), &mut out, rows, k, n, false, false);
        }
        return Tensor::new(&out_shape, out);
    }
    let sa = broadcast_strides(lead_a, &lead);
    let sb = broadcast_strides(lead_b, &lead);
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&lead, &sa, &sb, |i, oa, ob| {
        gemm(
            &ad[oa * m * k..(oa + 1) * m * k],
            &bd[ob * k * n..(ob + 1) * k * n],
            &mut out[i * m * n..(i + 1) * m * n],
            m,
            k,
            n,
            false,
            false,
        );
    });
    Tensor::new(&out_shape, out)
}

/// `a^T`-style products needed by the matmul backward rule.
fn matmul_grads(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (ra, rb) = (a.rank(), b.rank());
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let n = b.shape()[rb - 1];
    let lead_a = &a.shape()[..ra - 2];
    let lead_b = &b.shape()[..rb - 2];
    if lead_b.is_empty() {
        let rows = a.len() / k.max(1);
        let mut ga = vec![0.0; a.len()];
        gemm(g.data(), b.data(), &mut ga, rows, n, k, false, true);
        let mut gb = vec![0.0; b.len()];
        gemm(a.data(), g.data(), &mut gb, k, rows, n, true, false);
        return (
            Tensor::new(a.shape(), ga).unwrap(),
            Tensor::new(b.shape(), gb).unwrap(),
        );
    }
    let lead = &g.shape()[..g.rank() - 2];
    let sa = broadcast_strides(lead_a, lead);
    let sb = broadcast_strides(lead_b, lead);
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    // Accumulating into broadcast slots sums over the broadcast axes.
    for_each_broadcast(lead, &sa, &sb, |i, oa, ob| {
        let gs = &gd[i * m * n..(i + 1) * m * n];
        gemm(gs, &bd[ob * k * n..(ob + 1) * k * n], &mut ga[oa * m * k..(oa + 1) * m * k], m, n, k, false, true);
        gemm(&ad[oa * m * k..(oa + 1) * m * k], gs, &mut gb[ob * k * n..(ob + 1) * k * n], k, m, n, true, false);
    });
    (
        Tensor::new(a.shape(), ga).unwrap(),
        Tensor::new(b.shape(), gb).unwrap(),
    )
}

/// Softmax along `axis` with max subtraction.
pub fn softmax_tensor(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis(x, axis)?;
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = (d[at(j)] - max).exp();
                d[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                d[at(j)] /= sum;
            }
        }
    }
    Ok(out)
}

impl Graph {
    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(av.shape(), bv.shape())?;
        let value = match kind {
            Binary::Add => broadcast_apply(av, bv, &out_shape, |x, y| x + y),
            Binary::Sub => broadcast_apply(av, bv, &out_shape, |x, y| x - y),
            Binary::Mul => broadcast_apply(av, bv, &out_shape, |x, y| x * y),
        };
        Ok(self.custom(
            value,
            &[a, b],
            Box::new(move |g, p, _| {
                let (x, y) = (p[0], p[1]);
                match kind {
                    Binary::Add => vec![sum_to_shape(g, x.shape()), sum_to_shape(g, y.shape())],
                    Binary::Sub => vec![
                        sum_to_shape(g, x.shape()),
                        sum_to_shape(&g.map(|v| -v), y.shape()),
                    ],
                    Binary::Mul => {
                        let gx = broadcast_apply(g, y, g.shape(), |gv, yv| gv * yv);
                        let gy = broadcast_apply(g, x, g.shape(), |gv, xv| gv * xv);
                        vec![sum_to_shape(&gx, x.shape()), sum_to_shape(&gy, y.shape())]
                    }
                }
            }),
        ))
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v * s);
        self.custom(value, &[a], Box::new(move |g, _, _| vec![g.map(|v| v * s)]))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        self.custom(
            value,
            &[a],
            Box::new(|g, p, _| vec![g.zip_map(p[0], |gv, x| 2.0 * x * gv).unwrap()]),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.custom(
            value,
            &[a],
            Box::new(|g, p, _| vec![g.zip_map(p[0], |gv, x| gv * x.signum() * (x != 0.0) as u8 as f64).unwrap()]),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu_scalar);
        self.custom(
            value,
            &[a],
            Box::new(|g, p, _| vec![g.zip_map(p[0], |gv, x| gv * gelu_grad(x)).unwrap()]),
        )
    }

    /// Matrix product over the two trailing axes; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_tensors(self.value(a), self.value(b))?;
        Ok(self.custom(
            value,
            &[a, b],
            Box::new(|g, p, _| {
                let (ga, gb) = matmul_grads(p[0], p[1], g);
                vec![ga, gb]
            }),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.custom(
            value,
            &[a],
            Box::new(|g, p, _| vec![g.clone().reshape(p[0].shape()).unwrap()]),
        ))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        Ok(self.custom(
            value,
            &[a],
            Box::new(move |g, _, _| vec![g.permute(&inverse).unwrap()]),
        ))
    }

    pub fn swap_axes(&mut self, a: Var, i: usize, j: usize) -> Result<Var> {
        let mut axes: Vec<usize> = (0..self.value(a).rank()).collect();
        if i >= axes.len() || j >= axes.len() {
            return dim_err(format!("swap_axes({i}, {j}) on shape {:?}", self.value(a).shape()));
        }
        axes.swap(i, j);
        self.permute(a, &axes)
    }

    /// Gathers `indices` along `axis`; repeated indices accumulate gradient.
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let value = self.value(a).index_select(axis, indices)?;
        let indices = indices.to_vec();
        Ok(self.custom(
            value,
            &[a],
            Box::new(move |g, p, _| {
                let shape = p[0].shape();
                let (outer, n, inner) = axis_split(shape, axis);
                let mut out = Tensor::zeros(shape);
                let od = out.data_mut();
                let gd = g.data();
                for o in 0..outer {
                    for (j, &i) in indices.iter().enumerate() {
                        let src = (o * indices.len() + j) * inner;
                        let dst = (o * n + i) * inner;
                        for t in 0..inner {
                            od[dst + t] += gd[src + t];
                        }
                    }
                }
                vec![out]
            }),
        ))
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        check_axis(x, axis)?;
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        let mut out = vec![0.0; outer * inner];
        let d = x.data();
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * len + j) * inner + i];
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.custom(
            value,
            &[a],
            Box::new(move |g, p, _| {
                let mut res = Tensor::zeros(p[0].shape());
                let rd = res.data_mut();
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            rd[(o * len + j) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                vec![res]
            }),
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.custom(
            value,
            &[a],
            Box::new(|g, p, _| vec![Tensor::full(p[0].shape(), g.data()[0])]),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = softmax_tensor(self.value(a), axis)?;
        Ok(self.custom(
            value,
            &[a],
            Box::new(move |g, _, y| {
                let (outer, len, inner) = axis_split(y.shape(), axis);
                let mut res = Tensor::zeros(y.shape());
                let (rd, yd, gd) = (res.data_mut(), y.data(), g.data());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| gd[at(j)] * yd[at(j)]).sum();
                        for j in 0..len {
                            rd[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                vec![res]
            }),
        ))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma * x + beta` (both of the last-axis length).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().ok_or_else(|| Error::Dimension("layer_norm on scalar".into()))?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [d] {
                return dim_err(format!(
                    "layer_norm affine shape {:?} does not match feature size {d}",
                    self.value(p).shape()
                ));
            }
        }
        let rows = xv.len() / d.max(1);
        let mut normed = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let s = &xv.data()[r * d..(r + 1) * d];
            let mean = s.iter().sum::<f64>() / d as f64;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in normed[r * d..(r + 1) * d].iter_mut().zip(s) {
                *o = (v - mean) * is;
            }
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = normed
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gv[i % d] + bv[i % d])
            .collect();
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.custom(
            value,
            &[x, gamma, beta],
            Box::new(move |g, p, _| {
                let gam = p[1].data();
                let gd = g.data();
                let mut gx = vec![0.0; gd.len()];
                let mut ggam = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for r in 0..rows {
                    let h = &normed[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                        ggam[j] += gr[j] * h[j];
                        gbeta[j] += gr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        gx[r * d + j] = inv_std[r] * (dh - mean_dh - h[j] * mean_dh_h);
                    }
                }
                vec![
                    Tensor::new(p[0].shape(), gx).unwrap(),
                    Tensor::new(&[d], ggam).unwrap(),
                    Tensor::new(&[d], gbeta).unwrap(),
                ]
            }),
        ))
    }

    /// Inverted dropout. Identity when `training` is false or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        let mask = Tensor::new(self.value(x).shape(), mask)?;
        let value = self.value(x).zip_map(&mask, |a, m| a * m)?;
        Ok(self.custom(
            value,
            &[x],
            Box::new(move |g, _, _| vec![g.zip_map(&mask, |a, m| a * m).unwrap()]),
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check_same(pred, target)?;
        let diff = self.sub(pred, target)?;
        let sq = self.square(diff);
        Ok(self.mean_all(sq))
    }

    /// Mean absolute error over all elements.
    pub fn mae_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check_same(pred, target)?;
        let diff = self.sub(pred, target)?;
        let ab = self.abs(diff);
        Ok(self.mean_all(ab))
    }

    fn check_same(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return dim_err(format!(
                "loss operands differ in shape: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }
}

/// Mean squared error between two equally shaped tensors.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(pred.zip_map(target, |a, b| (a - b) * (a - b))?.mean())
}

/// Mean absolute error between two equally shaped tensors.
pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(pred.zip_map(target, |a, b| (a - b).abs())?.mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::{grad_check, max_rel_error};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let x = t(&[2, 2], &[0.3, -1.2, 4.0, 2.5]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul_tensors(&eye, &x).unwrap(), x);
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(matmul_tensors(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[3, 4]);
        let b = Tensor::zeros(&[5, 2]);
        let msg = matmul_tensors(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[3, 4]") && msg.contains("[5, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let a = Tensor::from_fn(&[3, 4], |_| rng.uniform_range(-1.0, 1.0));
        let b = Tensor::from_fn(&[4, 2], |_| rng.uniform_range(-1.0, 1.0));
        let err = grad_check(
            |g, vars| {
                let y = g.matmul(vars[0], vars[1])?;
                Ok(g.sum_all(y))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn batched_matmul_broadcasts_leading_axes() {
        let mut rng = Rng::new(3);
        let a = Tensor::from_fn(&[2, 1, 3, 4], |_| rng.uniform_range(-1.0, 1.0));
        let b = Tensor::from_fn(&[3, 4, 2], |_| rng.uniform_range(-1.0, 1.0));
        let y = matmul_tensors(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 2]);
        let err = grad_check(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                let s = g.square(y);
                Ok(g.sum_all(s))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn softmax_cases() {
        let one = softmax_tensor(&t(&[1], &[5.0]), 0).unwrap();
        assert_eq!(one.data(), &[1.0]);
        let flat = softmax_tensor(&t(&[3], &[0.0, 0.0, 0.0]), 0).unwrap();
        for v in flat.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // Reference values of exp(i)/sum(exp) evaluated to 20 digits.
        let s = softmax_tensor(&t(&[3], &[1.0, 2.0, 3.0]), 0).unwrap();
        let expected = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_9];
        for (v, e) in s.data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-15, "{v} vs {e}");
        }
        let big = softmax_tensor(&t(&[2], &[1000.0, 1000.0]), 0).unwrap();
        assert_eq!(big.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one_on_inner_axis() {
        let mut rng = Rng::new(5);
        let x = Tensor::from_fn(&[2, 5, 3], |_| rng.uniform_range(-4.0, 4.0));
        let s = softmax_tensor(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                let sum: f64 = (0..5).map(|j| s.data()[(o * 5 + j) * 3 + i]).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
        let err = grad_check(
            |g, v| {
                let y = g.softmax(v[0], 1)?;
                let w = g.constant(Tensor::from_fn(&[2, 5, 3], |i| (i as f64 * 0.37).sin()));
                let p = g.mul(y, w)?;
                Ok(g.sum_all(p))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, 3.0]));
        let gam = g.constant(t(&[2], &[1.0, 1.0]));
        let bet = g.constant(t(&[2], &[0.0, 0.0]));
        let eps = 1e-5;
        let y = g.layer_norm(x, gam, bet, eps).unwrap();
        let s = 1.0 / (1.0 + eps).sqrt();
        assert!((g.value(y).data()[0] + s).abs() < 1e-15);
        assert!((g.value(y).data()[1] - s).abs() < 1e-15);

        let c = g.constant(Tensor::full(&[1, 4], 2.5));
        let gam4 = g.constant(Tensor::full(&[4], 1.0));
        let bet4 = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(c, gam4, bet4, eps).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_gradient_and_moments() {
        let mut rng = Rng::new(8);
        let x = Tensor::from_fn(&[3, 6], |_| rng.uniform_range(-2.0, 2.0));
        let gamma = Tensor::from_fn(&[6], |_| rng.uniform_range(0.5, 1.5));
        let beta = Tensor::from_fn(&[6], |_| rng.uniform_range(-0.5, 0.5));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let ones = g.constant(Tensor::full(&[6], 1.0));
        let zeros = g.constant(Tensor::zeros(&[6]));
        let y = g.layer_norm(xv, ones, zeros, 1e-5).unwrap();
        for r in 0..3 {
            let row = &g.value(y).data()[r * 6..(r + 1) * 6];
            assert!((row.iter().sum::<f64>() / 6.0).abs() < 1e-10);
        }
        let err = grad_check(
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let w = g.constant(Tensor::from_fn(&[3, 6], |i| (i as f64).cos()));
                let p = g.mul(y, w)?;
                Ok(g.sum_all(p))
            },
            &[x, gamma, beta],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn dropout_cases() {
        let mut g = Graph::new();
        let mut rng = Rng::new(1);
        let x = g.constant(Tensor::from_fn(&[100_000], |i| i as f64 + 1.0));
        let same = g.dropout(x, 0.0, &mut rng, true).unwrap();
        assert_eq!(same, x);
        let same = g.dropout(x, 0.7, &mut rng, false).unwrap();
        assert_eq!(same, x);
        assert!(g.dropout(x, 1.0, &mut rng, true).is_err());
        assert!(g.dropout(x, -0.1, &mut rng, true).is_err());

        let mut r1 = Rng::new(42);
        let mut r2 = Rng::new(42);
        let a = g.dropout(x, 0.1, &mut r1, true).unwrap();
        let b = g.dropout(x, 0.1, &mut r2, true).unwrap();
        assert_eq!(g.value(a), g.value(b));
        let dropped = g.value(a).data().iter().filter(|&&v| v == 0.0).count();
        let frac = dropped as f64 / 100_000.0;
        assert!((frac - 0.1).abs() < 0.01, "drop fraction {frac}");
        let survivor = g.value(a).data().iter().zip(g.value(x).data()).find(|(o, _)| **o != 0.0).unwrap();
        assert!((survivor.0 - survivor.1 / 0.9).abs() < 1e-12);
    }

    #[test]
    fn loss_values() {
        let p = t(&[2], &[0.0, 2.0]);
        let y = t(&[2], &[1.0, 1.0]);
        assert_eq!(mse(&p, &y).unwrap(), 1.0);
        assert_eq!(mae(&p, &y).unwrap(), 1.0);
        assert_eq!(mse(&y, &y).unwrap(), 0.0);
        let shifted = y.map(|v| v + 1.0);
        assert_eq!(mse(&shifted, &y).unwrap(), 1.0);
        assert_eq!(mae(&shifted, &y).unwrap(), 1.0);
        assert!(mse(&p, &Tensor::zeros(&[3])).is_err());

        let mut g = Graph::new();
        let pv = g.constant(p);
        let bad = g.constant(Tensor::zeros(&[1, 2]));
        assert!(g.mse_loss(pv, bad).is_err());
    }

    #[test]
    fn gelu_and_mae_gradients() {
        let mut rng = Rng::new(2);
        let x = Tensor::from_fn(&[7], |_| rng.uniform_range(-3.0, 3.0));
        let target = Tensor::from_fn(&[7], |_| rng.uniform_range(-3.0, 3.0));
        let err = grad_check(
            |g, v| {
                let y = g.gelu(v[0]);
                let t = g.constant(target.clone());
                g.mae_loss(y, t)
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
        assert_eq!(max_rel_error(&[1.0], &[1.0]), 0.0);
    }
}
