use super::graph::{Graph, ParamStore, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Elementwise relative error, with entries that are tiny relative to the
/// largest gradient magnitude judged against `1e-3 * max|g|` instead of their
/// own size.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Compares the reverse-mode gradient of a scalar function against central
/// differences `(f(θ+h) − f(θ−h)) / 2h` for every element of every input.
///
/// `f` receives a fresh graph and one leaf per entry of `inputs`.
pub fn grad_check<F>(mut f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut eval = |values: &[Tensor]| -> Result<(f64, Graph, Vec<Var>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(Error::Dimension("grad_check needs a scalar function".into()));
        }
        let y = g.value(out).data()[0];
        g.backward(out)?;
        Ok((y, g, vars))
    };

    let (_, g, vars) = eval(inputs)?;
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match g.grad(*v) {
            Some(gr) => analytic.extend_from_slice(gr.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }
    drop(g);

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..work.len() {
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let (plus, ..) = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let (minus, ..) = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
    }
    Ok(max_rel_error(&analytic, &numeric))
}

/// Like [`grad_check`] for a parameterised function: checks the gradient with
/// respect to every parameter in `store` and to `input`. `f` must read its
/// parameters through [`Graph::param`].
pub fn grad_check_params<F>(mut f: F, store: &ParamStore, input: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore, Var) -> Result<Var>,
{
    let mut eval = |store: &ParamStore, input: &Tensor, grads: bool| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let out = f(&mut g, store, x)?;
        if g.value(out).len() != 1 {
            return Err(Error::Dimension("grad_check needs a scalar function".into()));
        }
        let y = g.value(out).data()[0];
        let mut flat = Vec::new();
        if grads {
            g.backward(out)?;
            for t in g.param_grads(store) {
                flat.extend_from_slice(t.data());
            }
            match g.grad(x) {
                Some(gx) => flat.extend_from_slice(gx.data()),
                None => flat.extend(std::iter::repeat_n(0.0, input.len())),
            }
        }
        Ok((y, flat))
    };

    let (_, analytic) = eval(store, input, true)?;
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = store.clone();
    for id in store.ids() {
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let (plus, _) = eval(&work, input, false)?;
            work.get_mut(id).data_mut()[j] = orig - h;
            let (minus, _) = eval(&work, input, false)?;
            work.get_mut(id).data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
    }
    let mut x = input.clone();
    for j in 0..x.len() {
        let orig = x.data()[j];
        x.data_mut()[j] = orig + h;
        let (plus, _) = eval(store, &x, false)?;
        x.data_mut()[j] = orig - h;
        let (minus, _) = eval(store, &x, false)?;
        x.data_mut()[j] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }
    Ok(max_rel_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let theta = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let s = g.square(v[0]);
                Ok(g.sum_all(s))
            },
            std::slice::from_ref(&theta),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "rel err {err}");

        let mut g = Graph::new();
        let v = g.leaf(theta);
        let s = g.square(v);
        let l = g.sum_all(s);
        g.backward(l).unwrap();
        assert_eq!(g.grad(v).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn corrupted_backward_rule_is_caught() {
        let theta = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let value = g.value(v[0]).map(|x| x * x);
                // derivative deliberately off by 10%
                let y = g.custom(
                    value,
                    &[v[0]],
                    Box::new(|up, p, _| vec![up.zip_map(p[0], |u, x| u * 2.2 * x).unwrap()]),
                );
                Ok(g.sum_all(y))
            },
            &[theta],
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-2, "rel err {err}");
    }

    #[test]
    fn backward_visits_each_node_once() {
        use std::cell::Cell;
        use std::rc::Rc;
        let calls = Rc::new(Cell::new(0));
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let c = calls.clone();
        let shared = g.custom(
            Tensor::scalar(6.0),
            &[x],
            Box::new(move |up, _, _| {
                c.set(c.get() + 1);
                vec![up.map(|u| 2.0 * u)]
            }),
        );
        // diamond: shared feeds two branches that rejoin
        let a = g.scale(shared, 2.0);
        let b = g.square(shared);
        let y = g.add(a, b).unwrap();
        let ran = g.backward(y).unwrap();
        assert_eq!(calls.get(), 1);
        assert_eq!(ran, 4);
        // d/dx (2·2x + (2x)²) = 4 + 8x = 28
        assert_eq!(g.grad(x).unwrap().data(), &[28.0]);
    }
}
