use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

/// Adam hyperparameters other than the learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return dim_err(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return dim_err(format!(
                "adam: param {i} shape {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            ));
        }
        if !g.all_finite() {
            return Err(Error::Diverged(format!("non-finite gradient in parameter {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for j in 0..pd.len() {
            md[j] = cfg.beta1 * md[j] + (1.0 - cfg.beta1) * gd[j];
            vd[j] = cfg.beta2 * vd[j] + (1.0 - cfg.beta2) * gd[j] * gd[j];
            let m_hat = md[j] / bc1;
            let v_hat = vd[j] / bc2;
            pd[j] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let g = vec![Tensor::zeros(&[3])];
        let mut st = AdamState::new(&p);
        for _ in 0..3 {
            adam_step(&mut p, &g, &mut st, 1e-3, AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::scalar(0.7)];
        let g = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 0.1, AdamConfig::default()).unwrap();
        // m_hat = 1, v_hat = 1 after bias correction
        let expected = 0.7 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn descends_on_quadratic() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(&p);
        let mut last = 1.0f64;
        for _ in 0..5 {
            let g = vec![Tensor::scalar(2.0 * p[0].data()[0])];
            adam_step(&mut p, &g, &mut st, 0.1, AdamConfig::default()).unwrap();
            let now = p[0].data()[0].abs();
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &[Tensor::scalar(f64::NAN)], &mut st, 0.1, AdamConfig::default());
        assert!(matches!(err, Err(Error::Diverged(_))));
        assert_eq!(p[0].data()[0], 1.0);
    }
}
