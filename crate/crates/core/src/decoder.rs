//! Decoding stage: a linear head shared across variates, mapping the latent
//! `(B, C, L, D)` back to `(B, N, P, 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::layers::{Linear, ParamBuilder};
use crate::numcore::{Graph, ParamStore, Var};

/// How latent axes map back onto the variates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlattenPolicy {
    /// `C == N`: flatten `(L, D)` per variate, then `L·D → P`.
    PerVariate,
    /// `C == 1, D == N`: map `L → P` per feature slot, then move features back
    /// to the variate axis.
    FeatureSlots,
}

impl FlattenPolicy {
    /// Resolves the policy for a latent shape. `feature_slots` asks for the
    /// channel-as-feature layout.
    pub fn resolve(dims: (usize, usize, usize), variates: usize, feature_slots: bool) -> Result<Self> {
        let (c, _, d) = dims;
        if feature_slots && c == 1 && d == variates {
            Ok(FlattenPolicy::FeatureSlots)
        } else if !feature_slots && c == variates {
            Ok(FlattenPolicy::PerVariate)
        } else {
            Err(Error::Config(format!(
                "cannot map latent (C, L, D) = {dims:?} back to {variates} variates"
            )))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub policy: FlattenPolicy,
    pub horizon: usize,
    pub variates: usize,
    dims: (usize, usize, usize),
    head: Linear,
}

impl Decoder {
    pub fn build(
        dims: (usize, usize, usize),
        variates: usize,
        horizon: usize,
        policy: FlattenPolicy,
        pb: &mut ParamBuilder<'_>,
    ) -> Result<Self> {
        let (_, l, d) = dims;
        let fan_in = match policy {
            FlattenPolicy::PerVariate => l * d,
            FlattenPolicy::FeatureSlots => l,
        };
        if horizon == 0 {
            return Err(Error::Parameter("horizon must be positive".into()));
        }
        Ok(Self {
            policy,
            horizon,
            variates,
            dims,
            head: pb.linear("head", fan_in, horizon),
        })
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn param_count(&self) -> usize {
        self.head.param_count()
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, z: Var) -> Result<Var> {
        let (b, c, l, d) = g.value(z).dims4()?;
        if (c, l, d) != self.dims {
            return dim_err(format!(
                "decoder built for (C, L, D) = {:?}, got {:?}",
                self.dims,
                (c, l, d)
            ));
        }
        let n = self.variates;
        let p = self.horizon;
        match self.policy {
            FlattenPolicy::PerVariate => {
                let flat = g.reshape(z, &[b, n, l * d])?;
                let y = self.head.forward(g, params, flat)?;
                g.reshape(y, &[b, n, p, 1])
            }
            FlattenPolicy::FeatureSlots => {
                // (B, 1, L, N) -> (B, N, L) -> (B, N, P)
                let t = g.reshape(z, &[b, l, n])?;
                let t = g.swap_axes(t, 1, 2)?;
                let y = self.head.forward(g, params, t)?;
                g.reshape(y, &[b, n, p, 1])
            }
        }
    }
}
