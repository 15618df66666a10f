//! Data-view stage: maps `(B, N, T, 1)` windows onto the `(B, C, L, D)` latent
//! interface.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::layers::{Linear, ParamBuilder};
use crate::numcore::{Graph, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Point,
    Patch,
    Variate,
    Identity,
    TimeAsFeature,
    ChannelAsFeature,
}

impl EmbeddingKind {
    pub const ALL: [EmbeddingKind; 6] = [
        EmbeddingKind::Point,
        EmbeddingKind::Patch,
        EmbeddingKind::Variate,
        EmbeddingKind::Identity,
        EmbeddingKind::TimeAsFeature,
        EmbeddingKind::ChannelAsFeature,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingKind::Point => "point",
            EmbeddingKind::Patch => "patch",
            EmbeddingKind::Variate => "variate",
            EmbeddingKind::Identity => "identity",
            EmbeddingKind::TimeAsFeature => "time_as_feature",
            EmbeddingKind::ChannelAsFeature => "channel_as_feature",
        }
    }

    /// Whether the latent width `D` is a free hyperparameter of this view.
    pub fn uses_latent_dim(self) -> bool {
        matches!(self, EmbeddingKind::Point | EmbeddingKind::Patch | EmbeddingKind::Variate)
    }
}

impl std::str::FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown embedding {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    pub kind: EmbeddingKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
}

pub const DEFAULT_PATCH_LEN: usize = 16;
pub const DEFAULT_STRIDE: usize = 8;

impl EmbeddingSpec {
    /// Spec with the fields `kind` needs: `latent_dim` for learnable views and
    /// the 16/8 patch geometry for patches.
    pub fn new(kind: EmbeddingKind, latent_dim: usize) -> Self {
        let patch = kind == EmbeddingKind::Patch;
        Self {
            kind,
            latent_dim: kind.uses_latent_dim().then_some(latent_dim),
            patch_len: patch.then_some(DEFAULT_PATCH_LEN),
            stride: patch.then_some(DEFAULT_STRIDE),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let patch = self.kind == EmbeddingKind::Patch;
        if patch != (self.patch_len.is_some() && self.stride.is_some())
            || (!patch && (self.patch_len.is_some() || self.stride.is_some()))
        {
            return Err(Error::Config(format!(
                "{} embedding: patch_len/stride are required for patch and only patch",
                self.kind.as_str()
            )));
        }
        if self.kind.uses_latent_dim() != self.latent_dim.is_some() {
            return Err(Error::Config(format!(
                "{} embedding: latent_dim is required iff the view is learnable",
                self.kind.as_str()
            )));
        }
        if self.latent_dim == Some(0) {
            return Err(Error::Parameter("latent_dim must be positive".into()));
        }
        if patch {
            let (p, s) = (self.patch_len.unwrap(), self.stride.unwrap());
            if s == 0 || p < s {
                return Err(Error::Parameter(format!(
                    "patch_len {p} must be >= stride {s} >= 1"
                )));
            }
        }
        Ok(())
    }

    /// `(C, L, D)` produced from `N` variates and lookback `T`.
    pub fn output_dims(&self, variates: usize, lookback: usize) -> (usize, usize, usize) {
        let d = self.latent_dim.unwrap_or(1);
        match self.kind {
            EmbeddingKind::Point => (variates, lookback, d),
            EmbeddingKind::Patch => (variates, lookback.div_ceil(self.stride.unwrap_or(DEFAULT_STRIDE)), d),
            EmbeddingKind::Variate => (variates, 1, d),
            EmbeddingKind::Identity => (variates, lookback, 1),
            EmbeddingKind::TimeAsFeature => (variates, 1, lookback),
            EmbeddingKind::ChannelAsFeature => (1, lookback, variates),
        }
    }
}

/// An assembled embedding stage.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub spec: EmbeddingSpec,
    lookback: usize,
    projection: Option<Linear>,
    /// Replicate-padded unfold positions for patch views.
    patch_positions: Vec<usize>,
}

impl Embedding {
    pub fn build(spec: &EmbeddingSpec, lookback: usize, pb: &mut ParamBuilder<'_>) -> Result<Self> {
        spec.validate()?;
        if lookback == 0 {
            return Err(Error::Parameter("lookback must be positive".into()));
        }
        let mut patch_positions = Vec::new();
        let projection = match spec.kind {
            EmbeddingKind::Point => Some(pb.linear("embed_point", 1, spec.latent_dim.unwrap())),
            EmbeddingKind::Variate => Some(pb.linear("embed_variate", lookback, spec.latent_dim.unwrap())),
            EmbeddingKind::Patch => {
                let (p, s) = (spec.patch_len.unwrap(), spec.stride.unwrap());
                let tokens = lookback.div_ceil(s);
                patch_positions = (0..tokens)
                    .flat_map(|l| (0..p).map(move |j| (l * s + j).min(lookback - 1)))
                    .collect();
                Some(pb.linear("embed_patch", p, spec.latent_dim.unwrap()))
            }
            EmbeddingKind::Identity | EmbeddingKind::TimeAsFeature | EmbeddingKind::ChannelAsFeature => None,
        };
        Ok(Self {
            spec: spec.clone(),
            lookback,
            projection,
            patch_positions,
        })
    }

    pub fn param_count(&self) -> usize {
        self.projection.map_or(0, |l| l.param_count())
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let (b, n, t, d) = g.value(x).dims4()?;
        if d != 1 {
            return dim_err(format!("embedding input must be (B, N, T, 1), got {:?}", g.value(x).shape()));
        }
        if t != self.lookback {
            return dim_err(format!(
                "{} embedding built for lookback {} but input has T={t}",
                self.spec.kind.as_str(),
                self.lookback
            ));
        }
        match self.spec.kind {
            EmbeddingKind::Identity => Ok(x),
            EmbeddingKind::Point => self.projection.unwrap().forward(g, params, x),
            EmbeddingKind::Variate => {
                let r = g.reshape(x, &[b, n, 1, t])?;
                self.projection.unwrap().forward(g, params, r)
            }
            EmbeddingKind::Patch => {
                let p = self.spec.patch_len.unwrap();
                let tokens = self.patch_positions.len() / p;
                let unfolded = g.index_select(x, 2, &self.patch_positions)?;
                let patches = g.reshape(unfolded, &[b, n, tokens, p])?;
                self.projection.unwrap().forward(g, params, patches)
            }
            EmbeddingKind::TimeAsFeature => g.reshape(x, &[b, n, 1, t]),
            EmbeddingKind::ChannelAsFeature => g.permute(x, &[0, 3, 2, 1]),
        }
    }
}
