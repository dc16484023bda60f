use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::primitives::{derive_stream, Purpose, Seed, StreamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Nonlinearity {
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "tanh")]
    Tanh,
}

impl Nonlinearity {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Nonlinearity::Relu => z.max(0.0),
            Nonlinearity::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation value `h = σ(z)`.
    #[inline]
    pub fn derivative_from_output(self, h: f64) -> f64 {
        match self {
            Nonlinearity::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Tanh => 1.0 - h * h,
        }
    }
}

impl std::str::FromStr for Nonlinearity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Nonlinearity::Relu),
            "tanh" => Ok(Nonlinearity::Tanh),
            other => Err(format!("unknown nonlinearity {other:?}")),
        }
    }
}

/// Fully connected layer `y = x·W + b` with `W` stored input-major
/// (`n_in × n_out`, row-major), so row `j` of `W` holds feature `j`'s weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            w: vec![0.0; n_in * n_out],
            b: vec![0.0; n_out],
        }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (n_in + n_out) as f64).sqrt();
        Self {
            n_in,
            n_out,
            w: (0..n_in * n_out).map(|_| rng.gen_range(-limit..limit)).collect(),
            b: vec![0.0; n_out],
        }
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.w);
        out.extend_from_slice(&self.b);
    }

    fn step(&mut self, delta: &[f64], lr: f64) {
        let (dw, db) = delta.split_at(self.w.len());
        self.w.iter_mut().zip(dw).for_each(|(p, d)| *p -= lr * d);
        self.b.iter_mut().zip(db).for_each(|(p, d)| *p -= lr * d);
    }
}

/// Layer widths and task counts of a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub n_head: usize,
    pub n_catalogue: usize,
    pub nonlinearity: Nonlinearity,
}

impl Architecture {
    pub fn trunk_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.feature_dim];
        dims.extend(&self.hidden);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn last_hidden(&self) -> usize {
        *self.hidden.last().unwrap_or(&self.feature_dim)
    }

    pub fn trunk_len(&self) -> usize {
        self.trunk_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Shared trunk, private head and optional catalogue head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub trunk: Vec<Dense>,
    pub head: Dense,
    pub catalogue_head: Option<Dense>,
    pub nonlinearity: Nonlinearity,
}

impl ModelParams {
    /// Initializes a model. The trunk depends only on `trunk_seed`, so every
    /// partner given the same run seed starts from the same trunk; the head
    /// comes from the partner's own seed.
    pub fn init(
        arch: &Architecture,
        trunk_seed: &Seed,
        head_seed: &Seed,
        catalogue_seed: Option<&Seed>,
    ) -> Result<Self, ModelError> {
        if arch.hidden.is_empty() || arch.hidden.contains(&0) || arch.feature_dim == 0 {
            return Err(ModelError::Shape("trunk needs at least one non-empty hidden layer".into()));
        }
        let mut trng = derive_stream(trunk_seed, StreamId::item(Purpose::TrunkInit, 0));
        let trunk = arch
            .trunk_shapes()
            .into_iter()
            .map(|(i, o)| Dense::glorot(i, o, &mut trng))
            .collect();
        let mut hrng = derive_stream(head_seed, StreamId::item(Purpose::HeadInit, 0));
        let head = Dense::glorot(arch.last_hidden(), arch.n_head.max(1), &mut hrng);
        let head = if arch.n_head == 0 {
            Dense::zeros(arch.last_hidden(), 0)
        } else {
            head
        };
        let catalogue_head = match (arch.n_catalogue, catalogue_seed) {
            (0, _) | (_, None) => None,
            (n, Some(seed)) => {
                let mut crng = derive_stream(seed, StreamId::item(Purpose::CatalogueInit, 0));
                Some(Dense::glorot(arch.last_hidden(), n, &mut crng))
            }
        };
        Ok(Self {
            trunk,
            head,
            catalogue_head,
            nonlinearity: arch.nonlinearity,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk[0].n_in
    }

    pub fn n_head(&self) -> usize {
        self.head.n_out
    }

    pub fn n_catalogue(&self) -> usize {
        self.catalogue_head.as_ref().map_or(0, |c| c.n_out)
    }

    pub fn n_outputs(&self) -> usize {
        self.n_head() + self.n_catalogue()
    }

    pub fn trunk_len(&self) -> usize {
        self.trunk.iter().map(Dense::n_params).sum()
    }

    /// Flattened trunk: `W0, b0, W1, b1, ...`.
    pub fn trunk_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trunk_len());
        for layer in &self.trunk {
            layer.write_flat(&mut out);
        }
        out
    }

    pub fn head_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.head.n_params());
        self.head.write_flat(&mut out);
        out
    }

    pub fn catalogue_flat(&self) -> Option<Vec<f64>> {
        self.catalogue_head.as_ref().map(|c| {
            let mut out = Vec::with_capacity(c.n_params());
            c.write_flat(&mut out);
            out
        })
    }

    /// Overwrites the trunk from a flattened vector.
    pub fn set_trunk_flat(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.trunk_len() {
            return Err(ModelError::ShapeMismatch {
                expected: self.trunk_len(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        for layer in &mut self.trunk {
            let nw = layer.w.len();
            layer.w.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = layer.b.len();
            layer.b.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Plain SGD step: `trunk -= lr·trunk_delta`, `head -= lr·head_grad`.
    pub fn apply_update(
        &self,
        trunk_delta: &[f64],
        head_grad: &[f64],
        lr: f64,
    ) -> Result<ModelParams, ModelError> {
        if trunk_delta.len() != self.trunk_len() {
            return Err(ModelError::ShapeMismatch {
                expected: self.trunk_len(),
                got: trunk_delta.len(),
            });
        }
        if head_grad.len() != self.head.n_params() {
            return Err(ModelError::ShapeMismatch {
                expected: self.head.n_params(),
                got: head_grad.len(),
            });
        }
        let mut next = self.clone();
        let mut off = 0;
        for layer in &mut next.trunk {
            let n = layer.n_params();
            layer.step(&trunk_delta[off..off + n], lr);
            off += n;
        }
        next.head.step(head_grad, lr);
        Ok(next)
    }

    /// SGD step on the catalogue head only.
    pub fn apply_catalogue_update(&self, delta: &[f64], lr: f64) -> Result<ModelParams, ModelError> {
        let cat = self
            .catalogue_head
            .as_ref()
            .ok_or_else(|| ModelError::Shape("model has no catalogue head".into()))?;
        if delta.len() != cat.n_params() {
            return Err(ModelError::ShapeMismatch {
                expected: cat.n_params(),
                got: delta.len(),
            });
        }
        let mut next = self.clone();
        if let Some(c) = next.catalogue_head.as_mut() {
            c.step(delta, lr);
        }
        Ok(next)
    }
}
