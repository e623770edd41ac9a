//! Parameterized layers that register their weights in a [`ParamStore`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId, ParamId, ParamStore};
use crate::error::Result;
use crate::nn::{self, ConvSpec, LinearSpec};
use crate::tensor::Tensor;

/// Deterministic RNG for one named parameter. Seeding per name keeps shared
/// layers identical across network variants built from the same seed.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvLayer {
    /// Xavier-initialized weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let wname = format!("{name}.weight");
        let weight = nn::xavier_conv(&spec, &mut param_rng(seed, &wname));
        Ok(ConvLayer {
            spec,
            weight: store.add(wname, weight),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([spec.out_channels])),
        })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, self.spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearLayer {
    pub spec: LinearSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearLayer {
    pub fn new(store: &mut ParamStore, name: &str, spec: LinearSpec, seed: u64) -> Self {
        let wname = format!("{name}.weight");
        let weight = nn::xavier_linear(&spec, &mut param_rng(seed, &wname));
        LinearLayer {
            spec,
            weight: store.add(wname, weight),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([spec.out_dim])),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b, self.spec)
    }
}
