//! Channel gating block: spatial mean pooling, a `C → C/4 → C` transform with
//! ReLU then Sigmoid, and a per-channel broadcast multiply.

use crate::autograd::{Graph, NodeId, ParamStore};
use crate::error::{DesError, Result};
use crate::layers::LinearLayer;
use crate::nn::LinearSpec;
use crate::tensor::Tensor;

/// Bottleneck reduction factor of the channel transform.
pub const REDUCTION: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalActivation {
    pub channels: usize,
    pub squeeze: LinearLayer,
    pub excite: LinearLayer,
}

impl GlobalActivation {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, seed: u64) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(REDUCTION) {
            return Err(DesError::config(
                format!("{prefix}.channels"),
                format!("global activation needs a positive multiple of {REDUCTION} channels, got {channels}"),
            ));
        }
        let reduced = channels / REDUCTION;
        Ok(GlobalActivation {
            channels,
            squeeze: LinearLayer::new(
                store,
                &format!("{prefix}.w1"),
                LinearSpec {
                    in_dim: channels,
                    out_dim: reduced,
                },
                seed,
            ),
            excite: LinearLayer::new(
                store,
                &format!("{prefix}.w2"),
                LinearSpec {
                    in_dim: reduced,
                    out_dim: channels,
                },
                seed,
            ),
        })
    }

    /// The `C×1×1` gate `sigmoid(W₂·relu(W₁·mean_hw(x)))`.
    pub fn gate(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let (c, _, _) = g.value(x).chw()?;
        if c != self.channels {
            return Err(DesError::shape(
                "global_activate",
                format!("input has {c} channels, block expects {}", self.channels),
            ));
        }
        let pooled = g.mean(x, &[1, 2])?;
        let hidden = self.squeeze.apply(g, store, pooled)?;
        let hidden = g.relu(hidden);
        let logits = self.excite.apply(g, store, hidden)?;
        let s = g.sigmoid(logits);
        g.reshape(s, &[c, 1, 1])
    }

    pub fn build(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let s = self.gate(g, store, x)?;
        g.mul(x, s)
    }

    pub fn global_activate(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let out = self.build(&mut g, store, xi)?;
        Ok(g.value(out).clone())
    }

    pub fn gate_values(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let s = self.gate(&mut g, store, xi)?;
        Ok(g.value(s).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_check, DEFAULT_EPS};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    fn block(c: usize, rng: &mut ChaCha8Rng) -> (ParamStore, GlobalActivation) {
        let mut store = ParamStore::new();
        let b = GlobalActivation::new(&mut store, "ga", c, 1).unwrap();
        for t in store.tensors_mut() {
            *t = random(t.shape(), rng);
        }
        (store, b)
    }

    /// Fully unrolled scalar evaluation.
    #[allow(clippy::needless_range_loop)]
    fn unrolled(store: &ParamStore, b: &GlobalActivation, x: &Tensor) -> Tensor {
        let (c, h, w) = x.chw().unwrap();
        let r = c / 4;
        let (w1, b1) = (store.get(b.squeeze.weight), store.get(b.squeeze.bias));
        let (w2, b2) = (store.get(b.excite.weight), store.get(b.excite.bias));
        let mut z = vec![0.0; c];
        for i in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    s += x.at3(i, y, xx);
                }
            }
            z[i] = s / (h * w) as f64;
        }
        let mut hid = vec![0.0; r];
        for j in 0..r {
            let mut s = b1.data()[j];
            for i in 0..c {
                s += w1.data()[j * c + i] * z[i];
            }
            hid[j] = s.max(0.0);
        }
        let mut out = x.clone();
        for i in 0..c {
            let mut s = b2.data()[i];
            for j in 0..r {
                s += w2.data()[i * r + j] * hid[j];
            }
            let gate = 1.0 / (1.0 + (-s).exp());
            for y in 0..h {
                for xx in 0..w {
                    out.data_mut()[(i * h + y) * w + xx] = x.at3(i, y, xx) * gate;
                }
            }
        }
        out
    }

    #[test]
    fn zero_weights_halve_features() {
        let mut store = ParamStore::new();
        let b = GlobalActivation::new(&mut store, "ga", 8, 0).unwrap();
        for t in store.tensors_mut() {
            *t = Tensor::zeros(t.shape().to_vec());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&[8, 3, 3], &mut rng);
        assert_eq!(b.global_activate(&store, &x).unwrap(), x.scale(0.5));
    }

    #[test]
    fn zero_input_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (store, b) = block(8, &mut rng);
        let out = b.global_activate(&store, &Tensor::zeros([8, 4, 4])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_unrolled_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let (store, b) = block(8, &mut rng);
            let x = random(&[8, 5, 5], &mut rng);
            let fast = b.global_activate(&store, &x).unwrap();
            let slow = unrolled(&store, &b, &x);
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gating_strictly_shrinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (store, b) = block(12, &mut rng);
        let x = random(&[12, 4, 3], &mut rng);
        let out = b.global_activate(&store, &x).unwrap();
        for (o, v) in out.data().iter().zip(x.data()) {
            if *v != 0.0 {
                assert!(o.abs() < v.abs());
            }
        }
    }

    #[test]
    fn channel_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (store, b) = block(8, &mut rng);
        let x = random(&[8, 3, 4], &mut rng);
        let mut perm: Vec<usize> = (0..8).collect();
        perm.shuffle(&mut rng);

        let mut pstore = store.clone();
        let r = 2;
        // W1 columns and W2 rows / b2 entries follow the channel permutation.
        let w1 = store.get(b.squeeze.weight);
        *pstore.get_mut(b.squeeze.weight) = Tensor::from_fn([r, 8], |k| w1.data()[(k / 8) * 8 + perm[k % 8]]);
        let w2 = store.get(b.excite.weight);
        *pstore.get_mut(b.excite.weight) = Tensor::from_fn([8, r], |k| w2.data()[perm[k / r] * r + k % r]);
        let b2 = store.get(b.excite.bias);
        *pstore.get_mut(b.excite.bias) = Tensor::from_fn([8], |k| b2.data()[perm[k]]);

        let px = Tensor::from_fn([8, 3, 4], |k| x.data()[perm[k / 12] * 12 + k % 12]);
        let out = b.global_activate(&store, &x).unwrap();
        let pout = b.global_activate(&pstore, &px).unwrap();
        for k in 0..out.numel() {
            let expected = out.data()[perm[k / 12] * 12 + k % 12];
            assert!((pout.data()[k] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_shuffle_keeps_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (store, b) = block(8, &mut rng);
        let x = random(&[8, 4, 5], &mut rng);
        let mut pix: Vec<usize> = (0..20).collect();
        pix.shuffle(&mut rng);
        let shuffled = Tensor::from_fn([8, 4, 5], |k| x.data()[(k / 20) * 20 + pix[k % 20]]);
        let a = b.gate_values(&store, &x).unwrap();
        let s = b.gate_values(&store, &shuffled).unwrap();
        for (p, q) in a.data().iter().zip(s.data()) {
            assert!((p - q).abs() < 1e-14);
        }
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn rejects_bad_channels() {
        let mut store = ParamStore::new();
        assert!(GlobalActivation::new(&mut store, "ga", 6, 0).is_err());
        let b = GlobalActivation::new(&mut store, "gb", 8, 0).unwrap();
        assert!(b.global_activate(&store, &Tensor::zeros([4, 2, 2])).is_err());
    }

    #[test]
    fn gradients_through_all_stages() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (store, b) = block(8, &mut rng);
        let x = random(&[8, 3, 3], &mut rng);
        let weights = random(&[8, 3, 3], &mut rng);
        let r = finite_difference_check(
            |g, x| {
                let out = b.build(g, &store, x)?;
                let w = g.input(weights.clone());
                let p = g.mul(out, w)?;
                Ok(g.sum(p))
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
