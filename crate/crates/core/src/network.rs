//! Fully-connected networks with flat parameter storage.
//!
//! Parameters pack as `(W_1, b_1, W_2, b_2, ..., W_L, b_L)` with each weight
//! matrix stored row-major (`W_l` is `n_l x n_{l-1}`). Hidden layers apply
//! the activation; the final layer is affine.

use crate::jet::Jet2;
use crate::tape::{AdjointTape, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetworkError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("input dimension mismatch: expected {expected}, got {got}")]
    InputDim { expected: usize, got: usize },
    #[error("parameter vector length mismatch: expected {expected}, got {got}")]
    ThetaLength { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    /// Test hook: identity activation makes the whole network affine.
    Identity,
}

/// Architecture description: input width, hidden widths, output width.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden,
            output_dim,
            activation: Activation::Gelu,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(NetworkError::InvalidSpec(
                "input and output widths must be >= 1".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(NetworkError::InvalidSpec(
                "hidden widths must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// `(n_in, n_out)` per layer in order. Final entry is the output layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &w in &self.hidden {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(n_in, n_out)| n_out * n_in + n_out)
            .sum()
    }
}

/// Byte offset bookkeeping for one layer inside the flat parameter vector.
#[derive(Clone, Copy, Debug)]
pub struct LayerOffsets {
    pub weight: usize,
    pub bias: usize,
    pub n_in: usize,
    pub n_out: usize,
}

/// A network: spec plus its flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpNetwork {
    spec: MlpSpec,
    theta: Vec<f64>,
}

impl MlpNetwork {
    /// Glorot-uniform weights from the seeded generator; biases zero.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self, NetworkError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vec::with_capacity(spec.param_count());
        for (n_in, n_out) in spec.layer_dims() {
            let limit = (6.0 / (n_in + n_out) as f64).sqrt();
            for _ in 0..n_in * n_out {
                theta.push(rng.random_range(-limit..limit));
            }
            theta.extend(std::iter::repeat_n(0.0, n_out));
        }
        Ok(MlpNetwork { spec, theta })
    }

    pub fn from_theta(spec: MlpSpec, theta: Vec<f64>) -> Result<Self, NetworkError> {
        spec.validate()?;
        if theta.len() != spec.param_count() {
            return Err(NetworkError::ThetaLength {
                expected: spec.param_count(),
                got: theta.len(),
            });
        }
        Ok(MlpNetwork { spec, theta })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<(), NetworkError> {
        if theta.len() != self.theta.len() {
            return Err(NetworkError::ThetaLength {
                expected: self.theta.len(),
                got: theta.len(),
            });
        }
        self.theta.copy_from_slice(theta);
        Ok(())
    }

    pub fn layer_offsets(&self) -> Vec<LayerOffsets> {
        let mut out = Vec::new();
        let mut off = 0;
        for (n_in, n_out) in self.spec.layer_dims() {
            out.push(LayerOffsets {
                weight: off,
                bias: off + n_in * n_out,
                n_in,
                n_out,
            });
            off += n_in * n_out + n_out;
        }
        out
    }

    /// Zero the final layer's weights and biases in place.
    pub fn zero_final_layer(&mut self) {
        let last = *self.layer_offsets().last().expect("at least one layer");
        for t in &mut self.theta[last.weight..last.bias + last.n_out] {
            *t = 0.0;
        }
    }

    fn activate(&self, v: f64) -> f64 {
        match self.spec.activation {
            Activation::Gelu => crate::jet::gelu_derivs(v).0,
            Activation::Identity => v,
        }
    }

    fn activate_jet(&self, v: Jet2) -> Jet2 {
        match self.spec.activation {
            Activation::Gelu => v.gelu(),
            Activation::Identity => v,
        }
    }

    /// Plain forward evaluation.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.spec.input_dim, "input dimension mismatch");
        let offsets = self.layer_offsets();
        let n_layers = offsets.len();
        let mut cur = x.to_vec();
        for (l, off) in offsets.iter().enumerate() {
            let mut next = Vec::with_capacity(off.n_out);
            for i in 0..off.n_out {
                let row = &self.theta[off.weight + i * off.n_in..off.weight + (i + 1) * off.n_in];
                let mut acc = self.theta[off.bias + i];
                for (w, v) in row.iter().zip(&cur) {
                    acc += w * v;
                }
                next.push(if l + 1 < n_layers {
                    self.activate(acc)
                } else {
                    acc
                });
            }
            cur = next;
        }
        cur
    }

    /// Forward evaluation on jets; outputs carry exact spatial derivatives.
    pub fn forward_jet(&self, x: &[Jet2]) -> Vec<Jet2> {
        assert_eq!(x.len(), self.spec.input_dim, "input dimension mismatch");
        let dim = x[0].dim();
        let offsets = self.layer_offsets();
        let n_layers = offsets.len();
        let mut cur = x.to_vec();
        for (l, off) in offsets.iter().enumerate() {
            let mut next = Vec::with_capacity(off.n_out);
            for i in 0..off.n_out {
                let row = &self.theta[off.weight + i * off.n_in..off.weight + (i + 1) * off.n_in];
                let mut acc = Jet2::constant(dim, self.theta[off.bias + i]);
                for (w, v) in row.iter().zip(&cur) {
                    acc = acc + *v * *w;
                }
                next.push(if l + 1 < n_layers {
                    self.activate_jet(acc)
                } else {
                    acc
                });
            }
            cur = next;
        }
        cur
    }

    /// Record the forward pass on a tape, binding every parameter as a tape
    /// param in pack order. Used to cross-check the batched gradient engine.
    pub fn tape_forward(&self, tape: &mut AdjointTape, x: &[Var]) -> Vec<Var> {
        assert_eq!(x.len(), self.spec.input_dim, "input dimension mismatch");
        let offsets = self.layer_offsets();
        let n_layers = offsets.len();
        // Bind theta in pack order so tape gradients align with it.
        let params: Vec<Var> = self.theta.iter().map(|&t| tape.param(t)).collect();
        let mut cur = x.to_vec();
        for (l, off) in offsets.iter().enumerate() {
            let mut next = Vec::with_capacity(off.n_out);
            for i in 0..off.n_out {
                let mut acc = params[off.bias + i];
                for (j, v) in cur.iter().enumerate() {
                    let w = params[off.weight + i * off.n_in + j];
                    acc = tape.mul_add(acc, w, *v);
                }
                next.push(if l + 1 < n_layers {
                    match self.spec.activation {
                        Activation::Gelu => tape.gelu(acc),
                        Activation::Identity => acc,
                    }
                } else {
                    acc
                });
            }
            cur = next;
        }
        cur
    }
}

/// Shared closure for anchor terms and other vector fields of `x`.
pub type VectorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// A network whose output is `anchor(x) + base(x)` with the base's final
/// layer zero-initialized, so the freshly built network reproduces the
/// anchor exactly.
#[derive(Clone)]
pub struct AnchoredNetwork {
    base: MlpNetwork,
    anchor: VectorFn,
}

impl AnchoredNetwork {
    pub fn new(mut base: MlpNetwork, anchor: VectorFn) -> Self {
        base.zero_final_layer();
        AnchoredNetwork { base, anchor }
    }

    /// Rebuild around an already-trained base (final layer left untouched).
    pub fn from_trained(base: MlpNetwork, anchor: VectorFn) -> Self {
        AnchoredNetwork { base, anchor }
    }

    pub fn base(&self) -> &MlpNetwork {
        &self.base
    }

    pub fn base_mut(&mut self) -> &mut MlpNetwork {
        &mut self.base
    }

    pub fn anchor_values(&self, x: &[f64]) -> Vec<f64> {
        (self.anchor)(x)
    }

    pub fn anchor(&self) -> VectorFn {
        Arc::clone(&self.anchor)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = (self.anchor)(x);
        let net = self.base.forward(x);
        for (o, n) in out.iter_mut().zip(net) {
            *o += n;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jet::seed_spatial;
    use proptest::prelude::*;

    fn spec_2d(hidden: Vec<usize>) -> MlpSpec {
        MlpSpec::new(2, hidden, 2)
    }

    #[test]
    fn init_is_deterministic() {
        let a = MlpNetwork::init(spec_2d(vec![8, 8]), 42).unwrap();
        let b = MlpNetwork::init(spec_2d(vec![8, 8]), 42).unwrap();
        assert_eq!(a.theta(), b.theta());
        let c = MlpNetwork::init(spec_2d(vec![8, 8]), 43).unwrap();
        assert_ne!(a.theta(), c.theta());
    }

    #[test]
    fn param_count_for_paper_architecture() {
        let spec = spec_2d(vec![50, 50, 50, 50]);
        assert_eq!(spec.param_count(), 7902);
        let net = MlpNetwork::init(spec, 0).unwrap();
        assert_eq!(net.theta().len(), 7902);
    }

    #[test]
    fn glorot_variance_at_width_128() {
        let spec = MlpSpec::new(128, vec![128], 128);
        let net = MlpNetwork::init(spec, 7).unwrap();
        let off = net.layer_offsets()[0];
        let w = &net.theta()[off.weight..off.bias];
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let var: f64 = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / 256.0;
        assert!(
            (var - expected).abs() < 0.2 * expected,
            "variance {var} vs {expected}"
        );
    }

    #[test]
    fn zero_theta_outputs_zero() {
        let spec = spec_2d(vec![16, 16]);
        let theta = vec![0.0; spec.param_count()];
        let net = MlpNetwork::from_theta(spec, theta).unwrap();
        assert_eq!(net.forward(&[0.7, -0.4]), vec![0.0, 0.0]);
    }

    #[test]
    fn scalar_chain_is_gelu() {
        // 1-1-1 network with unit weights and zero biases computes gelu(x).
        let spec = MlpSpec {
            input_dim: 1,
            hidden: vec![1],
            output_dim: 1,
            activation: Activation::Gelu,
        };
        let net = MlpNetwork::from_theta(spec, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let y = net.forward(&[1.0])[0];
        assert!((y - 0.841345).abs() < 1e-6, "gelu(1) = {y}");
    }

    #[test]
    fn jet_and_plain_forward_agree_on_values() {
        let net = MlpNetwork::init(spec_2d(vec![12, 12]), 5).unwrap();
        let x = [0.35, 1.25];
        let plain = net.forward(&x);
        let jets = net.forward_jet(&seed_spatial(&x).unwrap());
        for (p, j) in plain.iter().zip(&jets) {
            assert_eq!(*p, j.value());
        }
    }

    #[test]
    fn identity_activation_network_is_affine() {
        let mut spec = spec_2d(vec![10, 10]);
        spec.activation = Activation::Identity;
        let net = MlpNetwork::init(spec, 11).unwrap();
        let jets = net.forward_jet(&seed_spatial(&[0.2, -0.9]).unwrap());
        for out in jets {
            assert_eq!(out.hess_packed(), &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn anchored_network_reproduces_anchor_when_fresh() {
        let base = MlpNetwork::init(spec_2d(vec![8]), 3).unwrap();
        let anchor: VectorFn = Arc::new(|x: &[f64]| vec![x[0] / 3.0, (x[0] + x[1]) / 3.0]);
        let net = AnchoredNetwork::new(base, Arc::clone(&anchor));
        for x in [[0.0, 0.0], [1.2, -0.4], [3.0, 2.5]] {
            assert_eq!(net.forward(&x), (anchor)(&x));
        }
    }

    #[test]
    fn anchored_network_deviation_scales_with_perturbation() {
        let base = MlpNetwork::init(spec_2d(vec![8]), 3).unwrap();
        let anchor: VectorFn = Arc::new(|x: &[f64]| vec![x[0] / 3.0, x[1] / 3.0]);
        let mut net = AnchoredNetwork::new(base, Arc::clone(&anchor));
        let x = [0.8, 0.3];
        let last = *net.base().layer_offsets().last().unwrap();
        for eps in [1e-3, 1e-6] {
            let mut theta = net.base().theta().to_vec();
            for t in &mut theta[last.weight..last.bias + last.n_out] {
                *t = eps;
            }
            net.base_mut().set_theta(&theta).unwrap();
            let out = net.forward(&x);
            let dev: f64 = out
                .iter()
                .zip((anchor)(&x))
                .map(|(o, a)| (o - a).abs())
                .sum();
            assert!(dev > 0.0 && dev < 100.0 * eps, "eps {eps} dev {dev}");
        }
    }

    proptest! {
        #[test]
        fn final_layer_is_positively_homogeneous(scale in 0.1f64..10.0) {
            let net = MlpNetwork::init(spec_2d(vec![6, 6]), 9).unwrap();
            let x = [0.4, 0.9];
            let base = net.forward(&x);
            let mut scaled = net.clone();
            let last = *scaled.layer_offsets().last().unwrap();
            // b_L is zero from init, so scaling W_L scales the output.
            for t in &mut scaled.theta_mut()[last.weight..last.bias] {
                *t *= scale;
            }
            let out = scaled.forward(&x);
            for (o, b) in out.iter().zip(&base) {
                prop_assert!((o - scale * b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }

        #[test]
        fn theta_round_trip(seed in 0u64..1000) {
            let net = MlpNetwork::init(spec_2d(vec![5, 7]), seed).unwrap();
            let rebuilt =
                MlpNetwork::from_theta(net.spec().clone(), net.theta().to_vec()).unwrap();
            prop_assert_eq!(net.theta(), rebuilt.theta());
        }
    }
}
