//! Monotone feed-forward scorer shared by every branch of a Siamese
//! network.
//!
//! Each connection weight is stored as a free parameter `v` and used as
//! `v^2`, so effective weights are nonnegative whatever the optimizer does.
//! With monotone hidden activations and a logistic output the score is
//! nondecreasing in every input and lies in `(0, 1)`.

mod gradcheck;
mod loss;
mod train;

pub use gradcheck::{compare_gradients, gradient_check, GRADIENT_FLOOR};
pub use loss::{contrastive_grad, contrastive_loss, triplet_grad, triplet_loss};
pub use train::{
    batch_loss_and_gradient, train_contrastive, train_triplet, LossKind, SiameseModel, TrainConfig,
    TrainingBatch, TrainingOutcome,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureVector, NUM_FEATURES};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SiameseError {
    #[error("bad architecture: {0}")]
    BadArchitecture(String),
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("no training samples")]
    EmptyBatch,
    #[error("unsupported network format version {0}")]
    Version(u32),
}

/// Monotone nondecreasing activation for hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Logistic,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Logistic => logistic(z),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation value.
    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Logistic => a * (1.0 - a),
            Activation::Tanh => 1.0 - a * a,
        }
    }

    fn midpoint(self) -> f64 {
        match self {
            Activation::Logistic => 0.5,
            Activation::Tanh => 0.0,
        }
    }
}

pub(crate) fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Free parameters, row-major `outputs x inputs`; effective weight is
    /// the square.
    pub free: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn effective_weight(&self, out: usize, inp: usize) -> f64 {
        let v = self.free[out * self.inputs + inp];
        v * v
    }

    fn forward(&self, x: &[f64], activation: Activation, out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.free[o * self.inputs..(o + 1) * self.inputs];
            let z: f64 = self.bias[o] + row.iter().zip(x).map(|(v, xi)| v * v * xi).sum::<f64>();
            out.push(activation.apply(z));
        }
    }
}

pub const DEFAULT_HIDDEN: [usize; 2] = [16, 8];
pub const DEFAULT_INIT_SCALE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiameseNet {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub layers: Vec<Layer>,
}

/// Per-layer activations from one forward pass; `acts[0]` is the input.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> f64 {
        self.acts.last().expect("non-empty cache")[0]
    }
}

/// Gradient with the same shape as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub free: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &SiameseNet) -> Gradients {
        Gradients {
            free: net.layers.iter().map(|l| vec![0.0; l.free.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.free.iter_mut().chain(self.bias.iter_mut()) {
            v.iter_mut().for_each(|g| *g *= s);
        }
    }

    /// Flattened in [`SiameseNet::params`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (f, b) in self.free.iter().zip(&self.bias) {
            out.extend_from_slice(f);
            out.extend_from_slice(b);
        }
        out
    }
}

impl SiameseNet {
    /// Default 21-16-8-1 architecture.
    pub fn init_default(seed: u64) -> SiameseNet {
        let mut sizes = vec![NUM_FEATURES];
        sizes.extend(DEFAULT_HIDDEN);
        sizes.push(1);
        SiameseNet::init(&sizes, Activation::Logistic, DEFAULT_INIT_SCALE, seed)
            .expect("default architecture is valid")
    }

    /// Seeded initialization. Free parameters are drawn from
    /// `scale * U(0.2, 1) / sqrt(fan_in)`, and biases center each unit's
    /// pre-activation at the midpoint of its inputs' range.
    pub fn init(
        layer_sizes: &[usize],
        hidden_activation: Activation,
        init_scale: f64,
        seed: u64,
    ) -> Result<SiameseNet, SiameseError> {
        let bad = |m: String| Err(SiameseError::BadArchitecture(m));
        if layer_sizes.len() < 3 {
            return bad("need an input layer, at least one hidden layer and an output layer".into());
        }
        if layer_sizes[0] != NUM_FEATURES {
            return bad(format!("input size must be {NUM_FEATURES}, got {}", layer_sizes[0]));
        }
        if *layer_sizes.last().unwrap() != 1 {
            return bad(format!("output size must be 1, got {}", layer_sizes.last().unwrap()));
        }
        if layer_sizes.contains(&0) {
            return bad("layer sizes must be positive".into());
        }
        if !(init_scale.is_finite() && init_scale > 0.0) {
            return bad("init scale must be positive".into());
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(layer_sizes.len() - 1);
        for (l, pair) in layer_sizes.windows(2).enumerate() {
            let (inputs, outputs) = (pair[0], pair[1]);
            let spread = init_scale / (inputs as f64).sqrt();
            let free: Vec<f64> = (0..inputs * outputs)
                .map(|_| spread * rng.random_range(0.2..1.0))
                .collect();
            let mid = if l == 0 { 0.5 } else { hidden_activation.midpoint() };
            let bias = (0..outputs)
                .map(|o| {
                    -mid * free[o * inputs..(o + 1) * inputs]
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                })
                .collect();
            layers.push(Layer {
                inputs,
                outputs,
                free,
                bias,
            });
        }
        Ok(SiameseNet {
            layer_sizes: layer_sizes.to_vec(),
            hidden_activation,
            layers,
        })
    }

    pub fn check(&self) -> Result<(), SiameseError> {
        let bad = |m: &str| Err(SiameseError::BadArchitecture(m.to_string()));
        if self.layer_sizes.len() != self.layers.len() + 1
            || self.layer_sizes.first() != Some(&NUM_FEATURES)
            || self.layer_sizes.last() != Some(&1)
        {
            return bad("layer sizes do not describe a 21-input scalar-output network");
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.inputs != self.layer_sizes[l]
                || layer.outputs != self.layer_sizes[l + 1]
                || layer.free.len() != layer.inputs * layer.outputs
                || layer.bias.len() != layer.outputs
            {
                return bad("layer shapes do not match layer_sizes");
            }
        }
        Ok(())
    }

    fn activation_of(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            Activation::Logistic
        } else {
            self.hidden_activation
        }
    }

    pub fn forward_values(&self, x: &[f64; NUM_FEATURES]) -> f64 {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.forward(&cur, self.activation_of(l), &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        cur[0]
    }

    /// Score in `(0, 1)`.
    pub fn forward(&self, x: &FeatureVector) -> f64 {
        self.forward_values(&x.values)
    }

    pub fn forward_cached(&self, x: &[f64; NUM_FEATURES]) -> ForwardCache {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.forward(&acts[l], self.activation_of(l), &mut out);
            acts.push(out);
        }
        ForwardCache { acts }
    }

    /// Accumulate `d_output * d score / d params` into `grads`.
    pub fn backward(&self, cache: &ForwardCache, d_output: f64, grads: &mut Gradients) {
        if d_output == 0.0 {
            return;
        }
        let last = self.layers.len() - 1;
        let mut delta: Vec<f64> = vec![d_output * Activation::Logistic.derivative(cache.acts[last + 1][0])];
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &cache.acts[l];
            let gf = &mut grads.free[l];
            let gb = &mut grads.bias[l];
            for o in 0..layer.outputs {
                gb[o] += delta[o];
                let base = o * layer.inputs;
                for i in 0..layer.inputs {
                    gf[base + i] += delta[o] * input[i] * 2.0 * layer.free[base + i];
                }
            }
            if l == 0 {
                break;
            }
            let act = self.activation_of(l - 1);
            let mut prev = vec![0.0; layer.inputs];
            for (i, p) in prev.iter_mut().enumerate() {
                let s: f64 = (0..layer.outputs)
                    .map(|o| layer.effective_weight(o, i) * delta[o])
                    .sum();
                *p = s * act.derivative(input[i]);
            }
            delta = prev;
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.free.len() + l.bias.len()).sum()
    }

    /// Flattened parameters: per layer, free weights then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.free);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            if index < l.free.len() {
                return &mut l.free[index];
            }
            index -= l.free.len();
            if index < l.bias.len() {
                return &mut l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn effective_weights_nonnegative(&self) -> bool {
        self.layers
            .iter()
            .all(|l| (0..l.outputs).all(|o| (0..l.inputs).all(|i| l.effective_weight(o, i) >= 0.0)))
    }

    /// Little-endian bytes of every parameter, for determinism checks.
    pub fn param_bytes(&self) -> Vec<u8> {
        self.params().iter().flat_map(|p| p.to_le_bytes()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn init_is_deterministic() {
        let a = SiameseNet::init_default(11);
        let b = SiameseNet::init_default(11);
        assert_eq!(a.param_bytes(), b.param_bytes());
        assert_ne!(a.param_bytes(), SiameseNet::init_default(12).param_bytes());
        assert!(a.effective_weights_nonnegative());
        assert_eq!(a.layer_sizes, vec![21, 16, 8, 1]);
    }

    #[test]
    fn bad_architectures() {
        for sizes in [vec![21, 8, 2], vec![20, 8, 1], vec![21, 1], vec![21, 0, 1]] {
            assert!(matches!(
                SiameseNet::init(&sizes, Activation::Logistic, 1.0, 0),
                Err(SiameseError::BadArchitecture(_))
            ));
        }
    }

    #[test]
    fn zero_weight_net_is_constant() {
        let mut net = SiameseNet::init_default(3);
        for l in &mut net.layers {
            l.free.iter_mut().for_each(|v| *v = 0.0);
        }
        let a = net.forward_values(&[0.0; NUM_FEATURES]);
        let b = net.forward_values(&[1.0; NUM_FEATURES]);
        let c = net.forward_values(&[0.3; NUM_FEATURES]);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn shared_branches_are_bitwise_equal() {
        let net = SiameseNet::init_default(5);
        let x = [0.37; NUM_FEATURES];
        let left = net.forward_values(&x);
        let right = net.forward_values(&x);
        assert_eq!(left.to_bits(), right.to_bits());
        assert_eq!(net.forward_cached(&x).output().to_bits(), left.to_bits());
    }

    #[test]
    fn tanh_hidden_layers_stay_monotone() {
        let net = SiameseNet::init(&[21, 6, 1], Activation::Tanh, 2.0, 9).unwrap();
        let lo = net.forward_values(&[0.2; NUM_FEATURES]);
        let hi = net.forward_values(&[0.8; NUM_FEATURES]);
        assert!(lo <= hi);
    }

    fn arb_pair() -> impl Strategy<Value = ([f64; NUM_FEATURES], [f64; NUM_FEATURES])> {
        (
            proptest::array::uniform21(0.0f64..=1.0),
            proptest::array::uniform21(0.0f64..=1.0),
        )
            .prop_map(|(x, d)| {
                let mut hi = x;
                for (h, dv) in hi.iter_mut().zip(d) {
                    *h += dv * (1.0 - *h);
                }
                (x, hi)
            })
    }

    proptest! {
        #[test]
        fn forward_is_monotone_and_bounded((lo, hi) in arb_pair(), seed in 0u64..50) {
            let net = SiameseNet::init_default(seed);
            let a = net.forward_values(&lo);
            let b = net.forward_values(&hi);
            prop_assert!(a > 0.0 && a < 1.0);
            prop_assert!(a <= b + 1e-12);
        }
    }
}
