//! Bipartite graph convolutional policy.
//!
//! Two embeddings, one constraint-side and one variable-side half
//! convolution with sum aggregation over edges, then a linear score per
//! variable and a softmax masked to the branching candidates. Gradients are
//! derived by hand; there is no autodiff layer.

mod io;
mod model;
mod train;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds;
use crate::state::{CON_FEATURES, EDGE_FEATURES, VAR_FEATURES};

pub use io::{load_model, load_model_expecting, model_from_bytes, model_to_bytes, save_model};
pub use model::{forward, logits, loss_and_grad, predict, sample_loss};
pub use train::{adam_step, train, train_with_checkpoints, AdamState, TrainOutput};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sample {index} has no expert label")]
    MissingLabel { index: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("state has no branching candidate")]
    NoCandidates,
    #[error("model file checksum mismatch: {0}")]
    ChecksumMismatch(String),
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub embed_dim: usize,
    pub var_in: usize,
    pub con_in: usize,
    pub edge_in: usize,
    pub dropout_rate: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            embed_dim: 64,
            var_in: VAR_FEATURES,
            con_in: CON_FEATURES,
            edge_in: EDGE_FEATURES,
            dropout_rate: 0.0,
        }
    }
}

impl ArchConfig {
    /// The dropout variant: rate 0.1 on the final variable embedding.
    pub fn with_dropout() -> Self {
        ArchConfig {
            dropout_rate: 0.1,
            ..ArchConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.embed_dim == 0 {
            return Err(NnError::ShapeMismatch("embed_dim must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NnError::ShapeMismatch("dropout_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Dense row-major tensor of rank 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// Self term.
    pub u: Tensor,
    /// Neighbor message.
    pub m: Tensor,
    /// Edge feature message.
    pub w_e: Tensor,
    pub b: Tensor,
}

/// Every trainable tensor of the network. Also used for gradients and
/// optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_c: Tensor,
    pub b_c: Tensor,
    pub conv_c: ConvParams,
    pub conv_v: ConvParams,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

pub const TENSOR_NAMES: [&str; 14] = [
    "W_v", "b_v", "W_c", "b_c", "conv_c.U", "conv_c.M", "conv_c.W_e", "conv_c.b", "conv_v.U",
    "conv_v.M", "conv_v.W_e", "conv_v.b", "out.w", "out.b",
];

impl ParamSet {
    pub fn zeros(arch: &ArchConfig) -> Self {
        let h = arch.embed_dim;
        let conv = || ConvParams {
            u: Tensor::zeros(&[h, h]),
            m: Tensor::zeros(&[h, h]),
            w_e: Tensor::zeros(&[arch.edge_in, h]),
            b: Tensor::zeros(&[h]),
        };
        ParamSet {
            w_v: Tensor::zeros(&[arch.var_in, h]),
            b_v: Tensor::zeros(&[h]),
            w_c: Tensor::zeros(&[arch.con_in, h]),
            b_c: Tensor::zeros(&[h]),
            conv_c: conv(),
            conv_v: conv(),
            w_o: Tensor::zeros(&[h]),
            b_o: Tensor::zeros(&[1]),
        }
    }

    /// Tensors in the canonical order of [`TENSOR_NAMES`].
    pub fn tensors(&self) -> [&Tensor; 14] {
        [
            &self.w_v,
            &self.b_v,
            &self.w_c,
            &self.b_c,
            &self.conv_c.u,
            &self.conv_c.m,
            &self.conv_c.w_e,
            &self.conv_c.b,
            &self.conv_v.u,
            &self.conv_v.m,
            &self.conv_v.w_e,
            &self.conv_v.b,
            &self.w_o,
            &self.b_o,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 14] {
        [
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_c,
            &mut self.b_c,
            &mut self.conv_c.u,
            &mut self.conv_c.m,
            &mut self.conv_c.w_e,
            &mut self.conv_c.b,
            &mut self.conv_v.u,
            &mut self.conv_v.m,
            &mut self.conv_v.w_e,
            &mut self.conv_v.b,
            &mut self.w_o,
            &mut self.b_o,
        ]
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        TENSOR_NAMES.into_iter().zip(self.tensors())
    }

    pub fn same_shapes(&self, other: &ParamSet) -> bool {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .all(|(a, b)| a.shape == b.shape)
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Flat view in canonical order, for tests and diagnostics.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub init_seed: u64,
    pub params: ParamSet,
}

/// Glorot-uniform weights, zero biases, deterministic in `seed`.
pub fn init_model(arch: ArchConfig, seed: u64) -> ModelParams {
    let mut params = ParamSet::zeros(&arch);
    let mut rng = seeds::derived_rng(seed, &[seeds::STREAM_INIT]);
    let h = arch.embed_dim;
    let weights: [(&mut Tensor, usize, usize); 9] = [
        (&mut params.w_v, arch.var_in, h),
        (&mut params.w_c, arch.con_in, h),
        (&mut params.conv_c.u, h, h),
        (&mut params.conv_c.m, h, h),
        (&mut params.conv_c.w_e, arch.edge_in, h),
        (&mut params.conv_v.u, h, h),
        (&mut params.conv_v.m, h, h),
        (&mut params.conv_v.w_e, arch.edge_in, h),
        (&mut params.w_o, h, 1),
    ];
    for (t, fan_in, fan_out) in weights {
        let a = glorot_bound(fan_in, fan_out);
        t.data.iter_mut().for_each(|v| *v = rng.gen_range(-a..=a));
    }
    ModelParams {
        arch,
        init_seed: seed,
        params,
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            epochs: 10,
            seed: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let a = init_model(ArchConfig::default(), 11);
        let b = init_model(ArchConfig::default(), 11);
        assert_eq!(a, b);
        assert_ne!(a.params, init_model(ArchConfig::default(), 12).params);
    }

    #[test]
    fn init_biases_zero_and_weights_bounded() {
        let arch = ArchConfig::default();
        let p = init_model(arch, 3).params;
        for b in [&p.b_v, &p.b_c, &p.conv_c.b, &p.conv_v.b, &p.b_o] {
            assert!(b.data.iter().all(|&v| v == 0.0));
        }
        let h = arch.embed_dim;
        for (t, fi, fo) in [
            (&p.w_v, arch.var_in, h),
            (&p.w_c, arch.con_in, h),
            (&p.conv_c.u, h, h),
            (&p.conv_v.m, h, h),
            (&p.conv_c.w_e, 1, h),
            (&p.w_o, h, 1),
        ] {
            let a = glorot_bound(fi, fo);
            assert!(t.data.iter().all(|v| v.abs() <= a));
            assert!(t.data.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn shapes_follow_arch() {
        let p = ParamSet::zeros(&ArchConfig::default());
        assert_eq!(p.w_v.shape, vec![10, 64]);
        assert_eq!(p.w_c.shape, vec![5, 64]);
        assert_eq!(p.conv_c.w_e.shape, vec![1, 64]);
        assert_eq!(p.w_o.shape, vec![64]);
        assert_eq!(p.b_o.shape, vec![1]);
        assert_eq!(p.num_params(), 10 * 64 + 64 + 5 * 64 + 64 + 2 * (2 * 64 * 64 + 64 + 64) + 64 + 1);
    }

    #[test]
    fn arch_validation() {
        assert!(ArchConfig::default().validate().is_ok());
        assert!(ArchConfig { embed_dim: 0, ..ArchConfig::default() }.validate().is_err());
        assert!(ArchConfig { dropout_rate: 1.0, ..ArchConfig::default() }.validate().is_err());
    }
}
