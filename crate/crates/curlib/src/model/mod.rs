//! A small decoder-style transformer (multi-head attention with grouped KV
//! heads, SiLU-gated feed-forward, pre-norm RMSNorm residual blocks) whose
//! weight matrices can be swapped for CUR factors without changing any
//! interface dimension.
//!
//! Positions are learned absolute embeddings added at the input; sequences
//! are fixed-length with no padding, so "the last token" is always
//! `seq_len - 1`.

mod backward;
mod calibrate;
mod corpus;
mod forward;
mod train;

pub use backward::{
    backward, cross_entropy_and_grad, softmax_rows, Gradients, LayerGrads, ParamScope, WeightGrad,
};
pub use calibrate::{
    angular_distance, calibrate, rank_layers, CalibrationStats, LayerActNorms, LayerRanking,
};
pub use corpus::{stream_seed, synthetic_corpus, CorpusStream};
pub use forward::{ForwardOutput, LayerCache, ModelCache};
pub use train::{train_next_token, TrainConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cur::CurFactors;
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// RMSNorm stabilizer.
pub const RMS_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    /// Number of key/value heads; query heads share them in groups.
    pub n_kv_heads: usize,
    pub d_inter: usize,
    pub vocab: usize,
    pub max_seq: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let all_positive = [
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.d_k,
            self.n_kv_heads,
            self.d_inter,
            self.vocab,
            self.max_seq,
        ]
        .iter()
        .all(|&v| v >= 1);
        if !all_positive {
            return Err(Error::ArchitectureMismatch(
                "every config dimension must be at least 1".into(),
            ));
        }
        if self.d_model != self.n_heads * self.d_k {
            return Err(Error::ArchitectureMismatch(format!(
                "d_model {} != n_heads {} * d_k {}",
                self.d_model, self.n_heads, self.d_k
            )));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::ArchitectureMismatch(format!(
                "n_kv_heads {} does not divide n_heads {}",
                self.n_kv_heads, self.n_heads
            )));
        }
        Ok(())
    }

    /// Width of the key/value projections.
    pub fn d_kv(&self) -> usize {
        self.n_kv_heads * self.d_k
    }

    /// Parameter count of the fully dense model (embeddings, head, norms and
    /// all layer weights).
    pub fn dense_param_total(&self) -> u64 {
        let (d, kv, inter) = (
            self.d_model as u64,
            self.d_kv() as u64,
            self.d_inter as u64,
        );
        let per_layer = 2 * d * d + 2 * d * kv + 3 * d * inter + 2 * d;
        (self.vocab as u64) * d * 2
            + (self.max_seq as u64) * d
            + (self.n_layers as u64) * per_layer
            + d
    }
}

/// The three weight roles eligible for factorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightTarget {
    Query,
    Key,
    Gate,
}

impl WeightTarget {
    pub const ALL: [WeightTarget; 3] = [WeightTarget::Query, WeightTarget::Key, WeightTarget::Gate];

    pub fn name(self) -> &'static str {
        match self {
            WeightTarget::Query => "q",
            WeightTarget::Key => "k",
            WeightTarget::Gate => "gate",
        }
    }
}

impl std::fmt::Display for WeightTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for WeightTarget {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "q" => Ok(WeightTarget::Query),
            "k" => Ok(WeightTarget::Key),
            "gate" => Ok(WeightTarget::Gate),
            other => Err(format!("unknown target {other:?} (expected q, k or gate)")),
        }
    }
}

/// A projection that is either a dense matrix or a CUR factorization of one.
#[derive(Debug, Clone, PartialEq)]
pub enum Weight {
    Dense(DenseMatrix),
    Cur(CurFactors),
}

impl Weight {
    pub fn in_dim(&self) -> usize {
        match self {
            Weight::Dense(w) => w.rows(),
            Weight::Cur(f) => f.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Weight::Dense(w) => w.cols(),
            Weight::Cur(f) => f.out_dim(),
        }
    }

    /// `x * W`. A factorized weight multiplies through the three thin factors
    /// and never materializes the product; the returned trace (`x * C`) is
    /// what backpropagation into the core needs.
    pub(crate) fn apply_traced(&self, x: &DenseMatrix) -> Result<(DenseMatrix, Option<DenseMatrix>)> {
        match self {
            Weight::Dense(w) => Ok((x.matmul(w)?, None)),
            Weight::Cur(f) => {
                let a = x.matmul(&f.c)?;
                let y = a.matmul(&f.core())?.matmul(&f.r_mat)?;
                Ok((y, Some(a)))
            }
        }
    }

    /// `x * W` without keeping the trace.
    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.apply_traced(x)?.0)
    }

    /// Dense view of the effective weight (reconstructs factorized entries);
    /// for reporting only.
    pub fn materialize(&self) -> DenseMatrix {
        match self {
            Weight::Dense(w) => w.clone(),
            Weight::Cur(f) => f.reconstruct(),
        }
    }

    /// Stored parameter count (factorized weights count `mr + r^2 + rn`).
    pub fn param_total(&self) -> u64 {
        match self {
            Weight::Dense(w) => (w.rows() * w.cols()) as u64,
            Weight::Cur(f) => f.param_total(),
        }
    }

    pub fn as_cur(&self) -> Option<&CurFactors> {
        match self {
            Weight::Cur(f) => Some(f),
            Weight::Dense(_) => None,
        }
    }

    pub fn as_cur_mut(&mut self) -> Option<&mut CurFactors> {
        match self {
            Weight::Cur(f) => Some(f),
            Weight::Dense(_) => None,
        }
    }
}

/// One transformer block's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Weight,
    pub wk: Weight,
    pub wv: Weight,
    pub wo: Weight,
    pub w_gate: Weight,
    pub w_up: Weight,
    pub w_down: Weight,
    pub attn_norm: Vec<f64>,
    pub ffn_norm: Vec<f64>,
}

impl LayerWeights {
    pub fn target(&self, t: WeightTarget) -> &Weight {
        match t {
            WeightTarget::Query => &self.wq,
            WeightTarget::Key => &self.wk,
            WeightTarget::Gate => &self.w_gate,
        }
    }

    pub fn target_mut(&mut self, t: WeightTarget) -> &mut Weight {
        match t {
            WeightTarget::Query => &mut self.wq,
            WeightTarget::Key => &mut self.wk,
            WeightTarget::Gate => &mut self.w_gate,
        }
    }

    pub fn param_total(&self) -> u64 {
        self.wq.param_total()
            + self.wk.param_total()
            + self.wv.param_total()
            + self.wo.param_total()
            + self.w_gate.param_total()
            + self.w_up.param_total()
            + self.w_down.param_total()
            + (self.attn_norm.len() + self.ffn_norm.len()) as u64
    }
}

/// The toy transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformer {
    pub config: ModelConfig,
    /// `vocab x d_model`.
    pub tok_embed: DenseMatrix,
    /// `max_seq x d_model` learned absolute position embeddings.
    pub pos_embed: DenseMatrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    /// `d_model x vocab` output head (untied from the token embedding).
    pub w_out: DenseMatrix,
}

impl ToyTransformer {
    /// Seeded random initialization: uniform Xavier-style ranges for the
    /// projections, small uniform embeddings, unit norm gains. Draw order is
    /// fixed (embeddings, then layers front to back, then the head), so a
    /// seed pins every parameter bit.
    pub fn new_random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut uniform = |rows: usize, cols: usize, lim: f64| {
            DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-lim..lim))
        };
        let tok_embed = uniform(config.vocab, d, 0.5);
        let pos_embed = uniform(config.max_seq, d, 0.1);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let xavier = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
                let lim = (6.0 / (rows + cols) as f64).sqrt();
                DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-lim..lim))
            };
            layers.push(LayerWeights {
                wq: Weight::Dense(xavier(&mut rng, d, d)),
                wk: Weight::Dense(xavier(&mut rng, d, config.d_kv())),
                wv: Weight::Dense(xavier(&mut rng, d, config.d_kv())),
                wo: Weight::Dense(xavier(&mut rng, d, d)),
                w_gate: Weight::Dense(xavier(&mut rng, d, config.d_inter)),
                w_up: Weight::Dense(xavier(&mut rng, d, config.d_inter)),
                w_down: Weight::Dense(xavier(&mut rng, config.d_inter, d)),
                attn_norm: vec![1.0; d],
                ffn_norm: vec![1.0; d],
            });
        }
        let w_out = {
            let lim = (6.0 / (d + config.vocab) as f64).sqrt();
            DenseMatrix::from_fn(d, config.vocab, |_, _| rng.gen_range(-lim..lim))
        };
        Ok(Self {
            config,
            tok_embed,
            pos_embed,
            layers,
            final_norm: vec![1.0; d],
            w_out,
        })
    }

    /// Every parameter zero, including norm gains.
    pub fn new_zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let layer = LayerWeights {
            wq: Weight::Dense(DenseMatrix::zeros(d, d)),
            wk: Weight::Dense(DenseMatrix::zeros(d, config.d_kv())),
            wv: Weight::Dense(DenseMatrix::zeros(d, config.d_kv())),
            wo: Weight::Dense(DenseMatrix::zeros(d, d)),
            w_gate: Weight::Dense(DenseMatrix::zeros(d, config.d_inter)),
            w_up: Weight::Dense(DenseMatrix::zeros(d, config.d_inter)),
            w_down: Weight::Dense(DenseMatrix::zeros(config.d_inter, d)),
            attn_norm: vec![0.0; d],
            ffn_norm: vec![0.0; d],
        };
        Ok(Self {
            config,
            tok_embed: DenseMatrix::zeros(config.vocab, d),
            pos_embed: DenseMatrix::zeros(config.max_seq, d),
            layers: vec![layer; config.n_layers],
            final_norm: vec![0.0; d],
            w_out: DenseMatrix::zeros(d, config.vocab),
        })
    }

    /// Stored parameter count across embeddings, layers, norms and head.
    pub fn param_total(&self) -> u64 {
        let embed = (self.tok_embed.rows() * self.tok_embed.cols()
            + self.pos_embed.rows() * self.pos_embed.cols()
            + self.w_out.rows() * self.w_out.cols()
            + self.final_norm.len()) as u64;
        embed + self.layers.iter().map(LayerWeights::param_total).sum::<u64>()
    }

    pub fn same_architecture(&self, other: &ToyTransformer) -> bool {
        self.config == other.config
    }

    /// Mutable views of the trainable parameters in canonical order. The
    /// order matches [`Gradients::slices`] element for element; factorized
    /// weights expose only their core correction.
    pub fn param_slices_mut(&mut self, scope: ParamScope) -> Vec<&mut [f64]> {
        let take_all = scope == ParamScope::AllParams;
        let mut out = Vec::new();
        if take_all {
            out.push(self.tok_embed.data_mut());
            out.push(self.pos_embed.data_mut());
        }
        for layer in &mut self.layers {
            let LayerWeights {
                wq,
                wk,
                wv,
                wo,
                w_gate,
                w_up,
                w_down,
                attn_norm,
                ffn_norm,
            } = layer;
            for weight in [wq, wk, wv, wo, w_gate, w_up, w_down] {
                match weight {
                    Weight::Dense(w) if take_all => out.push(w.data_mut()),
                    Weight::Dense(_) => {}
                    Weight::Cur(f) => out.push(f.du.data_mut()),
                }
            }
            if take_all {
                out.push(attn_norm.as_mut_slice());
                out.push(ffn_norm.as_mut_slice());
            }
        }
        if take_all {
            out.push(self.final_norm.as_mut_slice());
            out.push(self.w_out.data_mut());
        }
        out
    }

    /// Layer indices holding at least one factorized target weight.
    pub fn compressed_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| WeightTarget::ALL.iter().any(|&t| l.target(t).as_cur().is_some()))
            .map(|(i, _)| i)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 4,
            d_k: 4,
            n_kv_heads: 2,
            d_inter: 24,
            vocab: 32,
            max_seq: 12,
        }
    }

    #[test]
    fn config_validation_catches_inconsistencies() {
        let mut cfg = tiny_config();
        assert!(cfg.validate().is_ok());
        cfg.d_k = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.n_kv_heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dense_param_total_matches_enumeration() {
        let cfg = tiny_config();
        let model = ToyTransformer::new_random(cfg, 0).unwrap();
        assert_eq!(model.param_total(), cfg.dense_param_total());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = tiny_config();
        let a = ToyTransformer::new_random(cfg, 7).unwrap();
        let b = ToyTransformer::new_random(cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = ToyTransformer::new_random(cfg, 8).unwrap();
        assert_ne!(a, c);
    }
}
