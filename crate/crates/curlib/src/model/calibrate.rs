//! Calibration: activation statistics gathered from forward passes.
//!
//! Two kinds of statistics are collected in one pass over the corpus:
//!
//! * per-input-feature activation norms for every weight that can be
//!   compressed (attention input feeds the query/key projections, FFN input
//!   feeds the gate projection), used by activation-aware importance scoring;
//! * the last-token hidden state before and after every block, used to rank
//!   layers by how little a block changes its input.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ModelConfig, ToyTransformer, WeightTarget};

/// Per-layer activation norms, one entry per input feature.
///
/// `attn_input` are the norms of the normalized block input (shared by the
/// query and key projections); `ffn_input` those of the normalized
/// post-attention state (input to the gate projection).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerActNorms {
    pub attn_input: Vec<f64>,
    pub ffn_input: Vec<f64>,
}

impl LayerActNorms {
    /// Activation norms for the input features of one compressible weight.
    pub fn for_target(&self, target: WeightTarget) -> &[f64] {
        match target {
            WeightTarget::Query | WeightTarget::Key => &self.attn_input,
            WeightTarget::Gate => &self.ffn_input,
        }
    }
}

/// Output of [`calibrate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub config: ModelConfig,
    pub n_examples: usize,
    /// One entry per layer.
    pub act_norms: Vec<LayerActNorms>,
    /// `last_token_hidden[example][l]` is the last-token hidden state entering
    /// block `l`; index `n_layers` is the state after the final block.
    pub last_token_hidden: Vec<Vec<Vec<f64>>>,
}

/// How far apart two representations are, as a fraction of a half turn:
/// `acos(cosine similarity) / pi`, in `[0, 1]`.
pub fn angular_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "angular distance over lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    Ok(cos.acos() / std::f64::consts::PI)
}

/// Runs the model over the corpus and accumulates activation statistics.
///
/// Sequences are processed in parallel but reduced in corpus order, so the
/// result is bit-identical regardless of thread count. Norms are the l2 norm
/// over every token position of every sequence (sum of squares accumulated in
/// `f64`, square root taken once at the end).
pub fn calibrate(model: &ToyTransformer, corpus: &[Vec<usize>]) -> Result<CalibrationStats> {
    if corpus.is_empty() {
        return Err(Error::EmptyDataset("calibration corpus is empty".into()));
    }
    let cfg = model.config;
    let (n_layers, d) = (cfg.n_layers, cfg.d_model);

    struct Partial {
        attn_sq: Vec<Vec<f64>>,
        ffn_sq: Vec<Vec<f64>>,
        last_rows: Vec<Vec<f64>>,
    }

    let partials: Vec<Partial> = corpus
        .par_iter()
        .map(|tokens| -> Result<Partial> {
            let (out, cache) = model.forward_cached(tokens)?;
            let mut attn_sq = vec![vec![0.0; d]; n_layers];
            let mut ffn_sq = vec![vec![0.0; d]; n_layers];
            for (l, lc) in cache.layers.iter().enumerate() {
                for i in 0..tokens.len() {
                    for (acc, &v) in attn_sq[l].iter_mut().zip(lc.xn1.row(i)) {
                        *acc += v * v;
                    }
                    for (acc, &v) in ffn_sq[l].iter_mut().zip(lc.xn2.row(i)) {
                        *acc += v * v;
                    }
                }
            }
            let last = tokens.len() - 1;
            let last_rows = out.hidden.iter().map(|h| h.row(last).to_vec()).collect();
            Ok(Partial {
                attn_sq,
                ffn_sq,
                last_rows,
            })
        })
        .collect::<Result<_>>()?;

    let mut attn_sq = vec![vec![0.0; d]; n_layers];
    let mut ffn_sq = vec![vec![0.0; d]; n_layers];
    let mut last_token_hidden = Vec::with_capacity(corpus.len());
    for p in partials {
        for l in 0..n_layers {
            for (acc, v) in attn_sq[l].iter_mut().zip(&p.attn_sq[l]) {
                *acc += v;
            }
            for (acc, v) in ffn_sq[l].iter_mut().zip(&p.ffn_sq[l]) {
                *acc += v;
            }
        }
        last_token_hidden.push(p.last_rows);
    }

    let act_norms = attn_sq
        .into_iter()
        .zip(ffn_sq)
        .map(|(a, f)| LayerActNorms {
            attn_input: a.into_iter().map(f64::sqrt).collect(),
            ffn_input: f.into_iter().map(f64::sqrt).collect(),
        })
        .collect();

    Ok(CalibrationStats {
        config: cfg,
        n_examples: corpus.len(),
        act_norms,
        last_token_hidden,
    })
}

/// Layers ordered by how little they transform their input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRanking {
    /// Mean angular distance between block input and output, per layer.
    pub mean_distance: Vec<f64>,
    /// Interior layers (first and last excluded), smallest distance first.
    pub ranked: Vec<usize>,
}

/// Ranks layers by mean angular distance between the last-token hidden state
/// entering and leaving each block. A small distance means the block barely
/// rotates its input, making it the safest to compress. The first and last
/// layers are never candidates, so the model must have at least 3 layers.
pub fn rank_layers(stats: &CalibrationStats) -> Result<LayerRanking> {
    let n_layers = stats.config.n_layers;
    if n_layers < 3 {
        return Err(Error::TooFewLayers {
            got: n_layers,
            need: 3,
        });
    }
    if stats.last_token_hidden.is_empty() {
        return Err(Error::EmptyDataset("no calibration examples".into()));
    }
    let mut mean_distance = vec![0.0; n_layers];
    for example in &stats.last_token_hidden {
        if example.len() != n_layers + 1 {
            return Err(Error::DimensionMismatch(format!(
                "expected {} hidden states per example, got {}",
                n_layers + 1,
                example.len()
            )));
        }
        for l in 0..n_layers {
            mean_distance[l] += angular_distance(&example[l], &example[l + 1])?;
        }
    }
    let n = stats.last_token_hidden.len() as f64;
    for m in mean_distance.iter_mut() {
        *m /= n;
    }
    let mut ranked: Vec<usize> = (1..n_layers - 1).collect();
    ranked.sort_by(|&a, &b| {
        mean_distance[a]
            .partial_cmp(&mean_distance[b])
            .expect("angular distances are finite")
            .then(a.cmp(&b))
    });
    Ok(LayerRanking {
        mean_distance,
        ranked,
    })
}
