//! Forward pass: one code path serves plain inference and the cached variant
//! that backpropagation consumes, so the two can never drift apart.

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

use super::{ModelConfig, ToyTransformer, RMS_EPS};

/// Logits plus the per-layer post-residual hidden states.
///
/// `hidden[0]` is the embedding output (input to the first block) and
/// `hidden[l + 1]` the output of block `l`, so the list has `n_layers + 1`
/// entries.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: DenseMatrix,
    pub hidden: Vec<DenseMatrix>,
}

/// Intermediates of one block, kept only when a cache is requested.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub xn1: DenseMatrix,
    pub rms1: Vec<f64>,
    pub q_trace: Option<DenseMatrix>,
    pub k_trace: Option<DenseMatrix>,
    pub v_trace: Option<DenseMatrix>,
    pub o_trace: Option<DenseMatrix>,
    pub gate_trace: Option<DenseMatrix>,
    pub up_trace: Option<DenseMatrix>,
    pub down_trace: Option<DenseMatrix>,
    pub q: DenseMatrix,
    pub k: DenseMatrix,
    pub v: DenseMatrix,
    /// Per-head attention weights; rows are causal (zero above the diagonal).
    pub probs: Vec<DenseMatrix>,
    pub ctx: DenseMatrix,
    pub h_mid: DenseMatrix,
    pub xn2: DenseMatrix,
    pub rms2: Vec<f64>,
    pub gpre: DenseMatrix,
    pub gact: DenseMatrix,
    pub upre: DenseMatrix,
    pub prod: DenseMatrix,
}

/// Everything backpropagation needs beyond the forward output.
#[derive(Debug, Clone)]
pub struct ModelCache {
    pub layers: Vec<LayerCache>,
    pub h_norm: DenseMatrix,
    pub rms_f: Vec<f64>,
}

impl ToyTransformer {
    /// Runs the model over one token sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<ForwardOutput> {
        Ok(self.forward_impl(tokens, false)?.0)
    }

    /// Forward pass that also returns the intermediate cache for training.
    pub fn forward_cached(&self, tokens: &[usize]) -> Result<(ForwardOutput, ModelCache)> {
        let (out, cache) = self.forward_impl(tokens, true)?;
        Ok((out, cache.expect("cache requested")))
    }

    fn forward_impl(
        &self,
        tokens: &[usize],
        want_cache: bool,
    ) -> Result<(ForwardOutput, Option<ModelCache>)> {
        let cfg = &self.config;
        validate_tokens(tokens, cfg)?;
        let (s_len, d) = (tokens.len(), cfg.d_model);

        let mut x = DenseMatrix::zeros(s_len, d);
        for (t, &tok) in tokens.iter().enumerate() {
            let row = x.row_mut(t);
            for ((o, &e), &p) in row
                .iter_mut()
                .zip(self.tok_embed.row(tok))
                .zip(self.pos_embed.row(t))
            {
                *o = e + p;
            }
        }

        let mut hidden = Vec::with_capacity(cfg.n_layers + 1);
        hidden.push(x.clone());
        let mut layer_caches = want_cache.then(|| Vec::with_capacity(cfg.n_layers));

        for layer in &self.layers {
            let (xn1, rms1) = rms_norm(&x, &layer.attn_norm);
            let (q, q_trace) = layer.wq.apply_traced(&xn1)?;
            let (k, k_trace) = layer.wk.apply_traced(&xn1)?;
            let (v, v_trace) = layer.wv.apply_traced(&xn1)?;

            let (ctx, probs) = attention(cfg, &q, &k, &v);
            let (attn_out, o_trace) = layer.wo.apply_traced(&ctx)?;
            let h_mid = x.add(&attn_out)?;

            let (xn2, rms2) = rms_norm(&h_mid, &layer.ffn_norm);
            let (gpre, gate_trace) = layer.w_gate.apply_traced(&xn2)?;
            let mut gact = gpre.clone();
            for v in gact.data_mut() {
                *v = silu(*v);
            }
            let (upre, up_trace) = layer.w_up.apply_traced(&xn2)?;
            let mut prod = gact.clone();
            for (p, u) in prod.data_mut().iter_mut().zip(upre.data()) {
                *p *= u;
            }
            let (ffn_out, down_trace) = layer.w_down.apply_traced(&prod)?;
            let h_out = h_mid.add(&ffn_out)?;

            if let Some(caches) = layer_caches.as_mut() {
                caches.push(LayerCache {
                    xn1,
                    rms1,
                    q_trace,
                    k_trace,
                    v_trace,
                    o_trace,
                    gate_trace,
                    up_trace,
                    down_trace,
                    q,
                    k,
                    v,
                    probs,
                    ctx,
                    h_mid,
                    xn2,
                    rms2,
                    gpre,
                    gact,
                    upre,
                    prod,
                });
            }
            x = h_out;
            hidden.push(x.clone());
        }

        let (h_norm, rms_f) = rms_norm(&x, &self.final_norm);
        let logits = h_norm.matmul(&self.w_out)?;
        let cache = layer_caches.map(|layers| ModelCache {
            layers,
            h_norm,
            rms_f,
        });
        Ok((ForwardOutput { logits, hidden }, cache))
    }
}

fn validate_tokens(tokens: &[usize], cfg: &ModelConfig) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::DimensionMismatch("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::DimensionMismatch(format!(
            "sequence length {} exceeds max_seq {}",
            tokens.len(),
            cfg.max_seq
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::TokenOutOfRange {
            token: bad,
            vocab: cfg.vocab,
        });
    }
    Ok(())
}

/// Row-wise RMS normalization with learned gains; returns the normalized
/// matrix and the per-row root-mean-square (needed by the backward pass).
pub(crate) fn rms_norm(x: &DenseMatrix, gamma: &[f64]) -> (DenseMatrix, Vec<f64>) {
    let (rows, cols) = x.shape();
    debug_assert_eq!(gamma.len(), cols);
    let mut out = DenseMatrix::zeros(rows, cols);
    let mut rms = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = x.row(i);
        let mean_sq = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
        let r = (mean_sq + RMS_EPS).sqrt();
        rms.push(r);
        for ((o, &v), &g) in out.row_mut(i).iter_mut().zip(row).zip(gamma) {
            *o = v / r * g;
        }
    }
    (out, rms)
}

/// Causal multi-head attention with grouped key/value heads. Returns the
/// concatenated per-head context and the per-head attention weights.
fn attention(
    cfg: &ModelConfig,
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
) -> (DenseMatrix, Vec<DenseMatrix>) {
    let s_len = q.rows();
    let (dk, heads) = (cfg.d_k, cfg.n_heads);
    let group = heads / cfg.n_kv_heads;
    let inv_sqrt_dk = 1.0 / (dk as f64).sqrt();

    let mut ctx = DenseMatrix::zeros(s_len, cfg.d_model);
    let mut all_probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q_off = h * dk;
        let kv_off = (h / group) * dk;
        let mut probs = DenseMatrix::zeros(s_len, s_len);
        for i in 0..s_len {
            let qi = &q.row(i)[q_off..q_off + dk];
            let mut scores = Vec::with_capacity(i + 1);
            for j in 0..=i {
                let kj = &k.row(j)[kv_off..kv_off + dk];
                let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                scores.push(dot * inv_sqrt_dk);
            }
            softmax_in_place(&mut scores);
            let prow = probs.row_mut(i);
            prow[..=i].copy_from_slice(&scores);
            for (j, &pj) in scores.iter().enumerate() {
                let vj = &v.row(j)[kv_off..kv_off + dk];
                let crow = &mut ctx.row_mut(i)[q_off..q_off + dk];
                for (c, &vv) in crow.iter_mut().zip(vj) {
                    *c += pj * vv;
                }
            }
        }
        all_probs.push(probs);
    }
    (ctx, all_probs)
}

/// Numerically stable softmax over a score slice.
pub(crate) fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

pub(crate) fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

/// Derivative of SiLU: `sigmoid(z) * (1 + z * (1 - sigmoid(z)))`.
pub(crate) fn silu_prime(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}
