//! Reverse-mode differentiation through the transformer.
//!
//! The backward pass mirrors [`super::forward`] step by step, consuming the
//! cache the forward pass recorded. Gradients can be seeded at the logits, at
//! any hidden state, or both, which lets one pass serve plain next-token
//! training as well as losses that mix output terms with per-layer hidden
//! state terms.
//!
//! For factorized weights only the additive core correction is trainable; the
//! selected columns, rows, and base core stay frozen, so their gradients are
//! never computed.

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

use super::forward::{silu_prime, ForwardOutput, LayerCache, ModelCache};
use super::{LayerWeights, ToyTransformer, Weight};

/// Gradient for one weight, shaped like the weight's trainable part.
#[derive(Debug, Clone)]
pub enum WeightGrad {
    Dense(DenseMatrix),
    /// Gradient with respect to the additive core correction.
    CoreDelta(DenseMatrix),
}

impl WeightGrad {
    fn zeros_like(weight: &Weight) -> Self {
        match weight {
            Weight::Dense(w) => WeightGrad::Dense(DenseMatrix::zeros(w.rows(), w.cols())),
            Weight::Cur(f) => WeightGrad::CoreDelta(DenseMatrix::zeros(f.rank, f.rank)),
        }
    }

    fn data(&self) -> &[f64] {
        match self {
            WeightGrad::Dense(m) | WeightGrad::CoreDelta(m) => m.data(),
        }
    }

    fn data_mut(&mut self) -> &mut [f64] {
        match self {
            WeightGrad::Dense(m) | WeightGrad::CoreDelta(m) => m.data_mut(),
        }
    }
}

/// Gradients for one block, field-for-field parallel to
/// [`super::LayerWeights`].
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub wq: WeightGrad,
    pub wk: WeightGrad,
    pub wv: WeightGrad,
    pub wo: WeightGrad,
    pub w_gate: WeightGrad,
    pub w_up: WeightGrad,
    pub w_down: WeightGrad,
    pub attn_norm: Vec<f64>,
    pub ffn_norm: Vec<f64>,
}

impl LayerGrads {
    fn zeros_like(layer: &LayerWeights) -> Self {
        LayerGrads {
            wq: WeightGrad::zeros_like(&layer.wq),
            wk: WeightGrad::zeros_like(&layer.wk),
            wv: WeightGrad::zeros_like(&layer.wv),
            wo: WeightGrad::zeros_like(&layer.wo),
            w_gate: WeightGrad::zeros_like(&layer.w_gate),
            w_up: WeightGrad::zeros_like(&layer.w_up),
            w_down: WeightGrad::zeros_like(&layer.w_down),
            attn_norm: vec![0.0; layer.attn_norm.len()],
            ffn_norm: vec![0.0; layer.ffn_norm.len()],
        }
    }
}

/// Which parameters an optimizer step is allowed to touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScope {
    /// Every trainable tensor (factorized weights still expose only their
    /// core correction).
    AllParams,
    /// Only the additive core corrections of factorized weights.
    CoreDeltaOnly,
}

/// Full gradient of the model, same tensor layout as [`ToyTransformer`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub tok_embed: DenseMatrix,
    pub pos_embed: DenseMatrix,
    pub layers: Vec<LayerGrads>,
    pub final_norm: Vec<f64>,
    pub w_out: DenseMatrix,
}

impl Gradients {
    pub fn zeros_like(model: &ToyTransformer) -> Self {
        Gradients {
            tok_embed: DenseMatrix::zeros(model.tok_embed.rows(), model.tok_embed.cols()),
            pos_embed: DenseMatrix::zeros(model.pos_embed.rows(), model.pos_embed.cols()),
            layers: model.layers.iter().map(LayerGrads::zeros_like).collect(),
            final_norm: vec![0.0; model.final_norm.len()],
            w_out: DenseMatrix::zeros(model.w_out.rows(), model.w_out.cols()),
        }
    }

    /// Gradient slices in canonical order for the given scope. The order
    /// matches [`ToyTransformer::param_slices_mut`] element for element.
    pub fn slices(&self, scope: ParamScope) -> Vec<&[f64]> {
        let mut out = Vec::new();
        let take_all = scope == ParamScope::AllParams;
        if take_all {
            out.push(self.tok_embed.data());
            out.push(self.pos_embed.data());
        }
        for layer in &self.layers {
            for wg in [
                &layer.wq,
                &layer.wk,
                &layer.wv,
                &layer.wo,
                &layer.w_gate,
                &layer.w_up,
                &layer.w_down,
            ] {
                match wg {
                    WeightGrad::Dense(m) if take_all => out.push(m.data()),
                    WeightGrad::Dense(_) => {}
                    WeightGrad::CoreDelta(m) => out.push(m.data()),
                }
            }
            if take_all {
                out.push(layer.attn_norm.as_slice());
                out.push(layer.ffn_norm.as_slice());
            }
        }
        if take_all {
            out.push(self.final_norm.as_slice());
            out.push(self.w_out.data());
        }
        out
    }

    /// Adds `scale * other` into `self`; structures must match.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        let into = self.all_slices_mut();
        let from = other.all_slices();
        debug_assert_eq!(into.len(), from.len());
        for (dst, src) in into.into_iter().zip(from) {
            debug_assert_eq!(dst.len(), src.len());
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    /// Multiplies every gradient entry by `scale`.
    pub fn scale(&mut self, scale: f64) {
        for slice in self.all_slices_mut() {
            for v in slice {
                *v *= scale;
            }
        }
    }

    fn all_slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.tok_embed.data(), self.pos_embed.data()];
        for layer in &self.layers {
            for wg in [
                &layer.wq,
                &layer.wk,
                &layer.wv,
                &layer.wo,
                &layer.w_gate,
                &layer.w_up,
                &layer.w_down,
            ] {
                out.push(wg.data());
            }
            out.push(layer.attn_norm.as_slice());
            out.push(layer.ffn_norm.as_slice());
        }
        out.push(self.final_norm.as_slice());
        out.push(self.w_out.data());
        out
    }

    fn all_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.tok_embed.data_mut(), self.pos_embed.data_mut()];
        for layer in &mut self.layers {
            let LayerGrads {
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
            for wg in [wq, wk, wv, wo, w_gate, w_up, w_down] {
                out.push(wg.data_mut());
            }
            out.push(attn_norm.as_mut_slice());
            out.push(ffn_norm.as_mut_slice());
        }
        out.push(self.final_norm.as_mut_slice());
        out.push(self.w_out.data_mut());
        out
    }
}

/// Backpropagates seeded gradients through the model.
///
/// `dlogits` seeds the loss gradient at the output logits; each `(l, g)` in
/// `dhidden` adds `g` to the gradient flowing into hidden state `l` (state 0
/// is the embedding output, state `n_layers` the final block output). Either
/// seed may be omitted.
pub fn backward(
    model: &ToyTransformer,
    tokens: &[usize],
    output: &ForwardOutput,
    cache: &ModelCache,
    dlogits: Option<&DenseMatrix>,
    dhidden: &[(usize, DenseMatrix)],
) -> Result<Gradients> {
    let cfg = &model.config;
    let (s_len, d) = (tokens.len(), cfg.d_model);
    if output.hidden.len() != cfg.n_layers + 1 || cache.layers.len() != cfg.n_layers {
        return Err(Error::DimensionMismatch(
            "forward output does not match the model".into(),
        ));
    }
    for (l, g) in dhidden {
        if *l > cfg.n_layers || g.shape() != (s_len, d) {
            return Err(Error::DimensionMismatch(format!(
                "hidden gradient seed at state {l} with shape {:?}",
                g.shape()
            )));
        }
    }

    let mut grads = Gradients::zeros_like(model);
    let mut dx = DenseMatrix::zeros(s_len, d);

    if let Some(dl) = dlogits {
        if dl.shape() != output.logits.shape() {
            return Err(Error::DimensionMismatch(
                "logits gradient seed has the wrong shape".into(),
            ));
        }
        grads.w_out = cache.h_norm.transpose().matmul(dl)?;
        let dh_norm = dl.matmul(&model.w_out.transpose())?;
        let x_last = &output.hidden[cfg.n_layers];
        let (dxf, dgam) =
            rms_norm_backward(x_last, &model.final_norm, &cache.rms_f, &dh_norm);
        accumulate(&mut dx, &dxf);
        for (g, v) in grads.final_norm.iter_mut().zip(dgam) {
            *g += v;
        }
    }

    for l in (0..cfg.n_layers).rev() {
        for (idx, g) in dhidden {
            if *idx == l + 1 {
                accumulate(&mut dx, g);
            }
        }
        dx = block_backward(
            cfg,
            &model.layers[l],
            &mut grads.layers[l],
            &output.hidden[l],
            &cache.layers[l],
            &dx,
        )?;
    }
    for (idx, g) in dhidden {
        if *idx == 0 {
            accumulate(&mut dx, g);
        }
    }

    for (t, &tok) in tokens.iter().enumerate() {
        let dr = dx.row(t).to_vec();
        for (g, v) in grads.tok_embed.row_mut(tok).iter_mut().zip(&dr) {
            *g += v;
        }
        for (g, v) in grads.pos_embed.row_mut(t).iter_mut().zip(&dr) {
            *g += v;
        }
    }
    Ok(grads)
}

/// Backward through one block; `dx_out` is the gradient at the block output,
/// the return value the gradient at the block input.
fn block_backward(
    cfg: &super::ModelConfig,
    layer: &LayerWeights,
    grads: &mut LayerGrads,
    x_in: &DenseMatrix,
    lc: &LayerCache,
    dx_out: &DenseMatrix,
) -> Result<DenseMatrix> {
    // FFN half: x_out = h_mid + (silu(gate) * up) W_down.
    let (grad_down, dprod) =
        weight_backward(&layer.w_down, &lc.prod, lc.down_trace.as_ref(), dx_out)?;
    merge(&mut grads.w_down, &grad_down);

    let mut dgact = dprod.clone();
    for (g, u) in dgact.data_mut().iter_mut().zip(lc.upre.data()) {
        *g *= u;
    }
    let mut dupre = dprod;
    for (u, g) in dupre.data_mut().iter_mut().zip(lc.gact.data()) {
        *u *= g;
    }
    let mut dgpre = dgact;
    for (g, z) in dgpre.data_mut().iter_mut().zip(lc.gpre.data()) {
        *g *= silu_prime(*z);
    }

    let (grad_up, dxn2_u) = weight_backward(&layer.w_up, &lc.xn2, lc.up_trace.as_ref(), &dupre)?;
    merge(&mut grads.w_up, &grad_up);
    let (grad_gate, dxn2_g) =
        weight_backward(&layer.w_gate, &lc.xn2, lc.gate_trace.as_ref(), &dgpre)?;
    merge(&mut grads.w_gate, &grad_gate);
    let dxn2 = dxn2_u.add(&dxn2_g)?;

    let (dh_norm, dgam2) = rms_norm_backward(&lc.h_mid, &layer.ffn_norm, &lc.rms2, &dxn2);
    for (g, v) in grads.ffn_norm.iter_mut().zip(dgam2) {
        *g += v;
    }
    // Residual: gradient at h_mid is the FFN path plus the skip connection.
    let dh_mid = dx_out.add(&dh_norm)?;

    // Attention half: h_mid = x_in + ctx W_o.
    let (grad_o, dctx) = weight_backward(&layer.wo, &lc.ctx, lc.o_trace.as_ref(), &dh_mid)?;
    merge(&mut grads.wo, &grad_o);

    let (dq, dk, dv) = attention_backward(cfg, lc, &dctx);
    let (grad_q, dxn1_q) = weight_backward(&layer.wq, &lc.xn1, lc.q_trace.as_ref(), &dq)?;
    merge(&mut grads.wq, &grad_q);
    let (grad_k, dxn1_k) = weight_backward(&layer.wk, &lc.xn1, lc.k_trace.as_ref(), &dk)?;
    merge(&mut grads.wk, &grad_k);
    let (grad_v, dxn1_v) = weight_backward(&layer.wv, &lc.xn1, lc.v_trace.as_ref(), &dv)?;
    merge(&mut grads.wv, &grad_v);
    let dxn1 = dxn1_q.add(&dxn1_k)?.add(&dxn1_v)?;

    let (dx_norm, dgam1) = rms_norm_backward(x_in, &layer.attn_norm, &lc.rms1, &dxn1);
    for (g, v) in grads.attn_norm.iter_mut().zip(dgam1) {
        *g += v;
    }
    dh_mid.add(&dx_norm)
}

/// Gradient of causal grouped-head attention with respect to q, k, v.
fn attention_backward(
    cfg: &super::ModelConfig,
    lc: &LayerCache,
    dctx: &DenseMatrix,
) -> (DenseMatrix, DenseMatrix, DenseMatrix) {
    let s_len = dctx.rows();
    let (dk_dim, heads) = (cfg.d_k, cfg.n_heads);
    let group = heads / cfg.n_kv_heads;
    let inv_sqrt = 1.0 / (dk_dim as f64).sqrt();

    let mut dq = DenseMatrix::zeros(s_len, cfg.d_model);
    let mut dk = DenseMatrix::zeros(s_len, cfg.d_kv());
    let mut dv = DenseMatrix::zeros(s_len, cfg.d_kv());

    for h in 0..heads {
        let q_off = h * dk_dim;
        let kv_off = (h / group) * dk_dim;
        let probs = &lc.probs[h];
        for i in 0..s_len {
            let dci = &dctx.row(i)[q_off..q_off + dk_dim];
            let prow = &probs.row(i)[..=i];
            // dL/dp_ij and the softmax Jacobian applied in one sweep.
            let mut dp = vec![0.0; i + 1];
            for (j, dpj) in dp.iter_mut().enumerate() {
                let vj = &lc.v.row(j)[kv_off..kv_off + dk_dim];
                *dpj = dci.iter().zip(vj).map(|(a, b)| a * b).sum();
                for (dvt, &c) in dv.row_mut(j)[kv_off..kv_off + dk_dim]
                    .iter_mut()
                    .zip(dci)
                {
                    *dvt += prow[j] * c;
                }
            }
            let inner: f64 = prow.iter().zip(&dp).map(|(p, g)| p * g).sum();
            for j in 0..=i {
                let dscore = prow[j] * (dp[j] - inner) * inv_sqrt;
                if dscore == 0.0 {
                    continue;
                }
                let kj = lc.k.row(j)[kv_off..kv_off + dk_dim].to_vec();
                let qi = lc.q.row(i)[q_off..q_off + dk_dim].to_vec();
                for (dqt, kv) in dq.row_mut(i)[q_off..q_off + dk_dim].iter_mut().zip(&kj) {
                    *dqt += dscore * kv;
                }
                for (dkt, qv) in dk.row_mut(j)[kv_off..kv_off + dk_dim].iter_mut().zip(&qi) {
                    *dkt += dscore * qv;
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Gradient through `y = weight(x)`: returns the weight gradient and `dx`.
///
/// For a factorized weight the trainable part is the core correction; with
/// `y = (x C)(U0 + dU) R` the chain rule gives `dU = (x C)^T (dy R^T)` and
/// `dx = ((dy R^T)(U0 + dU)^T) C^T`. The `x C` product is the trace recorded
/// by the forward pass.
fn weight_backward(
    weight: &Weight,
    input: &DenseMatrix,
    trace: Option<&DenseMatrix>,
    dy: &DenseMatrix,
) -> Result<(WeightGrad, DenseMatrix)> {
    match weight {
        Weight::Dense(w) => {
            let dw = input.transpose().matmul(dy)?;
            let dx = dy.matmul(&w.transpose())?;
            Ok((WeightGrad::Dense(dw), dx))
        }
        Weight::Cur(f) => {
            let a = trace.expect("forward cache stores the projection trace");
            let db = dy.matmul(&f.r_mat.transpose())?;
            let du = a.transpose().matmul(&db)?;
            let dx = db.matmul(&f.core().transpose())?.matmul(&f.c.transpose())?;
            Ok((WeightGrad::CoreDelta(du), dx))
        }
    }
}

/// Backward through row-wise RMS norm: returns `(dx, dgamma)`.
fn rms_norm_backward(
    x: &DenseMatrix,
    gamma: &[f64],
    rms: &[f64],
    dy: &DenseMatrix,
) -> (DenseMatrix, Vec<f64>) {
    let (rows, cols) = x.shape();
    let mut dx = DenseMatrix::zeros(rows, cols);
    let mut dgamma = vec![0.0; cols];
    for i in 0..rows {
        let (xr, dyr, r) = (x.row(i), dy.row(i), rms[i]);
        let mut inner = 0.0;
        for j in 0..cols {
            dgamma[j] += dyr[j] * xr[j] / r;
            inner += dyr[j] * gamma[j] * xr[j];
        }
        let coef = inner / (cols as f64 * r * r * r);
        for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
            *out = dyr[j] * gamma[j] / r - xr[j] * coef;
        }
    }
    (dx, dgamma)
}

fn merge(into: &mut WeightGrad, from: &WeightGrad) {
    for (d, s) in into.data_mut().iter_mut().zip(from.data()) {
        *d += s;
    }
}

fn accumulate(into: &mut DenseMatrix, from: &DenseMatrix) {
    debug_assert_eq!(into.shape(), from.shape());
    for (d, s) in into.data_mut().iter_mut().zip(from.data()) {
        *d += s;
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(m: &DenseMatrix) -> DenseMatrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        super::forward::softmax_in_place(out.row_mut(i));
    }
    out
}

/// Mean cross-entropy of `targets` under row-softmaxed `logits`, with its
/// gradient `(softmax - onehot) / n_rows`.
pub fn cross_entropy_and_grad(
    logits: &DenseMatrix,
    targets: &[usize],
) -> Result<(f64, DenseMatrix)> {
    let (rows, cols) = logits.shape();
    if targets.len() != rows {
        return Err(Error::DimensionMismatch(format!(
            "{} targets for {rows} logit rows",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
        return Err(Error::TokenOutOfRange {
            token: bad,
            vocab: cols,
        });
    }
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    let inv = 1.0 / rows as f64;
    for (i, &t) in targets.iter().enumerate() {
        let row = grad.row_mut(i);
        loss -= row[t].max(f64::MIN_POSITIVE).ln();
        row[t] -= 1.0;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok((loss * inv, grad))
}
