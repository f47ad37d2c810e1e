//! Whole-model orchestration: apply a compression plan, measure the damage,
//! and do the architecture-level size arithmetic.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cur::{
    cur_decompose, error_bound_check, param_count, select_rank, BoundReport, ParamCount,
    VectorSource,
};
use crate::error::{Error, Result};
use crate::model::{
    cross_entropy_and_grad, CalibrationStats, ToyTransformer, Weight, WeightTarget,
};
use crate::selection::Strategy;

/// Which weights to factorize and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    /// Layer indices; the first and last layers are never allowed.
    pub layers: Vec<usize>,
    pub targets: Vec<WeightTarget>,
    pub r_max: usize,
    pub strategy: Strategy,
    pub seed: Option<u64>,
    /// Replaces the break-even rank formula when set, e.g. to force a
    /// full-rank factorization for exactness checks or to pin a fixed rank
    /// in experiments. Clamped to each weight's full rank `min(m, n)`, so a
    /// large value means "full rank everywhere". Must be at least 1.
    #[serde(default)]
    pub rank_override: Option<usize>,
}

/// What happened to one planned weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightReport {
    pub layer: usize,
    pub target: WeightTarget,
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub params: ParamCount,
    /// `||W - CUR||_F` of the factors actually installed.
    pub recon_frobenius: f64,
    /// Spectral-bound check from a verification pass that re-selects indices
    /// greedily over the weight's own singular vectors (the setting the bound
    /// is proved for), at the same rank.
    pub bound: BoundReport,
}

/// Result of [`compress_model`].
#[derive(Debug)]
pub struct CompressOutcome {
    pub model: ToyTransformer,
    pub reports: Vec<WeightReport>,
    /// Wall-clock time of the factorization work. Reported for information
    /// only and deliberately kept out of the serialized reports so that
    /// artifacts stay byte-reproducible.
    pub wall_time: Duration,
}

/// Factorizes every planned `(layer, target)` weight of a copy of `model`.
///
/// The original model is left untouched (healing needs it as the teacher).
/// Calibration stats are required only for activation-aware strategies.
/// Factorizations run in parallel; the copy is assembled in plan order, so
/// the outcome is deterministic.
pub fn compress_model(
    model: &ToyTransformer,
    plan: &CompressionPlan,
    stats: Option<&CalibrationStats>,
) -> Result<CompressOutcome> {
    let start = Instant::now();
    let n_layers = model.config.n_layers;
    if plan.targets.is_empty() {
        return Err(Error::EmptyDataset("compression plan has no targets".into()));
    }
    for &l in &plan.layers {
        if l == 0 || l + 1 >= n_layers {
            return Err(Error::PlanLayerProtected(l));
        }
        if l >= n_layers {
            return Err(Error::DimensionMismatch(format!(
                "plan layer {l} out of range for {n_layers} layers"
            )));
        }
    }
    if plan.r_max == 0 {
        return Err(Error::DimensionMismatch("r_max must be at least 1".into()));
    }
    if let Some(s) = stats {
        if s.config != model.config {
            return Err(Error::ArchitectureMismatch(
                "calibration stats were computed for a different architecture".into(),
            ));
        }
    }
    if plan.strategy.needs_activations() && stats.is_none() {
        return Err(Error::MissingActivations(format!(
            "strategy {} needs calibration stats",
            plan.strategy
        )));
    }

    let jobs: Vec<(usize, WeightTarget)> = plan
        .layers
        .iter()
        .flat_map(|&l| plan.targets.iter().map(move |&t| (l, t)))
        .collect();

    struct Job {
        layer: usize,
        target: WeightTarget,
        factors: crate::cur::CurFactors,
        report: WeightReport,
    }

    let done: Vec<Job> = jobs
        .par_iter()
        .map(|&(layer, target)| -> Result<Job> {
            let w = model.layers[layer].target(target).materialize();
            let (m, n) = w.shape();
            let r = match plan.rank_override {
                Some(0) => {
                    return Err(Error::DimensionMismatch(
                        "rank override must be at least 1".into(),
                    ))
                }
                Some(r) => r.min(m.min(n)),
                None => select_rank(m, n, plan.r_max),
            };
            let act_norms = stats.map(|s| s.act_norms[layer].for_target(target));
            let factors = cur_decompose(&w, r, plan.strategy, act_norms, plan.seed)?;
            let verify = if plan.strategy == Strategy::DeimOnly {
                factors.clone()
            } else {
                cur_decompose(&w, r, Strategy::DeimOnly, None, None)?
            };
            let bound = error_bound_check(&w, &verify, VectorSource::Weight, None)?;
            let recon_frobenius = w.sub(&factors.reconstruct())?.frobenius();
            let report = WeightReport {
                layer,
                target,
                rows: m,
                cols: n,
                rank: r,
                params: param_count(m, n, r),
                recon_frobenius,
                bound,
            };
            Ok(Job {
                layer,
                target,
                factors,
                report,
            })
        })
        .collect::<Result<_>>()?;

    let mut out = model.clone();
    let mut reports = Vec::with_capacity(done.len());
    for job in done {
        *out.layers[job.layer].target_mut(job.target) = Weight::Cur(job.factors);
        reports.push(job.report);
    }
    Ok(CompressOutcome {
        model: out,
        reports,
        wall_time: start.elapsed(),
    })
}

/// Output-activation comparison for one target weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActivationDiff {
    pub layer: usize,
    pub target: WeightTarget,
    pub norm_original: f64,
    pub norm_compressed: f64,
    /// Frobenius norm of the activation difference over the whole dataset.
    pub diff: f64,
}

/// Compares the output activations of every compressible weight between two
/// models of the same architecture, row per `(layer, target)`.
///
/// Each model is run on its own; the compared activations are the matrix
/// products each weight actually produced, accumulated over the dataset
/// (norms are `sqrt` of summed squared entries).
pub fn activation_diff_report(
    original: &ToyTransformer,
    compressed: &ToyTransformer,
    dataset: &[Vec<usize>],
) -> Result<Vec<ActivationDiff>> {
    if !original.same_architecture(compressed) {
        return Err(Error::ArchitectureMismatch(
            "activation comparison needs identical architectures".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("activation comparison dataset".into()));
    }
    let n_layers = original.config.n_layers;
    let n_rows = n_layers * WeightTarget::ALL.len();

    // Per (layer, target): [sum_sq_orig, sum_sq_comp, sum_sq_diff].
    let partials: Vec<Vec<[f64; 3]>> = dataset
        .par_iter()
        .map(|tokens| -> Result<Vec<[f64; 3]>> {
            let (_, orig_cache) = original.forward_cached(tokens)?;
            let (_, comp_cache) = compressed.forward_cached(tokens)?;
            let mut acc = vec![[0.0; 3]; n_rows];
            for l in 0..n_layers {
                let (oc, cc) = (&orig_cache.layers[l], &comp_cache.layers[l]);
                for (ti, &target) in WeightTarget::ALL.iter().enumerate() {
                    let (a, b) = match target {
                        WeightTarget::Query => (&oc.q, &cc.q),
                        WeightTarget::Key => (&oc.k, &cc.k),
                        WeightTarget::Gate => (&oc.gpre, &cc.gpre),
                    };
                    let cell = &mut acc[l * WeightTarget::ALL.len() + ti];
                    for (&x, &y) in a.data().iter().zip(b.data()) {
                        cell[0] += x * x;
                        cell[1] += y * y;
                        cell[2] += (x - y) * (x - y);
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;

    let mut totals = vec![[0.0; 3]; n_rows];
    for p in partials {
        for (t, s) in totals.iter_mut().zip(p) {
            for k in 0..3 {
                t[k] += s[k];
            }
        }
    }
    Ok((0..n_layers)
        .flat_map(|l| {
            WeightTarget::ALL.iter().enumerate().map(move |(ti, &t)| (l, ti, t))
        })
        .map(|(l, ti, target)| {
            let s = totals[l * WeightTarget::ALL.len() + ti];
            ActivationDiff {
                layer: l,
                target,
                norm_original: s[0].sqrt(),
                norm_compressed: s[1].sqrt(),
                diff: s[2].sqrt(),
            }
        })
        .collect())
}

/// Mean squared logit difference per output element between two models over a
/// dataset (every token position, every vocabulary entry).
pub fn per_token_output_mse(
    a: &ToyTransformer,
    b: &ToyTransformer,
    dataset: &[Vec<usize>],
) -> Result<f64> {
    if !a.same_architecture(b) {
        return Err(Error::ArchitectureMismatch(
            "output comparison needs identical architectures".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("output comparison dataset".into()));
    }
    let sums: Vec<(f64, u64)> = dataset
        .par_iter()
        .map(|tokens| -> Result<(f64, u64)> {
            let la = a.forward(tokens)?.logits;
            let lb = b.forward(tokens)?.logits;
            let sq: f64 = la
                .data()
                .iter()
                .zip(lb.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            Ok((sq, la.data().len() as u64))
        })
        .collect::<Result<_>>()?;
    let (total, count) = sums
        .into_iter()
        .fold((0.0, 0u64), |(s, c), (sq, n)| (s + sq, c + n));
    Ok(total / count as f64)
}

/// Exponentiated mean next-token cross entropy over a held-out dataset.
pub fn perplexity(model: &ToyTransformer, dataset: &[Vec<usize>]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("perplexity dataset".into()));
    }
    let parts: Vec<(f64, u64)> = dataset
        .par_iter()
        .map(|seq| -> Result<(f64, u64)> {
            if seq.len() < 2 {
                return Err(Error::EmptyDataset(
                    "perplexity needs sequences of at least 2 tokens".into(),
                ));
            }
            let out = model.forward(&seq[..seq.len() - 1])?;
            let (ce, _) = cross_entropy_and_grad(&out.logits, &seq[1..])?;
            Ok((ce * (seq.len() - 1) as f64, (seq.len() - 1) as u64))
        })
        .collect::<Result<_>>()?;
    let (total, count) = parts
        .into_iter()
        .fold((0.0, 0u64), |(s, c), (ce, n)| (s + ce, c + n));
    Ok((total / count as f64).exp())
}

/// Architecture dimensions for weight-free size accounting of real
/// transformer families (token embeddings and output head included; no
/// learned position embeddings, matching rotary-position models).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub d_model: u64,
    pub d_kv: u64,
    pub d_inter: u64,
    pub n_layers: u64,
    pub vocab: u64,
}

impl ArchSpec {
    /// Dense parameter total: untied embeddings and head, per-layer
    /// attention (q, k, v, o), gated FFN (gate, up, down), two norm gain
    /// vectors per layer, and the final norm.
    pub fn total_params(&self) -> u64 {
        let ArchSpec {
            d_model: d,
            d_kv,
            d_inter,
            n_layers,
            vocab,
        } = *self;
        let per_layer = 2 * d * d + 2 * d * d_kv + 3 * d * d_inter + 2 * d;
        2 * vocab * d + n_layers * per_layer + d
    }
}

/// One line of size accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeLine {
    pub original_params: u64,
    pub compressed_params: u64,
    pub saved_params: u64,
    /// At 4 bytes per parameter.
    pub saved_bytes: u64,
}

/// Weight-free size arithmetic for a compression plan on an architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeReport {
    /// One line per compressed layer, covering only that layer's planned
    /// target weights.
    pub per_layer: Vec<SizeLine>,
    /// Exact sums of the per-layer lines.
    pub targets_total: SizeLine,
    /// Whole-model view: original is the dense architecture total, savings
    /// come entirely from the planned weights.
    pub model_total: SizeLine,
}

/// Pure integer arithmetic: what compressing `n_compressed_layers` layers'
/// target weights at the formula rank (capped at `r_max`) saves.
pub fn size_report(
    arch: &ArchSpec,
    n_compressed_layers: u64,
    targets: &[WeightTarget],
    r_max: usize,
) -> Result<SizeReport> {
    if targets.is_empty() {
        return Err(Error::EmptyDataset("size report has no targets".into()));
    }
    if n_compressed_layers > arch.n_layers {
        return Err(Error::DimensionMismatch(format!(
            "{n_compressed_layers} compressed layers in a {}-layer architecture",
            arch.n_layers
        )));
    }
    let dims = |t: WeightTarget| -> (usize, usize) {
        match t {
            WeightTarget::Query => (arch.d_model as usize, arch.d_model as usize),
            WeightTarget::Key => (arch.d_model as usize, arch.d_kv as usize),
            WeightTarget::Gate => (arch.d_model as usize, arch.d_inter as usize),
        }
    };
    let mut layer_line = SizeLine {
        original_params: 0,
        compressed_params: 0,
        saved_params: 0,
        saved_bytes: 0,
    };
    for &t in targets {
        let (m, n) = dims(t);
        let pc = param_count(m, n, select_rank(m, n, r_max));
        layer_line.original_params += pc.original;
        layer_line.compressed_params += pc.compressed;
    }
    layer_line.saved_params = layer_line.original_params - layer_line.compressed_params;
    layer_line.saved_bytes = layer_line.saved_params * 4;

    let per_layer = vec![layer_line; n_compressed_layers as usize];
    let targets_total = SizeLine {
        original_params: layer_line.original_params * n_compressed_layers,
        compressed_params: layer_line.compressed_params * n_compressed_layers,
        saved_params: layer_line.saved_params * n_compressed_layers,
        saved_bytes: layer_line.saved_bytes * n_compressed_layers,
    };
    let base = arch.total_params();
    let model_total = SizeLine {
        original_params: base,
        compressed_params: base - targets_total.saved_params,
        saved_params: targets_total.saved_params,
        saved_bytes: targets_total.saved_bytes,
    };
    Ok(SizeReport {
        per_layer,
        targets_total,
        model_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{calibrate, synthetic_corpus, ModelConfig};

    fn four_layer_config() -> ModelConfig {
        ModelConfig {
            n_layers: 4,
            d_model: 16,
            n_heads: 4,
            d_k: 4,
            n_kv_heads: 2,
            d_inter: 24,
            vocab: 32,
            max_seq: 12,
        }
    }

    fn plan(layers: Vec<usize>, strategy: Strategy) -> CompressionPlan {
        CompressionPlan {
            layers,
            targets: WeightTarget::ALL.to_vec(),
            r_max: 8,
            strategy,
            seed: Some(11),
            rank_override: None,
        }
    }

    #[test]
    fn empty_plan_is_a_no_op() {
        let model = ToyTransformer::new_random(four_layer_config(), 1).unwrap();
        let out = compress_model(&model, &plan(vec![], Strategy::DeimOnly), None).unwrap();
        assert_eq!(out.model, model);
        assert!(out.reports.is_empty());
    }

    #[test]
    fn protected_layers_are_rejected() {
        let model = ToyTransformer::new_random(four_layer_config(), 1).unwrap();
        for bad in [0, 3, 7] {
            let err = compress_model(&model, &plan(vec![bad], Strategy::DeimOnly), None)
                .unwrap_err();
            assert!(matches!(err, Error::PlanLayerProtected(l) if l == bad), "{err}");
        }
    }

    #[test]
    fn activation_strategies_require_stats() {
        let model = ToyTransformer::new_random(four_layer_config(), 1).unwrap();
        let err = compress_model(&model, &plan(vec![1], Strategy::WandaDeim), None).unwrap_err();
        assert!(matches!(err, Error::MissingActivations(_)));
    }

    #[test]
    fn saved_params_match_param_count_sums_exactly() {
        let model = ToyTransformer::new_random(four_layer_config(), 3).unwrap();
        let corpus = synthetic_corpus(6, 10, model.config.vocab, 2).unwrap();
        let stats = calibrate(&model, &corpus).unwrap();
        let out = compress_model(&model, &plan(vec![1, 2], Strategy::WandaDeim), Some(&stats))
            .unwrap();
        assert_eq!(out.reports.len(), 6);
        let reported_saved: i64 = out.reports.iter().map(|r| r.params.saved).sum();
        let actual_saved = model.param_total() as i64 - out.model.param_total() as i64;
        assert_eq!(reported_saved, actual_saved);
        // The teacher copy is untouched and the bound verification holds.
        assert_eq!(model.compressed_layers(), Vec::<usize>::new());
        assert_eq!(out.model.compressed_layers(), vec![1, 2]);
        for r in &out.reports {
            assert!(r.bound.holds, "layer {} {}", r.layer, r.target);
            assert!(r.recon_frobenius.is_finite());
        }
    }

    #[test]
    fn full_rank_override_keeps_outputs_within_tolerance() {
        let model = ToyTransformer::new_random(four_layer_config(), 9).unwrap();
        let mut p = plan(vec![1, 2], Strategy::DeimOnly);
        p.rank_override = Some(16); // min(m, n) for every target here
        let out = compress_model(&model, &p, None).unwrap();
        let tokens = [4, 9, 1, 30, 22];
        let a = model.forward(&tokens).unwrap().logits;
        let b = out.model.forward(&tokens).unwrap().logits;
        let diff = a.sub(&b).unwrap().max_abs();
        assert!(diff < 1e-6 * a.max_abs().max(1.0), "diff {diff}");
        // Full rank saves nothing or less; the accounting must say so.
        for r in &out.reports {
            assert!(!r.params.reduces);
        }
    }

    #[test]
    fn rank_override_clamps_to_full_rank_and_rejects_zero() {
        let model = ToyTransformer::new_random(four_layer_config(), 9).unwrap();
        let mut p = plan(vec![1], Strategy::DeimOnly);
        p.rank_override = Some(1000);
        let out = compress_model(&model, &p, None).unwrap();
        for r in &out.reports {
            assert_eq!(r.rank, r.rows.min(r.cols));
        }
        p.rank_override = Some(0);
        assert!(compress_model(&model, &p, None).is_err());
    }

    #[test]
    fn compression_is_deterministic() {
        let model = ToyTransformer::new_random(four_layer_config(), 5).unwrap();
        let corpus = synthetic_corpus(4, 8, model.config.vocab, 7).unwrap();
        let stats = calibrate(&model, &corpus).unwrap();
        let p = plan(vec![1, 2], Strategy::WandaDeim);
        let a = compress_model(&model, &p, Some(&stats)).unwrap();
        let b = compress_model(&model, &p, Some(&stats)).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn identical_models_have_zero_activation_diffs() {
        let model = ToyTransformer::new_random(four_layer_config(), 2).unwrap();
        let data = synthetic_corpus(3, 8, model.config.vocab, 1).unwrap();
        let report = activation_diff_report(&model, &model, &data).unwrap();
        assert_eq!(report.len(), 12);
        for row in &report {
            assert_eq!(row.diff, 0.0);
            assert!(row.norm_original > 0.0);
            assert_eq!(row.norm_original, row.norm_compressed);
        }
    }

    #[test]
    fn full_rank_compression_has_tiny_activation_diffs() {
        let model = ToyTransformer::new_random(four_layer_config(), 6).unwrap();
        let mut p = plan(vec![1, 2], Strategy::DeimOnly);
        p.rank_override = Some(16);
        let compressed = compress_model(&model, &p, None).unwrap().model;
        let data = synthetic_corpus(3, 8, model.config.vocab, 4).unwrap();
        let report = activation_diff_report(&model, &compressed, &data).unwrap();
        for row in &report {
            assert!(
                row.diff < 1e-5 * row.norm_original.max(1.0),
                "layer {} {}: diff {}",
                row.layer,
                row.target,
                row.diff
            );
        }
    }

    #[test]
    fn higher_rank_hurts_activations_less_on_average() {
        let mut diffs = [0.0f64; 2]; // [r = 4, r = 16]
        for seed in 0..10 {
            let model = ToyTransformer::new_random(four_layer_config(), 100 + seed).unwrap();
            let data = synthetic_corpus(4, 10, model.config.vocab, seed).unwrap();
            for (slot, r) in [(0usize, 4), (1usize, 16)] {
                let mut p = plan(vec![2], Strategy::DeimOnly);
                p.rank_override = Some(r);
                let compressed = compress_model(&model, &p, None).unwrap().model;
                let report = activation_diff_report(&model, &compressed, &data).unwrap();
                diffs[slot] += report
                    .iter()
                    .filter(|row| row.layer == 2)
                    .map(|row| row.diff)
                    .sum::<f64>();
            }
        }
        assert!(
            diffs[1] <= diffs[0],
            "rank 16 mean diff {} vs rank 4 {}",
            diffs[1] / 10.0,
            diffs[0] / 10.0
        );
    }

    #[test]
    fn output_mse_and_perplexity_basics() {
        let model = ToyTransformer::new_random(four_layer_config(), 12).unwrap();
        let data = synthetic_corpus(4, 8, model.config.vocab, 3).unwrap();
        assert_eq!(per_token_output_mse(&model, &model, &data).unwrap(), 0.0);
        let ppl = perplexity(&model, &data).unwrap();
        assert!(ppl.is_finite() && ppl > 1.0);
        // An untrained model sits near the uniform baseline.
        assert!(ppl < model.config.vocab as f64 * 3.0);
    }

    fn llama31() -> ArchSpec {
        ArchSpec {
            d_model: 4096,
            d_kv: 1024,
            d_inter: 14336,
            n_layers: 32,
            vocab: 128256,
        }
    }

    #[test]
    fn arch_totals_match_published_sizes() {
        assert_eq!(llama31().total_params(), 8_030_261_248);
        let llama2 = ArchSpec {
            d_model: 4096,
            d_kv: 4096,
            d_inter: 11008,
            n_layers: 32,
            vocab: 32000,
        };
        assert_eq!(llama2.total_params(), 6_738_415_616);
        let mistral = ArchSpec {
            d_model: 4096,
            d_kv: 1024,
            d_inter: 14336,
            n_layers: 32,
            vocab: 32000,
        };
        assert_eq!(mistral.total_params(), 7_241_732_096);
    }

    #[test]
    fn size_report_reproduces_flagship_accounting() {
        let report = size_report(&llama31(), 10, &WeightTarget::ALL, 256).unwrap();
        // Every target lands on rank 256 under the cap.
        assert_eq!(report.per_layer.len(), 10);
        assert_eq!(report.per_layer[0].saved_params, 71_368_704);
        assert_eq!(report.targets_total.saved_params, 713_687_040);
        assert_eq!(report.model_total.compressed_params, 7_316_574_208);
        let gib = report.model_total.saved_bytes as f64 / (1u64 << 30) as f64;
        assert_eq!(format!("{gib:.2}"), "2.66");
        assert_eq!(
            format!("{:.2}", report.model_total.compressed_params as f64 / 1e9),
            "7.32"
        );
    }

    #[test]
    fn size_report_zero_layers_saves_nothing() {
        let report = size_report(&llama31(), 0, &WeightTarget::ALL, 256).unwrap();
        assert!(report.per_layer.is_empty());
        assert_eq!(report.targets_total.saved_params, 0);
        assert_eq!(report.model_total.compressed_params, llama31().total_params());
    }

    #[test]
    fn size_report_totals_are_sums_of_lines() {
        let report = size_report(&llama31(), 7, &[WeightTarget::Gate], 64).unwrap();
        let sum: u64 = report.per_layer.iter().map(|l| l.saved_params).sum();
        assert_eq!(sum, report.targets_total.saved_params);
        let orig_sum: u64 = report.per_layer.iter().map(|l| l.original_params).sum();
        assert_eq!(orig_sum, report.targets_total.original_params);
    }
}
