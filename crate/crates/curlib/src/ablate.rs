//! Ablation sweeps: hold the pipeline fixed, vary one axis, tabulate.
//!
//! Matrix-level sweeps (index-selection strategy) run on synthetic instances
//! with planted structure; model-level sweeps (targets, rank cap, calibration
//! size, layer selection) run a full compress-and-measure cycle per setting.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cur::cur_decompose;
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::model::{
    calibrate, rank_layers, synthetic_corpus, CalibrationStats, ToyTransformer, WeightTarget,
};
use crate::pipeline::{compress_model, per_token_output_mse, CompressionPlan};
use crate::selection::Strategy;

/// A synthetic matrix with planted low-rank structure plus noise, and input
/// activation norms correlated with the energy of the planted row space.
/// Instances are fully determined by `(rows, cols, seed)`.
pub fn correlated_instance(rows: usize, cols: usize, seed: u64) -> (DenseMatrix, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let components = 6.min(rows.min(cols));
    let mut w = DenseMatrix::zeros(rows, cols);
    let mut row_energy = vec![0.0; rows];
    for t in 0..components {
        let sigma = 3.0 * 0.6f64.powi(t as i32);
        let u: Vec<f64> = (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for i in 0..rows {
            row_energy[i] += sigma * u[i] * u[i];
            for j in 0..cols {
                let cur = w.get(i, j);
                w.set(i, j, cur + sigma * u[i] * v[j]);
            }
        }
    }
    for i in 0..rows {
        for j in 0..cols {
            let cur = w.get(i, j);
            w.set(i, j, cur + 0.05 * rng.gen_range(-1.0..1.0));
        }
    }
    let act_norms = row_energy.into_iter().map(|e| 1.0 + 5.0 * e).collect();
    (w, act_norms)
}

/// Reconstruction quality of one strategy across all seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: Strategy,
    pub mean_frobenius_diff: f64,
    pub min_frobenius_diff: f64,
    pub max_frobenius_diff: f64,
}

/// Strategy-axis results on `n_seeds` planted instances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyAblation {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub n_seeds: u64,
    pub table: Vec<StrategyRow>,
}

/// Factorizes `n_seeds` planted `rows x cols` instances at `rank` with every
/// strategy and tabulates `||W - CUR||_F` per strategy. Trials run in
/// parallel and are merged by seed order, so results are deterministic.
pub fn ablate_strategies(
    rows: usize,
    cols: usize,
    rank: usize,
    n_seeds: u64,
) -> Result<StrategyAblation> {
    if n_seeds == 0 {
        return Err(Error::EmptyDataset("strategy sweep needs seeds".into()));
    }
    if rank == 0 || rank > rows.min(cols) {
        return Err(Error::DimensionMismatch(format!(
            "rank {rank} outside 1..={} for {rows}x{cols}",
            rows.min(cols)
        )));
    }
    let per_seed: Vec<Vec<f64>> = (0..n_seeds)
        .into_par_iter()
        .map(|seed| -> Result<Vec<f64>> {
            let (w, act) = correlated_instance(rows, cols, seed);
            Strategy::ALL
                .iter()
                .map(|&s| {
                    let act_ref = s.needs_activations().then_some(act.as_slice());
                    let f = cur_decompose(&w, rank, s, act_ref, Some(seed))?;
                    Ok(w.sub(&f.reconstruct())?.frobenius())
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let table = Strategy::ALL
        .iter()
        .enumerate()
        .map(|(i, &strategy)| {
            let diffs: Vec<f64> = per_seed.iter().map(|row| row[i]).collect();
            StrategyRow {
                strategy,
                mean_frobenius_diff: diffs.iter().sum::<f64>() / diffs.len() as f64,
                min_frobenius_diff: diffs.iter().cloned().fold(f64::INFINITY, f64::min),
                max_frobenius_diff: diffs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    Ok(StrategyAblation {
        rows,
        cols,
        rank,
        n_seeds,
        table,
    })
}

/// One target-combination setting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetsRow {
    pub targets: Vec<WeightTarget>,
    pub output_mse: f64,
    pub saved_params: i64,
}

/// The target combinations compared in the sweep.
pub fn target_combinations() -> Vec<Vec<WeightTarget>> {
    use WeightTarget::{Gate, Key, Query};
    vec![
        vec![Query, Key, Gate],
        vec![Gate],
        vec![Query, Key],
        vec![Query, Gate],
        vec![Key, Gate],
    ]
}

/// Compresses the same layers with each target combination and measures the
/// output damage against the original model on `eval`.
pub fn ablate_targets(
    model: &ToyTransformer,
    stats: &CalibrationStats,
    base_plan: &CompressionPlan,
    eval: &[Vec<usize>],
) -> Result<Vec<TargetsRow>> {
    target_combinations()
        .into_iter()
        .map(|targets| {
            let plan = CompressionPlan {
                targets: targets.clone(),
                ..base_plan.clone()
            };
            let out = compress_model(model, &plan, Some(stats))?;
            let saved_params = out.reports.iter().map(|r| r.params.saved).sum();
            Ok(TargetsRow {
                targets,
                output_mse: per_token_output_mse(model, &out.model, eval)?,
                saved_params,
            })
        })
        .collect()
}

/// One rank-cap setting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankCapRow {
    pub r_max: usize,
    /// Rank actually used per planned weight, in plan order.
    pub ranks: Vec<usize>,
    pub output_mse: f64,
    pub saved_params: i64,
}

/// Sweeps the rank cap and measures output damage per setting.
pub fn ablate_rank_cap(
    model: &ToyTransformer,
    stats: &CalibrationStats,
    base_plan: &CompressionPlan,
    caps: &[usize],
    eval: &[Vec<usize>],
) -> Result<Vec<RankCapRow>> {
    if caps.is_empty() {
        return Err(Error::EmptyDataset("rank-cap sweep needs cap values".into()));
    }
    caps.iter()
        .map(|&r_max| {
            let plan = CompressionPlan {
                r_max,
                ..base_plan.clone()
            };
            let out = compress_model(model, &plan, Some(stats))?;
            Ok(RankCapRow {
                r_max,
                ranks: out.reports.iter().map(|r| r.rank).collect(),
                output_mse: per_token_output_mse(model, &out.model, eval)?,
                saved_params: out.reports.iter().map(|r| r.params.saved).sum(),
            })
        })
        .collect()
}

/// One calibration-size setting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibSizeRow {
    pub calib_size: usize,
    pub output_mse: f64,
}

/// Re-calibrates on growing corpus prefixes sizes and measures how the
/// resulting activation-aware compression fares on `eval`.
pub fn ablate_calib_size(
    model: &ToyTransformer,
    base_plan: &CompressionPlan,
    sizes: &[usize],
    context_len: usize,
    calib_seed: u64,
    eval: &[Vec<usize>],
) -> Result<Vec<CalibSizeRow>> {
    if sizes.is_empty() {
        return Err(Error::EmptyDataset(
            "calibration-size sweep needs sizes".into(),
        ));
    }
    sizes
        .iter()
        .map(|&n| {
            let corpus = synthetic_corpus(n, context_len, model.config.vocab, calib_seed)?;
            let stats = calibrate(model, &corpus)?;
            let out = compress_model(model, base_plan, Some(&stats))?;
            Ok(CalibSizeRow {
                calib_size: n,
                output_mse: per_token_output_mse(model, &out.model, eval)?,
            })
        })
        .collect()
}

/// How the compressed layer set is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerPick {
    /// Smallest mean angular distance first (the pipeline default).
    Angular,
    /// The deepest eligible layers, ignoring calibration.
    LastN,
    /// Seeded uniform choice among eligible layers.
    Random,
}

impl LayerPick {
    pub const ALL: [LayerPick; 3] = [LayerPick::Angular, LayerPick::LastN, LayerPick::Random];

    pub fn name(self) -> &'static str {
        match self {
            LayerPick::Angular => "angular",
            LayerPick::LastN => "last-n",
            LayerPick::Random => "random",
        }
    }
}

impl std::fmt::Display for LayerPick {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Picks `n` compressible layers (first and last always excluded).
pub fn pick_layers(
    method: LayerPick,
    stats: &CalibrationStats,
    n: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let n_layers = stats.config.n_layers;
    if n_layers < 3 {
        return Err(Error::TooFewLayers {
            got: n_layers,
            need: 3,
        });
    }
    let eligible: Vec<usize> = (1..n_layers - 1).collect();
    if n > eligible.len() {
        return Err(Error::TooFewLayers {
            got: eligible.len(),
            need: n,
        });
    }
    Ok(match method {
        LayerPick::Angular => rank_layers(stats)?.ranked[..n].to_vec(),
        LayerPick::LastN => {
            let mut v: Vec<usize> = eligible.into_iter().rev().take(n).collect();
            v.sort_unstable();
            v
        }
        LayerPick::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, eligible.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| eligible[i]).collect()
        }
    })
}

/// One layer-selection setting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerPickRow {
    pub method: LayerPick,
    pub layers: Vec<usize>,
    pub output_mse: f64,
}

/// Compresses `n_layers_to_pick` layers chosen by each method and measures
/// output damage on `eval`.
pub fn ablate_layer_selection(
    model: &ToyTransformer,
    stats: &CalibrationStats,
    base_plan: &CompressionPlan,
    n_layers_to_pick: usize,
    eval: &[Vec<usize>],
) -> Result<Vec<LayerPickRow>> {
    LayerPick::ALL
        .iter()
        .map(|&method| {
            let layers = pick_layers(
                method,
                stats,
                n_layers_to_pick,
                base_plan.seed.unwrap_or(0),
            )?;
            let plan = CompressionPlan {
                layers: layers.clone(),
                ..base_plan.clone()
            };
            let out = compress_model(model, &plan, Some(stats))?;
            Ok(LayerPickRow {
                method,
                layers,
                output_mse: per_token_output_mse(model, &out.model, eval)?,
            })
        })
        .collect()
}
