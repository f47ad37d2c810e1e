//! Importance scoring and row/column index selection for CUR factorization.
//!
//! The activation-weighted importance matrix `S[i,j] = act_norms[i] * |W[i,j]|`
//! follows the convention `y = x W` with `W` laid out `d_in x d_out`, so the
//! per-input-feature activation norms scale rows. Index selection is either
//! greedy discrete empirical interpolation (DEIM) over singular vectors, a
//! plain largest-norm pick, or a seeded uniform draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::svd::svd;

/// How rows and columns are picked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// DEIM over the singular vectors of the activation-weighted importance
    /// matrix.
    WandaDeim,
    /// DEIM over the singular vectors of the raw weight matrix.
    DeimOnly,
    /// Top-r rows and columns of the importance matrix by Euclidean norm.
    WandaOnly,
    /// Top-r rows and columns of the weight matrix by Euclidean norm
    /// (normalized by the Frobenius norm, which leaves the ranking unchanged).
    WeightNorm,
    /// Seeded uniform draw of distinct indices.
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::WandaDeim,
        Strategy::DeimOnly,
        Strategy::WandaOnly,
        Strategy::WeightNorm,
        Strategy::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::WandaDeim => "wanda-deim",
            Strategy::DeimOnly => "deim-only",
            Strategy::WandaOnly => "wanda-only",
            Strategy::WeightNorm => "weight-norm",
            Strategy::Random => "random",
        }
    }

    /// True if the strategy consumes calibration activation norms.
    pub fn needs_activations(self) -> bool {
        matches!(self, Strategy::WandaDeim | Strategy::WandaOnly)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "wanda-deim" => Ok(Strategy::WandaDeim),
            "deim-only" => Ok(Strategy::DeimOnly),
            "wanda-only" => Ok(Strategy::WandaOnly),
            "weight-norm" => Ok(Strategy::WeightNorm),
            "random" => Ok(Strategy::Random),
            other => Err(format!(
                "unknown strategy {other:?} (expected wanda-deim, deim-only, wanda-only, weight-norm or random)"
            )),
        }
    }
}

/// Importance scores with the provenance of how they were built.
#[derive(Debug, Clone)]
pub struct ImportanceMatrix {
    pub s: DenseMatrix,
    pub strategy: Strategy,
    pub seed: Option<u64>,
}

/// The chosen row indices `p` and column indices `q`, each of length `r`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSelection {
    pub p: Vec<usize>,
    pub q: Vec<usize>,
    pub r: usize,
}

/// Builds `S[i,j] = act_norms[i] * |W[i,j]|`.
pub fn wanda_importance(w: &DenseMatrix, act_norms: &[f64]) -> Result<DenseMatrix> {
    if act_norms.len() != w.rows() {
        return Err(Error::DimensionMismatch(format!(
            "act_norms length {} does not match d_in = {}",
            act_norms.len(),
            w.rows()
        )));
    }
    if let Some(bad) = act_norms.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidMatrix(format!(
            "activation norm {bad} is not a finite non-negative value"
        )));
    }
    let mut s = DenseMatrix::zeros(w.rows(), w.cols());
    for i in 0..w.rows() {
        let norm = act_norms[i];
        for (sv, wv) in s.row_mut(i).iter_mut().zip(w.row(i)) {
            *sv = norm * wv.abs();
        }
    }
    Ok(s)
}

/// Greedy DEIM index selection over the first `r` columns of `v`.
///
/// Step 1 takes the largest-magnitude entry of the first column. Step `j`
/// interpolates column `j` on the rows already chosen and takes the
/// largest-magnitude entry of the residual. Ties break to the lowest index.
pub fn deim_indices(v: &DenseMatrix, r: usize) -> Result<Vec<usize>> {
    let (m, k) = v.shape();
    if r == 0 || r > k || r > m {
        return Err(Error::DimensionMismatch(format!(
            "deim rank {r} out of range for {m}x{k} vector matrix"
        )));
    }
    let mut p = Vec::with_capacity(r);
    p.push(argmax_abs(&v.col(0)));
    for j in 1..r {
        // Solve V[p, 0..j] * c = V[p, j] for the interpolation coefficients.
        let sub = v.select_rows(&p)?.select_cols(&(0..j).collect::<Vec<_>>())?;
        let rhs: Vec<f64> = p.iter().map(|&i| v.get(i, j)).collect();
        let c = solve_dense(&sub, &rhs, j)?;
        let mut residual = v.col(j);
        for (l, &cl) in c.iter().enumerate() {
            if cl == 0.0 {
                continue;
            }
            for (i, res) in residual.iter_mut().enumerate() {
                *res -= cl * v.get(i, l);
            }
        }
        // Interpolation makes the residual vanish on every chosen row; a
        // violation means the solve went numerically wrong.
        debug_assert!(
            p.iter().all(|&i| residual[i].abs() < 1e-10),
            "deim residual non-zero at an already-chosen row"
        );
        // A residual that vanishes everywhere means column j lies in the span
        // of the previous columns; no new row can be picked.
        let rho_max = residual.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let col_scale = v.col(j).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if rho_max <= 1e-12 * col_scale.max(f64::MIN_POSITIVE) {
            return Err(Error::SingularSubsystem {
                step: j,
                pivot: rho_max,
            });
        }
        p.push(argmax_abs(&residual));
    }
    Ok(p)
}

/// Index of the largest absolute value, ties to the lowest index.
fn argmax_abs(values: &[f64]) -> usize {
    let mut best = 0;
    let mut best_abs = values[0].abs();
    for (i, v) in values.iter().enumerate().skip(1) {
        if v.abs() > best_abs {
            best_abs = v.abs();
            best = i;
        }
    }
    best
}

/// Gaussian elimination with partial pivoting for the small interpolation
/// systems; rejects pivots below `1e-12` of the matrix scale.
fn solve_dense(a: &DenseMatrix, b: &[f64], step: usize) -> Result<Vec<f64>> {
    let n = a.rows();
    debug_assert_eq!(a.cols(), n);
    debug_assert_eq!(b.len(), n);
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    let mut m = a.clone();
    let mut x = b.to_vec();
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| {
                m.get(i, col)
                    .abs()
                    .partial_cmp(&m.get(j, col).abs())
                    .unwrap()
            })
            .unwrap();
        let pivot = m.get(pivot_row, col);
        if pivot.abs() < 1e-12 * scale {
            return Err(Error::SingularSubsystem {
                step,
                pivot: pivot.abs(),
            });
        }
        if pivot_row != col {
            for j in 0..n {
                let tmp = m.get(col, j);
                m.set(col, j, m.get(pivot_row, j));
                m.set(pivot_row, j, tmp);
            }
            x.swap(col, pivot_row);
        }
        for i in col + 1..n {
            let f = m.get(i, col) / pivot;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                m.set(i, j, m.get(i, j) - f * m.get(col, j));
            }
            x[i] -= f * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut v = x[col];
        for j in col + 1..n {
            v -= m.get(col, j) * x[j];
        }
        x[col] = v / m.get(col, col);
    }
    Ok(x)
}

/// Picks `r` row indices `p` and column indices `q` from `w` under the given
/// strategy.
pub fn select_indices(
    w: &DenseMatrix,
    strategy: Strategy,
    r: usize,
    act_norms: Option<&[f64]>,
    seed: Option<u64>,
) -> Result<IndexSelection> {
    let (m, n) = w.shape();
    if r == 0 || r > m.min(n) {
        return Err(Error::DimensionMismatch(format!(
            "rank {r} out of range for {m}x{n} matrix"
        )));
    }
    if strategy.needs_activations() && act_norms.is_none() {
        return Err(Error::MissingActivations(strategy.name().into()));
    }
    let (p, q) = match strategy {
        Strategy::WandaDeim => {
            let s = wanda_importance(w, act_norms.unwrap())?;
            deim_over(&s, r)?
        }
        Strategy::DeimOnly => deim_over(w, r)?,
        Strategy::WandaOnly => {
            let s = wanda_importance(w, act_norms.unwrap())?;
            (top_by_score(&s.row_norms(), r), top_by_score(&s.col_norms(), r))
        }
        Strategy::WeightNorm => {
            // Scores are ||row||_2 / ||W||_F; the common divisor does not
            // change the ranking but matches the documented definition.
            let fro = w.frobenius().max(f64::MIN_POSITIVE);
            let rows: Vec<f64> = w.row_norms().iter().map(|v| v / fro).collect();
            let cols: Vec<f64> = w.col_norms().iter().map(|v| v / fro).collect();
            (top_by_score(&rows, r), top_by_score(&cols, r))
        }
        Strategy::Random => {
            let seed = seed.ok_or(Error::MissingSeed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = rand::seq::index::sample(&mut rng, m, r).into_vec();
            let q = rand::seq::index::sample(&mut rng, n, r).into_vec();
            (p, q)
        }
    };
    debug_assert!(distinct(&p) && distinct(&q));
    Ok(IndexSelection { p, q, r })
}

/// DEIM over the top-r left singular vectors for rows and right singular
/// vectors for columns of `source`.
fn deim_over(source: &DenseMatrix, r: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let dec = svd(source)?;
    let p = deim_indices(&dec.p, r)?;
    let q = deim_indices(&dec.q, r)?;
    Ok((p, q))
}

/// Indices of the `r` largest scores, descending, ties to the lowest index.
fn top_by_score(scores: &[f64], r: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.truncate(r);
    order
}

fn distinct(indices: &[usize]) -> bool {
    let mut seen = indices.to_vec();
    seen.sort_unstable();
    seen.windows(2).all(|w| w[0] != w[1])
}
