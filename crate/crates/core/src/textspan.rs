//! Greedy decomposition of a head's output matrix into text directions.
//!
//! Given the `[N, d]` contributions `C` of one head and a bank of candidate
//! text embeddings projected onto the row space of `C`, each iteration
//! picks the text whose (normalized) direction carries the most
//! mean-centered variance of `C`, then removes that direction from both the
//! working `C` and the working text matrix.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rows of the working text matrix whose norm falls below this fraction of
/// the largest initial row norm are treated as zero.
pub const ZERO_ROW_RELATIVE: f64 = 1e-10;

/// Candidate variances within this relative distance of the current best
/// count as tied, and the lower text index keeps the slot.
pub const TIE_RELATIVE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum TextSpanError {
    #[error("candidate text matrix is empty")]
    EmptyCandidates,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("contribution matrix has no rows")]
    EmptyContributions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionConfig {
    /// Number of components to extract.
    pub m: usize,
    /// Stop once the best remaining variance falls below this.
    pub eps: f64,
    /// Relative singular-value cutoff for the row-span basis.
    pub rank_tol: f64,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        Self {
            m: 5,
            eps: 1e-9,
            rank_tol: 1e-6,
        }
    }
}

impl DecompositionConfig {
    pub fn validate(&self) -> Result<(), TextSpanError> {
        if !self.eps.is_finite() || self.eps < 0.0 {
            return Err(TextSpanError::InvalidConfig(format!("eps = {}", self.eps)));
        }
        if !self.rank_tol.is_finite() || self.rank_tol <= 0.0 {
            return Err(TextSpanError::InvalidConfig(format!(
                "rank_tol = {}",
                self.rank_tol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanComponent {
    pub text_index: usize,
    /// Unit vector in embedding space.
    pub direction: Vec<f64>,
    pub variance: f64,
}

/// Orthonormal basis `[r, d]` of the row space of `c`, keeping singular
/// directions with `σ ≥ rank_tol · σ_max`.
pub fn row_span_basis(c: ArrayView2<'_, f64>, rank_tol: f64) -> Result<Array2<f64>, TextSpanError> {
    let (n, d) = c.dim();
    if n == 0 {
        return Err(TextSpanError::EmptyContributions);
    }
    if rank_tol.is_nan() || rank_tol <= 0.0 {
        return Err(TextSpanError::InvalidConfig(format!("rank_tol = {rank_tol}")));
    }
    if d == 0 || c.iter().all(|&v| v == 0.0) {
        return Ok(Array2::zeros((0, d)));
    }
    let mat = DMatrix::from_fn(n, d, |i, j| c[[i, j]]);
    let svd = mat.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= rank_tol * sigma_max && s > 0.0)
        .map(|(i, _)| i)
        .collect();
    let mut basis = Array2::zeros((keep.len(), d));
    for (row, &i) in keep.iter().enumerate() {
        for j in 0..d {
            basis[[row, j]] = v_t[(i, j)];
        }
    }
    Ok(basis)
}

/// Replaces each row of `r` with its orthogonal projection onto the span of
/// the (orthonormal) rows of `basis`.
pub fn project_to_span(
    r: ArrayView2<'_, f64>,
    basis: ArrayView2<'_, f64>,
) -> Result<Array2<f64>, TextSpanError> {
    if basis.nrows() > 0 && r.ncols() != basis.ncols() {
        return Err(TextSpanError::DimensionMismatch(format!(
            "texts have width {}, basis has width {}",
            r.ncols(),
            basis.ncols()
        )));
    }
    if basis.nrows() == 0 {
        return Ok(Array2::zeros(r.raw_dim()));
    }
    // R Bᵀ B
    let coeffs = r.dot(&basis.t());
    Ok(coeffs.dot(&basis))
}

/// Mean-centered sum of squares of `c · dir`.
pub fn centered_variance(c: ArrayView2<'_, f64>, dir: ArrayView1<'_, f64>) -> f64 {
    let s = c.dot(&dir);
    let n = s.len();
    if n == 0 {
        return 0.0;
    }
    let mean = s.sum() / n as f64;
    s.iter().map(|v| (v - mean) * (v - mean)).sum()
}

fn row_norm(row: ArrayView1<'_, f64>) -> f64 {
    row.dot(&row).sqrt()
}

/// Removes the unit direction `u` from every row of `m`: `M ← M (I − u uᵀ)`.
fn deflate(m: &mut Array2<f64>, u: ArrayView1<'_, f64>) {
    let coeffs = m.dot(&u);
    for (mut row, c) in m.axis_iter_mut(Axis(0)).zip(coeffs.iter()) {
        row.scaled_add(-c, &u);
    }
}

/// One decomposition together with the Frobenius norm of the working `C`
/// before the first and after every iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub components: Vec<SpanComponent>,
    pub residual_norms: Vec<f64>,
}

pub fn textspan_decompose(
    c: ArrayView2<'_, f64>,
    r_proj: ArrayView2<'_, f64>,
    cfg: &DecompositionConfig,
) -> Result<Vec<SpanComponent>, TextSpanError> {
    Ok(textspan_decompose_traced(c, r_proj, cfg)?.components)
}

pub fn textspan_decompose_traced(
    c: ArrayView2<'_, f64>,
    r_proj: ArrayView2<'_, f64>,
    cfg: &DecompositionConfig,
) -> Result<Decomposition, TextSpanError> {
    cfg.validate()?;
    if r_proj.nrows() == 0 {
        return Err(TextSpanError::EmptyCandidates);
    }
    if c.ncols() != r_proj.ncols() {
        return Err(TextSpanError::DimensionMismatch(format!(
            "contributions have width {}, texts have width {}",
            c.ncols(),
            r_proj.ncols()
        )));
    }
    let mut work_c = c.to_owned();
    let mut work_r = r_proj.to_owned();
    let scale = work_r
        .axis_iter(Axis(0))
        .map(row_norm)
        .fold(0.0f64, f64::max);
    let zero_tol = ZERO_ROW_RELATIVE * scale;
    let mut taken = vec![false; work_r.nrows()];
    let mut components = Vec::with_capacity(cfg.m);
    let mut residual_norms = vec![frobenius(&work_c)];

    while components.len() < cfg.m {
        let mut best: Option<(usize, f64, Array1<f64>)> = None;
        for (j, row) in work_r.axis_iter(Axis(0)).enumerate() {
            if taken[j] {
                continue;
            }
            let norm = row_norm(row);
            if norm <= zero_tol || norm == 0.0 {
                continue;
            }
            let dir = &row / norm;
            let v = centered_variance(work_c.view(), dir.view());
            if best.as_ref().is_none_or(|(_, bv, _)| v > *bv + TIE_RELATIVE * bv.abs()) {
                best = Some((j, v, dir));
            }
        }
        let Some((j, variance, dir)) = best else { break };
        if variance < cfg.eps {
            break;
        }
        taken[j] = true;
        deflate(&mut work_c, dir.view());
        deflate(&mut work_r, dir.view());
        residual_norms.push(frobenius(&work_c));
        components.push(SpanComponent {
            text_index: j,
            direction: dir.to_vec(),
            variance,
        });
    }
    Ok(Decomposition {
        components,
        residual_norms,
    })
}

fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Full per-head run: span basis of `c`, projection of the text bank, then
/// the greedy decomposition.
pub fn decompose_head(
    c: ArrayView2<'_, f64>,
    texts: ArrayView2<'_, f64>,
    cfg: &DecompositionConfig,
) -> Result<Vec<SpanComponent>, TextSpanError> {
    cfg.validate()?;
    let basis = row_span_basis(c, cfg.rank_tol)?;
    let projected = project_to_span(texts, basis.view())?;
    textspan_decompose(c, projected.view(), cfg)
}
