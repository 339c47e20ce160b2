//! Head-level analyses over a loaded bank: property and per-head nearest
//! neighbors, text-to-image neighbors, topic and contrastive heatmaps.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::LabelAssignment;
use crate::store::{ContributionBank, HeadId, StoreError, TokenContributions};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("query vector has zero norm")]
    ZeroQuery,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no head carries property `{property}`; available: {available:?}")]
    UnknownProperty {
        property: String,
        available: Vec<String>,
    },
    #[error("image index {0} out of range")]
    ImageOutOfRange(usize),
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T, E = AnalysisError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub image_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedNeighbors {
    pub k: usize,
    pub neighbors: Vec<Neighbor>,
}

/// Cosine similarity with `f64` accumulation in index order, clamped to [−1, 1].
pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return f64::NEG_INFINITY;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

#[derive(PartialEq)]
struct Scored {
    score: f64,
    index: usize,
}

impl Eq for Scored {}

// "greater" means a better match: higher score, then lower index
impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Exact top-k by cosine over the candidate rows. `skip` removes one
/// candidate (query self-exclusion). Zero-norm candidates are dropped.
pub fn topk_indices(
    query: ArrayView1<'_, f64>,
    candidates: ArrayView2<'_, f64>,
    k: usize,
    skip: Option<usize>,
) -> Result<Vec<(usize, f64)>> {
    if k == 0 {
        return Err(AnalysisError::ZeroK);
    }
    if query.iter().all(|&v| v == 0.0) {
        return Err(AnalysisError::ZeroQuery);
    }
    if candidates.ncols() != query.len() {
        return Err(AnalysisError::DimensionMismatch(format!(
            "query has {} dims, candidates have {}",
            query.len(),
            candidates.ncols()
        )));
    }
    // min-heap of the best k seen so far
    let mut heap: BinaryHeap<std::cmp::Reverse<Scored>> = BinaryHeap::with_capacity(k + 1);
    for (index, row) in candidates.axis_iter(Axis(0)).enumerate() {
        if Some(index) == skip {
            continue;
        }
        let score = cosine(query, row);
        if score == f64::NEG_INFINITY {
            continue;
        }
        let item = Scored { score, index };
        if heap.len() < k {
            heap.push(std::cmp::Reverse(item));
        } else if let Some(worst) = heap.peek() {
            if item > worst.0 {
                heap.pop();
                heap.push(std::cmp::Reverse(item));
            }
        }
    }
    let mut out: Vec<Scored> = heap.into_iter().map(|r| r.0).collect();
    out.sort_by(|a, b| b.cmp(a));
    Ok(out.into_iter().map(|s| (s.index, s.score)).collect())
}

fn to_neighbors(bank: &ContributionBank, k: usize, hits: Vec<(usize, f64)>) -> RankedNeighbors {
    RankedNeighbors {
        k,
        neighbors: hits
            .into_iter()
            .map(|(index, score)| Neighbor {
                index,
                image_id: bank.images[index].id.clone(),
                score,
            })
            .collect(),
    }
}

/// Top-k candidate rows by cosine to `query`, labelled with the bank's image ids.
pub fn topk_by_cosine(
    bank: &ContributionBank,
    query: ArrayView1<'_, f64>,
    candidates: ArrayView2<'_, f64>,
    k: usize,
) -> Result<RankedNeighbors> {
    let hits = topk_indices(query, candidates, k, None)?;
    Ok(to_neighbors(bank, k, hits))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    #[default]
    Sum,
    Mean,
}

/// Where a query image's contributions come from.
#[derive(Debug, Clone, Copy)]
pub enum QueryImage<'a> {
    /// An image of the candidate bank; excluded from its own results.
    Pool(usize),
    /// An image of another bank with the same model layout, e.g. an upload.
    External(&'a ContributionBank, usize),
}

impl<'a> QueryImage<'a> {
    fn resolve(self, pool: &'a ContributionBank) -> (&'a ContributionBank, usize, Option<usize>) {
        match self {
            QueryImage::Pool(i) => (pool, i, Some(i)),
            QueryImage::External(b, i) => (b, i, None),
        }
    }
}

fn property_heads(assignment: &LabelAssignment, property: &str) -> Result<Vec<HeadId>> {
    let heads = assignment.heads_with(property);
    if heads.is_empty() {
        return Err(AnalysisError::UnknownProperty {
            property: property.to_string(),
            available: assignment.properties(),
        });
    }
    Ok(heads)
}

fn sum_heads(bank: &ContributionBank, heads: &[HeadId], image: usize, combine: Combine) -> Result<Array1<f64>> {
    if image >= bank.len() {
        return Err(AnalysisError::ImageOutOfRange(image));
    }
    let mut acc = Array1::<f64>::zeros(bank.meta.embed_dim);
    for &h in heads {
        let row = bank.head_slice(h)?.row(image).mapv(f64::from);
        acc += &row;
    }
    if combine == Combine::Mean {
        acc /= heads.len() as f64;
    }
    Ok(acc)
}

/// Sum of the contributions of every head labelled `property`.
pub fn unified_property_representation(
    bank: &ContributionBank,
    assignment: &LabelAssignment,
    property: &str,
    image: usize,
    combine: Combine,
) -> Result<Array1<f64>> {
    let heads = property_heads(assignment, property)?;
    sum_heads(bank, &heads, image, combine)
}

pub fn property_neighbors(
    bank: &ContributionBank,
    assignment: &LabelAssignment,
    property: &str,
    query: QueryImage<'_>,
    k: usize,
    combine: Combine,
) -> Result<RankedNeighbors> {
    let heads = property_heads(assignment, property)?;
    let (qbank, qi, skip) = query.resolve(bank);
    if qbank.meta.embed_dim != bank.meta.embed_dim {
        return Err(AnalysisError::DimensionMismatch("query bank embed_dim differs".into()));
    }
    let q = sum_heads(qbank, &heads, qi, combine)?;
    let mut pool = Array2::<f64>::zeros((bank.len(), bank.meta.embed_dim));
    for i in 0..bank.len() {
        pool.row_mut(i).assign(&sum_heads(bank, &heads, i, combine)?);
    }
    let hits = topk_indices(q.view(), pool.view(), k, skip)?;
    Ok(to_neighbors(bank, k, hits))
}

pub fn per_head_image_neighbors(
    bank: &ContributionBank,
    head: HeadId,
    query: QueryImage<'_>,
    k: usize,
) -> Result<RankedNeighbors> {
    let (qbank, qi, skip) = query.resolve(bank);
    let pool = bank.head_slice(head)?.mapv(f64::from);
    let qslice = qbank.head_slice(head)?;
    if qi >= qslice.nrows() {
        return Err(AnalysisError::ImageOutOfRange(qi));
    }
    let q = qslice.row(qi).mapv(f64::from);
    let hits = topk_indices(q.view(), pool.view(), k, skip)?;
    Ok(to_neighbors(bank, k, hits))
}

pub fn per_head_text_neighbors(
    bank: &ContributionBank,
    head: HeadId,
    text_embedding: ArrayView1<'_, f64>,
    k: usize,
) -> Result<RankedNeighbors> {
    let pool = bank.head_slice(head)?.mapv(f64::from);
    let hits = topk_indices(text_embedding, pool.view(), k, None)?;
    Ok(to_neighbors(bank, k, hits))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    MinMax,
    Signed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub grid: Array2<f64>,
    pub normalization: Normalization,
    pub heads: Vec<HeadId>,
    pub texts: Vec<String>,
}

impl HeatMap {
    pub fn rows(&self) -> usize {
        self.grid.nrows()
    }

    pub fn cols(&self) -> usize {
        self.grid.ncols()
    }
}

/// Sums token contributions of several heads of one image.
pub fn sum_token_heads(parts: &[TokenContributions]) -> Result<Array2<f64>> {
    let first = parts
        .first()
        .ok_or_else(|| AnalysisError::InvalidSize("no token contributions".into()))?;
    let mut acc = Array2::<f64>::zeros(first.tokens.raw_dim());
    for p in parts {
        if p.tokens.raw_dim() != acc.raw_dim() {
            return Err(AnalysisError::DimensionMismatch("token shapes differ".into()));
        }
        acc += &p.tokens.mapv(f64::from);
    }
    Ok(acc)
}

fn token_scores(tokens: ArrayView2<'_, f64>, text: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if text.iter().all(|&v| v == 0.0) {
        return Err(AnalysisError::ZeroQuery);
    }
    if tokens.ncols() != text.len() {
        return Err(AnalysisError::DimensionMismatch(format!(
            "tokens have {} dims, text has {}",
            tokens.ncols(),
            text.len()
        )));
    }
    Ok(tokens.dot(&text))
}

fn to_grid(values: Array1<f64>, grid: (usize, usize)) -> Result<Array2<f64>> {
    let n = values.len();
    values.into_shape_with_order(grid).map_err(|_| {
        AnalysisError::InvalidSize(format!("{n} tokens do not fill a {}x{} grid", grid.0, grid.1))
    })
}

/// Rescales to [0, 1]; constant maps become all zeros.
pub fn minmax_normalize(raw: &Array2<f64>) -> Array2<f64> {
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return Array2::zeros(raw.raw_dim());
    }
    raw.mapv(|v| (v - lo) / (hi - lo))
}

/// Raw per-token similarity `⟨token, text⟩` on the patch grid.
pub fn topic_scores(
    tokens: ArrayView2<'_, f64>,
    text_embedding: ArrayView1<'_, f64>,
    grid: (usize, usize),
) -> Result<Array2<f64>> {
    to_grid(token_scores(tokens, text_embedding)?, grid)
}

pub fn topic_heatmap(
    tokens: &TokenContributions,
    text: &str,
    text_embedding: ArrayView1<'_, f64>,
    grid: (usize, usize),
) -> Result<HeatMap> {
    let t = tokens.tokens.mapv(f64::from);
    let raw = topic_scores(t.view(), text_embedding, grid)?;
    Ok(HeatMap {
        grid: minmax_normalize(&raw),
        normalization: Normalization::MinMax,
        heads: vec![tokens.head],
        texts: vec![text.to_string()],
    })
}

/// `⟨token, a⟩ − ⟨token, b⟩` per token: positive where text A fits better.
pub fn contrastive_scores(
    tokens: ArrayView2<'_, f64>,
    text_a: ArrayView1<'_, f64>,
    text_b: ArrayView1<'_, f64>,
    grid: (usize, usize),
) -> Result<Array2<f64>> {
    let a = token_scores(tokens, text_a)?;
    let b = token_scores(tokens, text_b)?;
    to_grid(a - b, grid)
}

pub fn contrastive_map(
    tokens: &TokenContributions,
    texts: (&str, &str),
    text_a: ArrayView1<'_, f64>,
    text_b: ArrayView1<'_, f64>,
    grid: (usize, usize),
) -> Result<HeatMap> {
    let t = tokens.tokens.mapv(f64::from);
    Ok(HeatMap {
        grid: contrastive_scores(t.view(), text_a, text_b, grid)?,
        normalization: Normalization::Signed,
        heads: vec![tokens.head],
        texts: vec![texts.0.to_string(), texts.1.to_string()],
    })
}

/// Corner-aligned bilinear resize.
pub fn upsample_bilinear(grid: ArrayView2<'_, f64>, out_h: usize, out_w: usize) -> Result<Array2<f64>> {
    let (h, w) = grid.dim();
    if out_h == 0 || out_w == 0 {
        return Err(AnalysisError::InvalidSize("output dims must be positive".into()));
    }
    if h == 0 || w == 0 {
        return Err(AnalysisError::InvalidSize("input grid is empty".into()));
    }
    if out_h < h || out_w < w {
        return Err(AnalysisError::InvalidSize(format!(
            "output {out_h}x{out_w} is smaller than grid {h}x{w}"
        )));
    }
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let x0 = (x.floor() as usize).min(n_in - 1);
        let x1 = (x0 + 1).min(n_in - 1);
        (x0, x1, x - x0 as f64)
    };
    let mut out = Array2::zeros((out_h, out_w));
    for i in 0..out_h {
        let (y0, y1, fy) = coord(i, h, out_h);
        for j in 0..out_w {
            let (x0, x1, fx) = coord(j, w, out_w);
            let top = grid[[y0, x0]] * (1.0 - fx) + grid[[y0, x1]] * fx;
            let bottom = grid[[y1, x0]] * (1.0 - fx) + grid[[y1, x1]] * fx;
            out[[i, j]] = top * (1.0 - fy) + bottom * fy;
        }
    }
    Ok(out)
}
