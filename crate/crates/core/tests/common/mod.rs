//! Independent reference implementations and fixtures shared by the
//! integration tests and the acceptance harness. Everything here works on
//! plain `Vec`s and recomputes from scratch.

#![allow(dead_code)]

use std::collections::BTreeMap;

use cliplens_core::labeler::{normalize_label, HeadProfile, Provenance, ProfileComponent};
use cliplens_core::store::{ContributionBank, HeadId, ImageRecord, ModelMeta, ANALYZED_LAYER_COUNT};
use cliplens_core::textspan::ZERO_ROW_RELATIVE;
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn to_mat(a: &Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn to_array(m: &Mat, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((m.len(), cols), |(i, j)| m[i][j])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Applies `I − Σ u uᵀ` for the accumulated orthonormal directions.
fn project_out(row: &[f64], dirs: &[Vec<f64>]) -> Vec<f64> {
    let d = row.len();
    // explicit projector matrix, rebuilt every call
    let mut p = vec![vec![0.0; d]; d];
    for (i, pi) in p.iter_mut().enumerate() {
        pi[i] = 1.0;
    }
    for u in dirs {
        for i in 0..d {
            for j in 0..d {
                p[i][j] -= u[i] * u[j];
            }
        }
    }
    (0..d).map(|j| (0..d).map(|i| row[i] * p[i][j]).sum()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleComponent {
    pub text_index: usize,
    pub variance: f64,
    pub direction: Vec<f64>,
}

/// Greedy selection that rebuilds the residual `C` and `R` from the
/// originals at every step.
pub fn brute_force_textspan(c: &Mat, r: &Mat, m: usize, eps: f64) -> Vec<OracleComponent> {
    let scale = r.iter().map(|row| dot(row, row).sqrt()).fold(0.0f64, f64::max);
    let zero_tol = ZERO_ROW_RELATIVE * scale;
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    let mut out: Vec<OracleComponent> = Vec::new();
    while out.len() < m {
        let c_k: Mat = c.iter().map(|row| project_out(row, &dirs)).collect();
        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for (j, row) in r.iter().enumerate() {
            if out.iter().any(|o| o.text_index == j) {
                continue;
            }
            let rj = project_out(row, &dirs);
            let norm = dot(&rj, &rj).sqrt();
            if norm <= zero_tol || norm == 0.0 {
                continue;
            }
            let u: Vec<f64> = rj.iter().map(|v| v / norm).collect();
            let s: Vec<f64> = c_k.iter().map(|ci| dot(ci, &u)).collect();
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            let var: f64 = s.iter().map(|v| (v - mean) * (v - mean)).sum();
            let better = match &best {
                None => true,
                Some((_, bv, _)) => var > *bv + 1e-9 * bv.abs(),
            };
            if better {
                best = Some((j, var, u));
            }
        }
        let Some((j, var, u)) = best else { break };
        if var < eps {
            break;
        }
        dirs.push(u.clone());
        out.push(OracleComponent {
            text_index: j,
            variance: var,
            direction: u,
        });
    }
    out
}

/// Pair counting over ordered pairs `(h, h')`, `h ≠ h'`.
pub fn brute_entanglement(labels: &[String]) -> f64 {
    let n = labels.len();
    let norm: Vec<String> = labels.iter().map(|l| normalize_label(l)).collect();
    let mut pairs = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i != j && norm[i] == norm[j] {
                pairs += 1;
            }
        }
    }
    pairs as f64 / (n * (n - 1)) as f64
}

pub fn brute_any_shared(labels: &[String]) -> f64 {
    let n = labels.len();
    let norm: Vec<String> = labels.iter().map(|l| normalize_label(l)).collect();
    let shared = (0..n)
        .filter(|&i| (0..n).any(|j| j != i && norm[i] == norm[j]))
        .count();
    shared as f64 / n as f64
}

pub fn brute_association(flags: &[Vec<bool>], k: usize) -> f64 {
    let mut hits = 0usize;
    for f in flags {
        let mut c = 0;
        for &b in f {
            if b {
                c += 1;
            }
        }
        if c >= k {
            hits += 1;
        }
    }
    hits as f64 / flags.len() as f64
}

/// Cosine computed the same way the engine defines it: `f64` sums in index
/// order, clamped.
pub fn reference_cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na: f64 = a.iter().fold(0.0, |acc, x| acc + x * x);
    let nb: f64 = b.iter().fold(0.0, |acc, x| acc + x * x);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let d = a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y);
    Some((d / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Scores every candidate, sorts everything, keeps `k`.
pub fn exhaustive_topk(query: &[f64], cands: &Mat, k: usize, skip: Option<usize>) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = cands
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .filter_map(|(i, c)| reference_cosine(query, c).map(|s| (i, s)))
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Random bank with `heads_per_layer` heads per analyzed layer; reconstruction
/// holds by construction in `f64`, rounded to `f32`.
pub fn random_bank(seed: u64, n: usize, d: usize, heads_per_layer: usize) -> ContributionBank {
    let mut r = rng(seed);
    let meta = ModelMeta::vit("rand", "test", d, 12, heads_per_layer, 224, 32).unwrap();
    let mut cls = Array4::<f32>::zeros((ANALYZED_LAYER_COUNT, heads_per_layer, n, d));
    cls.iter_mut().for_each(|v| *v = normal(&mut r) as f32);
    let base = Array2::<f32>::from_shape_fn((n, d), |_| normal(&mut r) as f32);
    let mut full = Array2::<f32>::zeros((n, d));
    for i in 0..n {
        for k in 0..d {
            let mut acc = base[[i, k]] as f64;
            for l in 0..ANALYZED_LAYER_COUNT {
                for h in 0..heads_per_layer {
                    acc += cls[[l, h, i, k]] as f64;
                }
            }
            full[[i, k]] = acc as f32;
        }
    }
    ContributionBank {
        meta,
        images: (0..n)
            .map(|i| ImageRecord {
                id: format!("i{i}"),
                uri: String::new(),
            })
            .collect(),
        cls_contrib: cls,
        base,
        full_repr: full,
    }
}

/// Copies a few random rows of every head onto other rows so ties occur.
pub fn plant_duplicates(bank: &mut ContributionBank, seed: u64, count: usize) {
    let mut r = rng(seed);
    let n = bank.len();
    for _ in 0..count {
        let src = r.random_range(0..n);
        let dst = r.random_range(0..n);
        for l in 0..ANALYZED_LAYER_COUNT {
            for h in 0..bank.meta.heads_per_layer {
                for k in 0..bank.meta.embed_dim {
                    bank.cls_contrib[[l, h, dst, k]] = bank.cls_contrib[[l, h, src, k]];
                }
            }
        }
    }
}

/// Rows of one head, via direct indexing.
pub fn head_rows(bank: &ContributionBank, head: HeadId) -> Mat {
    let slot = bank.meta.analyzed_layers.iter().position(|&l| l == head.layer).unwrap();
    (0..bank.len())
        .map(|i| {
            (0..bank.meta.embed_dim)
                .map(|k| bank.cls_contrib[[slot, head.head, i, k]] as f64)
                .collect()
        })
        .collect()
}

/// Sum over `heads` (ascending head order) of each image's contributions.
pub fn summed_rows(bank: &ContributionBank, heads: &[HeadId]) -> Mat {
    let mut sorted = heads.to_vec();
    sorted.sort();
    let per_head: Vec<Mat> = sorted.iter().map(|&h| head_rows(bank, h)).collect();
    (0..bank.len())
        .map(|i| {
            let mut acc = vec![0.0; bank.meta.embed_dim];
            for rows in &per_head {
                for (a, v) in acc.iter_mut().zip(&rows[i]) {
                    *a += v;
                }
            }
            acc
        })
        .collect()
}

pub struct Planted {
    pub c: Array2<f64>,
    pub r: Array2<f64>,
    pub first: usize,
    pub second: usize,
}

fn orthonormalize(v: &mut [f64], against: &[Vec<f64>]) {
    for u in against {
        let p = dot(v, u);
        for (x, y) in v.iter_mut().zip(u) {
            *x -= p * y;
        }
    }
    let n = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn standardized(r: &mut ChaCha8Rng, n: usize, variance: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| normal(r)).collect();
    let mean = raw.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = raw.iter().map(|v| v - mean).collect();
    let pop_var = centered.iter().map(|v| v * v).sum::<f64>() / n as f64;
    centered.iter().map(|v| v * (variance / pop_var).sqrt()).collect()
}

/// `C` with population variance 10 along unit `d1` and 5 along orthogonal
/// `d2` plus weak isotropic noise; `R` holds `d1`, `d2` and 30 random rows
/// orthogonal to both, in shuffled order.
pub fn planted_fixture(seed: u64) -> Planted {
    const N: usize = 200;
    const D: usize = 32;
    const DISTRACTORS: usize = 30;
    let mut r = rng(seed);
    let mut d1: Vec<f64> = (0..D).map(|_| normal(&mut r)).collect();
    orthonormalize(&mut d1, &[]);
    let mut d2: Vec<f64> = (0..D).map(|_| normal(&mut r)).collect();
    orthonormalize(&mut d2, std::slice::from_ref(&d1));
    let a = standardized(&mut r, N, 10.0);
    let b = standardized(&mut r, N, 5.0);
    let c = Array2::from_shape_fn((N, D), |(i, k)| a[i] * d1[k] + b[i] * d2[k]);
    let noise = Array2::from_shape_fn((N, D), |_| 0.1 * normal(&mut r));
    let c = c + noise;

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(DISTRACTORS + 2);
    for _ in 0..DISTRACTORS {
        let mut v: Vec<f64> = (0..D).map(|_| normal(&mut r)).collect();
        orthonormalize(&mut v, &[d1.clone(), d2.clone()]);
        rows.push(v);
    }
    let first = r.random_range(0..=rows.len());
    rows.insert(first, d1);
    let second = r.random_range(0..=rows.len());
    rows.insert(second, d2);
    let first = if second <= first { first + 1 } else { first };
    Planted {
        c,
        r: to_array(&rows, D),
        first,
        second,
    }
}

pub fn profile(head: HeadId, label: &str, flags: Vec<bool>) -> HeadProfile {
    HeadProfile {
        head,
        components: flags
            .iter()
            .enumerate()
            .map(|(i, _)| ProfileComponent {
                text_index: i,
                description: format!("d{i}"),
                variance: 1.0,
            })
            .collect(),
        label: label.to_string(),
        label_provenance: Provenance::Manual,
        match_flags: flags,
        match_provenance: Provenance::Manual,
    }
}

/// Random labels over a small alphabet, with random case and padding.
pub fn random_labels(r: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let alphabet = r.random_range(1..=n.max(1));
    (0..n)
        .map(|_| {
            let base = format!("prop{}", r.random_range(0..alphabet));
            match r.random_range(0..3) {
                0 => base,
                1 => base.to_uppercase(),
                _ => format!("  {base} "),
            }
        })
        .collect()
}

pub fn heads(n: usize) -> Vec<HeadId> {
    (0..n).map(|i| HeadId::new(8 + i / 12, i % 12)).collect()
}

pub fn assignment_of(labels: &[String]) -> BTreeMap<HeadId, String> {
    heads(labels.len()).into_iter().zip(labels.iter().cloned()).collect()
}

/// Projects every row of `r` onto the row space of `c`, using a modified
/// Gram-Schmidt basis. Only meaningful when `c` is far from rank-deficient.
pub fn gram_schmidt_project(c: &Mat, r: &Mat) -> Mat {
    let scale = c.iter().map(|row| dot(row, row).sqrt()).fold(0.0f64, f64::max);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for row in c {
        let mut v = row.clone();
        for _ in 0..2 {
            for u in &basis {
                let p = dot(&v, u);
                for (x, y) in v.iter_mut().zip(u) {
                    *x -= p * y;
                }
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 * scale {
            basis.push(v.iter().map(|x| x / n).collect());
        }
    }
    r.iter()
        .map(|row| {
            let mut out = vec![0.0; row.len()];
            for u in &basis {
                let p = dot(row, u);
                for (o, y) in out.iter_mut().zip(u) {
                    *o += p * y;
                }
            }
            out
        })
        .collect()
}
