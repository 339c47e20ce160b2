//! Entanglement and association scores, and cross-model comparison tables.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeler::{normalize_label, HeadProfile};
use crate::store::HeadId;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("entanglement needs at least 2 heads, got {0}")]
    TooFewHeads(usize),
    #[error("association needs at least one head profile")]
    NoProfiles,
}

/// Property label of every analyzed head of one model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelAssignment {
    pub labels: BTreeMap<HeadId, String>,
}

impl LabelAssignment {
    pub fn from_profiles(profiles: &[HeadProfile]) -> Self {
        Self {
            labels: profiles.iter().map(|p| (p.head, p.label.clone())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Heads whose normalized label equals the normalized `property`.
    pub fn heads_with(&self, property: &str) -> Vec<HeadId> {
        let want = normalize_label(property);
        self.labels
            .iter()
            .filter(|(_, l)| normalize_label(l) == want)
            .map(|(h, _)| *h)
            .collect()
    }

    /// Distinct normalized labels, sorted.
    pub fn properties(&self) -> Vec<String> {
        let mut v: Vec<String> = self.labels.values().map(|l| normalize_label(l)).collect();
        v.sort();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntanglementVariant {
    /// Mean over heads of (heads sharing its label) / (|H| − 1).
    #[default]
    MeanPairwise,
    /// Fraction of heads sharing their label with at least one other head.
    AnyShared,
}

impl std::str::FromStr for EntanglementVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean_pairwise" => Ok(Self::MeanPairwise),
            "any_shared" => Ok(Self::AnyShared),
            other => Err(format!("unknown entanglement variant `{other}`")),
        }
    }
}

fn label_counts<'a>(labels: impl Iterator<Item = &'a String>) -> (Vec<String>, HashMap<String, usize>) {
    let normalized: Vec<String> = labels.map(|l| normalize_label(l)).collect();
    let mut counts = HashMap::new();
    for l in &normalized {
        *counts.entry(l.clone()).or_insert(0usize) += 1;
    }
    (normalized, counts)
}

pub fn entanglement_score(
    assignment: &LabelAssignment,
    variant: EntanglementVariant,
) -> Result<f64, MetricsError> {
    let n = assignment.len();
    if n < 2 {
        return Err(MetricsError::TooFewHeads(n));
    }
    let (normalized, counts) = label_counts(assignment.labels.values());
    let score = match variant {
        EntanglementVariant::MeanPairwise => {
            // Σ_h shared(h) / (|H| − 1), averaged over |H|, as one division
            let shared: usize = normalized.iter().map(|l| counts[l] - 1).sum();
            shared as f64 / (n * (n - 1)) as f64
        }
        EntanglementVariant::AnyShared => {
            normalized.iter().filter(|l| counts[*l] > 1).count() as f64 / n as f64
        }
    };
    Ok(score)
}

/// Fraction of heads with at least `k` matching descriptions.
pub fn association_score(profiles: &[HeadProfile], k: usize) -> Result<f64, MetricsError> {
    let counts: Vec<usize> = profiles.iter().map(HeadProfile::match_count).collect();
    association_from_counts(&counts, k)
}

pub fn association_from_counts(match_counts: &[usize], k: usize) -> Result<f64, MetricsError> {
    if match_counts.is_empty() {
        return Err(MetricsError::NoProfiles);
    }
    let hits = match_counts.iter().filter(|&&c| c >= k).count();
    Ok(hits as f64 / match_counts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadDetail {
    pub layer: usize,
    pub head: usize,
    pub label: String,
    pub matches: usize,
    pub descriptions: usize,
    /// Other heads carrying the same normalized label.
    pub shared_with: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_id: String,
    pub pretrain_tag: String,
    pub entanglement: f64,
    pub entanglement_variant: EntanglementVariant,
    pub association: f64,
    pub association_k: usize,
    pub heads: Vec<HeadDetail>,
}

impl MetricsReport {
    pub fn from_profiles(
        model_id: &str,
        pretrain_tag: &str,
        profiles: &[HeadProfile],
        variant: EntanglementVariant,
        k: usize,
    ) -> Result<Self, MetricsError> {
        let assignment = LabelAssignment::from_profiles(profiles);
        let (_, counts) = label_counts(assignment.labels.values());
        let heads = profiles
            .iter()
            .map(|p| HeadDetail {
                layer: p.head.layer,
                head: p.head.head,
                label: p.label.clone(),
                matches: p.match_count(),
                descriptions: p.components.len(),
                shared_with: counts[&normalize_label(&p.label)] - 1,
            })
            .collect();
        Ok(Self {
            model_id: model_id.to_string(),
            pretrain_tag: pretrain_tag.to_string(),
            entanglement: entanglement_score(&assignment, variant)?,
            entanglement_variant: variant,
            association: association_score(profiles, k)?,
            association_k: k,
            heads,
        })
    }

    pub fn name(&self) -> String {
        format!("{} ({})", self.model_id, self.pretrain_tag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub rank: usize,
    pub model_id: String,
    pub pretrain_tag: String,
    pub score: f64,
}

/// Two rankings: entanglement ascending (lower is better) and association
/// descending (higher is better).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub entanglement: Vec<RankRow>,
    pub association: Vec<RankRow>,
}

fn ranked(reports: &[MetricsReport], score: impl Fn(&MetricsReport) -> f64, ascending: bool) -> Vec<RankRow> {
    let mut order: Vec<&MetricsReport> = reports.iter().collect();
    order.sort_by(|a, b| {
        let ord = score(a).partial_cmp(&score(b)).unwrap_or(Ordering::Equal);
        let ord = if ascending { ord } else { ord.reverse() };
        ord.then_with(|| a.name().cmp(&b.name()))
    });
    order
        .into_iter()
        .enumerate()
        .map(|(i, r)| RankRow {
            rank: i + 1,
            model_id: r.model_id.clone(),
            pretrain_tag: r.pretrain_tag.clone(),
            score: score(r),
        })
        .collect()
}

pub fn model_comparison_report(reports: &[MetricsReport]) -> ComparisonTable {
    ComparisonTable {
        entanglement: ranked(reports, |r| r.entanglement, true),
        association: ranked(reports, |r| r.association, false),
    }
}

impl ComparisonTable {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        render_section(&mut out, "Entanglement Score (↓)", &self.entanglement);
        out.push('\n');
        render_section(&mut out, "Association Score (↑)", &self.association);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,rank,model_id,pretrain_tag,score\n");
        for (metric, rows) in [("entanglement", &self.entanglement), ("association", &self.association)] {
            for r in rows {
                let _ = writeln!(out, "{metric},{},{},{},{:.6}", r.rank, csv_field(&r.model_id), csv_field(&r.pretrain_tag), r.score);
            }
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn render_section(out: &mut String, title: &str, rows: &[RankRow]) {
    let model_w = rows.iter().map(|r| r.model_id.len()).max().unwrap_or(0).max(5);
    let tag_w = rows.iter().map(|r| r.pretrain_tag.len()).max().unwrap_or(0).max(17);
    let _ = writeln!(out, "{:<4}  {:<model_w$}  {:<tag_w$}  {}", "Rank", "Model", "Pre-training data", title);
    for r in rows {
        let _ = writeln!(out, "{:<4}  {:<model_w$}  {:<tag_w$}  {:.3}", r.rank, r.model_id, r.pretrain_tag, r.score);
    }
}
