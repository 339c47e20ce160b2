//! End-to-end run over one dump: decompose every analyzed head, label it,
//! flag matching descriptions, score the model and persist the results.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeler::{Exemplar, HeadProfile, LabelError, LabelMode, Labeler, ModelKey, ProfileComponent};
use crate::metrics::{EntanglementVariant, MetricsError, MetricsReport};
use crate::store::{read_dump, Dump, HeadId, StoreError};
use crate::textspan::{decompose_head, DecompositionConfig, SpanComponent, TextSpanError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("decomposition of head {head} failed: {source}")]
    TextSpan {
        head: HeadId,
        #[source]
        source: TextSpanError,
    },
    #[error("unlabeled heads in cache-only mode: {}", format_heads(.0))]
    Unlabeled(Vec<HeadId>),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("writing artifacts: {0}")]
    Io(#[from] std::io::Error),
}

fn format_heads(heads: &[HeadId]) -> String {
    heads.iter().map(HeadId::to_string).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub decomposition: DecompositionConfig,
    pub association_k: usize,
    pub entanglement_variant: EntanglementVariant,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            decomposition: DecompositionConfig::default(),
            association_k: 3,
            entanglement_variant: EntanglementVariant::MeanPairwise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilesArtifact {
    pub model_id: String,
    pub pretrain_tag: String,
    pub config: PipelineConfig,
    pub profiles: Vec<HeadProfile>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub profiles: Vec<HeadProfile>,
    pub report: MetricsReport,
}

pub fn profiles_path(dump: &Path) -> PathBuf {
    sibling(dump, "profiles.json")
}

pub fn metrics_path(dump: &Path) -> PathBuf {
    sibling(dump, "metrics.json")
}

fn sibling(dump: &Path, suffix: &str) -> PathBuf {
    let mut name = dump.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    dump.with_file_name(name)
}

/// TEXTSPAN components of every analyzed head, in head order.
pub fn decompose_all(
    dump: &Dump,
    cfg: &DecompositionConfig,
) -> Result<Vec<(HeadId, Vec<SpanComponent>)>, PipelineError> {
    let texts: Array2<f64> = dump.texts.embeddings.mapv(f64::from);
    dump.bank
        .meta
        .analyzed_heads()
        .into_par_iter()
        .map(|head| {
            let c = dump.bank.head_slice(head)?.mapv(f64::from);
            let comps = decompose_head(c.view(), texts.view(), cfg)
                .map_err(|source| PipelineError::TextSpan { head, source })?;
            Ok((head, comps))
        })
        .collect()
}

fn descriptions_of(dump: &Dump, comps: &[SpanComponent]) -> Vec<String> {
    comps
        .iter()
        .map(|c| dump.texts.descriptions[c.text_index].clone())
        .collect()
}

/// Labels and flags already-decomposed heads.
pub fn label_heads(
    dump: &Dump,
    decomposed: &[(HeadId, Vec<SpanComponent>)],
    labeler: &mut Labeler,
) -> Result<Vec<HeadProfile>, PipelineError> {
    let model = ModelKey {
        model_id: dump.bank.meta.model_id.clone(),
        pretrain_tag: dump.bank.meta.pretrain_tag.clone(),
    };
    if labeler.mode == LabelMode::Llm && labeler.exemplars().is_empty() {
        let derived = exemplars_from_manual(dump, decomposed, labeler);
        labeler.set_exemplars(derived);
    }

    let mut profiles = Vec::with_capacity(decomposed.len());
    let mut missing = Vec::new();
    for (head, comps) in decomposed {
        let descriptions = descriptions_of(dump, comps);
        let (label, label_provenance) = match labeler.label_head(&model, *head, &descriptions) {
            Ok(v) => v,
            Err(LabelError::Unlabeled { head }) => {
                missing.push(head);
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let (match_flags, match_provenance) =
            labeler.match_descriptions(&model, *head, &label, &descriptions)?;
        profiles.push(HeadProfile {
            head: *head,
            components: comps
                .iter()
                .zip(&descriptions)
                .map(|(c, d)| ProfileComponent {
                    text_index: c.text_index,
                    description: d.clone(),
                    variance: c.variance,
                })
                .collect(),
            label,
            label_provenance,
            match_flags,
            match_provenance,
        });
    }
    if !missing.is_empty() {
        return Err(PipelineError::Unlabeled(missing));
    }
    Ok(profiles)
}

/// Manually annotated heads serve as in-context examples.
fn exemplars_from_manual(
    dump: &Dump,
    decomposed: &[(HeadId, Vec<SpanComponent>)],
    labeler: &Labeler,
) -> Vec<Exemplar> {
    let Some(manual) = labeler.manual() else {
        return Vec::new();
    };
    decomposed
        .iter()
        .filter_map(|(head, comps)| {
            let entry = manual.get(*head)?;
            let descriptions = descriptions_of(dump, comps);
            (!descriptions.is_empty()).then(|| Exemplar {
                descriptions,
                label: entry.label.clone(),
            })
        })
        .collect()
}

/// Runs the whole pipeline over an already loaded dump.
pub fn run_on_dump(
    dump: &Dump,
    labeler: &mut Labeler,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput, PipelineError> {
    let decomposed = decompose_all(dump, &cfg.decomposition)?;
    let profiles = label_heads(dump, &decomposed, labeler)?;
    let report = MetricsReport::from_profiles(
        &dump.bank.meta.model_id,
        &dump.bank.meta.pretrain_tag,
        &profiles,
        cfg.entanglement_variant,
        cfg.association_k,
    )?;
    Ok(PipelineOutput { profiles, report })
}

/// Loads the dump, runs the pipeline, and writes `<dump>.profiles.json` and
/// `<dump>.metrics.json` next to it.
pub fn run_pipeline(
    dump_path: impl AsRef<Path>,
    labeler: &mut Labeler,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput, PipelineError> {
    let dump_path = dump_path.as_ref();
    let dump = read_dump(dump_path)?;
    let out = run_on_dump(&dump, labeler, cfg)?;
    let artifact = ProfilesArtifact {
        model_id: dump.bank.meta.model_id.clone(),
        pretrain_tag: dump.bank.meta.pretrain_tag.clone(),
        config: *cfg,
        profiles: out.profiles.clone(),
    };
    write_json(&profiles_path(dump_path), &artifact)?;
    write_json(&metrics_path(dump_path), &out.report)?;
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(std::io::Error::other)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)
}

pub fn load_profiles(path: impl AsRef<Path>) -> Result<ProfilesArtifact, PipelineError> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::Io(std::io::Error::other(e)))
}

pub fn load_metrics(path: impl AsRef<Path>) -> Result<MetricsReport, PipelineError> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::Io(std::io::Error::other(e)))
}
