//! Loading dumps and their head profiles for serving or CLI use.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use cliplens_core::labeler::{HeadProfile, LabelCache, LabelMode, Labeler, ManualAnnotations};
use cliplens_core::metrics::{LabelAssignment, MetricsReport};
use cliplens_core::pipeline::{
    load_metrics, load_profiles, metrics_path, profiles_path, run_pipeline, PipelineConfig, PipelineError,
    PipelineOutput,
};
use cliplens_core::store::{read_dump, Dump};

use crate::config::{ModelConfig, ServiceConfig};
use crate::llm::client_from_config;
use crate::sidecar::SidecarClient;

/// Everything needed to build a [`Labeler`] for one model.
#[derive(Debug, Clone)]
pub struct LabelSetup {
    pub mode: LabelMode,
    pub cache: Option<PathBuf>,
    pub manual: Option<PathBuf>,
}

impl LabelSetup {
    pub fn build(&self, cfg: &ServiceConfig) -> anyhow::Result<Labeler> {
        let cache = match &self.cache {
            Some(p) => LabelCache::open(p)?,
            None => LabelCache::in_memory(),
        };
        let mut labeler = Labeler::new(self.mode, Arc::new(cache));
        if let Some(p) = &self.manual {
            labeler = labeler.with_manual(ManualAnnotations::load(p)?);
        }
        if self.mode == LabelMode::Llm {
            match client_from_config(&cfg.llm)? {
                Some(client) => labeler = labeler.with_llm(client),
                None => anyhow::bail!("llm mode needs [llm] endpoint in the configuration"),
            }
        }
        Ok(labeler)
    }
}

pub struct Labels {
    pub profiles: Vec<HeadProfile>,
    pub report: MetricsReport,
    pub assignment: LabelAssignment,
}

pub struct LoadedModel {
    pub id: String,
    pub dump_path: PathBuf,
    pub dump: Dump,
    /// `None` when labeling failed, e.g. cache-only mode with missing labels.
    pub labels: Option<Labels>,
    pub sidecar: Option<SidecarClient>,
}

pub fn model_key(dump: &Dump) -> String {
    let meta = &dump.bank.meta;
    format!("{}-{}", meta.model_id, meta.pretrain_tag)
}

/// Reuses persisted artifacts when they were produced with the same
/// pipeline settings; otherwise runs the pipeline, which rewrites them.
pub fn labels_for(
    dump_path: &Path,
    dump: &Dump,
    labeler: &mut Labeler,
    pcfg: &PipelineConfig,
) -> Result<PipelineOutput, PipelineError> {
    if let (Ok(p), Ok(m)) = (load_profiles(profiles_path(dump_path)), load_metrics(metrics_path(dump_path))) {
        let meta = &dump.bank.meta;
        if p.config == *pcfg && p.model_id == meta.model_id && p.pretrain_tag == meta.pretrain_tag {
            return Ok(PipelineOutput {
                profiles: p.profiles,
                report: m,
            });
        }
    }
    run_pipeline(dump_path, labeler, pcfg)
}

pub fn load_model(cfg: &ServiceConfig, model: &ModelConfig, setup: &LabelSetup) -> anyhow::Result<LoadedModel> {
    let dump = read_dump(&model.dump).map_err(|e| anyhow::anyhow!("{}: {e}", model.dump.display()))?;
    let id = model.id.clone().unwrap_or_else(|| model_key(&dump));
    let mut labeler = setup.build(cfg)?;
    let labels = match labels_for(&model.dump, &dump, &mut labeler, &cfg.defaults.pipeline()) {
        Ok(out) => Some(Labels {
            assignment: LabelAssignment::from_profiles(&out.profiles),
            profiles: out.profiles,
            report: out.report,
        }),
        Err(e) => {
            tracing::warn!(model = %id, "serving without head labels: {e}");
            None
        }
    };
    Ok(LoadedModel {
        id,
        dump_path: model.dump.clone(),
        dump,
        labels,
        sidecar: cfg.sidecar_for(model).map(|u| SidecarClient::new(&u)),
    })
}

pub fn load_all(cfg: &ServiceConfig) -> anyhow::Result<Vec<LoadedModel>> {
    cfg.validate()?;
    let mut out: Vec<LoadedModel> = Vec::new();
    for m in &cfg.models {
        let setup = LabelSetup {
            mode: cfg.mode,
            cache: cfg.label_cache_path(),
            manual: cfg.manual_for(m),
        };
        let loaded = load_model(cfg, m, &setup)?;
        if out.iter().any(|o| o.id == loaded.id) {
            anyhow::bail!("two configured models resolve to id `{}`; set `id` explicitly", loaded.id);
        }
        tracing::info!(
            model = %loaded.id,
            images = loaded.dump.bank.len(),
            labelled = loaded.labels.is_some(),
            "loaded dump"
        );
        out.push(loaded);
    }
    Ok(out)
}
