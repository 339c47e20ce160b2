use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use cliplens::config::{ModelConfig, ServiceConfig};
use cliplens::models::{labels_for, load_all, LabelSetup};
use cliplens::server::{router, AppState};
use cliplens::sidecar::SidecarClient;
use cliplens_core::analysis::{
    contrastive_map, per_head_image_neighbors, per_head_text_neighbors, property_neighbors, topic_heatmap, Combine,
    HeatMap, QueryImage, RankedNeighbors,
};
use cliplens_core::labeler::LabelMode;
use cliplens_core::metrics::{model_comparison_report, LabelAssignment, MetricsReport};
use cliplens_core::pipeline::{decompose_all, label_heads, load_metrics, run_pipeline};
use cliplens_core::store::{read_dump, write_dump, Dump, HeadId};
use cliplens_core::synthetic::{generate, SyntheticSpec};
use ndarray::Array1;

#[derive(Parser)]
#[command(name = "cliplens", version, about = "Attention-head analysis for CLIP vision transformers")]
struct Cli {
    /// Contribution dump to work on; overrides the models in --config.
    #[arg(long, global = true)]
    dump: Option<PathBuf>,
    /// Service configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// How head labels are obtained.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<LabelMode>,
    /// Label cache (JSON lines).
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// Manual annotations (JSON).
    #[arg(long, global = true)]
    manual: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

fn parse_mode(s: &str) -> Result<LabelMode, String> {
    s.parse()
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose heads into ranked text descriptions.
    Textspan {
        /// Only this head, as `layer.head`.
        #[arg(long)]
        head: Option<HeadId>,
        /// Number of descriptions per head.
        #[arg(long)]
        m: Option<usize>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Decompose and label every head.
    Label {
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Run the full pipeline, persist its artifacts and print the scores.
    Metrics {
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Shorthand for `--format csv`.
        #[arg(long)]
        csv: bool,
    },
    /// Nearest images by property, by one head's view of an image, or by text.
    Neighbors {
        #[arg(long, conflicts_with = "head")]
        property: Option<String>,
        #[arg(long)]
        head: Option<HeadId>,
        /// Query image id from the dump.
        #[arg(long, conflicts_with = "text")]
        image: Option<String>,
        #[arg(long)]
        text: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        mean: bool,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Per-patch heatmap of one head for a text, or for a pair of texts.
    Segment {
        #[arg(long)]
        head: HeadId,
        #[arg(long)]
        image: String,
        #[arg(long)]
        text: String,
        /// Second text; switches to a signed contrastive map.
        #[arg(long)]
        versus: Option<String>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Rank models by their metrics files.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        listen: Option<String>,
    },
    /// Write a small synthetic dump for trying things out.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        images: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 12)]
        texts: usize,
        #[arg(long)]
        tokens: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("CLIPLENS_LOG").unwrap_or_else(|_| "info".into()))
        .init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn service_config(cli: &Cli) -> Result<ServiceConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::default(),
    };
    if let Some(dump) = &cli.dump {
        cfg.models = vec![ModelConfig {
            id: None,
            dump: dump.clone(),
            sidecar: None,
            manual: None,
        }];
    }
    if let Some(mode) = cli.mode {
        cfg.mode = mode;
    }
    if cli.cache.is_some() {
        cfg.label_cache = cli.cache.clone();
    }
    if cli.manual.is_some() {
        cfg.manual = cli.manual.clone();
    }
    Ok(cfg)
}

/// The single model a CLI verb works on.
fn single_model(cfg: &ServiceConfig) -> Result<&ModelConfig> {
    match cfg.models.as_slice() {
        [m] => Ok(m),
        [] => bail!("no dump given; pass --dump or a --config with one model"),
        _ => bail!("the configuration lists several models; pass --dump to pick one"),
    }
}

fn setup(cfg: &ServiceConfig, model: &ModelConfig) -> LabelSetup {
    LabelSetup {
        mode: cfg.mode,
        cache: cfg.label_cache_path(),
        manual: cfg.manual_for(model),
    }
}

fn open(model: &ModelConfig) -> Result<Dump> {
    read_dump(&model.dump).with_context(|| format!("reading {}", model.dump.display()))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = service_config(&cli)?;
    match cli.command {
        Command::Textspan { head, m, format } => {
            let model = single_model(&cfg)?;
            let dump = open(model)?;
            let mut dc = cfg.defaults.pipeline().decomposition;
            if let Some(m) = m {
                dc.m = m;
            }
            let mut all = decompose_all(&dump, &dc)?;
            if let Some(h) = head {
                dump.bank.meta.check_head(h)?;
                all.retain(|(x, _)| *x == h);
            }
            match format {
                Format::Json => {
                    let rows: Vec<_> = all
                        .iter()
                        .map(|(h, comps)| {
                            serde_json::json!({
                                "head": h.to_string(),
                                "components": comps.iter().map(|c| serde_json::json!({
                                    "text_index": c.text_index,
                                    "description": dump.texts.descriptions[c.text_index],
                                    "variance": c.variance,
                                })).collect::<Vec<_>>(),
                            })
                        })
                        .collect();
                    print_json(&rows)?;
                }
                Format::Csv => {
                    println!("layer,head,rank,text_index,variance,description");
                    for (h, comps) in &all {
                        for (i, c) in comps.iter().enumerate() {
                            println!(
                                "{},{},{},{},{:.6},{}",
                                h.layer,
                                h.head,
                                i + 1,
                                c.text_index,
                                c.variance,
                                csv_field(&dump.texts.descriptions[c.text_index])
                            );
                        }
                    }
                }
                Format::Text => {
                    for (h, comps) in &all {
                        println!("head {h}");
                        for c in comps {
                            println!("  {:>10.4}  {}", c.variance, dump.texts.descriptions[c.text_index]);
                        }
                    }
                }
            }
        }
        Command::Label { format } => {
            let model = single_model(&cfg)?;
            let dump = open(model)?;
            let decomposed = decompose_all(&dump, &cfg.defaults.pipeline().decomposition)?;
            let mut labeler = setup(&cfg, model).build(&cfg)?;
            let profiles = label_heads(&dump, &decomposed, &mut labeler)?;
            match format {
                Format::Json => print_json(&profiles)?,
                Format::Csv => {
                    println!("layer,head,label,label_provenance,matches,descriptions");
                    for p in &profiles {
                        println!(
                            "{},{},{},{},{},{}",
                            p.head.layer,
                            p.head.head,
                            csv_field(&p.label),
                            provenance(p.label_provenance),
                            p.match_count(),
                            p.components.len()
                        );
                    }
                }
                Format::Text => {
                    for p in &profiles {
                        println!(
                            "{:<6} {:<24} {:<10} {}/{}",
                            p.head.to_string(),
                            p.label,
                            provenance(p.label_provenance),
                            p.match_count(),
                            p.components.len()
                        );
                    }
                }
            }
        }
        Command::Metrics { format, csv } => {
            let model = single_model(&cfg)?;
            let mut labeler = setup(&cfg, model).build(&cfg)?;
            let out = run_pipeline(&model.dump, &mut labeler, &cfg.defaults.pipeline())?;
            let format = if csv { Format::Csv } else { format };
            print!("{}", render_metrics(&out.report, format)?);
        }
        Command::Neighbors {
            property,
            head,
            image,
            text,
            k,
            mean,
            format,
        } => {
            let model = single_model(&cfg)?;
            let dump = open(model)?;
            let bank = &dump.bank;
            let query = |id: &str| -> Result<QueryImage<'static>> {
                bank.image_index(id)
                    .map(QueryImage::Pool)
                    .with_context(|| format!("no image `{id}` in the dump"))
            };
            let ranked = match (property, head, image, text) {
                (Some(p), None, Some(img), None) => {
                    let mut labeler = setup(&cfg, model).build(&cfg)?;
                    let out = labels_for(&model.dump, &dump, &mut labeler, &cfg.defaults.pipeline())?;
                    let assignment = LabelAssignment::from_profiles(&out.profiles);
                    let combine = if mean { Combine::Mean } else { Combine::Sum };
                    property_neighbors(bank, &assignment, &p, query(&img)?, k.unwrap_or(cfg.defaults.property_k), combine)?
                }
                (None, Some(h), Some(img), None) => {
                    per_head_image_neighbors(bank, h, query(&img)?, k.unwrap_or(cfg.defaults.head_image_k))?
                }
                (None, Some(h), None, Some(t)) => {
                    let emb = text_embeddings(&cfg, model, &dump, &[t])?;
                    per_head_text_neighbors(bank, h, emb[0].view(), k.unwrap_or(cfg.defaults.head_text_k))?
                }
                _ => bail!("use --property with --image, or --head with exactly one of --image/--text"),
            };
            print!("{}", render_neighbors(&dump, &ranked, format)?);
        }
        Command::Segment {
            head,
            image,
            text,
            versus,
            format,
        } => {
            let model = single_model(&cfg)?;
            let dump = open(model)?;
            if dump.bank.image_index(&image).is_none() {
                bail!("no image `{image}` in the dump");
            }
            let tokens = dump.tokens.get(&image, head)?;
            let grid = dump.bank.meta.patch_grid;
            let map = match versus {
                None => {
                    let emb = text_embeddings(&cfg, model, &dump, std::slice::from_ref(&text))?;
                    topic_heatmap(&tokens, &text, emb[0].view(), grid)?
                }
                Some(other) => {
                    let emb = text_embeddings(&cfg, model, &dump, &[text.clone(), other.clone()])?;
                    contrastive_map(&tokens, (&text, &other), emb[0].view(), emb[1].view(), grid)?
                }
            };
            print!("{}", render_heatmap(&map, format)?);
        }
        Command::Report { metrics, format } => {
            let reports: Vec<MetricsReport> = metrics
                .iter()
                .map(|p| load_metrics(p).with_context(|| format!("reading {}", p.display())))
                .collect::<Result<_>>()?;
            let table = model_comparison_report(&reports);
            match format {
                Format::Text => print!("{}", table.render_text()),
                Format::Csv => print!("{}", table.to_csv()),
                Format::Json => print_json(&table)?,
            }
        }
        Command::Serve { listen } => {
            let models = load_all(&cfg)?;
            let addr = listen.unwrap_or_else(|| cfg.listen.clone());
            let state = Arc::new(AppState::new(models, cfg.defaults));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&addr)
                    .await
                    .with_context(|| format!("binding {addr}"))?;
                tracing::info!("listening on {}", listener.local_addr()?);
                axum::serve(listener, router(state))
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                anyhow::Ok(())
            })?;
        }
        Command::Synth {
            out,
            images,
            dim,
            heads,
            texts,
            tokens,
            seed,
        } => {
            let spec = SyntheticSpec {
                images,
                embed_dim: dim,
                heads_per_layer: heads,
                texts,
                with_tokens: tokens,
                ..SyntheticSpec::default()
            };
            let f = generate(&spec, seed);
            write_dump(&f.bank, &f.tokens, &f.texts, &out)?;
            println!("wrote {} ({} images, {} heads)", out.display(), images, f.bank.meta.analyzed_heads().len());
        }
    }
    Ok(())
}

/// Text bank lookup first; anything else goes to the sidecar.
fn text_embeddings(cfg: &ServiceConfig, model: &ModelConfig, dump: &Dump, texts: &[String]) -> Result<Vec<Array1<f64>>> {
    let mut out = Vec::with_capacity(texts.len());
    let mut missing = Vec::new();
    for t in texts {
        match dump.texts.find(t) {
            Some(i) => out.push(Some(dump.texts.embeddings.row(i).mapv(f64::from))),
            None => {
                out.push(None);
                missing.push(t.clone());
            }
        }
    }
    if !missing.is_empty() {
        let Some(url) = cfg.sidecar_for(model) else {
            bail!("text {:?} is not in the dump's text bank; configure a sidecar to encode it", missing[0]);
        };
        let client = SidecarClient::new(&url);
        let rt = tokio::runtime::Runtime::new()?;
        let encoded = rt.block_on(client.encode_text(&missing, dump.bank.meta.embed_dim))?;
        let mut rows = encoded.rows().into_iter();
        for slot in out.iter_mut().filter(|s| s.is_none()) {
            *slot = rows.next().map(|r| r.to_owned());
        }
    }
    Ok(out.into_iter().flatten().collect())
}

fn provenance(p: cliplens_core::labeler::Provenance) -> &'static str {
    use cliplens_core::labeler::Provenance::*;
    match p {
        Llm => "llm",
        Manual => "manual",
        Heuristic => "heuristic",
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn render_metrics(report: &MetricsReport, format: Format) -> Result<String> {
    let mut out = String::new();
    match format {
        Format::Json => out = serde_json::to_string_pretty(report)? + "\n",
        Format::Csv => {
            writeln!(out, "layer,head,label,matches,descriptions,shared_with")?;
            for h in &report.heads {
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    h.layer,
                    h.head,
                    csv_field(&h.label),
                    h.matches,
                    h.descriptions,
                    h.shared_with
                )?;
            }
        }
        Format::Text => {
            writeln!(out, "{}", report.name())?;
            writeln!(out, "entanglement  {:.3}", report.entanglement)?;
            writeln!(out, "association   {:.3} (k = {})", report.association, report.association_k)?;
            writeln!(out)?;
            for h in &report.heads {
                writeln!(
                    out,
                    "{:<6} {:<24} {}/{} matches, shared with {}",
                    format!("{}.{}", h.layer, h.head),
                    h.label,
                    h.matches,
                    h.descriptions,
                    h.shared_with
                )?;
            }
        }
    }
    Ok(out)
}

fn render_neighbors(dump: &Dump, ranked: &RankedNeighbors, format: Format) -> Result<String> {
    let mut out = String::new();
    match format {
        Format::Json => out = serde_json::to_string_pretty(ranked)? + "\n",
        Format::Csv => {
            writeln!(out, "rank,image_id,uri,score")?;
            for (i, n) in ranked.neighbors.iter().enumerate() {
                let uri = &dump.bank.images[n.index].uri;
                writeln!(out, "{},{},{},{:.6}", i + 1, csv_field(&n.image_id), csv_field(uri), n.score)?;
            }
        }
        Format::Text => {
            for (i, n) in ranked.neighbors.iter().enumerate() {
                writeln!(out, "{:>3}  {:>8.4}  {}", i + 1, n.score, n.image_id)?;
            }
        }
    }
    Ok(out)
}

fn render_heatmap(map: &HeatMap, format: Format) -> Result<String> {
    let mut out = String::new();
    match format {
        Format::Json => {
            let v = serde_json::json!({
                "heads": map.heads.iter().map(HeadId::to_string).collect::<Vec<_>>(),
                "texts": map.texts,
                "normalization": map.normalization,
                "grid": [map.rows(), map.cols()],
                "values": map.grid.iter().copied().collect::<Vec<f64>>(),
            });
            out = serde_json::to_string_pretty(&v)? + "\n";
        }
        Format::Csv | Format::Text => {
            let sep = if matches!(format, Format::Csv) { "," } else { " " };
            for row in map.grid.rows() {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
                writeln!(out, "{}", cells.join(sep))?;
            }
        }
    }
    Ok(out)
}
