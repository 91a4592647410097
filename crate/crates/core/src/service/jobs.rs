//! Typed job requests and their execution. The CLI and the HTTP worker share
//! these entry points, so both produce the same artifacts.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ToolkitConfig;
use crate::attention::site::AttnKind;
use crate::attention::store::CaptureStore;
use crate::backend::adapter::ModelAdapter;
use crate::editing::fpe::{run_edit, EditOutcome};
use crate::editing::job::EditJob;
use crate::editing::sweep::{ablation_sweep, SweepGrid, SweepOptions};
use crate::error::{Error, Result};
use crate::eval::benchmark::{benchmark_run, MethodConfig};
use crate::eval::clip::{ClipEncoder, ClipVitB32, FixtureClip};
use crate::eval::datasets::{build_dataset, DatasetId, DatasetOptions};
use crate::io::container::ContainerWriter;
use crate::io::image::write_png;
use crate::probing::corpus::{build_corpus, TemplateFamily, TokenRole};
use crate::probing::harvest::{harvest, load_dataset, HarvestConfig};
use crate::probing::probe::{sanity_gate, train_probe, ProbeConfig, SplitSpec};
use crate::probing::report::MAIN_TEXT_LAYERS;
use crate::probing::{evaluate_transfer, probe_table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Edit,
    Sweep,
    Harvest,
    Probe,
    Benchmark,
}

impl JobKind {
    pub const ALL: [JobKind; 5] = [JobKind::Edit, JobKind::Sweep, JobKind::Harvest, JobKind::Probe, JobKind::Benchmark];

    pub fn as_str(&self) -> &'static str {
        match self {
            JobKind::Edit => "edit",
            JobKind::Sweep => "sweep",
            JobKind::Harvest => "harvest",
            JobKind::Probe => "probe",
            JobKind::Benchmark => "benchmark",
        }
    }
}

impl std::str::FromStr for JobKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown job kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRequest {
    pub base: EditJob,
    pub grid: SweepGrid,
    #[serde(default)]
    pub cache_budget_mib: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarvestRequest {
    pub family: TemplateFamily,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub config: HarvestConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Per-layer accuracy table.
    #[default]
    Table,
    /// Planted-signal and shuffled-label controls.
    Sanity,
    /// Train on `dataset`, score on `transfer_to`, per layer.
    Transfer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeRequest {
    pub mode: ProbeMode,
    /// Harvest directory, or the id of a finished harvest job.
    pub dataset: Option<String>,
    pub transfer_to: Option<String>,
    pub kind: AttnKind,
    pub role: Option<TokenRole>,
    pub split: SplitSpec,
    pub classifier: ProbeConfig,
    /// Render only the compact layer subset in text tables.
    pub compact: bool,
}

impl Default for ProbeRequest {
    fn default() -> Self {
        Self {
            mode: ProbeMode::Table,
            dataset: None,
            transfer_to: None,
            kind: AttnKind::Cross,
            role: None,
            split: SplitSpec::default(),
            classifier: ProbeConfig::default(),
            compact: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderChoice {
    #[default]
    Fixture,
    ClipVitB32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkRequest {
    pub dataset: DatasetId,
    #[serde(default)]
    pub assets_dir: Option<PathBuf>,
    #[serde(default)]
    pub color_limit: Option<usize>,
    /// Score only this many pairs, chosen by a seeded shuffle.
    #[serde(default)]
    pub subsample: Option<usize>,
    #[serde(default)]
    pub subsample_seed: u64,
    #[serde(default)]
    pub method: MethodConfig,
    #[serde(default)]
    pub encoder: EncoderChoice,
    #[serde(default)]
    pub clip_root: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "request", rename_all = "snake_case")]
pub enum JobRequest {
    Edit(EditJob),
    Sweep(SweepRequest),
    Harvest(HarvestRequest),
    Probe(ProbeRequest),
    Benchmark(BenchmarkRequest),
}

/// A request that failed to parse, with the JSON pointer of the offending value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemaViolation {
    pub pointer: String,
    pub message: String,
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } | Segment::Enum { variant: key } => {
                out.push('/');
                out.push_str(&key.replace('~', "~0").replace('/', "~1"));
            }
            Segment::Unknown => out.push_str("/?"),
        }
    }
    out
}

fn typed<T: serde::de::DeserializeOwned>(value: &serde_json::Value, prefix: &str) -> Result<T, SchemaViolation> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = pointer_of(e.path());
        SchemaViolation {
            pointer: format!("{prefix}{inner}"),
            message: e.into_inner().to_string(),
        }
    })
}

impl JobRequest {
    pub fn kind(&self) -> JobKind {
        match self {
            JobRequest::Edit(_) => JobKind::Edit,
            JobRequest::Sweep(_) => JobKind::Sweep,
            JobRequest::Harvest(_) => JobKind::Harvest,
            JobRequest::Probe(_) => JobKind::Probe,
            JobRequest::Benchmark(_) => JobKind::Benchmark,
        }
    }

    /// Parses the request document of `kind`. `prefix` is prepended to
    /// pointers in errors.
    pub fn parse(kind: JobKind, request: &serde_json::Value, prefix: &str) -> Result<Self, SchemaViolation> {
        Ok(match kind {
            JobKind::Edit => JobRequest::Edit(typed(request, prefix)?),
            JobKind::Sweep => JobRequest::Sweep(typed(request, prefix)?),
            JobKind::Harvest => JobRequest::Harvest(typed(request, prefix)?),
            JobKind::Probe => JobRequest::Probe(typed(request, prefix)?),
            JobKind::Benchmark => JobRequest::Benchmark(typed(request, prefix)?),
        })
    }

    /// [`JobRequest::validate`] with the failing field located as a JSON
    /// pointer under `prefix`.
    pub fn check(&self, self_site_count: usize, prefix: &str) -> Result<(), SchemaViolation> {
        self.validate(self_site_count).map_err(|e| {
            let message = e.to_string();
            let field = message
                .split(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '.'))
                .find(|w| field_parent(self.kind(), w).is_some());
            let pointer = match field {
                Some(f) => {
                    let (parent, leaf) = field_parent(self.kind(), f).unwrap_or_default();
                    format!("{prefix}{parent}/{leaf}")
                }
                None => prefix.to_string(),
            };
            SchemaViolation { pointer, message }
        })
    }

    /// Checks that need no model: value ranges and required fields.
    pub fn validate(&self, self_site_count: usize) -> Result<()> {
        match self {
            JobRequest::Edit(job) => job.validate(self_site_count),
            JobRequest::Sweep(s) => {
                s.grid.validate()?;
                s.base.validate(self_site_count)
            }
            JobRequest::Harvest(h) => {
                h.config.sampler.validate()?;
                if h.config.shard_size == 0 {
                    return Err(Error::validation("config.shard_size must be positive"));
                }
                Ok(())
            }
            JobRequest::Probe(p) => match p.mode {
                ProbeMode::Sanity => Ok(()),
                ProbeMode::Table if p.dataset.is_none() => Err(Error::validation("probe table needs `dataset`")),
                ProbeMode::Transfer if p.dataset.is_none() || p.transfer_to.is_none() => {
                    Err(Error::validation("probe transfer needs `dataset` and `transfer_to`"))
                }
                _ => Ok(()),
            },
            JobRequest::Benchmark(b) => b.method.sampler.validate().and(b.method.policy.validate(self_site_count)),
        }
    }
}

/// Parent path and leaf of a field named in a validation message.
fn field_parent(kind: JobKind, word: &str) -> Option<(&'static str, String)> {
    let (section, leaf) = match word {
        "replace_ratio" | "cross_replace_ratio" | "site_indices" | "cross_site_indices" => ("policy", word),
        "step_count" | "guidance_scale" | "eta" => ("sampler", word),
        "source.prompt" => ("source", "prompt"),
        "config.shard_size" => ("config", "shard_size"),
        "dataset" | "transfer_to" => ("", word),
        _ => return None,
    };
    let parent = match (kind, section) {
        (_, "") => "",
        (JobKind::Edit, "policy") => "/policy",
        (JobKind::Edit, "sampler") => "/sampler",
        (JobKind::Edit, "source") => "/source",
        (JobKind::Sweep, "policy") => "/base/policy",
        (JobKind::Sweep, "sampler") => "/base/sampler",
        (JobKind::Sweep, "source") => "/base/source",
        (JobKind::Benchmark, "policy") => "/method/policy",
        (JobKind::Benchmark, "sampler") => "/method/sampler",
        (JobKind::Harvest, "sampler") => "/config/sampler",
        (JobKind::Harvest, "config") => "/config",
        _ => return None,
    };
    Some((parent, leaf.to_string()))
}

/// What a job runs against.
pub struct RunContext<'a> {
    pub adapter: &'a ModelAdapter,
    pub config: &'a ToolkitConfig,
}

impl RunContext<'_> {
    fn resolve_dataset(&self, reference: &str) -> PathBuf {
        if reference.starts_with("job-") && !reference.contains('/') {
            self.config.storage_root.join("jobs").join(reference).join("artifacts")
        } else {
            PathBuf::from(reference)
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

/// Writes every record of `store` into a tensor container. Entry names are
/// `<step>/<site>` with step `mean` or `tNNNN`.
pub fn export_store(store: &CaptureStore, path: &Path) -> Result<usize> {
    let mut w = ContainerWriter::create(path)?;
    let mut manifest = Vec::new();
    let records = store.records()?;
    for r in &records {
        let step = match r.step {
            crate::attention::store::StepKey::Mean => "mean".to_string(),
            crate::attention::store::StepKey::At(t) => format!("t{t:04}"),
        };
        let name = format!("{step}/{}", r.site.key());
        w.add(&name, &r.matrix)?;
        manifest.push(serde_json::json!({ "name": name, "site": r.site, "heads": r.heads }));
    }
    w.finish(serde_json::json!({ "retention": store.retention(), "records": manifest }))?;
    Ok(records.len())
}

fn edit_manifest(job: &EditJob, outcome: &EditOutcome) -> serde_json::Value {
    serde_json::json!({
        "job": job,
        "replaced_self": outcome.replaced_self,
        "replaced_cross": outcome.replaced_cross,
        "edit_seconds": outcome.edit_seconds,
        "step_seconds": outcome.step_seconds,
        "null_text": outcome.null_text.as_ref().map(|s| serde_json::json!({
            "losses": s.losses,
            "diverged_steps": s.diverged_steps,
        })),
    })
}

fn run_edit_job(ctx: &RunContext<'_>, job: &EditJob, out: &Path) -> Result<serde_json::Value> {
    let outcome = run_edit(ctx.adapter, job)?;
    write_png(&outcome.source_image, &out.join("src.png"))?;
    write_png(&outcome.edited_image, &out.join("dst.png"))?;
    if let Some(store) = &outcome.capture {
        export_store(store, &out.join("captures.atl"))?;
    }
    let manifest = edit_manifest(job, &outcome);
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(serde_json::json!({
        "replaced_self": outcome.replaced_self,
        "edit_seconds": outcome.edit_seconds,
    }))
}

fn encoder_for(req: &BenchmarkRequest, ctx: &RunContext<'_>) -> Result<Box<dyn ClipEncoder>> {
    Ok(match req.encoder {
        EncoderChoice::Fixture => Box::new(FixtureClip::new(0)),
        EncoderChoice::ClipVitB32 => {
            let root = req
                .clip_root
                .as_ref()
                .ok_or_else(|| Error::validation("encoder clip_vit_b32 needs `clip_root`"))?;
            Box::new(ClipVitB32::load(root, ctx.adapter.device())?)
        }
    })
}

fn run_benchmark(ctx: &RunContext<'_>, req: &BenchmarkRequest, out: &Path) -> Result<serde_json::Value> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let encoder = encoder_for(req, ctx)?;
    let assets = req.assets_dir.clone().unwrap_or_else(|| ctx.config.storage_root.join("assets"));
    let opts = DatasetOptions {
        color_limit: req.color_limit,
    };
    let mut pairs = build_dataset(req.dataset, &assets, &opts, Some(encoder.as_ref()))?;
    write_json(&out.join("pairs.json"), &pairs)?;
    if let Some(n) = req.subsample {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(req.subsample_seed);
        pairs.shuffle(&mut rng);
        pairs.truncate(n);
    }
    let table = benchmark_run(ctx.adapter, &pairs, &req.method, encoder.as_ref())?;
    std::fs::write(out.join("metrics.csv"), table.to_csv())?;
    std::fs::write(out.join("summary.txt"), table.summary())?;
    write_json(&out.join("table.json"), &table)?;
    Ok(serde_json::json!({
        "pairs": table.rows.len(),
        "successes": table.successes,
        "mean_cs": table.mean_cs,
        "mean_cds": table.mean_cds,
        "mean_edit_seconds": table.mean_edit_seconds,
    }))
}

fn run_probe(ctx: &RunContext<'_>, req: &ProbeRequest, out: &Path) -> Result<serde_json::Value> {
    match req.mode {
        ProbeMode::Sanity => {
            let result = sanity_gate(&req.classifier, req.split.seed)?;
            write_json(&out.join("sanity.json"), &result)?;
            let verdict = if result.passed { "PASS" } else { "FAIL" };
            std::fs::write(
                out.join("sanity.txt"),
                format!(
                    "{verdict} planted_min={:.4} shuffled={:.4}\n",
                    result.planted_min_class_accuracy, result.shuffled_mean_accuracy
                ),
            )?;
            Ok(serde_json::json!({ "sanity": verdict, "result": result }))
        }
        ProbeMode::Table => {
            let dir = ctx.resolve_dataset(req.dataset.as_deref().unwrap_or_default());
            let (dataset, manifest) = load_dataset(&dir)?;
            let report = probe_table(&dataset, &manifest, req.kind, req.role, req.split, &req.classifier)?;
            let view: Option<&[usize]> = req.compact.then_some(&MAIN_TEXT_LAYERS[..]);
            std::fs::write(out.join("report.csv"), report.to_csv(None))?;
            std::fs::write(out.join("report.txt"), report.to_text(view))?;
            write_json(&out.join("report.json"), &report)?;
            Ok(serde_json::json!({ "layers": report.layers, "classes": report.class_labels.len() }))
        }
        ProbeMode::Transfer => {
            let train_dir = ctx.resolve_dataset(req.dataset.as_deref().unwrap_or_default());
            let test_dir = ctx.resolve_dataset(req.transfer_to.as_deref().unwrap_or_default());
            let (train, _) = load_dataset(&train_dir)?;
            let (test, _) = load_dataset(&test_dir)?;
            let role = match req.kind {
                AttnKind::Cross => Some(req.role.unwrap_or(TokenRole::EditWord)),
                AttnKind::SelfAttn => None,
            };
            let mut rows = Vec::new();
            for key in train.features.keys().filter(|k| k.kind == req.kind && k.role == role) {
                let (model, in_dist) = train_probe(
                    train.features(*key)?,
                    &train.labels,
                    train.class_labels.len(),
                    req.split,
                    &req.classifier,
                )?;
                let transfer = evaluate_transfer(&model, &test, *key)?;
                rows.push(serde_json::json!({ "layer": key.layer, "in_distribution": in_dist, "transfer": transfer }));
            }
            write_json(&out.join("transfer.json"), &rows)?;
            Ok(serde_json::json!({ "layers": rows.len() }))
        }
    }
}

/// Runs `request`, writing artifacts into `out`. Returns a summary for the
/// caller's status line.
pub fn execute(ctx: &RunContext<'_>, request: &JobRequest, out: &Path) -> Result<serde_json::Value> {
    request.validate(ctx.adapter.sites_of(AttnKind::SelfAttn).count())?;
    std::fs::create_dir_all(out)?;
    let started = Instant::now();
    let mut summary = match request {
        JobRequest::Edit(job) => run_edit_job(ctx, job, out)?,
        JobRequest::Sweep(s) => {
            let opts = SweepOptions {
                cache_budget_bytes: s
                    .cache_budget_mib
                    .map_or(SweepOptions::default().cache_budget_bytes, |m| m << 20),
            };
            let m = ablation_sweep(ctx.adapter, &s.base, &s.grid, out, opts)?;
            serde_json::json!({ "cells": m.cells.len(), "failed": m.failed(), "source_cached": m.source_cached })
        }
        JobRequest::Harvest(h) => {
            let corpus = build_corpus(h.family, &h.seeds, ctx.adapter.text())?;
            let (dataset, manifest) = harvest(&corpus, ctx.adapter, &h.config, Some(out))?;
            serde_json::json!({ "samples": dataset.len(), "skipped": manifest.skipped.len() })
        }
        JobRequest::Probe(p) => run_probe(ctx, p, out)?,
        JobRequest::Benchmark(b) => run_benchmark(ctx, b, out)?,
    };
    summary["seconds"] = serde_json::json!(started.elapsed().as_secs_f64());
    Ok(summary)
}

/// Relative paths of every file under `dir`, sorted.
pub fn list_artifacts(dir: &Path) -> Result<Vec<String>> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(base, &path, out)?;
            } else if let Ok(rel) = path.strip_prefix(base) {
                out.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    if dir.is_dir() {
        walk(dir, dir, &mut out)?;
    }
    out.sort();
    Ok(out)
}
