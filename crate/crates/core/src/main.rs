use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use attnlab::attention::site::AttnKind;
use attnlab::backend::adapter::ModelAdapter;
use attnlab::editing::job::{EditJob, EditSource, RealMethod};
use attnlab::editing::sweep::{SweepGrid, SweepMode};
use attnlab::eval::benchmark::MethodConfig;
use attnlab::eval::datasets::DatasetId;
use attnlab::probing::corpus::{TemplateFamily, TokenRole};
use attnlab::probing::harvest::HarvestConfig;
use attnlab::probing::probe::{ProbeConfig, SplitSpec};
use attnlab::service::config::parse_sites;
use attnlab::service::jobs::{
    BenchmarkRequest, EncoderChoice, HarvestRequest, ProbeMode, ProbeRequest, SweepRequest,
};
use attnlab::service::{execute, JobKind, JobRequest, RunContext, ToolkitConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "attnlab", version, about = "Attention-map editing and probing toolkit")]
struct Cli {
    /// Plain-text `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `backbone` (sd15 or tiny-test).
    #[arg(long, global = true)]
    backbone: Option<String>,
    /// Overrides `device` (auto, cpu, cuda, cuda:N, metal).
    #[arg(long, global = true)]
    device: Option<String>,
    /// Overrides `weights_root`.
    #[arg(long, global = true)]
    weights_root: Option<PathBuf>,
    /// Overrides `storage_root`.
    #[arg(long, global = true)]
    storage_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Edit one generated or real image.
    Edit(EditArgs),
    /// Run an ablation grid over sites and ratios.
    Sweep(SweepArgs),
    /// Capture probing features for a prompt corpus.
    Harvest(HarvestArgs),
    /// Train and report attention-map probes.
    Probe(ProbeArgs),
    /// Score an edit method on a benchmark dataset.
    Benchmark(BenchmarkArgs),
    /// Run the HTTP job service.
    Serve(ServeArgs),
    /// Run a job from a JSON request document.
    Run(RunArgs),
    /// Inspect the effective configuration.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
    /// Print the backbone's attention site table.
    Sites,
}

#[derive(Subcommand, Debug)]
enum ConfigAction {
    Show,
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("must be within [0, 1], got {v}"))
    }
}

/// A list written as ranges, such as `4-14` or `1,3,5-7`.
#[derive(Debug, Clone)]
struct IndexList(Vec<usize>);

fn index_list(s: &str) -> Result<IndexList, String> {
    parse_sites(s).map(IndexList).map_err(|e| e.to_string())
}

#[derive(Args, Debug, Clone)]
struct SamplerArgs {
    /// Denoising steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Classifier-free guidance scale.
    #[arg(long)]
    guidance: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct PolicyArgs {
    /// Replacement window as a fraction of the steps, in [0, 1].
    #[arg(long, value_parser = unit_interval)]
    ratio: Option<f64>,
    /// Self-attention sites to replace, e.g. `4-14`.
    #[arg(long, value_parser = index_list)]
    sites: Option<IndexList>,
    /// Map kinds to replace, comma separated (`self`, `cross`); empty disables replacement.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    kinds: Option<Vec<KindArg>>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum KindArg {
    #[value(name = "self")]
    SelfAttn,
    Cross,
}

impl From<KindArg> for AttnKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::SelfAttn => AttnKind::SelfAttn,
            KindArg::Cross => AttnKind::Cross,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum MethodArg {
    Ddim,
    NullText,
}

#[derive(Args, Debug)]
struct EditArgs {
    /// Seed of the generated source.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Source prompt.
    #[arg(long)]
    src: Option<String>,
    /// Target prompt.
    #[arg(long)]
    dst: String,
    /// Edit this image instead of generating the source.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Reconstruction method for `--image`.
    #[arg(long, value_enum, default_value = "ddim")]
    method: MethodArg,
    #[command(flatten)]
    policy: PolicyArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
    /// Output directory; a fresh directory under the storage root by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    src: String,
    #[arg(long)]
    dst: String,
    /// Edit this image instead of generating the source.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Row modes: `self`, `cross`, `both`.
    #[arg(long, value_delimiter = ',', default_value = "self")]
    modes: Vec<String>,
    /// Site sets separated by `;`, e.g. `1-3;4-14`.
    #[arg(long, default_value = "4-14")]
    site_sets: String,
    /// Column ratios, each in [0, 1].
    #[arg(long, value_delimiter = ',', value_parser = unit_interval, default_value = "0,0.2,0.4,0.6,0.8,1")]
    ratios: Vec<f64>,
    #[command(flatten)]
    sampler: SamplerArgs,
    /// Largest in-memory source cache in MiB.
    #[arg(long)]
    cache_budget_mib: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct HarvestArgs {
    /// Corpus family: color_car, color_object, animal_park, complex_color, token_probe.
    #[arg(long)]
    family: TemplateFamily,
    /// Seeds, e.g. `0-9` or `1,5,9`.
    #[arg(long, value_parser = index_list, default_value = "0-9")]
    seeds: IndexList,
    /// Map kinds to record.
    #[arg(long, value_delimiter = ',', default_value = "cross,self")]
    kinds: Vec<KindArg>,
    #[arg(long, default_value_t = 100)]
    shard_size: usize,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[command(subcommand)]
    mode: ProbeCommand,
}

#[derive(Args, Debug, Clone)]
struct ProbeCommon {
    /// Split seed.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Probe init and minibatch seed.
    #[arg(long, default_value_t = 0)]
    probe_seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum ProbeCommand {
    /// Per-layer accuracy table of a harvested dataset.
    Table {
        /// Harvest directory or finished harvest job id.
        #[arg(long)]
        dataset: String,
        #[arg(long, value_enum, default_value = "cross")]
        kind: KindArg,
        /// Show only the compact layer subset in the text table.
        #[arg(long)]
        compact: bool,
        /// Run even if the sanity gate fails.
        #[arg(long)]
        skip_sanity: bool,
        #[command(flatten)]
        common: ProbeCommon,
    },
    /// Planted-signal and shuffled-label controls.
    Sanity {
        #[command(flatten)]
        common: ProbeCommon,
    },
    /// Probe the cross maps of a non-edit token.
    Token {
        #[arg(long)]
        dataset: String,
        /// article_a or noun_car.
        #[arg(long)]
        role: TokenRole,
        #[command(flatten)]
        common: ProbeCommon,
    },
    /// Train on one corpus and score on another.
    Transfer {
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        to: String,
        #[arg(long, value_enum, default_value = "cross")]
        kind: KindArg,
        #[command(flatten)]
        common: ProbeCommon,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum EncoderArg {
    Fixture,
    ClipVitB32,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    /// car_fake, car_real, imagenet_fake or imagenet_real.
    #[arg(long)]
    dataset: DatasetId,
    /// Asset directory; `<storage_root>/assets` by default.
    #[arg(long)]
    assets: Option<PathBuf>,
    /// Use only the first N color words.
    #[arg(long)]
    color_limit: Option<usize>,
    /// Score a seeded random subset of N pairs.
    #[arg(long)]
    subsample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    subsample_seed: u64,
    #[arg(long, value_enum, default_value = "fixture")]
    encoder: EncoderArg,
    /// Directory with the CLIP ViT-B/32 model.safetensors and tokenizer.json.
    #[arg(long)]
    clip_root: Option<PathBuf>,
    #[command(flatten)]
    policy: PolicyArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    kind: JobKind,
    /// JSON request document.
    #[arg(long)]
    request: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
    log: Option<PathBuf>,
}

fn is_validation(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        matches!(
            c.downcast_ref::<attnlab::Error>(),
            Some(
                attnlab::Error::Validation(_)
                    | attnlab::Error::PromptTooLong { .. }
                    | attnlab::Error::UnknownBackbone(_)
            )
        )
    })
}

fn classify(error: anyhow::Error) -> Failure {
    let code = if is_validation(&error) { 2 } else { 1 };
    Failure { code, error, log: None }
}

fn load_config(cli: &Cli) -> anyhow::Result<ToolkitConfig> {
    let mut cfg = ToolkitConfig::load(cli.config.as_deref())?;
    if let Some(b) = &cli.backbone {
        cfg.set("backbone", b)?;
    }
    if let Some(d) = &cli.device {
        cfg.set("device", d)?;
    }
    if let Some(w) = &cli.weights_root {
        cfg.weights_root = Some(w.clone());
    }
    if let Some(s) = &cli.storage_root {
        cfg.storage_root = s.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_adapter(cfg: &ToolkitConfig) -> anyhow::Result<ModelAdapter> {
    ModelAdapter::load(&cfg.backbone_id, &cfg.device_hint, &cfg.load_options())
        .with_context(|| format!("loading backbone {}", cfg.backbone_id))
}

fn apply_sampler(cfg: &ToolkitConfig, args: &SamplerArgs) -> attnlab::backend::ddim::SamplerConfig {
    let mut s = cfg.sampler.clone();
    if let Some(n) = args.steps {
        s.step_count = n;
    }
    if let Some(g) = args.guidance {
        s.guidance_scale = g;
    }
    s
}

fn apply_policy(cfg: &ToolkitConfig, args: &PolicyArgs) -> attnlab::attention::policy::InjectionPolicy {
    let mut p = cfg.default_policy.clone();
    if let Some(r) = args.ratio {
        p.replace_ratio = r;
    }
    if let Some(s) = &args.sites {
        p.site_indices = s.0.clone();
    }
    if let Some(k) = &args.kinds {
        p.kinds = k.iter().map(|&k| k.into()).collect();
    }
    p
}

fn check_sites(cfg: &ToolkitConfig, args: &PolicyArgs) -> anyhow::Result<()> {
    let count = cfg
        .backbone()?
        .site_table()
        .iter()
        .filter(|s| s.kind == AttnKind::SelfAttn)
        .count();
    if let Some(bad) = args.sites.iter().flat_map(|l| &l.0).find(|&&i| i == 0 || i > count) {
        bail!(attnlab::Error::Validation(format!(
            "--sites: site {bad} outside 1..={count} for backbone {}",
            cfg.backbone_id
        )));
    }
    Ok(())
}

fn edit_job(cfg: &ToolkitConfig, args: &EditArgs) -> anyhow::Result<EditJob> {
    check_sites(cfg, &args.policy)?;
    let source = match (&args.image, &args.src) {
        (Some(path), prompt) => EditSource::RealImage {
            path: path.clone(),
            prompt: prompt.clone(),
        },
        (None, Some(prompt)) => EditSource::SeededPrompt {
            seed: args.seed,
            prompt: prompt.clone(),
        },
        (None, None) => bail!(attnlab::Error::Validation("--src is required unless --image is given".into())),
    };
    let mut job = EditJob::generated(args.seed, "", &args.dst);
    job.source = source;
    job.sampler = apply_sampler(cfg, &args.sampler);
    job.sampler.seed = args.seed;
    job.policy = apply_policy(cfg, &args.policy);
    job.real.method = match args.method {
        MethodArg::Ddim => RealMethod::Ddim,
        MethodArg::NullText => RealMethod::NullText,
    };
    Ok(job)
}

fn sweep_request(cfg: &ToolkitConfig, args: &SweepArgs) -> anyhow::Result<SweepRequest> {
    let edit = EditArgs {
        seed: args.seed,
        src: Some(args.src.clone()),
        dst: args.dst.clone(),
        image: args.image.clone(),
        method: MethodArg::Ddim,
        policy: PolicyArgs {
            ratio: None,
            sites: None,
            kinds: None,
        },
        sampler: args.sampler.clone(),
        out: None,
    };
    let base = edit_job(cfg, &edit)?;
    let modes = args
        .modes
        .iter()
        .map(|m| match m.as_str() {
            "self" => Ok(SweepMode::SelfOnly),
            "cross" => Ok(SweepMode::CrossOnly),
            "both" => Ok(SweepMode::CrossFixedSelfVarying),
            other => Err(attnlab::Error::Validation(format!(
                "--modes: unknown mode `{other}` (expected self, cross or both)"
            ))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let site_sets = args
        .site_sets
        .split(';')
        .map(|s| parse_sites(s).map_err(|e| attnlab::Error::Validation(format!("--site-sets: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SweepRequest {
        base,
        grid: SweepGrid {
            modes,
            site_sets,
            ratios: args.ratios.clone(),
            cross_fixed_ratio: 0.8,
        },
        cache_budget_mib: args.cache_budget_mib,
    })
}

fn probe_request(mode: &ProbeCommand) -> ProbeRequest {
    let classifier = |c: &ProbeCommon| {
        let mut cfg = ProbeConfig {
            seed: c.probe_seed,
            ..Default::default()
        };
        if let Some(e) = c.epochs {
            cfg.epochs = e;
        }
        cfg
    };
    let split = |c: &ProbeCommon| SplitSpec {
        seed: c.split_seed,
        ..Default::default()
    };
    match mode {
        ProbeCommand::Table {
            dataset,
            kind,
            compact,
            common,
            ..
        } => ProbeRequest {
            mode: ProbeMode::Table,
            dataset: Some(dataset.clone()),
            kind: (*kind).into(),
            split: split(common),
            classifier: classifier(common),
            compact: *compact,
            ..Default::default()
        },
        ProbeCommand::Sanity { common } => ProbeRequest {
            mode: ProbeMode::Sanity,
            split: split(common),
            classifier: classifier(common),
            ..Default::default()
        },
        ProbeCommand::Token { dataset, role, common } => ProbeRequest {
            mode: ProbeMode::Table,
            dataset: Some(dataset.clone()),
            kind: AttnKind::Cross,
            role: Some(*role),
            split: split(common),
            classifier: classifier(common),
            ..Default::default()
        },
        ProbeCommand::Transfer {
            dataset,
            to,
            kind,
            common,
        } => ProbeRequest {
            mode: ProbeMode::Transfer,
            dataset: Some(dataset.clone()),
            transfer_to: Some(to.clone()),
            kind: (*kind).into(),
            split: split(common),
            classifier: classifier(common),
            ..Default::default()
        },
    }
}

fn probe_out(mode: &ProbeCommand) -> Option<PathBuf> {
    match mode {
        ProbeCommand::Table { common, .. }
        | ProbeCommand::Sanity { common }
        | ProbeCommand::Token { common, .. }
        | ProbeCommand::Transfer { common, .. } => common.out.clone(),
    }
}

fn default_out(cfg: &ToolkitConfig, kind: JobKind) -> PathBuf {
    let millis = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis());
    cfg.storage_root.join("runs").join(format!("{}-{millis}", kind.as_str()))
}

/// Runs `request`, printing a one-line JSON summary. Runtime failures leave
/// `job.log` in the output directory.
fn run_request(cfg: &ToolkitConfig, request: JobRequest, out: Option<PathBuf>) -> Result<(), Failure> {
    let kind = request.kind();
    let backbone = cfg.backbone().map_err(|e| classify(e.into()))?;
    let self_sites = backbone.site_table().iter().filter(|s| s.kind == AttnKind::SelfAttn).count();
    request.validate(self_sites).map_err(|e| classify(e.into()))?;
    let out = out.unwrap_or_else(|| default_out(cfg, kind));
    let result = (|| -> anyhow::Result<serde_json::Value> {
        let needs_model = !matches!(&request, JobRequest::Probe(_));
        let adapter = if needs_model {
            load_adapter(cfg)?
        } else {
            ModelAdapter::tiny_test(cfg.fixture_seed)?
        };
        let ctx = RunContext {
            adapter: &adapter,
            config: cfg,
        };
        Ok(execute(&ctx, &request, &out)?)
    })();
    match result {
        Ok(summary) => {
            let line = serde_json::json!({
                "kind": kind.as_str(),
                "status": "done",
                "out": out,
                "summary": summary,
            });
            println!("{line}");
            Ok(())
        }
        Err(error) => {
            let mut failure = classify(error);
            if failure.code == 1 {
                let log = out.join("job.log");
                let text = format!("{:#}\n", failure.error);
                if std::fs::create_dir_all(&out).and_then(|_| std::fs::write(&log, text)).is_ok() {
                    failure.log = Some(log);
                }
            }
            Err(failure)
        }
    }
}

fn read_request(kind: JobKind, path: &Path) -> anyhow::Result<JobRequest> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| attnlab::Error::Validation(format!("--request: {}: {e}", path.display())))?;
    JobRequest::parse(kind, &doc, "").map_err(|v| {
        attnlab::Error::Validation(format!("--request: at `{}`: {}", v.pointer, v.message)).into()
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli).map_err(classify)?;
    match cli.command {
        Command::Config {
            action: ConfigAction::Show,
        } => {
            print!("{}", cfg.show());
            Ok(())
        }
        Command::Sites => {
            let backbone = cfg.backbone().map_err(|e| classify(e.into()))?;
            println!("index kind  block spatial context heads");
            for s in backbone.site_table() {
                println!(
                    "{:>5} {:<5} {:<5} {:>7} {:>7} {:>5}",
                    s.index,
                    s.kind.as_str(),
                    format!("{:?}", s.block).to_lowercase(),
                    s.spatial_len,
                    s.context_len,
                    s.heads
                );
            }
            Ok(())
        }
        Command::Edit(args) => {
            let job = edit_job(&cfg, &args).map_err(classify)?;
            run_request(&cfg, JobRequest::Edit(job), args.out)
        }
        Command::Sweep(args) => {
            let req = sweep_request(&cfg, &args).map_err(classify)?;
            run_request(&cfg, JobRequest::Sweep(req), args.out)
        }
        Command::Harvest(args) => {
            let mut config = HarvestConfig {
                kinds: args.kinds.iter().map(|&k| k.into()).collect(),
                shard_size: args.shard_size,
                ..Default::default()
            };
            config.sampler = apply_sampler(&cfg, &args.sampler);
            let req = HarvestRequest {
                family: args.family,
                seeds: args.seeds.0.iter().map(|&s| s as u64).collect(),
                config,
            };
            run_request(&cfg, JobRequest::Harvest(req), args.out)
        }
        Command::Probe(args) => {
            if let ProbeCommand::Table {
                skip_sanity: false,
                common,
                ..
            } = &args.mode
            {
                let gate = ProbeCommand::Sanity { common: common.clone() };
                let gate_out = default_out(&cfg, JobKind::Probe).join("sanity");
                run_request(&cfg, JobRequest::Probe(probe_request(&gate)), Some(gate_out.clone()))?;
                let verdict = std::fs::read_to_string(gate_out.join("sanity.txt")).unwrap_or_default();
                if !verdict.starts_with("PASS") {
                    return Err(Failure {
                        code: 1,
                        error: anyhow::anyhow!("probe sanity gate failed; rerun with --skip-sanity to override"),
                        log: Some(gate_out.join("sanity.txt")),
                    });
                }
            }
            let sanity = matches!(args.mode, ProbeCommand::Sanity { .. });
            let out = probe_out(&args.mode).unwrap_or_else(|| default_out(&cfg, JobKind::Probe));
            run_request(&cfg, JobRequest::Probe(probe_request(&args.mode)), Some(out.clone()))?;
            if sanity {
                let verdict = std::fs::read_to_string(out.join("sanity.txt")).unwrap_or_default();
                print!("{verdict}");
                if !verdict.starts_with("PASS") {
                    return Err(Failure {
                        code: 1,
                        error: anyhow::anyhow!("probe sanity gate failed"),
                        log: Some(out.join("sanity.txt")),
                    });
                }
            }
            Ok(())
        }
        Command::Benchmark(args) => {
            check_sites(&cfg, &args.policy).map_err(classify)?;
            let req = BenchmarkRequest {
                dataset: args.dataset,
                assets_dir: args.assets,
                color_limit: args.color_limit,
                subsample: args.subsample,
                subsample_seed: args.subsample_seed,
                method: MethodConfig {
                    sampler: apply_sampler(&cfg, &args.sampler),
                    policy: apply_policy(&cfg, &args.policy),
                    real: Default::default(),
                },
                encoder: match args.encoder {
                    EncoderArg::Fixture => EncoderChoice::Fixture,
                    EncoderArg::ClipVitB32 => EncoderChoice::ClipVitB32,
                },
                clip_root: args.clip_root,
            };
            let out = args.out.unwrap_or_else(|| default_out(&cfg, JobKind::Benchmark));
            run_request(&cfg, JobRequest::Benchmark(req), Some(out.clone()))?;
            if let Ok(summary) = std::fs::read_to_string(out.join("summary.txt")) {
                eprint!("{summary}");
            }
            Ok(())
        }
        Command::Run(args) => {
            let req = read_request(args.kind, &args.request).map_err(classify)?;
            run_request(&cfg, req, args.out)
        }
        Command::Serve(args) => {
            let mut cfg = cfg;
            if let Some(p) = args.port {
                cfg.service_port = p;
            }
            if let Some(w) = args.workers {
                cfg.workers = w;
            }
            cfg.validate().map_err(|e| classify(e.into()))?;
            let adapter = Arc::new(load_adapter(&cfg).map_err(classify)?);
            let runtime = tokio::runtime::Runtime::new().map_err(|e| classify(e.into()))?;
            runtime
                .block_on(attnlab::service::serve(cfg, adapter))
                .map_err(|e| classify(e.into()))
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            if let Some(log) = f.log {
                eprintln!("job log: {}", log.display());
            }
            ExitCode::from(f.code)
        }
    }
}
