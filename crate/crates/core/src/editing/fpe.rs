use std::time::Instant;

use candle_core::Tensor;
use image::RgbImage;

use super::job::{CaptureRequest, EditJob, EditSource, RealMethod, RealOptions};
use super::null_text::{optimize_null_text, NullTextState};
use crate::attention::instruments::{Injection, InstrumentSet};
use crate::attention::policy::{window_len, InjectionPolicy};
use crate::attention::site::{AttnKind, SiteKey};
use crate::attention::store::{CaptureStore, Reduction, Retention};
use crate::backend::adapter::{Conditioning, InversionOptions, LatentState, ModelAdapter};
use crate::backend::ddim::{DdimSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::io::image::read_rgb;

/// Text conditioning of one branch of a paired run.
#[derive(Debug, Clone)]
pub enum BranchCond {
    Unconditional,
    Conditional(Tensor),
    Guided { cond: Tensor, scale: f64 },
}

impl BranchCond {
    fn with_null<'a>(&'a self, null: &'a Tensor) -> Conditioning<'a> {
        match self {
            BranchCond::Unconditional => Conditioning::Unconditional(null),
            BranchCond::Conditional(c) => Conditioning::Conditional(c),
            BranchCond::Guided { cond, scale } => Conditioning::Guided {
                uncond: null,
                cond,
                scale: *scale,
            },
        }
    }

    /// Guidance batch size, which is the batch of captured maps.
    pub fn batch(&self) -> usize {
        match self {
            BranchCond::Guided { .. } => 2,
            _ => 1,
        }
    }
}

/// Source and target denoising runs from a shared starting latent.
#[derive(Debug, Clone)]
pub struct PairedRun<'a> {
    pub adapter: &'a ModelAdapter,
    pub sampler: &'a SamplerConfig,
    pub policy: &'a InjectionPolicy,
    pub start: Tensor,
    pub source: BranchCond,
    pub target: BranchCond,
    /// Per-step null embeddings indexed by `t_index - 1`; the empty-prompt
    /// embedding when absent.
    pub nulls: Option<&'a [Tensor]>,
}

/// Final latents and bookkeeping of a paired run.
#[derive(Debug, Clone)]
pub struct PairedOutput {
    pub source_latent: Tensor,
    pub target_latent: Tensor,
    pub replaced_self: usize,
    pub replaced_cross: usize,
    /// Wall time of each denoising step (both branches), noisiest first.
    pub step_seconds: Vec<f64>,
}

/// Source-run maps retained for every step a set of policies can use.
#[derive(Debug, Clone)]
pub struct SourceCache {
    pub store: CaptureStore,
    pub source_latent: Tensor,
}

impl<'a> PairedRun<'a> {
    fn null(&self, t_index: usize) -> &Tensor {
        match self.nulls {
            Some(n) => &n[t_index - 1],
            None => self.adapter.null_context(),
        }
    }

    fn noise(&self, t_index: usize) -> Result<Option<Tensor>> {
        if self.sampler.eta > 0.0 {
            Ok(Some(self.adapter.step_noise(self.sampler.seed, t_index)?))
        } else {
            Ok(None)
        }
    }

    fn selected_keys(&self) -> Vec<SiteKey> {
        self.policy.selected(self.adapter.sites()).map(|s| s.key()).collect()
    }

    /// Runs both branches in lockstep: at each step the source step finishes
    /// and its maps are captured before the target step consumes them.
    pub fn run(
        &self,
        mut source_capture: Option<&mut CaptureStore>,
        mut target_capture: Option<&mut CaptureStore>,
    ) -> Result<PairedOutput> {
        let t_count = self.sampler.step_count;
        let schedule = DdimSchedule::from_config(self.sampler)?;
        let keys = self.selected_keys();
        let mut src = LatentState {
            z: self.start.clone(),
            t_index: t_count,
        };
        let mut dst = src.clone();
        let (mut replaced_self, mut replaced_cross) = (0, 0);
        let mut step_seconds = Vec::with_capacity(t_count);
        for t in (1..=t_count).rev() {
            let started = Instant::now();
            let need_maps = !keys.is_empty() && self.policy.any_active(t, t_count);
            let noise = self.noise(t)?;
            let mut lock = CaptureStore::new(Retention::LatestStep).with_sites(keys.iter().copied());

            let mut hook = InstrumentSet::new();
            if need_maps {
                hook = hook.capture(&mut lock);
            }
            if let Some(store) = source_capture.as_deref_mut() {
                hook = hook.capture(store);
            }
            hook.begin_step(t);
            let cond = self.source.with_null(self.null(t));
            src = self.adapter.step(&src, &schedule, &cond, self.sampler.eta, noise.as_ref(), &mut hook)?;
            drop(hook);

            assert!(
                !need_maps || lock.is_empty() || lock.latest_step() == Some(t),
                "lockstep violated: source maps are from step {:?}, target is at step {t}",
                lock.latest_step()
            );

            let mut hook = InstrumentSet::new();
            if need_maps {
                hook = hook.inject(Injection {
                    source: &lock,
                    policy: self.policy,
                    step_count: t_count,
                });
            }
            if let Some(store) = target_capture.as_deref_mut() {
                hook = hook.capture(store);
            }
            hook.begin_step(t);
            let cond = self.target.with_null(self.null(t));
            dst = self.adapter.step(&dst, &schedule, &cond, self.sampler.eta, noise.as_ref(), &mut hook)?;
            replaced_self += hook.replaced(AttnKind::SelfAttn);
            replaced_cross += hook.replaced(AttnKind::Cross);
            step_seconds.push(started.elapsed().as_secs_f64());
        }
        Ok(PairedOutput {
            source_latent: src.z,
            target_latent: dst.z,
            replaced_self,
            replaced_cross,
            step_seconds,
        })
    }

    /// Bytes a source cache needs for `sites` over the first `steps` denoising steps.
    pub fn cache_bytes(&self, sites: &[SiteKey], steps: usize) -> usize {
        let batch = self.source.batch();
        let elem = self.adapter.dtype().size_in_bytes();
        self.adapter
            .sites()
            .iter()
            .filter(|s| sites.contains(&s.key()))
            .map(|s| batch * s.heads * s.spatial_len * s.context_len * elem)
            .sum::<usize>()
            * steps
    }

    /// Runs the source branch alone, keeping maps of `sites` for the first
    /// `steps` denoising steps.
    pub fn capture_source(&self, sites: &[SiteKey], steps: usize) -> Result<SourceCache> {
        let t_count = self.sampler.step_count;
        let schedule = DdimSchedule::from_config(self.sampler)?;
        let mut store = CaptureStore::new(Retention::AllSteps).with_sites(sites.iter().copied());
        let mut src = LatentState {
            z: self.start.clone(),
            t_index: t_count,
        };
        for t in (1..=t_count).rev() {
            let noise = self.noise(t)?;
            let mut hook = InstrumentSet::new();
            if t_count - t < steps {
                hook = hook.capture(&mut store);
            }
            hook.begin_step(t);
            let cond = self.source.with_null(self.null(t));
            src = self.adapter.step(&src, &schedule, &cond, self.sampler.eta, noise.as_ref(), &mut hook)?;
        }
        Ok(SourceCache {
            store,
            source_latent: src.z,
        })
    }

    /// Runs the target branch against cached source maps.
    pub fn run_target_cached(
        &self,
        cache: &SourceCache,
        mut target_capture: Option<&mut CaptureStore>,
    ) -> Result<PairedOutput> {
        let t_count = self.sampler.step_count;
        let schedule = DdimSchedule::from_config(self.sampler)?;
        let mut dst = LatentState {
            z: self.start.clone(),
            t_index: t_count,
        };
        let (mut replaced_self, mut replaced_cross) = (0, 0);
        let mut step_seconds = Vec::with_capacity(t_count);
        for t in (1..=t_count).rev() {
            let started = Instant::now();
            let noise = self.noise(t)?;
            let mut hook = InstrumentSet::new().inject(Injection {
                source: &cache.store,
                policy: self.policy,
                step_count: t_count,
            });
            if let Some(store) = target_capture.as_deref_mut() {
                hook = hook.capture(store);
            }
            hook.begin_step(t);
            let cond = self.target.with_null(self.null(t));
            dst = self.adapter.step(&dst, &schedule, &cond, self.sampler.eta, noise.as_ref(), &mut hook)?;
            replaced_self += hook.replaced(AttnKind::SelfAttn);
            replaced_cross += hook.replaced(AttnKind::Cross);
            step_seconds.push(started.elapsed().as_secs_f64());
        }
        Ok(PairedOutput {
            source_latent: cache.source_latent.clone(),
            target_latent: dst.z,
            replaced_self,
            replaced_cross,
            step_seconds,
        })
    }
}

/// Everything an edit produces.
#[derive(Debug)]
pub struct EditOutcome {
    /// `I_src` for generated sources, the reconstruction `I_res` for real ones.
    pub source_image: RgbImage,
    pub edited_image: RgbImage,
    pub source_latent: Tensor,
    pub edited_latent: Tensor,
    pub replaced_self: usize,
    pub replaced_cross: usize,
    pub step_seconds: Vec<f64>,
    /// Wall time of the whole edit, excluding model load.
    pub edit_seconds: f64,
    pub null_text: Option<NullTextState>,
    /// Target-run maps, when the job requested them.
    pub capture: Option<CaptureStore>,
}

fn capture_store(req: &CaptureRequest, adapter: &ModelAdapter) -> CaptureStore {
    let keys: Vec<SiteKey> = adapter
        .sites()
        .iter()
        .filter(|s| req.kinds.contains(&s.kind) && (req.sites.is_empty() || req.sites.contains(&s.index)))
        .map(|s| s.key())
        .collect();
    let mut store = CaptureStore::new(req.retention).with_sites(keys);
    if req.reduce {
        store = store.with_reduction(Reduction {
            last_branch_only: true,
            head_mean: true,
        });
    }
    store
}

fn finish(
    adapter: &ModelAdapter,
    out: PairedOutput,
    started: Instant,
    null_text: Option<NullTextState>,
    capture: Option<CaptureStore>,
) -> Result<EditOutcome> {
    let source_image = adapter.decode_latent(&out.source_latent)?;
    let edited_image = adapter.decode_latent(&out.target_latent)?;
    Ok(EditOutcome {
        source_image,
        edited_image,
        source_latent: out.source_latent,
        edited_latent: out.target_latent,
        replaced_self: out.replaced_self,
        replaced_cross: out.replaced_cross,
        step_seconds: out.step_seconds,
        edit_seconds: started.elapsed().as_secs_f64(),
        null_text,
        capture,
    })
}

/// Edits a generated image: source and target share the seed's starting
/// noise, and the target consumes the source's self-attention maps.
pub fn fpe_generated(
    adapter: &ModelAdapter,
    source_prompt: &str,
    target_prompt: &str,
    seed: u64,
    sampler: &SamplerConfig,
    policy: &InjectionPolicy,
) -> Result<EditOutcome> {
    if policy.kinds.contains(&AttnKind::Cross) {
        return Err(Error::validation(
            "cross-attention replacement is only available through ablation sweeps",
        ));
    }
    let job = EditJob {
        sampler: sampler.clone(),
        policy: policy.clone(),
        ..EditJob::generated(seed, source_prompt, target_prompt)
    };
    run_edit(adapter, &job)
}

/// Edits a real image: DDIM inversion, then a paired run from the inverted noise.
pub fn fpe_real(
    adapter: &ModelAdapter,
    image: &RgbImage,
    target_prompt: &str,
    sampler: &SamplerConfig,
    policy: &InjectionPolicy,
) -> Result<EditOutcome> {
    let started = Instant::now();
    let paired = prepare_real(adapter, image, None, target_prompt, sampler, policy, &RealOptions::default())?;
    let out = paired.run.run(None, None)?;
    finish(adapter, out, started, None, None)
}

/// A paired run ready to execute, plus state it borrows.
pub(crate) struct Prepared<'a> {
    pub run: PairedRun<'a>,
    pub null_text: Option<NullTextState>,
}

pub(crate) fn prepare_real<'a>(
    adapter: &'a ModelAdapter,
    image: &RgbImage,
    source_prompt: Option<&str>,
    target_prompt: &str,
    sampler: &'a SamplerConfig,
    policy: &'a InjectionPolicy,
    real: &RealOptions,
) -> Result<Prepared<'a>> {
    sampler.require_invertible()?;
    let z0 = adapter.encode_image(image)?.z;
    let target = BranchCond::Guided {
        cond: adapter.encode_prompt(target_prompt)?,
        scale: sampler.guidance_scale,
    };
    let inv_opts = InversionOptions {
        refine_iterations: real.inversion_refine_iterations,
    };
    match (real.method, source_prompt) {
        (RealMethod::NullText, Some(p)) => {
            let src_ctx = adapter.encode_prompt(p)?;
            let traj = adapter.ddim_invert(&z0, sampler, Some(&src_ctx), inv_opts)?;
            let state = optimize_null_text(adapter, &traj, &src_ctx, sampler, &real.null_text)?;
            let run = PairedRun {
                adapter,
                sampler,
                policy,
                start: traj.endpoint().z.clone(),
                source: BranchCond::Guided {
                    cond: src_ctx,
                    scale: sampler.guidance_scale,
                },
                target,
                nulls: None,
            };
            Ok(Prepared {
                run,
                null_text: Some(state),
            })
        }
        (RealMethod::NullText, None) => Err(Error::validation("null-text reconstruction needs a source prompt")),
        (RealMethod::Ddim, Some(p)) if real.condition_source_on_prompt => {
            let src_ctx = adapter.encode_prompt(p)?;
            let traj = adapter.ddim_invert(&z0, sampler, Some(&src_ctx), inv_opts)?;
            let run = PairedRun {
                adapter,
                sampler,
                policy,
                start: traj.endpoint().z.clone(),
                source: BranchCond::Guided {
                    cond: src_ctx,
                    scale: sampler.guidance_scale,
                },
                target,
                nulls: None,
            };
            Ok(Prepared { run, null_text: None })
        }
        (RealMethod::Ddim, _) => {
            let traj = adapter.ddim_invert(&z0, sampler, None, inv_opts)?;
            let run = PairedRun {
                adapter,
                sampler,
                policy,
                start: traj.endpoint().z.clone(),
                source: BranchCond::Unconditional,
                target,
                nulls: None,
            };
            Ok(Prepared { run, null_text: None })
        }
    }
}

pub(crate) fn prepare_generated<'a>(
    adapter: &'a ModelAdapter,
    seed: u64,
    source_prompt: &str,
    target_prompt: &str,
    sampler: &'a SamplerConfig,
    policy: &'a InjectionPolicy,
) -> Result<PairedRun<'a>> {
    Ok(PairedRun {
        adapter,
        sampler,
        policy,
        start: adapter.initial_latent(seed)?,
        source: BranchCond::Guided {
            cond: adapter.encode_prompt(source_prompt)?,
            scale: sampler.guidance_scale,
        },
        target: BranchCond::Guided {
            cond: adapter.encode_prompt(target_prompt)?,
            scale: sampler.guidance_scale,
        },
        nulls: None,
    })
}

/// Runs any edit job.
pub fn run_edit(adapter: &ModelAdapter, job: &EditJob) -> Result<EditOutcome> {
    job.validate(adapter.sites_of(AttnKind::SelfAttn).count())?;
    let started = Instant::now();
    let mut capture = job.capture.as_ref().map(|req| capture_store(req, adapter));
    match &job.source {
        EditSource::SeededPrompt { seed, prompt } => {
            let run = prepare_generated(adapter, *seed, prompt, &job.target_prompt, &job.sampler, &job.policy)?;
            let out = run.run(None, capture.as_mut())?;
            finish(adapter, out, started, None, capture)
        }
        EditSource::RealImage { path, prompt } => {
            let image = read_rgb(path)?;
            let prepared = prepare_real(
                adapter,
                &image,
                prompt.as_deref(),
                &job.target_prompt,
                &job.sampler,
                &job.policy,
                &job.real,
            )?;
            let nulls = prepared.null_text.as_ref().map(|s| s.per_step_null_embeddings.as_slice());
            let run = PairedRun { nulls, ..prepared.run };
            let out = run.run(None, capture.as_mut())?;
            finish(adapter, out, started, prepared.null_text, capture)
        }
    }
}

/// Runs a job on an in-memory real image (used by the FFI and tests).
pub fn run_edit_on_image(adapter: &ModelAdapter, job: &EditJob, image: &RgbImage) -> Result<EditOutcome> {
    job.validate(adapter.sites_of(AttnKind::SelfAttn).count())?;
    let started = Instant::now();
    let prepared = prepare_real(
        adapter,
        image,
        job.source_prompt(),
        &job.target_prompt,
        &job.sampler,
        &job.policy,
        &job.real,
    )?;
    let nulls = prepared.null_text.as_ref().map(|s| s.per_step_null_embeddings.as_slice());
    let run = PairedRun { nulls, ..prepared.run };
    let mut capture = job.capture.as_ref().map(|req| capture_store(req, adapter));
    let out = run.run(None, capture.as_mut())?;
    finish(adapter, out, started, prepared.null_text, capture)
}

/// Number of steps covered by any kind of `policy`.
pub fn active_steps(policy: &InjectionPolicy, step_count: usize) -> usize {
    let mut n = 0;
    if policy.kinds.contains(&AttnKind::SelfAttn) {
        n = n.max(window_len(policy.replace_ratio, step_count));
    }
    if policy.kinds.contains(&AttnKind::Cross) {
        n = n.max(window_len(policy.cross_replace_ratio.unwrap_or(policy.replace_ratio), step_count));
    }
    n
}

/// Edits a real image after fitting per-step null embeddings to the
/// source-prompt trajectory.
pub fn fpe_null_text(
    adapter: &ModelAdapter,
    image: &RgbImage,
    source_prompt: &str,
    target_prompt: &str,
    sampler: &SamplerConfig,
    policy: &InjectionPolicy,
    opt: &super::null_text::NullTextOptConfig,
) -> Result<EditOutcome> {
    let started = Instant::now();
    let real = RealOptions {
        method: RealMethod::NullText,
        null_text: opt.clone(),
        ..Default::default()
    };
    let prepared = prepare_real(adapter, image, Some(source_prompt), target_prompt, sampler, policy, &real)?;
    let nulls = prepared.null_text.as_ref().map(|s| s.per_step_null_embeddings.as_slice());
    let run = PairedRun { nulls, ..prepared.run };
    let out = run.run(None, None)?;
    finish(adapter, out, started, prepared.null_text, None)
}
