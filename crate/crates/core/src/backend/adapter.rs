use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarBuilder;
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::codec::{Codec, PatchCodec, VaeCodec};
use super::ddim::{DdimSchedule, SamplerConfig};
use super::text::{ClipText, FixtureText, TextEncoder};
use super::unet::{UNet, UNetConfig};
use super::weights::SeededWeights;
use crate::attention::hook::AttentionHook;
use crate::attention::site::{AttentionSite, AttnKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackboneId {
    #[serde(rename = "sd15")]
    Sd15,
    #[serde(rename = "tiny-test")]
    TinyTest,
}

impl BackboneId {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackboneId::Sd15 => "sd15",
            BackboneId::TinyTest => "tiny-test",
        }
    }

    pub fn unet_config(&self) -> UNetConfig {
        match self {
            BackboneId::Sd15 => UNetConfig::sd15(),
            BackboneId::TinyTest => UNetConfig::tiny(),
        }
    }

    /// `(latent side, context length)` the backbone is built for.
    pub fn geometry(&self) -> (usize, usize) {
        match self {
            BackboneId::Sd15 => (64, 77),
            BackboneId::TinyTest => (16, 8),
        }
    }

    /// The attention site table, available without loading weights.
    pub fn site_table(&self) -> Vec<AttentionSite> {
        let (side, ctx) = self.geometry();
        self.unet_config().site_table(side, side, ctx)
    }

    /// Self-attention sites replaced by default.
    pub fn default_sites(&self) -> Vec<usize> {
        match self {
            BackboneId::Sd15 => (4..=14).collect(),
            BackboneId::TinyTest => (1..=4).collect(),
        }
    }

    pub fn text_encoder_id(&self) -> &'static str {
        match self {
            BackboneId::Sd15 => "openai/clip-vit-large-patch14",
            BackboneId::TinyTest => "fixture-hash-512",
        }
    }
}

impl fmt::Display for BackboneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sd15" | "sd-1.5" | "stable-diffusion-v1-5" => Ok(BackboneId::Sd15),
            "tiny-test" | "tiny" => Ok(BackboneId::TinyTest),
            other => Err(Error::UnknownBackbone(other.to_string())),
        }
    }
}

/// Options for [`ModelAdapter::load`].
#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Directory holding the diffusers-layout checkpoint (sd15 only).
    pub weights_root: Option<PathBuf>,
    /// Load weights and run in 16-bit floats. Bitwise guarantees do not hold.
    pub half_precision: bool,
    /// Seed of the fixture's random weights.
    pub fixture_seed: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            weights_root: None,
            half_precision: false,
            fixture_seed: 0,
        }
    }
}

/// Files expected under an sd15 weights root.
pub const SD15_FILES: [&str; 4] = [
    "unet/diffusion_pytorch_model.safetensors",
    "vae/diffusion_pytorch_model.safetensors",
    "text_encoder/model.safetensors",
    "tokenizer/tokenizer.json",
];

/// Resolves a device hint: `cpu`, `cuda`, `cuda:N`, `metal` or `auto`.
pub fn resolve_device(hint: &str) -> Result<Device> {
    let hint = hint.trim().to_ascii_lowercase();
    match hint.as_str() {
        "" | "cpu" => Ok(Device::Cpu),
        "auto" => Ok(Device::cuda_if_available(0).unwrap_or(Device::Cpu)),
        "metal" => Ok(Device::new_metal(0)?),
        h if h.starts_with("cuda") => {
            let ordinal = match h.strip_prefix("cuda:") {
                Some(n) => n
                    .parse()
                    .map_err(|_| Error::validation(format!("bad device hint `{hint}`")))?,
                None => 0,
            };
            Ok(Device::new_cuda(ordinal)?)
        }
        _ => Err(Error::validation(format!(
            "unknown device hint `{hint}` (expected cpu, cuda[:N], metal or auto)"
        ))),
    }
}

/// A latent at a scheduler step position.
#[derive(Debug, Clone)]
pub struct LatentState {
    /// `[1, channels, h, w]`.
    pub z: Tensor,
    pub t_index: usize,
}

/// States from the clean latent (`states[0]`) to the fully noised one (`states[T]`).
#[derive(Debug, Clone)]
pub struct LatentTrajectory {
    pub states: Vec<LatentState>,
}

impl LatentTrajectory {
    pub fn endpoint(&self) -> &LatentState {
        self.states.last().expect("trajectory is never empty")
    }
}

/// How the noise prediction is conditioned on text.
#[derive(Debug, Clone, Copy)]
pub enum Conditioning<'a> {
    /// One pass with the given (usually empty-prompt) context.
    Unconditional(&'a Tensor),
    /// One pass with a prompt context, no guidance.
    Conditional(&'a Tensor),
    /// Classifier-free guidance: a batch of `[uncond, cond]` combined as
    /// `eps_u + scale * (eps_c - eps_u)`.
    Guided {
        uncond: &'a Tensor,
        cond: &'a Tensor,
        scale: f64,
    },
}

/// Weight multiplier on the fixture's cross-attention output projections.
const FIXTURE_CROSS_OUT_SCALE: f64 = 0.05;
/// Weight multiplier on the fixture's final convolution.
const FIXTURE_RESIDUAL_SCALE: f64 = 0.1;
/// Multiplier on the fixture's self-attention query and key weights.
const FIXTURE_SELF_SHARPNESS: f64 = 3.0;

/// Inversion options beyond the sampler config.
#[derive(Debug, Clone, Copy, Default)]
pub struct InversionOptions {
    /// Fixed-point refinements per step. Zero gives classic DDIM inversion;
    /// each extra pass re-predicts the noise at the current estimate of the
    /// noisier latent, driving `denoise(invert(z)) → z`.
    pub refine_iterations: usize,
}

/// A loaded backbone: noise predictor, text encoder and codec.
#[derive(Debug)]
pub struct ModelAdapter {
    backbone_id: BackboneId,
    unet: UNet,
    text: TextEncoder,
    codec: Codec,
    device: Device,
    dtype: DType,
    null_context: Tensor,
    /// Variance of the Gaussian data prior whose closed-form noise estimate
    /// is added to the network output. Set for the fixture only.
    prior_variance: Option<f64>,
}

impl ModelAdapter {
    pub fn load(backbone_id: &str, device_hint: &str, opts: &LoadOptions) -> Result<Self> {
        let id: BackboneId = backbone_id.parse()?;
        let device = resolve_device(device_hint)?;
        let dtype = if opts.half_precision { DType::F16 } else { DType::F32 };
        match id {
            BackboneId::TinyTest => Self::tiny(opts.fixture_seed, &device, dtype),
            BackboneId::Sd15 => {
                let root = opts
                    .weights_root
                    .clone()
                    .ok_or_else(|| Error::Load {
                        path: PathBuf::from("<unset>"),
                        reason: "sd15 needs a weights root (config key weights_root or ATTNLAB_SD15_ROOT)".into(),
                    })?;
                Self::sd15(&root, &device, dtype)
            }
        }
    }

    /// The fixture backbone on CPU in f32.
    pub fn tiny_test(seed: u64) -> Result<Self> {
        Self::tiny(seed, &Device::Cpu, DType::F32)
    }

    fn tiny(seed: u64, device: &Device, dtype: DType) -> Result<Self> {
        let id = BackboneId::TinyTest;
        let (side, ctx) = id.geometry();
        let cfg = id.unet_config();
        let weights = SeededWeights::new(seed)
            .with_scale("attn2.to_out.0.weight", FIXTURE_CROSS_OUT_SCALE)
            .with_scale("attn1.to_q.weight", FIXTURE_SELF_SHARPNESS)
            .with_scale("attn1.to_k.weight", FIXTURE_SELF_SHARPNESS)
            .with_scale("conv_out.weight", FIXTURE_RESIDUAL_SCALE)
            .with_scale("conv_out.bias", 0.0);
        let vs = VarBuilder::from_backend(Box::new(weights), dtype, device.clone());
        let unet = UNet::new(vs.pp("unet"), cfg.clone(), side, side, ctx)?;
        let text = TextEncoder::Fixture(FixtureText::new(seed, 512, cfg.cross_attention_dim, ctx, device)?);
        let null_context = text.embed("")?.to_dtype(dtype)?;
        Ok(Self {
            backbone_id: id,
            unet,
            text,
            codec: Codec::Patch(PatchCodec { factor: 8 }),
            device: device.clone(),
            dtype,
            null_context,
            prior_variance: Some(1.0),
        })
    }

    fn sd15(root: &Path, device: &Device, dtype: DType) -> Result<Self> {
        let missing: Vec<String> = SD15_FILES
            .iter()
            .filter(|f| !root.join(f).is_file())
            .map(|f| f.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Load {
                path: root.join(&missing[0]),
                reason: format!("missing checkpoint files: {}", missing.join(", ")),
            });
        }
        let id = BackboneId::Sd15;
        let (side, ctx) = id.geometry();
        let unet_path = root.join(SD15_FILES[0]);
        // SAFETY: the checkpoint file is not modified while mapped.
        let vs = unsafe { VarBuilder::from_mmaped_safetensors(&[&unet_path], dtype, device) }.map_err(|e| {
            Error::Load {
                path: unet_path.clone(),
                reason: e.to_string(),
            }
        })?;
        let unet = UNet::new(vs, id.unet_config(), side, side, ctx).map_err(|e| Error::Load {
            path: unet_path,
            reason: e.to_string(),
        })?;
        let codec = Codec::Vae(Box::new(VaeCodec::load(&root.join(SD15_FILES[1]), dtype, device)?));
        let text = TextEncoder::Clip(Box::new(ClipText::load(
            &root.join(SD15_FILES[3]),
            &root.join(SD15_FILES[2]),
            dtype,
            device,
        )?));
        let null_context = text.embed("")?;
        Ok(Self {
            backbone_id: id,
            unet,
            text,
            codec,
            device: device.clone(),
            dtype,
            null_context,
            prior_variance: None,
        })
    }

    pub fn backbone_id(&self) -> BackboneId {
        self.backbone_id
    }

    pub fn text_encoder_id(&self) -> &'static str {
        self.backbone_id.text_encoder_id()
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn sites(&self) -> &[AttentionSite] {
        self.unet.sites()
    }

    pub fn sites_of(&self, kind: AttnKind) -> impl Iterator<Item = &AttentionSite> {
        self.sites().iter().filter(move |s| s.kind == kind)
    }

    pub fn text(&self) -> &TextEncoder {
        &self.text
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    /// `(channels, h, w)` of latents this backbone accepts.
    pub fn latent_dims(&self) -> (usize, usize, usize) {
        let (h, w) = self.unet.latent_hw();
        (self.unet.config().in_channels, h, w)
    }

    /// `(width, height)` of images this backbone accepts.
    pub fn image_size(&self) -> (u32, u32) {
        let (_, h, w) = self.latent_dims();
        let f = self.codec.factor();
        ((w * f) as u32, (h * f) as u32)
    }

    /// Context embedding `[1, window, dim]` of a prompt.
    pub fn encode_prompt(&self, prompt: &str) -> Result<Tensor> {
        if prompt.is_empty() {
            return Ok(self.null_context.clone());
        }
        Ok(self.text.embed(prompt)?.to_dtype(self.dtype)?)
    }

    /// Embedding of the empty prompt.
    pub fn null_context(&self) -> &Tensor {
        &self.null_context
    }

    fn normal(&self, seed: u64, shape: (usize, usize, usize, usize)) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let data: Vec<f32> = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
            .collect();
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Starting noise `z_T` for a seed.
    pub fn initial_latent(&self, seed: u64) -> Result<Tensor> {
        let (c, h, w) = self.latent_dims();
        self.normal(seed, (1, c, h, w))
    }

    /// Per-step noise for `eta > 0`, derived from the trajectory seed.
    pub fn step_noise(&self, seed: u64, t_index: usize) -> Result<Tensor> {
        let (c, h, w) = self.latent_dims();
        let stream = seed.rotate_left(17) ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(t_index as u64 + 1);
        self.normal(stream, (1, c, h, w))
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        let (c, h, w) = self.latent_dims();
        if z.dims() != [1, c, h, w] {
            return Err(Error::Shape(format!(
                "latent has shape {:?}, backbone expects [1, {c}, {h}, {w}]",
                z.dims()
            )));
        }
        Ok(())
    }

    /// Noise prediction at scheduler position `t_index`, running `hook` at every attention site.
    pub fn predict_noise(
        &self,
        z: &Tensor,
        t_index: usize,
        schedule: &DdimSchedule,
        cond: &Conditioning<'_>,
        hook: &mut dyn AttentionHook,
    ) -> Result<Tensor> {
        self.check_latent(z)?;
        let t = schedule.timestep(t_index) as f64;
        let eps = match *cond {
            Conditioning::Unconditional(ctx) | Conditioning::Conditional(ctx) => self.unet.forward(z, t, ctx, hook)?,
            Conditioning::Guided { uncond, cond, scale } => {
                let zz = Tensor::cat(&[z, z], 0)?;
                let ctx = Tensor::cat(&[uncond, cond], 0)?;
                let eps = self.unet.forward(&zz, t, &ctx, hook)?;
                let eps_u = eps.narrow(0, 0, 1)?;
                let eps_c = eps.narrow(0, 1, 1)?;
                (&eps_u + ((eps_c - &eps_u)? * scale)?)?
            }
        };
        match self.prior_variance {
            Some(var) => {
                let a = schedule.alpha_cumprod(t_index);
                let gain = (1.0 - a).sqrt() / (a * var + 1.0 - a);
                Ok((eps + (z * gain)?)?)
            }
            None => Ok(eps),
        }
    }

    /// One DDIM update from `state.t_index` to `state.t_index - 1`.
    pub fn step(
        &self,
        state: &LatentState,
        schedule: &DdimSchedule,
        cond: &Conditioning<'_>,
        eta: f64,
        noise: Option<&Tensor>,
        hook: &mut dyn AttentionHook,
    ) -> Result<LatentState> {
        if state.t_index == 0 {
            return Err(Error::validation("cannot denoise a latent at t_index 0"));
        }
        let eps = self.predict_noise(&state.z, state.t_index, schedule, cond, hook)?;
        let z = schedule.step(&eps, &state.z, state.t_index, eta, noise)?;
        ensure_finite(&z, state.t_index, "denoised latent")?;
        Ok(LatentState {
            z,
            t_index: state.t_index - 1,
        })
    }

    /// Denoising step with the sampler's guidance. `prompt` of `None` runs a
    /// single unconditional pass.
    pub fn denoise_step(
        &self,
        state: &LatentState,
        prompt: Option<&Tensor>,
        cfg: &SamplerConfig,
        hook: &mut dyn AttentionHook,
    ) -> Result<LatentState> {
        let schedule = DdimSchedule::from_config(cfg)?;
        let cond = match prompt {
            Some(p) => Conditioning::Guided {
                uncond: &self.null_context,
                cond: p,
                scale: cfg.guidance_scale,
            },
            None => Conditioning::Unconditional(&self.null_context),
        };
        let noise = if cfg.eta > 0.0 {
            Some(self.step_noise(cfg.seed, state.t_index)?)
        } else {
            None
        };
        self.step(state, &schedule, &cond, cfg.eta, noise.as_ref(), hook)
    }

    /// Full text-to-latent generation from the seed's starting noise.
    pub fn generate(&self, prompt: &str, cfg: &SamplerConfig, hook: &mut dyn AttentionHook) -> Result<Tensor> {
        cfg.validate()?;
        let ctx = self.encode_prompt(prompt)?;
        let mut state = LatentState {
            z: self.initial_latent(cfg.seed)?,
            t_index: cfg.step_count,
        };
        while state.t_index > 0 {
            state = self.denoise_step(&state, Some(&ctx), cfg, hook)?;
        }
        Ok(state.z)
    }

    /// DDIM inversion of a clean latent. `conditioning` of `None` inverts
    /// unconditionally; otherwise the prompt context is used without guidance.
    pub fn ddim_invert(
        &self,
        z0: &Tensor,
        cfg: &SamplerConfig,
        conditioning: Option<&Tensor>,
        opts: InversionOptions,
    ) -> Result<LatentTrajectory> {
        cfg.require_invertible()?;
        self.check_latent(z0)?;
        let schedule = DdimSchedule::from_config(cfg)?;
        let cond = match conditioning {
            Some(c) => Conditioning::Conditional(c),
            None => Conditioning::Unconditional(&self.null_context),
        };
        let mut hook = crate::attention::hook::NoHook;
        let mut states = vec![LatentState {
            z: z0.clone(),
            t_index: 0,
        }];
        for k in 1..=cfg.step_count {
            let prev = &states[k - 1].z;
            let eps = self.predict_noise(prev, k, &schedule, &cond, &mut hook)?;
            let mut next = schedule.invert_step(&eps, prev, k)?;
            for _ in 0..opts.refine_iterations {
                let eps = self.predict_noise(&next, k, &schedule, &cond, &mut hook)?;
                next = schedule.invert_step(&eps, prev, k)?;
            }
            ensure_finite(&next, k, "inverted latent")?;
            states.push(LatentState { z: next, t_index: k });
        }
        Ok(LatentTrajectory { states })
    }

    pub fn encode_image(&self, img: &RgbImage) -> Result<LatentState> {
        let (w, h) = self.image_size();
        let f = self.codec.factor() as u32;
        if img.width() % f != 0 || img.height() % f != 0 {
            return Err(Error::validation(format!(
                "image is {}x{}; side lengths must be multiples of {f}",
                img.width(),
                img.height()
            )));
        }
        if img.dimensions() != (w, h) {
            return Err(Error::validation(format!(
                "image is {}x{}; the {} backbone expects {w}x{h}",
                img.width(),
                img.height(),
                self.backbone_id
            )));
        }
        Ok(LatentState {
            z: self.codec.encode(img, &self.device, self.dtype)?,
            t_index: 0,
        })
    }

    pub fn decode_latent(&self, z: &Tensor) -> Result<RgbImage> {
        self.check_latent(z)?;
        self.codec.decode(&z.to_dtype(DType::F32)?.to_dtype(self.dtype)?)
    }
}

/// Errors with the step index if `t` holds NaN or infinity.
pub(crate) fn ensure_finite(t: &Tensor, step: usize, what: &str) -> Result<()> {
    let probe = (t - t)?.to_dtype(DType::F32)?.sum_all()?.to_scalar::<f32>()?;
    if probe == 0.0 {
        Ok(())
    } else {
        Err(Error::Numeric {
            step,
            what: what.to_string(),
        })
    }
}

/// Mean squared difference between two tensors of the same shape.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = (a.to_dtype(DType::F32)? - b.to_dtype(DType::F32)?)?;
    Ok(d.sqr()?.mean_all()?.to_scalar::<f32>()? as f64)
}
