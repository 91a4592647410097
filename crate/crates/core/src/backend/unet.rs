//! Conditional U-Net noise predictor with addressable attention layers.
//!
//! Parameter names follow the diffusers `UNet2DConditionModel` layout so the
//! SD-1.x checkpoint loads directly. The same code, with a small config and
//! seeded weights, is the CPU fixture backbone.

use candle_core::{Module, Tensor, D};
use candle_nn as nn;
use candle_transformers::models::stable_diffusion::embeddings::{TimestepEmbedding, Timesteps};
use candle_transformers::models::stable_diffusion::resnet::{ResnetBlock2D, ResnetBlock2DConfig};
use serde::{Deserialize, Serialize};

use crate::attention::hook::AttentionHook;
use crate::attention::math::compute_attention;
use crate::attention::site::{AttentionSite, AttnKind, BlockKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub block_out_channels: Vec<usize>,
    /// Whether down block `i` (and its mirrored up block) carries transformer blocks.
    pub block_has_attention: Vec<bool>,
    pub layers_per_block: usize,
    pub heads: usize,
    pub cross_attention_dim: usize,
    pub norm_groups: usize,
    pub norm_eps: f64,
    pub use_linear_projection: bool,
}

impl UNetConfig {
    /// runwayml/stable-diffusion-v1-5 `unet/config.json`.
    pub fn sd15() -> Self {
        Self {
            in_channels: 4,
            out_channels: 4,
            block_out_channels: vec![320, 640, 1280, 1280],
            block_has_attention: vec![true, true, true, false],
            layers_per_block: 2,
            heads: 8,
            cross_attention_dim: 768,
            norm_groups: 32,
            norm_eps: 1e-5,
            use_linear_projection: false,
        }
    }

    /// Four transformer blocks: one down, one mid, two up.
    pub fn tiny() -> Self {
        Self {
            in_channels: 4,
            out_channels: 4,
            block_out_channels: vec![32, 64],
            block_has_attention: vec![true, false],
            layers_per_block: 1,
            heads: 2,
            cross_attention_dim: 32,
            norm_groups: 8,
            norm_eps: 1e-5,
            use_linear_projection: false,
        }
    }

    fn levels(&self) -> usize {
        self.block_out_channels.len()
    }

    /// Latent side lengths must survive `levels - 1` halvings.
    pub fn required_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }

    /// Self and cross sites in execution order for a latent grid and context length.
    pub fn site_table(&self, latent_h: usize, latent_w: usize, context_len: usize) -> Vec<AttentionSite> {
        self.site_plan(latent_h, latent_w, context_len)
            .into_iter()
            .flat_map(|(s, c)| [s, c])
            .collect()
    }

    /// One `(self, cross)` pair per transformer block, in execution order.
    fn site_plan(&self, latent_h: usize, latent_w: usize, context_len: usize) -> Vec<(AttentionSite, AttentionSite)> {
        let n = self.levels();
        let mut plan = Vec::new();
        let mut push = |block: BlockKind, level: usize| {
            let index = plan.len() + 1;
            let (gh, gw) = (latent_h >> level, latent_w >> level);
            let spatial = gh * gw;
            let site = |kind, context_len| AttentionSite {
                index,
                block,
                kind,
                spatial_len: spatial,
                context_len,
                grid_h: gh,
                grid_w: gw,
                heads: self.heads,
            };
            plan.push((site(AttnKind::SelfAttn, spatial), site(AttnKind::Cross, context_len)));
        };
        for level in 0..n {
            if self.block_has_attention[level] {
                for _ in 0..self.layers_per_block {
                    push(BlockKind::Down, level);
                }
            }
        }
        push(BlockKind::Mid, n - 1);
        for i in 0..n {
            let level = n - 1 - i;
            if self.block_has_attention[level] {
                for _ in 0..self.layers_per_block + 1 {
                    push(BlockKind::Up, level);
                }
            }
        }
        plan
    }
}

#[derive(Debug)]
struct Attention {
    to_q: nn::Linear,
    to_k: nn::Linear,
    to_v: nn::Linear,
    to_out: nn::Linear,
    heads: usize,
    head_dim: usize,
    site: AttentionSite,
}

impl Attention {
    fn new(vs: nn::VarBuilder, query_dim: usize, context_dim: Option<usize>, heads: usize, site: AttentionSite) -> Result<Self> {
        let inner = query_dim;
        let ctx = context_dim.unwrap_or(query_dim);
        Ok(Self {
            to_q: nn::linear_no_bias(query_dim, inner, vs.pp("to_q"))?,
            to_k: nn::linear_no_bias(ctx, inner, vs.pp("to_k"))?,
            to_v: nn::linear_no_bias(ctx, inner, vs.pp("to_v"))?,
            to_out: nn::linear(inner, query_dim, vs.pp("to_out").pp("0"))?,
            heads,
            head_dim: inner / heads,
            site,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, self.head_dim))?.transpose(1, 2)?.contiguous()?)
    }

    fn forward(&self, x: &Tensor, context: Option<&Tensor>, hook: &mut dyn AttentionHook) -> Result<Tensor> {
        let context = context.unwrap_or(x);
        let q = self.split_heads(&self.to_q.forward(x)?)?;
        let k = self.split_heads(&self.to_k.forward(context)?)?;
        let v = self.split_heads(&self.to_v.forward(context)?)?;
        let probs = compute_attention(&q, &k, self.head_dim)?;
        let probs = hook.on_attention(&self.site, probs)?;
        let (b, h, n, _) = probs.dims4()?;
        if h != self.heads || probs.dim(0)? != q.dim(0)? {
            return Err(Error::Shape(format!(
                "hook at {} returned map of shape {:?}, expected batch {} and {} heads",
                self.site,
                probs.dims(),
                q.dim(0)?,
                self.heads
            )));
        }
        let out = probs.to_dtype(v.dtype())?.matmul(&v)?;
        let out = out.transpose(1, 2)?.reshape((b, n, h * self.head_dim))?;
        Ok(self.to_out.forward(&out)?)
    }
}

/// Layer norm over the last dimension built from primitive ops, so it stays
/// differentiable (the fused candle kernel has no backward pass).
#[derive(Debug)]
struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    fn new(dim: usize, eps: f64, vs: nn::VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vs.get_with_hints(dim, "weight", nn::Init::Const(1.0))?,
            bias: vs.get_with_hints(dim, "bias", nn::Init::Const(0.0))?,
            eps,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug)]
struct FeedForward {
    proj: nn::Linear,
    out: nn::Linear,
}

impl FeedForward {
    fn new(vs: nn::VarBuilder, dim: usize) -> Result<Self> {
        let inner = dim * 4;
        Ok(Self {
            proj: nn::linear(dim, inner * 2, vs.pp("net").pp("0").pp("proj"))?,
            out: nn::linear(inner, dim, vs.pp("net").pp("2"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.proj.forward(x)?;
        let chunks = h.chunk(2, D::Minus1)?;
        let gated = (&chunks[0] * chunks[1].gelu_erf()?)?;
        Ok(self.out.forward(&gated)?)
    }
}

#[derive(Debug)]
struct TransformerBlock {
    norm1: LayerNorm,
    attn1: Attention,
    norm2: LayerNorm,
    attn2: Attention,
    norm3: LayerNorm,
    ff: FeedForward,
}

impl TransformerBlock {
    fn new(vs: nn::VarBuilder, dim: usize, context_dim: usize, heads: usize, sites: (AttentionSite, AttentionSite)) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(dim, 1e-5, vs.pp("norm1"))?,
            attn1: Attention::new(vs.pp("attn1"), dim, None, heads, sites.0)?,
            norm2: LayerNorm::new(dim, 1e-5, vs.pp("norm2"))?,
            attn2: Attention::new(vs.pp("attn2"), dim, Some(context_dim), heads, sites.1)?,
            norm3: LayerNorm::new(dim, 1e-5, vs.pp("norm3"))?,
            ff: FeedForward::new(vs.pp("ff"), dim)?,
        })
    }

    fn forward(&self, x: &Tensor, context: &Tensor, hook: &mut dyn AttentionHook) -> Result<Tensor> {
        let x = (self.attn1.forward(&self.norm1.forward(x)?, None, hook)? + x)?;
        let x = (self.attn2.forward(&self.norm2.forward(&x)?, Some(context), hook)? + &x)?;
        Ok((self.ff.forward(&self.norm3.forward(&x)?)? + &x)?)
    }
}

#[derive(Debug)]
enum Projection {
    Conv(nn::Conv2d),
    Linear(nn::Linear),
}

#[derive(Debug)]
struct SpatialTransformer {
    norm: nn::GroupNorm,
    proj_in: Projection,
    block: TransformerBlock,
    proj_out: Projection,
}

impl SpatialTransformer {
    fn new(vs: nn::VarBuilder, channels: usize, cfg: &UNetConfig, sites: (AttentionSite, AttentionSite)) -> Result<Self> {
        let norm = nn::group_norm(cfg.norm_groups, channels, 1e-6, vs.pp("norm"))?;
        let (proj_in, proj_out) = if cfg.use_linear_projection {
            (
                Projection::Linear(nn::linear(channels, channels, vs.pp("proj_in"))?),
                Projection::Linear(nn::linear(channels, channels, vs.pp("proj_out"))?),
            )
        } else {
            let c = nn::Conv2dConfig::default();
            (
                Projection::Conv(nn::conv2d(channels, channels, 1, c, vs.pp("proj_in"))?),
                Projection::Conv(nn::conv2d(channels, channels, 1, c, vs.pp("proj_out"))?),
            )
        };
        let block = TransformerBlock::new(
            vs.pp("transformer_blocks").pp("0"),
            channels,
            cfg.cross_attention_dim,
            cfg.heads,
            sites,
        )?;
        Ok(Self {
            norm,
            proj_in,
            block,
            proj_out,
        })
    }

    fn forward(&self, x: &Tensor, context: &Tensor, hook: &mut dyn AttentionHook) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let residual = x;
        let x = self.norm.forward(x)?;
        let tokens = match &self.proj_in {
            Projection::Conv(conv) => conv.forward(&x)?.permute((0, 2, 3, 1))?.reshape((b, h * w, c))?,
            Projection::Linear(lin) => lin.forward(&x.permute((0, 2, 3, 1))?.reshape((b, h * w, c))?)?,
        };
        let tokens = self.block.forward(&tokens, context, hook)?;
        let out = match &self.proj_out {
            Projection::Conv(conv) => {
                conv.forward(&tokens.reshape((b, h, w, c))?.permute((0, 3, 1, 2))?.contiguous()?)?
            }
            Projection::Linear(lin) => lin
                .forward(&tokens)?
                .reshape((b, h, w, c))?
                .permute((0, 3, 1, 2))?
                .contiguous()?,
        };
        Ok((out + residual)?)
    }
}

fn resnet(vs: nn::VarBuilder, in_c: usize, out_c: usize, temb: usize, cfg: &UNetConfig) -> Result<ResnetBlock2D> {
    let rc = ResnetBlock2DConfig {
        out_channels: Some(out_c),
        temb_channels: Some(temb),
        groups: cfg.norm_groups,
        eps: cfg.norm_eps,
        ..Default::default()
    };
    Ok(ResnetBlock2D::new(vs, in_c, rc)?)
}

#[derive(Debug)]
struct DownBlock {
    resnets: Vec<ResnetBlock2D>,
    attentions: Vec<SpatialTransformer>,
    downsample: Option<nn::Conv2d>,
}

#[derive(Debug)]
struct UpBlock {
    resnets: Vec<ResnetBlock2D>,
    attentions: Vec<SpatialTransformer>,
    upsample: Option<nn::Conv2d>,
}

#[derive(Debug)]
struct MidBlock {
    resnet_a: ResnetBlock2D,
    attention: SpatialTransformer,
    resnet_b: ResnetBlock2D,
}

/// The noise predictor. Forward passes take a hook that sees every attention map.
#[derive(Debug)]
pub struct UNet {
    config: UNetConfig,
    time_proj: Timesteps,
    time_embedding: TimestepEmbedding,
    conv_in: nn::Conv2d,
    down: Vec<DownBlock>,
    mid: MidBlock,
    up: Vec<UpBlock>,
    conv_norm_out: nn::GroupNorm,
    conv_out: nn::Conv2d,
    sites: Vec<AttentionSite>,
    latent_hw: (usize, usize),
}

impl UNet {
    /// Builds the network for a fixed latent grid; the site table records
    /// query lengths for that grid.
    pub fn new(vs: nn::VarBuilder, config: UNetConfig, latent_h: usize, latent_w: usize, context_len: usize) -> Result<Self> {
        let n = config.levels();
        if config.block_has_attention.len() != n || n == 0 {
            return Err(Error::validation("block_has_attention must match block_out_channels"));
        }
        let m = config.required_multiple();
        if latent_h % m != 0 || latent_w % m != 0 {
            return Err(Error::validation(format!(
                "latent grid {latent_h}x{latent_w} must be a multiple of {m}"
            )));
        }
        let plan = config.site_plan(latent_h, latent_w, context_len);
        let mut plan_iter = plan.iter().copied();
        let mut next_sites = || plan_iter.next().expect("site plan matches block layout");

        let c0 = config.block_out_channels[0];
        let temb = c0 * 4;
        let conv3 = nn::Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let time_proj = Timesteps::new(c0, true, 0.0);
        let time_embedding = TimestepEmbedding::new(vs.pp("time_embedding"), c0, temb)?;
        let conv_in = nn::conv2d(config.in_channels, c0, 3, conv3, vs.pp("conv_in"))?;

        let vs_down = vs.pp("down_blocks");
        let mut down = Vec::with_capacity(n);
        for i in 0..n {
            let vs_b = vs_down.pp(i);
            let out_c = config.block_out_channels[i];
            let in_c = if i == 0 { c0 } else { config.block_out_channels[i - 1] };
            let mut resnets = Vec::new();
            let mut attentions = Vec::new();
            for j in 0..config.layers_per_block {
                let rin = if j == 0 { in_c } else { out_c };
                resnets.push(resnet(vs_b.pp("resnets").pp(j), rin, out_c, temb, &config)?);
                if config.block_has_attention[i] {
                    attentions.push(SpatialTransformer::new(vs_b.pp("attentions").pp(j), out_c, &config, next_sites())?);
                }
            }
            let downsample = if i + 1 < n {
                let c = nn::Conv2dConfig {
                    padding: 1,
                    stride: 2,
                    ..Default::default()
                };
                Some(nn::conv2d(out_c, out_c, 3, c, vs_b.pp("downsamplers").pp("0").pp("conv"))?)
            } else {
                None
            };
            down.push(DownBlock {
                resnets,
                attentions,
                downsample,
            });
        }

        let c_last = config.block_out_channels[n - 1];
        let vs_mid = vs.pp("mid_block");
        let mid = MidBlock {
            resnet_a: resnet(vs_mid.pp("resnets").pp("0"), c_last, c_last, temb, &config)?,
            attention: SpatialTransformer::new(vs_mid.pp("attentions").pp("0"), c_last, &config, next_sites())?,
            resnet_b: resnet(vs_mid.pp("resnets").pp("1"), c_last, c_last, temb, &config)?,
        };

        let reversed: Vec<usize> = config.block_out_channels.iter().rev().copied().collect();
        let vs_up = vs.pp("up_blocks");
        let mut up = Vec::with_capacity(n);
        let mut out_c = reversed[0];
        for i in 0..n {
            let level = n - 1 - i;
            let vs_b = vs_up.pp(i);
            let prev_out = out_c;
            out_c = reversed[i];
            let in_c = reversed[(i + 1).min(n - 1)];
            let layers = config.layers_per_block + 1;
            let mut resnets = Vec::new();
            let mut attentions = Vec::new();
            for j in 0..layers {
                let skip = if j == layers - 1 { in_c } else { out_c };
                let rin = if j == 0 { prev_out } else { out_c };
                resnets.push(resnet(vs_b.pp("resnets").pp(j), rin + skip, out_c, temb, &config)?);
                if config.block_has_attention[level] {
                    attentions.push(SpatialTransformer::new(vs_b.pp("attentions").pp(j), out_c, &config, next_sites())?);
                }
            }
            let upsample = if i + 1 < n {
                Some(nn::conv2d(out_c, out_c, 3, conv3, vs_b.pp("upsamplers").pp("0").pp("conv"))?)
            } else {
                None
            };
            up.push(UpBlock {
                resnets,
                attentions,
                upsample,
            });
        }

        let conv_norm_out = nn::group_norm(config.norm_groups, c0, config.norm_eps, vs.pp("conv_norm_out"))?;
        let conv_out = nn::conv2d(c0, config.out_channels, 3, conv3, vs.pp("conv_out"))?;
        let sites = config.site_table(latent_h, latent_w, context_len);
        Ok(Self {
            config,
            time_proj,
            time_embedding,
            conv_in,
            down,
            mid,
            up,
            conv_norm_out,
            conv_out,
            sites,
            latent_hw: (latent_h, latent_w),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn sites(&self) -> &[AttentionSite] {
        &self.sites
    }

    pub fn latent_hw(&self) -> (usize, usize) {
        self.latent_hw
    }

    /// Predicts noise for `sample` (`[b, c, h, w]`) at training `timestep`
    /// with per-sample `context` (`[b, tokens, dim]`).
    pub fn forward(&self, sample: &Tensor, timestep: f64, context: &Tensor, hook: &mut dyn AttentionHook) -> Result<Tensor> {
        let (b, _, h, w) = sample.dims4()?;
        if (h, w) != self.latent_hw {
            return Err(Error::Shape(format!(
                "latent grid {h}x{w} does not match backbone grid {}x{}",
                self.latent_hw.0, self.latent_hw.1
            )));
        }
        if context.dim(0)? != b {
            return Err(Error::Shape(format!(
                "context batch {} != latent batch {b}",
                context.dim(0)?
            )));
        }
        let t = Tensor::full(timestep as f32, b, sample.device())?;
        let emb = self.time_proj.forward(&t)?.to_dtype(sample.dtype())?;
        let emb = self.time_embedding.forward(&emb)?;

        let mut x = self.conv_in.forward(sample)?;
        let mut skips = vec![x.clone()];
        for block in &self.down {
            for (j, res) in block.resnets.iter().enumerate() {
                x = res.forward(&x, Some(&emb))?;
                if let Some(attn) = block.attentions.get(j) {
                    x = attn.forward(&x, context, hook)?;
                }
                skips.push(x.clone());
            }
            if let Some(ds) = &block.downsample {
                x = ds.forward(&x)?;
                skips.push(x.clone());
            }
        }

        x = self.mid.resnet_a.forward(&x, Some(&emb))?;
        x = self.mid.attention.forward(&x, context, hook)?;
        x = self.mid.resnet_b.forward(&x, Some(&emb))?;

        for block in &self.up {
            for (j, res) in block.resnets.iter().enumerate() {
                let skip = skips.pop().expect("skip stack balanced");
                x = Tensor::cat(&[&x, &skip], 1)?;
                x = res.forward(&x, Some(&emb))?;
                if let Some(attn) = block.attentions.get(j) {
                    x = attn.forward(&x, context, hook)?;
                }
            }
            if let Some(us) = &block.upsample {
                let (_, _, uh, uw) = x.dims4()?;
                x = us.forward(&x.upsample_nearest2d(uh * 2, uw * 2)?)?;
            }
        }

        let x = nn::ops::silu(&self.conv_norm_out.forward(&x)?)?;
        Ok(self.conv_out.forward(&x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sd15_has_sixteen_sites_per_kind() {
        let table = UNetConfig::sd15().site_table(64, 64, 77);
        let selfs: Vec<_> = table.iter().filter(|s| s.kind == AttnKind::SelfAttn).collect();
        let cross: Vec<_> = table.iter().filter(|s| s.kind == AttnKind::Cross).collect();
        assert_eq!(selfs.len(), 16);
        assert_eq!(cross.len(), 16);
        let lens: Vec<usize> = selfs.iter().map(|s| s.spatial_len).collect();
        assert_eq!(
            lens,
            vec![4096, 4096, 1024, 1024, 256, 256, 64, 256, 256, 256, 1024, 1024, 1024, 4096, 4096, 4096]
        );
        assert!(selfs.iter().all(|s| s.context_len == s.spatial_len));
        assert!(cross.iter().all(|s| s.context_len == 77));
        assert_eq!(selfs[6].block, BlockKind::Mid);
        assert_eq!((1..=16).collect::<Vec<_>>(), selfs.iter().map(|s| s.index).collect::<Vec<_>>());
    }

    #[test]
    fn tiny_has_four_sites_per_kind() {
        let table = UNetConfig::tiny().site_table(16, 16, 8);
        assert_eq!(table.len(), 8);
        let blocks: Vec<_> = table.iter().filter(|s| s.kind == AttnKind::Cross).map(|s| (s.block, s.spatial_len)).collect();
        assert_eq!(
            blocks,
            vec![(BlockKind::Down, 256), (BlockKind::Mid, 64), (BlockKind::Up, 256), (BlockKind::Up, 256)]
        );
    }
}
