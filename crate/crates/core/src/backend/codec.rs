//! Image ↔ latent codecs.

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{self as nn, VarBuilder};
use candle_transformers::models::stable_diffusion::unet_2d_blocks::{
    DownEncoderBlock2D, DownEncoderBlock2DConfig, UNetMidBlock2D, UNetMidBlock2DConfig,
};
use candle_transformers::models::stable_diffusion::vae::{AutoEncoderKL, AutoEncoderKLConfig};
use image::RgbImage;

use crate::error::{Error, Result};
use crate::io::image::{image_to_tensor, tensor_to_image};

/// Deterministic codec for the fixture backbone.
///
/// Latent channels 0..3 are the per-patch RGB means in `[-1, 1]`; channel 3 is
/// the per-patch mean of `(r - b) / 2`. Decoding repeats each patch mean.
#[derive(Debug, Clone, Copy)]
pub struct PatchCodec {
    pub factor: usize,
}

impl PatchCodec {
    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.factor;
        let rgb = x.avg_pool2d(f)?;
        let r = rgb.narrow(1, 0, 1)?;
        let b = rgb.narrow(1, 2, 1)?;
        let chroma = ((r - b)? * 0.5)?;
        Ok(Tensor::cat(&[&rgb, &chroma], 1)?)
    }

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = z.dims4()?;
        Ok(z.narrow(1, 0, 3)?.upsample_nearest2d(h * self.factor, w * self.factor)?)
    }
}

const SD_LATENT_SCALE: f64 = 0.18215;

/// SD-1.x KL autoencoder. Encoding returns the posterior mean.
pub struct VaeCodec {
    encoder_in: nn::Conv2d,
    encoder_down: Vec<DownEncoderBlock2D>,
    encoder_mid: UNetMidBlock2D,
    encoder_norm: nn::GroupNorm,
    encoder_out: nn::Conv2d,
    quant_conv: nn::Conv2d,
    autoencoder: AutoEncoderKL,
}

impl std::fmt::Debug for VaeCodec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VaeCodec").finish_non_exhaustive()
    }
}

impl VaeCodec {
    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        // SAFETY: the checkpoint file is not modified while mapped.
        let vs = unsafe { VarBuilder::from_mmaped_safetensors(&[path], dtype, device) }.map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let channels = [128usize, 256, 512, 512];
        let groups = 32;
        let config = AutoEncoderKLConfig {
            block_out_channels: channels.to_vec(),
            layers_per_block: 2,
            latent_channels: 4,
            norm_num_groups: groups,
            use_quant_conv: true,
            use_post_quant_conv: true,
        };
        let autoencoder = AutoEncoderKL::new(vs.clone(), 3, 3, config)?;

        let enc = vs.pp("encoder");
        let conv3 = nn::Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let encoder_in = nn::conv2d(3, channels[0], 3, conv3, enc.pp("conv_in"))?;
        let mut encoder_down = Vec::new();
        for (i, &out_c) in channels.iter().enumerate() {
            let in_c = if i == 0 { channels[0] } else { channels[i - 1] };
            let cfg = DownEncoderBlock2DConfig {
                num_layers: 2,
                resnet_eps: 1e-6,
                resnet_groups: groups,
                add_downsample: i + 1 < channels.len(),
                downsample_padding: 0,
                ..Default::default()
            };
            encoder_down.push(DownEncoderBlock2D::new(enc.pp("down_blocks").pp(i), in_c, out_c, cfg)?);
        }
        let mid_cfg = UNetMidBlock2DConfig {
            resnet_eps: 1e-6,
            output_scale_factor: 1.0,
            attn_num_head_channels: None,
            resnet_groups: Some(groups),
            ..Default::default()
        };
        let encoder_mid = UNetMidBlock2D::new(enc.pp("mid_block"), channels[3], None, mid_cfg)?;
        let encoder_norm = nn::group_norm(groups, channels[3], 1e-6, enc.pp("conv_norm_out"))?;
        let encoder_out = nn::conv2d(channels[3], 8, 3, conv3, enc.pp("conv_out"))?;
        let quant_conv = nn::conv2d(8, 8, 1, Default::default(), vs.pp("quant_conv"))?;
        Ok(Self {
            encoder_in,
            encoder_down,
            encoder_mid,
            encoder_norm,
            encoder_out,
            quant_conv,
            autoencoder,
        })
    }

    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.encoder_in.forward(x)?;
        for block in &self.encoder_down {
            h = block.forward(&h)?;
        }
        let h = self.encoder_mid.forward(&h, None)?;
        let h = nn::ops::silu(&self.encoder_norm.forward(&h)?)?;
        let moments = self.quant_conv.forward(&self.encoder_out.forward(&h)?)?;
        Ok((moments.narrow(1, 0, 4)? * SD_LATENT_SCALE)?)
    }

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.autoencoder.decode(&(z / SD_LATENT_SCALE)?)?)
    }
}

/// Maps RGB images to latents and back.
#[derive(Debug)]
pub enum Codec {
    Patch(PatchCodec),
    Vae(Box<VaeCodec>),
}

impl Codec {
    /// Spatial downsampling factor between image and latent.
    pub fn factor(&self) -> usize {
        match self {
            Codec::Patch(p) => p.factor,
            Codec::Vae(_) => 8,
        }
    }

    /// Encodes an RGB image into a `[1, 4, h / f, w / f]` latent.
    pub fn encode(&self, img: &RgbImage, device: &Device, dtype: DType) -> Result<Tensor> {
        let f = self.factor() as u32;
        let (w, h) = img.dimensions();
        if w == 0 || h == 0 || w % f != 0 || h % f != 0 {
            return Err(Error::validation(format!(
                "image is {w}x{h}; side lengths must be positive multiples of {f}"
            )));
        }
        let x = image_to_tensor(img, device)?.to_dtype(dtype)?;
        match self {
            Codec::Patch(p) => p.encode(&x),
            Codec::Vae(v) => v.encode(&x),
        }
    }

    /// Decodes a `[1, 4, h, w]` latent to an 8-bit RGB image.
    pub fn decode(&self, z: &Tensor) -> Result<RgbImage> {
        let x = match self {
            Codec::Patch(p) => p.decode(z)?,
            Codec::Vae(v) => v.decode(z)?,
        };
        tensor_to_image(&x)
    }
}
