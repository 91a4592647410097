//! Image and text encoders for edit metrics.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarBuilder;
use candle_transformers::models::clip::{ClipConfig, ClipModel};
use image::imageops::FilterType;
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backend::weights::fnv1a;
use crate::error::{Error, Result};

/// Joint image/text embedding used for scoring.
pub trait ClipEncoder: Send + Sync {
    /// Checkpoint identifier recorded with every metric table.
    fn id(&self) -> &str;
    fn embed_image(&self, img: &RgbImage) -> Result<Vec<f32>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>>;
}

const FIXTURE_DIM: usize = 64;
const FIXTURE_THUMB: u32 = 16;

/// Deterministic stand-in encoder: a seeded random projection of a 16x16
/// thumbnail for images and a sum of seeded word vectors for text.
#[derive(Debug, Clone)]
pub struct FixtureClip {
    seed: u64,
    projection: Vec<f32>,
}

impl FixtureClip {
    pub fn new(seed: u64) -> Self {
        let n = (FIXTURE_THUMB * FIXTURE_THUMB * 3) as usize * FIXTURE_DIM;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z as f32
            })
            .collect();
        Self { seed, projection }
    }

    fn word_vector(&self, word: &str) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(word.as_bytes()));
        (0..FIXTURE_DIM)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z as f32
            })
            .collect()
    }
}

impl ClipEncoder for FixtureClip {
    fn id(&self) -> &str {
        "fixture-clip"
    }

    fn embed_image(&self, img: &RgbImage) -> Result<Vec<f32>> {
        let thumb = image::imageops::resize(img, FIXTURE_THUMB, FIXTURE_THUMB, FilterType::Triangle);
        let pixels: Vec<f32> = thumb.as_raw().iter().map(|&v| v as f32 / 255.0 - 0.5).collect();
        let mut out = vec![0f32; FIXTURE_DIM];
        for (i, &p) in pixels.iter().enumerate() {
            let row = &self.projection[i * FIXTURE_DIM..(i + 1) * FIXTURE_DIM];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += p * w;
            }
        }
        Ok(out)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        let mut out = vec![0f32; FIXTURE_DIM];
        let words = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase);
        for w in words {
            for (o, v) in out.iter_mut().zip(self.word_vector(&w)) {
                *o += v;
            }
        }
        if out.iter().all(|&v| v == 0.0) {
            return Err(Error::validation("clip score needs non-empty text"));
        }
        Ok(out)
    }
}

const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const CLIP_STD: [f32; 3] = [0.268_629_54, 0.261_302_6, 0.275_777_1];

/// ViT-B/32 CLIP from a local `model.safetensors` and `tokenizer.json`.
pub struct ClipVitB32 {
    model: ClipModel,
    tokenizer: tokenizers::Tokenizer,
    image_size: usize,
    device: Device,
}

impl ClipVitB32 {
    pub const ID: &'static str = "openai/clip-vit-base-patch32";
    pub const FILES: [&'static str; 2] = ["model.safetensors", "tokenizer.json"];

    pub fn load(root: &Path, device: &Device) -> Result<Self> {
        let missing: Vec<String> = Self::FILES
            .iter()
            .filter(|f| !root.join(f).exists())
            .map(|f| f.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingAssets {
                root: root.to_path_buf(),
                files: missing,
            });
        }
        let config = ClipConfig::vit_base_patch32();
        // SAFETY: the weights file is memory-mapped read-only and not modified while mapped.
        let vb = unsafe { VarBuilder::from_mmaped_safetensors(&[root.join("model.safetensors")], DType::F32, device)? };
        let model = ClipModel::new(vb, &config)?;
        let tokenizer = tokenizers::Tokenizer::from_file(root.join("tokenizer.json"))
            .map_err(|e| Error::Tokenizer(e.to_string()))?;
        Ok(Self {
            model,
            tokenizer,
            image_size: config.image_size,
            device: device.clone(),
        })
    }
}

impl ClipEncoder for ClipVitB32 {
    fn id(&self) -> &str {
        Self::ID
    }

    fn embed_image(&self, img: &RgbImage) -> Result<Vec<f32>> {
        let s = self.image_size as u32;
        let resized = image::imageops::resize(img, s, s, FilterType::CatmullRom);
        let n = (s * s) as usize;
        let mut data = vec![0f32; 3 * n];
        for (i, px) in resized.pixels().enumerate() {
            for c in 0..3 {
                data[c * n + i] = (px.0[c] as f32 / 255.0 - CLIP_MEAN[c]) / CLIP_STD[c];
            }
        }
        let x = Tensor::from_vec(data, (1, 3, self.image_size, self.image_size), &self.device)?;
        Ok(self.model.get_image_features(&x)?.flatten_all()?.to_vec1()?)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        if text.trim().is_empty() {
            return Err(Error::validation("clip score needs non-empty text"));
        }
        let enc = self.tokenizer.encode(text, true).map_err(|e| Error::Tokenizer(e.to_string()))?;
        let mut ids = enc.get_ids().to_vec();
        ids.truncate(77);
        let ids = Tensor::new(ids.as_slice(), &self.device)?.unsqueeze(0)?;
        Ok(self.model.get_text_features(&ids)?.flatten_all()?.to_vec1()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_is_deterministic() {
        let a = FixtureClip::new(1);
        let b = FixtureClip::new(1);
        let img = RgbImage::from_pixel(32, 32, image::Rgb([200, 10, 10]));
        assert_eq!(a.embed_image(&img).unwrap(), b.embed_image(&img).unwrap());
        assert_eq!(a.embed_text("a red car").unwrap(), b.embed_text("A red car").unwrap());
        assert!(a.embed_text("  ").is_err());
    }

    #[test]
    fn missing_checkpoint_lists_files() {
        let dir = tempfile::tempdir().unwrap();
        match ClipVitB32::load(dir.path(), &Device::Cpu) {
            Err(Error::MissingAssets { files, .. }) => assert_eq!(files.len(), 2),
            other => panic!("unexpected {:?}", other.err()),
        }
    }
}
