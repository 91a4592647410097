//! Prompt tokenization and text conditioning.

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::VarBuilder;
use candle_transformers::models::stable_diffusion::clip::{ClipTextTransformer, Config as ClipTextConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::weights::fnv1a;
use crate::error::{Error, Result};

/// Token ids padded to the encoder window, plus the unpadded length
/// (including the begin and end markers).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPrompt {
    pub ids: Vec<u32>,
    pub len: usize,
}

/// Where a word lands in a tokenized prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLocation {
    /// Position of the word's first subtoken in the padded sequence.
    pub position: usize,
    /// Number of subtokens the word was split into.
    pub subtokens: usize,
}

impl TokenLocation {
    pub fn is_multi_token(&self) -> bool {
        self.subtokens > 1
    }
}

/// Word-level hashing tokenizer and lookup-table encoder for the fixture backbone.
#[derive(Debug)]
pub struct FixtureText {
    table: Tensor,
    positions: Tensor,
    window: usize,
    vocab: usize,
}

pub const FIXTURE_BOS: u32 = 1;
pub const FIXTURE_EOS: u32 = 2;

impl FixtureText {
    pub fn new(seed: u64, vocab: usize, dim: usize, window: usize, device: &Device) -> Result<Self> {
        let draw = |tag: &str, n: usize, std: f64| -> Vec<f32> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(tag.as_bytes()));
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * std) as f32
                })
                .collect()
        };
        let table = Tensor::from_vec(draw("text.table", vocab * dim, 1.0), (vocab, dim), device)?;
        let positions = Tensor::from_vec(draw("text.positions", window * dim, 0.5), (window, dim), device)?;
        Ok(Self {
            table,
            positions,
            window,
            vocab,
        })
    }

    fn words(prompt: &str) -> impl Iterator<Item = String> + '_ {
        prompt
            .split(|c: char| !c.is_alphanumeric() && c != '\'')
            .filter(|w| !w.is_empty())
            .map(|w| w.to_lowercase())
    }

    fn word_id(&self, word: &str) -> u32 {
        3 + (fnv1a(word.as_bytes()) % (self.vocab as u64 - 3)) as u32
    }

    fn tokenize(&self, prompt: &str) -> Result<TokenizedPrompt> {
        let mut ids = vec![FIXTURE_BOS];
        ids.extend(Self::words(prompt).map(|w| self.word_id(&w)));
        ids.push(FIXTURE_EOS);
        let len = ids.len();
        if len > self.window {
            return Err(Error::PromptTooLong {
                tokens: len,
                limit: self.window,
            });
        }
        ids.resize(self.window, FIXTURE_EOS);
        Ok(TokenizedPrompt { ids, len })
    }

    fn embed(&self, tokens: &TokenizedPrompt) -> Result<Tensor> {
        let ids = Tensor::new(tokens.ids.as_slice(), self.table.device())?;
        let emb = (self.table.index_select(&ids, 0)? + &self.positions)?;
        Ok(emb.unsqueeze(0)?)
    }
}

/// CLIP BPE tokenizer and text transformer used by SD-1.x.
pub struct ClipText {
    tokenizer: tokenizers::Tokenizer,
    model: ClipTextTransformer,
    pad_id: u32,
    window: usize,
    device: Device,
}

impl std::fmt::Debug for ClipText {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClipText").field("window", &self.window).finish()
    }
}

impl ClipText {
    pub fn load(tokenizer_path: &Path, weights_path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let tokenizer = tokenizers::Tokenizer::from_file(tokenizer_path).map_err(|e| Error::Load {
            path: tokenizer_path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let pad_id = *tokenizer
            .get_vocab(true)
            .get("<|endoftext|>")
            .ok_or_else(|| Error::Tokenizer("vocabulary has no <|endoftext|> token".into()))?;
        let cfg = ClipTextConfig::v1_5();
        // SAFETY: the checkpoint file is not modified while mapped.
        let vs = unsafe { VarBuilder::from_mmaped_safetensors(&[weights_path], dtype, device) }.map_err(|e| {
            Error::Load {
                path: weights_path.to_path_buf(),
                reason: e.to_string(),
            }
        })?;
        let model = ClipTextTransformer::new(vs, &cfg)?;
        Ok(Self {
            tokenizer,
            model,
            pad_id,
            window: cfg.max_position_embeddings,
            device: device.clone(),
        })
    }

    fn raw_ids(&self, text: &str, special: bool) -> Result<Vec<u32>> {
        let enc = self
            .tokenizer
            .encode(text, special)
            .map_err(|e| Error::Tokenizer(e.to_string()))?;
        Ok(enc.get_ids().to_vec())
    }

    fn tokenize(&self, prompt: &str) -> Result<TokenizedPrompt> {
        let mut ids = self.raw_ids(prompt, true)?;
        let len = ids.len();
        if len > self.window {
            return Err(Error::PromptTooLong {
                tokens: len,
                limit: self.window,
            });
        }
        ids.resize(self.window, self.pad_id);
        Ok(TokenizedPrompt { ids, len })
    }

    fn embed(&self, tokens: &TokenizedPrompt) -> Result<Tensor> {
        let ids = Tensor::new(tokens.ids.as_slice(), &self.device)?.unsqueeze(0)?;
        Ok(self.model.forward(&ids)?)
    }
}

/// Text side of a backbone: turns prompts into context embeddings `[1, window, dim]`.
#[derive(Debug)]
pub enum TextEncoder {
    Fixture(FixtureText),
    Clip(Box<ClipText>),
}

impl TextEncoder {
    pub fn window(&self) -> usize {
        match self {
            TextEncoder::Fixture(t) => t.window,
            TextEncoder::Clip(t) => t.window,
        }
    }

    pub fn tokenize(&self, prompt: &str) -> Result<TokenizedPrompt> {
        match self {
            TextEncoder::Fixture(t) => t.tokenize(prompt),
            TextEncoder::Clip(t) => t.tokenize(prompt),
        }
    }

    /// Ids of `word` on its own, without begin/end markers.
    pub fn word_ids(&self, word: &str) -> Result<Vec<u32>> {
        match self {
            TextEncoder::Fixture(t) => Ok(FixtureText::words(word).map(|w| t.word_id(&w)).collect()),
            TextEncoder::Clip(t) => t.raw_ids(word, false),
        }
    }

    /// Finds the first occurrence of `word`'s token sequence inside `prompt`.
    pub fn locate(&self, prompt: &str, word: &str) -> Result<Option<TokenLocation>> {
        let tokens = self.tokenize(prompt)?;
        let needle = self.word_ids(word)?;
        if needle.is_empty() {
            return Ok(None);
        }
        let hay = &tokens.ids[..tokens.len];
        Ok(hay.windows(needle.len()).position(|w| w == needle.as_slice()).map(|position| TokenLocation {
            position,
            subtokens: needle.len(),
        }))
    }

    pub fn embed(&self, prompt: &str) -> Result<Tensor> {
        let tokens = self.tokenize(prompt)?;
        match self {
            TextEncoder::Fixture(t) => t.embed(&tokens),
            TextEncoder::Clip(t) => t.embed(&tokens),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> TextEncoder {
        TextEncoder::Fixture(FixtureText::new(3, 512, 32, 8, &Device::Cpu).unwrap())
    }

    #[test]
    fn pads_and_rejects_long_prompts() {
        let enc = fixture();
        let t = enc.tokenize("a red car").unwrap();
        assert_eq!(t.len, 5);
        assert_eq!(t.ids.len(), 8);
        assert_eq!(t.ids[0], FIXTURE_BOS);
        assert!(t.ids[4..].iter().all(|&i| i == FIXTURE_EOS));
        let err = enc.tokenize("one two three four five six seven").unwrap_err();
        assert!(matches!(err, Error::PromptTooLong { tokens: 9, limit: 8 }));
    }

    #[test]
    fn locates_words() {
        let enc = fixture();
        let loc = enc.locate("a photo of a red car", "red").unwrap().unwrap();
        assert_eq!(loc.position, 5);
        assert!(!loc.is_multi_token());
        assert_eq!(enc.locate("a red car", "a").unwrap().unwrap().position, 1);
        assert!(enc.locate("a red car", "blue").unwrap().is_none());
    }

    #[test]
    fn embedding_shape_and_determinism() {
        let enc = fixture();
        let a = enc.embed("a red car").unwrap();
        assert_eq!(a.dims(), &[1, 8, 32]);
        let b = fixture().embed("a red car").unwrap();
        let a: Vec<f32> = a.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = b.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }
}
