use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::null_text::NullTextOptConfig;
use crate::attention::policy::InjectionPolicy;
use crate::attention::site::AttnKind;
use crate::attention::store::Retention;
use crate::backend::ddim::SamplerConfig;
use crate::error::{Error, Result};

/// Where the source image of an edit comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EditSource {
    /// Generate the source from a prompt and a seed.
    SeededPrompt { seed: u64, prompt: String },
    /// Invert an image file. `prompt` describes the image, when known.
    RealImage {
        path: PathBuf,
        #[serde(default)]
        prompt: Option<String>,
    },
}

/// Reconstruction method for real images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RealMethod {
    /// Plain DDIM inversion.
    #[default]
    Ddim,
    /// DDIM inversion followed by per-step null-embedding optimization.
    NullText,
}

/// Options that apply only to real-image sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RealOptions {
    pub method: RealMethod,
    /// Condition inversion and the source branch on the source prompt
    /// instead of running them unconditionally (DDIM method only).
    pub condition_source_on_prompt: bool,
    /// Fixed-point refinements per inversion step.
    pub inversion_refine_iterations: usize,
    pub null_text: NullTextOptConfig,
}

impl Default for RealOptions {
    fn default() -> Self {
        Self {
            method: RealMethod::Ddim,
            condition_source_on_prompt: false,
            inversion_refine_iterations: 0,
            null_text: NullTextOptConfig::default(),
        }
    }
}

/// Maps to retain for inspection after the job finishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptureRequest {
    pub retention: Retention,
    pub kinds: Vec<AttnKind>,
    /// Site indices to keep; all when empty.
    pub sites: Vec<usize>,
    /// Average heads and keep only the conditional branch.
    pub reduce: bool,
}

impl Default for CaptureRequest {
    fn default() -> Self {
        Self {
            retention: Retention::StepMean,
            kinds: vec![AttnKind::SelfAttn, AttnKind::Cross],
            sites: Vec::new(),
            reduce: true,
        }
    }
}

/// One edit, as submitted through the CLI or the service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditJob {
    pub source: EditSource,
    pub target_prompt: String,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub policy: InjectionPolicy,
    #[serde(default)]
    pub real: RealOptions,
    /// Retain target-run maps for heatmaps.
    #[serde(default)]
    pub capture: Option<CaptureRequest>,
}

impl EditJob {
    pub fn generated(seed: u64, source: &str, target: &str) -> Self {
        Self {
            source: EditSource::SeededPrompt {
                seed,
                prompt: source.to_string(),
            },
            target_prompt: target.to_string(),
            sampler: SamplerConfig {
                seed,
                ..Default::default()
            },
            policy: InjectionPolicy::default(),
            real: RealOptions::default(),
            capture: None,
        }
    }

    pub fn real(path: impl Into<PathBuf>, target: &str) -> Self {
        Self {
            source: EditSource::RealImage {
                path: path.into(),
                prompt: None,
            },
            target_prompt: target.to_string(),
            sampler: SamplerConfig::default(),
            policy: InjectionPolicy::default(),
            real: RealOptions::default(),
            capture: None,
        }
    }

    /// Seed of the trajectory: the source seed for generated sources.
    pub fn seed(&self) -> u64 {
        match &self.source {
            EditSource::SeededPrompt { seed, .. } => *seed,
            EditSource::RealImage { .. } => self.sampler.seed,
        }
    }

    pub fn source_prompt(&self) -> Option<&str> {
        match &self.source {
            EditSource::SeededPrompt { prompt, .. } => Some(prompt),
            EditSource::RealImage { prompt, .. } => prompt.as_deref(),
        }
    }

    pub fn validate(&self, site_count: usize) -> Result<()> {
        self.sampler.validate()?;
        self.policy.validate(site_count)?;
        if let EditSource::RealImage { prompt, .. } = &self.source {
            self.sampler.require_invertible()?;
            if self.real.method == RealMethod::NullText && prompt.is_none() {
                return Err(Error::validation("null-text reconstruction needs source.prompt"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_json() {
        let job: EditJob = serde_json::from_str(
            r#"{"source": {"type": "seeded_prompt", "seed": 42, "prompt": "a photo of a sheep"},
                "target_prompt": "a photo of a leopard"}"#,
        )
        .unwrap();
        assert_eq!(job.seed(), 42);
        assert_eq!(job.policy, InjectionPolicy::default());
        assert_eq!(job.sampler.step_count, 50);
        let bad = serde_json::from_str::<EditJob>(r#"{"source": {"type": "seeded_prompt", "seed": 1, "prompt": ""}, "target_prompt": "", "bogus": 1}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn null_text_needs_prompt() {
        let mut job = EditJob::real("x.png", "a red car");
        job.real.method = RealMethod::NullText;
        assert!(job.validate(16).is_err());
    }
}
