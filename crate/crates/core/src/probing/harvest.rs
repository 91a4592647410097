//! Capture-only generation over a corpus, turning step-mean attention maps
//! into probe features. Datasets persist as container shards plus a JSON
//! manifest that is rewritten after every shard, so an interrupted harvest
//! resumes at the first unfinished shard.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::corpus::{PromptCorpus, TemplateFamily, TokenRole};
use crate::attention::instruments::InstrumentSet;
use crate::attention::postprocess::normalize_map_for_probe;
use crate::attention::site::{AttnKind, SiteKey};
use crate::attention::store::{CaptureStore, Reduction, Retention, StepKey};
use crate::backend::adapter::{LatentState, ModelAdapter};
use crate::backend::ddim::SamplerConfig;
use crate::error::{Error, Result};
use crate::io::container::{Container, ContainerWriter};

/// Identifies one feature column set: a site plus, for cross maps, the token role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureKey {
    pub kind: AttnKind,
    pub layer: usize,
    pub role: Option<TokenRole>,
}

impl FeatureKey {
    pub fn cross(layer: usize, role: TokenRole) -> Self {
        Self {
            kind: AttnKind::Cross,
            layer,
            role: Some(role),
        }
    }

    pub fn self_attn(layer: usize) -> Self {
        Self {
            kind: AttnKind::SelfAttn,
            layer,
            role: None,
        }
    }

    pub fn name(&self) -> String {
        let site = SiteKey::new(self.kind, self.layer);
        match self.role {
            Some(r) => format!("{site}/{}", r.as_str()),
            None => site.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarvestConfig {
    pub kinds: Vec<AttnKind>,
    /// Token roles for cross features.
    pub roles: Vec<TokenRole>,
    pub sampler: SamplerConfig,
    /// Prompts per persisted shard.
    pub shard_size: usize,
}

impl Default for HarvestConfig {
    fn default() -> Self {
        Self {
            kinds: vec![AttnKind::Cross, AttnKind::SelfAttn],
            roles: vec![TokenRole::EditWord],
            sampler: SamplerConfig::default(),
            shard_size: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub file: String,
    /// Corpus indices `first..first + span` were attempted in this shard.
    pub first: usize,
    pub span: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPrompt {
    pub index: usize,
    pub prompt: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestManifest {
    pub family: TemplateFamily,
    pub backbone: String,
    pub class_labels: Vec<String>,
    pub config: HarvestConfig,
    pub total_prompts: usize,
    pub shards: Vec<ShardInfo>,
    pub skipped: Vec<SkippedPrompt>,
    pub multi_token_words: Vec<String>,
    pub feature_lens: BTreeMap<String, usize>,
    pub complete: bool,
}

impl HarvestManifest {
    fn next_index(&self) -> usize {
        self.shards.last().map_or(0, |s| s.first + s.span)
    }

    fn same_job(&self, other: &HarvestManifest) -> bool {
        self.family == other.family
            && self.backbone == other.backbone
            && self.config == other.config
            && self.total_prompts == other.total_prompts
    }
}

/// Labeled probe features for every requested site and role.
#[derive(Debug, Clone, Default)]
pub struct ProbeDataset {
    pub family: Option<TemplateFamily>,
    pub class_labels: Vec<String>,
    pub labels: Vec<usize>,
    pub prompt_index: Vec<usize>,
    pub features: BTreeMap<FeatureKey, Vec<Vec<f32>>>,
}

impl ProbeDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self, key: FeatureKey) -> Result<&[Vec<f32>]> {
        self.features
            .get(&key)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::validation(format!("dataset has no features for {}", key.name())))
    }

    fn append(&mut self, other: ProbeDataset) {
        self.labels.extend(other.labels);
        self.prompt_index.extend(other.prompt_index);
        for (k, rows) in other.features {
            self.features.entry(k).or_default().extend(rows);
        }
    }
}

fn feature_keys(adapter: &ModelAdapter, cfg: &HarvestConfig) -> Vec<FeatureKey> {
    let mut keys = Vec::new();
    for site in adapter.sites() {
        if !cfg.kinds.contains(&site.kind) {
            continue;
        }
        match site.kind {
            AttnKind::SelfAttn => keys.push(FeatureKey::self_attn(site.index)),
            AttnKind::Cross => keys.extend(cfg.roles.iter().map(|&r| FeatureKey::cross(site.index, r))),
        }
    }
    keys
}

/// Features of one prompt, keyed like the dataset.
pub fn harvest_prompt(
    adapter: &ModelAdapter,
    prompt: &str,
    positions: &dyn Fn(TokenRole) -> Option<usize>,
    cfg: &HarvestConfig,
    seed: u64,
) -> Result<BTreeMap<FeatureKey, Vec<f32>>> {
    let sites: Vec<SiteKey> = adapter
        .sites()
        .iter()
        .filter(|s| cfg.kinds.contains(&s.kind))
        .map(|s| s.key())
        .collect();
    let mut store = CaptureStore::new(Retention::StepMean)
        .with_sites(sites)
        .with_reduction(Reduction {
            last_branch_only: true,
            head_mean: true,
        });
    let sampler = SamplerConfig {
        seed,
        ..cfg.sampler.clone()
    };
    let ctx = adapter.encode_prompt(prompt)?;
    let mut state = LatentState {
        z: adapter.initial_latent(seed)?,
        t_index: sampler.step_count,
    };
    while state.t_index > 0 {
        let mut hook = InstrumentSet::new().capture(&mut store);
        hook.begin_step(state.t_index);
        state = adapter.denoise_step(&state, Some(&ctx), &sampler, &mut hook)?;
    }
    let mut out = BTreeMap::new();
    for key in feature_keys(adapter, cfg) {
        let record = store
            .get_key(StepKey::Mean, SiteKey::new(key.kind, key.layer))?
            .ok_or_else(|| Error::validation(format!("no capture for {}", key.name())))?;
        let position = match key.role {
            Some(role) => Some(positions(role).ok_or_else(|| {
                Error::validation(format!("prompt `{prompt}` has no {} token", role.as_str()))
            })?),
            None => None,
        };
        let f = normalize_map_for_probe(&record, position)?;
        if let Some(bad) = f.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                step: 0,
                what: format!("non-finite feature {bad} at {}", key.name()),
            });
        }
        out.insert(key, f);
    }
    Ok(out)
}

fn write_json_atomic(path: &Path, value: &impl Serialize) -> Result<()> {
    let tmp = path.with_extension("json.partial");
    std::fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

fn write_shard(path: &Path, part: &ProbeDataset) -> Result<()> {
    let dev = Device::Cpu;
    let mut w = ContainerWriter::create(path)?;
    let n = part.len();
    w.add("labels", &Tensor::from_vec(part.labels.iter().map(|&v| v as u32).collect::<Vec<_>>(), n, &dev)?)?;
    w.add(
        "prompt_index",
        &Tensor::from_vec(part.prompt_index.iter().map(|&v| v as u32).collect::<Vec<_>>(), n, &dev)?,
    )?;
    for (key, rows) in &part.features {
        let dim = rows.first().map_or(0, Vec::len);
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        w.add(&key.name(), &Tensor::from_vec(flat, (n, dim), &dev)?)?;
    }
    let keys: Vec<FeatureKey> = part.features.keys().copied().collect();
    w.finish(serde_json::json!({ "keys": keys }))?;
    Ok(())
}

fn read_shard(path: &Path) -> Result<ProbeDataset> {
    let dev = Device::Cpu;
    let c = Container::open(path)?;
    let keys: Vec<FeatureKey> = serde_json::from_value(c.index.metadata["keys"].clone())?;
    let labels: Vec<usize> = c.get("labels", &dev)?.to_vec1::<u32>()?.into_iter().map(|v| v as usize).collect();
    let prompt_index = c
        .get("prompt_index", &dev)?
        .to_vec1::<u32>()?
        .into_iter()
        .map(|v| v as usize)
        .collect();
    let mut features = BTreeMap::new();
    for key in keys {
        let rows: Vec<Vec<f32>> = if labels.is_empty() {
            Vec::new()
        } else {
            c.get(&key.name(), &dev)?.to_vec2()?
        };
        features.insert(key, rows);
    }
    Ok(ProbeDataset {
        family: None,
        class_labels: Vec::new(),
        labels,
        prompt_index,
        features,
    })
}

/// Harvests features for every corpus prompt. With `out_dir`, shards and the
/// manifest are persisted and a matching earlier harvest is resumed.
/// Prompts that fail to generate are skipped and listed in the manifest.
pub fn harvest(
    corpus: &PromptCorpus,
    adapter: &ModelAdapter,
    cfg: &HarvestConfig,
    out_dir: Option<&Path>,
) -> Result<(ProbeDataset, HarvestManifest)> {
    cfg.sampler.validate()?;
    if cfg.shard_size == 0 {
        return Err(Error::validation("shard_size must be positive"));
    }
    let fresh = HarvestManifest {
        family: corpus.template_family,
        backbone: adapter.backbone_id().as_str().to_string(),
        class_labels: corpus.class_labels.clone(),
        config: cfg.clone(),
        total_prompts: corpus.len(),
        shards: Vec::new(),
        skipped: Vec::new(),
        multi_token_words: corpus.multi_token_words(),
        feature_lens: feature_keys(adapter, cfg)
            .into_iter()
            .map(|k| {
                let site = adapter
                    .sites()
                    .iter()
                    .find(|s| s.kind == k.kind && s.index == k.layer)
                    .expect("feature keys come from the site table");
                (k.name(), crate::attention::postprocess::probe_feature_len(site))
            })
            .collect(),
        complete: false,
    };
    let manifest_path: Option<PathBuf> = out_dir.map(|d| d.join("manifest.json"));
    let mut manifest = fresh.clone();
    let mut dataset = ProbeDataset {
        family: Some(corpus.template_family),
        class_labels: corpus.class_labels.clone(),
        ..Default::default()
    };
    if let (Some(dir), Some(path)) = (out_dir, &manifest_path) {
        std::fs::create_dir_all(dir)?;
        if path.exists() {
            let prior: HarvestManifest = serde_json::from_slice(&std::fs::read(path)?)?;
            if prior.same_job(&fresh) {
                for shard in &prior.shards {
                    dataset.append(read_shard(&dir.join(&shard.file))?);
                }
                tracing::info!(shards = prior.shards.len(), "resuming harvest");
                manifest = prior;
            } else {
                return Err(Error::validation(format!(
                    "{} belongs to a different harvest; use an empty directory",
                    path.display()
                )));
            }
        }
    }

    let mut next = manifest.next_index();
    while next < corpus.len() {
        let end = (next + cfg.shard_size).min(corpus.len());
        let mut part = ProbeDataset::default();
        for index in next..end {
            let p = &corpus.rendered_prompts[index];
            match harvest_prompt(adapter, &p.prompt, &|role| p.position(role), cfg, p.seed) {
                Ok(features) => {
                    part.labels.push(p.label);
                    part.prompt_index.push(index);
                    for (k, f) in features {
                        part.features.entry(k).or_default().push(f);
                    }
                }
                Err(e) => {
                    tracing::warn!(index, prompt = %p.prompt, error = %e, "skipping prompt");
                    manifest.skipped.push(SkippedPrompt {
                        index,
                        prompt: p.prompt.clone(),
                        error: e.to_string(),
                    });
                }
            }
        }
        if let (Some(dir), Some(path)) = (out_dir, &manifest_path) {
            let file = format!("shard-{:05}.atl", manifest.shards.len());
            write_shard(&dir.join(&file), &part)?;
            manifest.shards.push(ShardInfo {
                file,
                first: next,
                span: end - next,
                samples: part.len(),
            });
            write_json_atomic(path, &manifest)?;
        } else {
            manifest.shards.push(ShardInfo {
                file: String::new(),
                first: next,
                span: end - next,
                samples: part.len(),
            });
        }
        dataset.append(part);
        next = end;
    }
    manifest.complete = true;
    if let Some(path) = &manifest_path {
        write_json_atomic(path, &manifest)?;
    }
    Ok((dataset, manifest))
}

/// Loads a persisted harvest.
pub fn load_dataset(dir: &Path) -> Result<(ProbeDataset, HarvestManifest)> {
    let manifest: HarvestManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let mut dataset = ProbeDataset {
        family: Some(manifest.family),
        class_labels: manifest.class_labels.clone(),
        ..Default::default()
    };
    for shard in &manifest.shards {
        dataset.append(read_shard(&dir.join(&shard.file))?);
    }
    Ok((dataset, manifest))
}
