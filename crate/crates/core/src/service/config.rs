//! Toolkit configuration: defaults, a plain-text `key = value` file, and
//! environment overrides.
//!
//! ```text
//! # attnlab.conf
//! backbone = sd15
//! device = auto
//! weights_root = /models/sd15
//! storage_root = ./attnlab-data
//! port = 8470
//! workers = 1
//! queue_capacity = 64
//! policy.kinds = self
//! policy.sites = 4-14
//! policy.replace_ratio = 0.6
//! sampler.steps = 50
//! sampler.guidance = 7.5
//! sampler.eta = 0
//! sampler.seed = 0
//! sampler.schedule = scaled_linear
//! ```
//!
//! `ATTNLAB_STORAGE_ROOT` and `ATTNLAB_SD15_ROOT` override `storage_root` and
//! `weights_root`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::attention::policy::InjectionPolicy;
use crate::attention::site::AttnKind;
use crate::backend::adapter::{BackboneId, LoadOptions};
use crate::backend::ddim::{SamplerConfig, ScheduleId};
use crate::error::{Error, Result};

pub const ENV_STORAGE_ROOT: &str = "ATTNLAB_STORAGE_ROOT";
pub const ENV_SD15_ROOT: &str = "ATTNLAB_SD15_ROOT";

#[derive(Debug, Clone, PartialEq)]
pub struct ToolkitConfig {
    pub backbone_id: String,
    pub device_hint: String,
    pub weights_root: Option<PathBuf>,
    pub half_precision: bool,
    pub fixture_seed: u64,
    pub default_policy: InjectionPolicy,
    pub sampler: SamplerConfig,
    pub storage_root: PathBuf,
    pub service_port: u16,
    pub workers: usize,
    pub queue_capacity: usize,
}

impl Default for ToolkitConfig {
    fn default() -> Self {
        Self {
            backbone_id: BackboneId::Sd15.as_str().to_string(),
            device_hint: "auto".into(),
            weights_root: None,
            half_precision: false,
            fixture_seed: 0,
            default_policy: InjectionPolicy::default(),
            sampler: SamplerConfig::default(),
            storage_root: PathBuf::from("attnlab-data"),
            service_port: 8470,
            workers: 1,
            queue_capacity: 64,
        }
    }
}

/// Parses a site list such as `4-14` or `1,3,5-7`.
pub fn parse_sites(v: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in v.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || Error::validation(format!("policy.sites: cannot parse `{part}`"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    Ok(out)
}

fn format_sites(sites: &[usize]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < sites.len() {
        let mut j = i;
        while j + 1 < sites.len() && sites[j + 1] == sites[j] + 1 {
            j += 1;
        }
        parts.push(if j > i {
            format!("{}-{}", sites[i], sites[j])
        } else {
            sites[i].to_string()
        });
        i = j + 1;
    }
    parts.join(",")
}

impl ToolkitConfig {
    /// Defaults, then `path` if given, then environment overrides; validated.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::validation(format!("cannot read config {}: {e}", p.display())))?;
            cfg.apply_text(&text)?;
        }
        cfg.apply_env(|k| std::env::var(k).ok());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(v) = get(ENV_STORAGE_ROOT).filter(|v| !v.is_empty()) {
            self.storage_root = PathBuf::from(v);
        }
        if let Some(v) = get(ENV_SD15_ROOT).filter(|v| !v.is_empty()) {
            self.weights_root = Some(PathBuf::from(v));
        }
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("config line {}: expected `key = value`", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::validation(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::validation(format!("{key}: cannot parse `{v}`")))
        }
        match key {
            "backbone" => {
                let id: BackboneId = value.parse()?;
                // Sites still at the old backbone's default follow the new backbone.
                if let Ok(old) = self.backbone() {
                    if self.default_policy.site_indices == old.default_sites() {
                        self.default_policy.site_indices = id.default_sites();
                    }
                }
                self.backbone_id = value.to_string();
            }
            "device" => self.device_hint = value.to_string(),
            "weights_root" => self.weights_root = (!value.is_empty()).then(|| PathBuf::from(value)),
            "half_precision" => self.half_precision = num(key, value)?,
            "fixture_seed" => self.fixture_seed = num(key, value)?,
            "storage_root" => self.storage_root = PathBuf::from(value),
            "port" => self.service_port = num(key, value)?,
            "workers" => self.workers = num(key, value)?,
            "queue_capacity" => self.queue_capacity = num(key, value)?,
            "policy.kinds" => {
                self.default_policy.kinds = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse::<AttnKind>)
                    .collect::<Result<BTreeSet<_>>>()?
            }
            "policy.sites" => self.default_policy.site_indices = parse_sites(value)?,
            "policy.replace_ratio" => self.default_policy.replace_ratio = num(key, value)?,
            "sampler.steps" => self.sampler.step_count = num(key, value)?,
            "sampler.guidance" => self.sampler.guidance_scale = num(key, value)?,
            "sampler.eta" => self.sampler.eta = num(key, value)?,
            "sampler.seed" => self.sampler.seed = num(key, value)?,
            "sampler.schedule" => {
                self.sampler.schedule_id = match value {
                    "scaled_linear" => ScheduleId::ScaledLinear,
                    "linear" => ScheduleId::Linear,
                    other => return Err(Error::validation(format!("sampler.schedule: unknown `{other}`"))),
                }
            }
            other => return Err(Error::validation(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let backbone: BackboneId = self.backbone_id.parse()?;
        self.sampler.validate()?;
        let site_count = backbone.site_table().iter().filter(|s| s.kind == AttnKind::SelfAttn).count();
        self.default_policy.validate(site_count)?;
        if self.workers == 0 {
            return Err(Error::validation("workers must be >= 1"));
        }
        if self.queue_capacity == 0 {
            return Err(Error::validation("queue_capacity must be >= 1"));
        }
        Ok(())
    }

    pub fn backbone(&self) -> Result<BackboneId> {
        self.backbone_id.parse()
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            weights_root: self.weights_root.clone(),
            half_precision: self.half_precision,
            fixture_seed: self.fixture_seed,
        }
    }

    /// The effective configuration in the file format.
    pub fn show(&self) -> String {
        let kinds: Vec<&str> = self.default_policy.kinds.iter().map(|k| k.as_str()).collect();
        let schedule = match self.sampler.schedule_id {
            ScheduleId::ScaledLinear => "scaled_linear",
            ScheduleId::Linear => "linear",
        };
        [
            format!("backbone = {}", self.backbone_id),
            format!("device = {}", self.device_hint),
            format!(
                "weights_root = {}",
                self.weights_root.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
            ),
            format!("half_precision = {}", self.half_precision),
            format!("fixture_seed = {}", self.fixture_seed),
            format!("storage_root = {}", self.storage_root.display()),
            format!("port = {}", self.service_port),
            format!("workers = {}", self.workers),
            format!("queue_capacity = {}", self.queue_capacity),
            format!("policy.kinds = {}", kinds.join(",")),
            format!("policy.sites = {}", format_sites(&self.default_policy.site_indices)),
            format!("policy.replace_ratio = {}", self.default_policy.replace_ratio),
            format!("sampler.steps = {}", self.sampler.step_count),
            format!("sampler.guidance = {}", self.sampler.guidance_scale),
            format!("sampler.eta = {}", self.sampler.eta),
            format!("sampler.seed = {}", self.sampler.seed),
            format!("sampler.schedule = {schedule}"),
        ]
        .join("\n")
            + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn show_round_trips_through_the_parser() {
        let mut cfg = ToolkitConfig::default();
        cfg.set("policy.sites", "1,3-5,9").unwrap();
        cfg.set("backbone", "tiny-test").unwrap();
        let mut back = ToolkitConfig::default();
        back.apply_text(&cfg.show()).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.show().contains("policy.sites = 1,3-5,9\n"));
    }

    #[test]
    fn default_sites_follow_the_backbone() {
        let mut cfg = ToolkitConfig::default();
        cfg.set("backbone", "tiny-test").unwrap();
        assert_eq!(cfg.default_policy.site_indices, vec![1, 2, 3, 4]);
        cfg.validate().unwrap();
        let mut back = ToolkitConfig::default();
        back.apply_text(&cfg.show()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn defaults_use_sites_4_to_14() {
        let cfg = ToolkitConfig::default();
        assert!(cfg.show().contains("policy.sites = 4-14\n"));
        assert!(cfg.show().contains("policy.replace_ratio = 0.6\n"));
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_bad_input() {
        let mut cfg = ToolkitConfig::default();
        assert!(cfg.apply_text("nonsense").is_err());
        assert!(cfg.apply_text("color = red").unwrap_err().to_string().contains("color"));
        cfg.set("policy.replace_ratio", "2").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn env_overrides_paths() {
        let mut cfg = ToolkitConfig::default();
        cfg.apply_env(|k| match k {
            ENV_STORAGE_ROOT => Some("/tmp/store".into()),
            ENV_SD15_ROOT => Some("/w".into()),
            _ => None,
        });
        assert_eq!(cfg.storage_root, PathBuf::from("/tmp/store"));
        assert_eq!(cfg.weights_root, Some(PathBuf::from("/w")));
    }
}
