use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::site::{AttentionSite, AttnKind};
use crate::error::{Error, Result};

fn default_kinds() -> BTreeSet<AttnKind> {
    BTreeSet::from([AttnKind::SelfAttn])
}

fn default_sites() -> Vec<usize> {
    (4..=14).collect()
}

fn default_ratio() -> f64 {
    0.6
}

/// Which maps of a target run are replaced by the source run's maps.
///
/// Steps are counted in denoising order: a ratio `r` over `T` steps covers
/// the first `floor(r * T)` steps, starting from the noisiest latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionPolicy {
    #[serde(default = "default_kinds")]
    pub kinds: BTreeSet<AttnKind>,
    /// Self-attention sites to replace (1-based).
    #[serde(default = "default_sites")]
    pub site_indices: Vec<usize>,
    #[serde(default = "default_ratio")]
    pub replace_ratio: f64,
    /// Cross-attention sites to replace; all sites when absent.
    #[serde(default)]
    pub cross_site_indices: Option<Vec<usize>>,
    /// Window for cross replacement; `replace_ratio` when absent.
    #[serde(default)]
    pub cross_replace_ratio: Option<f64>,
    /// For each target token position, the source position whose column
    /// replaces it (`null` keeps the live column). Identity over the shorter
    /// prompt window when absent.
    #[serde(default)]
    pub token_map: Option<Vec<Option<usize>>>,
}

impl Default for InjectionPolicy {
    fn default() -> Self {
        Self {
            kinds: default_kinds(),
            site_indices: default_sites(),
            replace_ratio: default_ratio(),
            cross_site_indices: None,
            cross_replace_ratio: None,
            token_map: None,
        }
    }
}

/// Number of leading denoising steps covered by `ratio` over `step_count` steps.
pub fn window_len(ratio: f64, step_count: usize) -> usize {
    // The epsilon keeps ratios like 0.6 * 50 from flooring to 29.
    ((ratio * step_count as f64) + 1e-9).floor().min(step_count as f64) as usize
}

impl InjectionPolicy {
    /// A policy that never replaces anything.
    pub fn noop() -> Self {
        Self {
            kinds: BTreeSet::new(),
            ..Default::default()
        }
    }

    pub fn self_only(site_indices: impl IntoIterator<Item = usize>, ratio: f64) -> Self {
        Self {
            site_indices: site_indices.into_iter().collect(),
            replace_ratio: ratio,
            ..Default::default()
        }
    }

    pub fn is_noop(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn validate(&self, site_count: usize) -> Result<()> {
        let check_ratio = |name: &str, r: f64| {
            if (0.0..=1.0).contains(&r) {
                Ok(())
            } else {
                Err(Error::validation(format!("{name} must lie in [0, 1], got {r}")))
            }
        };
        check_ratio("replace_ratio", self.replace_ratio)?;
        if let Some(r) = self.cross_replace_ratio {
            check_ratio("cross_replace_ratio", r)?;
        }
        let check_sites = |name: &str, sites: &[usize]| {
            match sites.iter().find(|&&i| i == 0 || i > site_count) {
                Some(bad) => Err(Error::validation(format!(
                    "{name} entry {bad} outside 1..={site_count}"
                ))),
                None => Ok(()),
            }
        };
        check_sites("site_indices", &self.site_indices)?;
        if let Some(c) = &self.cross_site_indices {
            check_sites("cross_site_indices", c)?;
        }
        Ok(())
    }

    fn ratio_for(&self, kind: AttnKind) -> f64 {
        match kind {
            AttnKind::SelfAttn => self.replace_ratio,
            AttnKind::Cross => self.cross_replace_ratio.unwrap_or(self.replace_ratio),
        }
    }

    fn covers_site(&self, kind: AttnKind, index: usize) -> bool {
        if !self.kinds.contains(&kind) {
            return false;
        }
        match kind {
            AttnKind::SelfAttn => self.site_indices.contains(&index),
            AttnKind::Cross => self.cross_site_indices.as_ref().map_or(true, |s| s.contains(&index)),
        }
    }

    /// Whether the step that denoises from `t_index` lies in `kind`'s window.
    pub fn step_active(&self, kind: AttnKind, t_index: usize, step_count: usize) -> bool {
        if t_index == 0 || t_index > step_count {
            return false;
        }
        let position = step_count - t_index;
        position < window_len(self.ratio_for(kind), step_count)
    }

    /// Whether the map at `site` is replaced while denoising from `t_index`.
    pub fn active(&self, site: &AttentionSite, t_index: usize, step_count: usize) -> bool {
        self.covers_site(site.kind, site.index) && self.step_active(site.kind, t_index, step_count)
    }

    /// Whether any site is replaced while denoising from `t_index`.
    pub fn any_active(&self, t_index: usize, step_count: usize) -> bool {
        self.kinds.iter().any(|&k| self.step_active(k, t_index, step_count))
    }

    /// Sites of `table` the policy can touch at some step.
    pub fn selected<'a>(&'a self, table: &'a [AttentionSite]) -> impl Iterator<Item = &'a AttentionSite> + 'a {
        table.iter().filter(move |s| self.covers_site(s.kind, s.index))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let p = InjectionPolicy::default();
        assert_eq!(p.site_indices, (4..=14).collect::<Vec<_>>());
        assert_eq!(p.replace_ratio, 0.6);
        let parsed: InjectionPolicy = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed, p);
        let parsed: InjectionPolicy = serde_json::from_str(r#"{"kinds": ["self", "cross"]}"#).unwrap();
        assert_eq!(parsed.kinds.len(), 2);
    }

    #[test]
    fn window_counts_from_noisiest_step() {
        let p = InjectionPolicy::self_only(1..=16, 0.6);
        let active: Vec<usize> = (1..=50).rev().filter(|&t| p.step_active(AttnKind::SelfAttn, t, 50)).collect();
        assert_eq!(active.len(), 30);
        assert_eq!(active[0], 50);
        assert_eq!(*active.last().unwrap(), 21);
        assert_eq!(window_len(0.25, 10), 2);
        assert_eq!(window_len(1.0, 10), 10);
        assert_eq!(window_len(0.0, 10), 0);
    }

    #[test]
    fn noop_and_validation() {
        let p = InjectionPolicy::noop();
        assert!(!p.any_active(10, 10));
        let bad = InjectionPolicy {
            replace_ratio: 1.5,
            ..Default::default()
        };
        assert!(bad.validate(16).unwrap_err().to_string().contains("replace_ratio"));
        let bad = InjectionPolicy::self_only([17], 0.5);
        assert!(bad.validate(16).is_err());
    }
}
