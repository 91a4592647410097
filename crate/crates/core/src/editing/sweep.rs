use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::fpe::{active_steps, prepare_generated, prepare_real, PairedRun, SourceCache};
use super::job::{EditJob, EditSource};
use super::null_text::NullTextState;
use crate::attention::policy::InjectionPolicy;
use crate::attention::site::{AttnKind, SiteKey};
use crate::backend::adapter::ModelAdapter;
use crate::error::{Error, Result};
use crate::io::image::{contact_sheet, read_rgb, write_png};

/// Which maps a sweep cell replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Self maps at the cell's sites over the cell's ratio.
    #[serde(rename = "self")]
    SelfOnly,
    /// Cross maps at the cell's sites over the cell's ratio.
    #[serde(rename = "cross")]
    CrossOnly,
    /// Cross maps at every site over a fixed ratio, plus self maps at the
    /// cell's sites over the cell's ratio.
    #[serde(rename = "both")]
    CrossFixedSelfVarying,
}

impl SweepMode {
    fn label(self) -> &'static str {
        match self {
            SweepMode::SelfOnly => "self",
            SweepMode::CrossOnly => "cross",
            SweepMode::CrossFixedSelfVarying => "both",
        }
    }
}

fn default_cross_fixed() -> f64 {
    0.8
}

/// Rows are `modes x site_sets`, columns are `ratios`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub modes: Vec<SweepMode>,
    pub site_sets: Vec<Vec<usize>>,
    pub ratios: Vec<f64>,
    /// Cross ratio of [`SweepMode::CrossFixedSelfVarying`] rows.
    #[serde(default = "default_cross_fixed")]
    pub cross_fixed_ratio: f64,
}

impl SweepGrid {
    /// Self-only rows over one site set.
    pub fn self_ratios(sites: impl IntoIterator<Item = usize>, ratios: &[f64]) -> Self {
        Self {
            modes: vec![SweepMode::SelfOnly],
            site_sets: vec![sites.into_iter().collect()],
            ratios: ratios.to_vec(),
            cross_fixed_ratio: default_cross_fixed(),
        }
    }

    pub fn rows(&self) -> usize {
        self.modes.len() * self.site_sets.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.site_sets.is_empty() || self.ratios.is_empty() {
            return Err(Error::validation("sweep grid must have at least one mode, site set and ratio"));
        }
        Ok(())
    }

    /// Policy of one cell, derived from the base job's policy.
    pub fn cell_policy(&self, base: &InjectionPolicy, mode: SweepMode, sites: &[usize], ratio: f64) -> InjectionPolicy {
        let mut p = base.clone();
        match mode {
            SweepMode::SelfOnly => {
                p.kinds = BTreeSet::from([AttnKind::SelfAttn]);
                p.site_indices = sites.to_vec();
                p.replace_ratio = ratio;
            }
            SweepMode::CrossOnly => {
                p.kinds = BTreeSet::from([AttnKind::Cross]);
                p.cross_site_indices = Some(sites.to_vec());
                p.cross_replace_ratio = Some(ratio);
                p.replace_ratio = ratio;
            }
            SweepMode::CrossFixedSelfVarying => {
                p.kinds = BTreeSet::from([AttnKind::SelfAttn, AttnKind::Cross]);
                p.site_indices = sites.to_vec();
                p.replace_ratio = ratio;
                p.cross_site_indices = None;
                p.cross_replace_ratio = Some(self.cross_fixed_ratio);
            }
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub row: usize,
    pub column: usize,
    pub mode: SweepMode,
    pub sites: Vec<usize>,
    pub ratio: f64,
    /// Path relative to the sweep directory; absent when the cell failed.
    pub image: Option<String>,
    pub error: Option<String>,
    pub edit_seconds: f64,
    pub replaced_self: usize,
    pub replaced_cross: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub grid: SweepGrid,
    pub rows: Vec<String>,
    pub cells: Vec<SweepCell>,
    pub source_image: String,
    /// Whether source maps were computed once and shared by every cell.
    pub source_cached: bool,
}

impl SweepManifest {
    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    /// Largest source cache kept in memory; larger sweeps rerun the source
    /// branch per cell.
    pub cache_budget_bytes: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            cache_budget_bytes: 512 << 20,
        }
    }
}

/// Edited image and counters of one cell.
struct CellResult {
    image: RgbImage,
    replaced_self: usize,
    replaced_cross: usize,
}

/// Runs every cell of `grid` against the source of `base`, writing
/// `cells/*.png`, `grid.png`, `source.png` and `manifest.json` to `out_dir`.
pub fn ablation_sweep(
    adapter: &ModelAdapter,
    base: &EditJob,
    grid: &SweepGrid,
    out_dir: &Path,
    opts: SweepOptions,
) -> Result<SweepManifest> {
    grid.validate()?;
    base.validate(adapter.sites_of(AttnKind::SelfAttn).count())?;
    for &r in &grid.ratios {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::validation(format!("sweep ratio {r} outside [0, 1]")));
        }
    }
    std::fs::create_dir_all(out_dir.join("cells"))?;

    let mut specs = Vec::new();
    for (m, &mode) in grid.modes.iter().enumerate() {
        for (s, sites) in grid.site_sets.iter().enumerate() {
            for (c, &ratio) in grid.ratios.iter().enumerate() {
                let row = m * grid.site_sets.len() + s;
                specs.push((row, c, mode, sites.clone(), ratio, grid.cell_policy(&base.policy, mode, sites, ratio)));
            }
        }
    }
    let any_cross = specs.iter().any(|s| s.2 != SweepMode::SelfOnly);
    let has_prompt = base.source_prompt().is_some();

    let mut real = base.real.clone();
    if any_cross && has_prompt {
        real.condition_source_on_prompt = true;
    }
    let (template, null_text): (PairedRun<'_>, Option<NullTextState>) = match &base.source {
        EditSource::SeededPrompt { seed, prompt } => (
            prepare_generated(adapter, *seed, prompt, &base.target_prompt, &base.sampler, &base.policy)?,
            None,
        ),
        EditSource::RealImage { path, prompt } => {
            let image = read_rgb(path)?;
            let p = prepare_real(
                adapter,
                &image,
                prompt.as_deref(),
                &base.target_prompt,
                &base.sampler,
                &base.policy,
                &real,
            )?;
            (p.run, p.null_text)
        }
    };
    let nulls = null_text.as_ref().map(|s| s.per_step_null_embeddings.as_slice());
    let template = PairedRun { nulls, ..template };

    let mut keys: BTreeSet<SiteKey> = BTreeSet::new();
    let mut steps = 0;
    for spec in &specs {
        keys.extend(spec.5.selected(adapter.sites()).map(|s| s.key()));
        steps = steps.max(active_steps(&spec.5, base.sampler.step_count));
    }
    let keys: Vec<SiteKey> = keys.into_iter().collect();
    let cache: Option<SourceCache> = if template.cache_bytes(&keys, steps) <= opts.cache_budget_bytes {
        Some(template.capture_source(&keys, steps)?)
    } else {
        tracing::info!("source cache exceeds budget, running cells in lockstep");
        None
    };

    let source_latent = match &cache {
        Some(c) => c.source_latent.clone(),
        None => {
            let noop = InjectionPolicy::noop();
            let run = PairedRun {
                policy: &noop,
                ..template.clone()
            };
            run.run(None, None)?.source_latent
        }
    };
    let source_image = adapter.decode_latent(&source_latent)?;
    write_png(&source_image, &out_dir.join("source.png"))?;

    let columns = grid.ratios.len();
    let mut cells = Vec::with_capacity(specs.len());
    let mut sheet: Vec<Option<RgbImage>> = vec![None; grid.rows() * columns];
    for (row, column, mode, sites, ratio, policy) in specs {
        let started = Instant::now();
        let result = (|| -> Result<CellResult> {
            if mode != SweepMode::SelfOnly && !has_prompt {
                return Err(Error::validation("cross-mode cells require a source prompt"));
            }
            policy.validate(adapter.sites_of(AttnKind::SelfAttn).count())?;
            let run = PairedRun {
                policy: &policy,
                ..template.clone()
            };
            let out = match &cache {
                Some(c) => run.run_target_cached(c, None)?,
                None => run.run(None, None)?,
            };
            Ok(CellResult {
                image: adapter.decode_latent(&out.target_latent)?,
                replaced_self: out.replaced_self,
                replaced_cross: out.replaced_cross,
            })
        })();
        let mut cell = SweepCell {
            row,
            column,
            mode,
            sites,
            ratio,
            image: None,
            error: None,
            edit_seconds: 0.0,
            replaced_self: 0,
            replaced_cross: 0,
        };
        match result {
            Ok(r) => {
                let name = format!("cells/r{row:02}_c{column:02}.png");
                write_png(&r.image, &out_dir.join(&name))?;
                cell.image = Some(name);
                cell.replaced_self = r.replaced_self;
                cell.replaced_cross = r.replaced_cross;
                sheet[row * columns + column] = Some(r.image);
            }
            Err(e) => {
                tracing::warn!(row, column, error = %e, "sweep cell failed");
                cell.error = Some(e.to_string());
            }
        }
        cell.edit_seconds = started.elapsed().as_secs_f64();
        cells.push(cell);
    }

    let (w, h) = adapter.image_size();
    write_png(&contact_sheet(&sheet, columns, w, h), &out_dir.join("grid.png"))?;
    let rows = grid
        .modes
        .iter()
        .flat_map(|m| grid.site_sets.iter().map(move |s| format!("{} {:?}", m.label(), s)))
        .collect();
    let manifest = SweepManifest {
        grid: grid.clone(),
        rows,
        cells,
        source_image: "source.png".into(),
        source_cached: cache.is_some(),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let tmp: PathBuf = path.with_extension("json.partial");
    std::fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}
