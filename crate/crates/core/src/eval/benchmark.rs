use std::fmt::Write as _;
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::clip::ClipEncoder;
use super::datasets::{EditPair, PairSource};
use super::metrics::{clip_directional_similarity, clip_score};
use crate::attention::policy::InjectionPolicy;
use crate::backend::adapter::ModelAdapter;
use crate::backend::ddim::SamplerConfig;
use crate::editing::fpe::{run_edit, EditOutcome};
use crate::editing::job::{EditJob, EditSource, RealOptions};
use crate::error::Result;
use crate::io::image::read_rgb;

/// Edit settings shared by every pair of a benchmark.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub sampler: SamplerConfig,
    pub policy: InjectionPolicy,
    pub real: RealOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub pair_id: String,
    pub source_prompt: String,
    pub target_prompt: String,
    pub cs: Option<f64>,
    pub cds: Option<f64>,
    /// Wall time around the edit call only.
    pub edit_seconds: f64,
    /// Sum of the edit's measured denoising-step times.
    pub step_seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub encoder: String,
    pub backbone: String,
    pub rows: Vec<MetricRow>,
    pub successes: usize,
    pub failures: usize,
    pub mean_cs: f64,
    pub mean_cds: f64,
    /// Pairs whose CDS was undefined (zero edit direction).
    pub undefined_cds: usize,
    pub mean_edit_seconds: f64,
}

impl MetricTable {
    pub const CSV_HEADER: &'static str = "pair_id,source_prompt,target_prompt,cs,cds,edit_seconds,step_seconds,error";

    pub fn to_csv(&self) -> String {
        let quote = |s: &str| format!("\"{}\"", s.replace('"', "\"\""));
        let num = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6},{:.6},{}",
                r.pair_id,
                quote(&r.source_prompt),
                quote(&r.target_prompt),
                num(r.cs),
                num(r.cds),
                r.edit_seconds,
                r.step_seconds,
                r.error.as_deref().map(quote).unwrap_or_default()
            );
        }
        out
    }

    /// One-line summary: method, CS, CDS, seconds per image, counts.
    pub fn summary(&self) -> String {
        format!(
            "method  CS      CDS     s/img\nFPE     {:.2}  {:.4}  {:.2}\n({} of {} pairs succeeded; encoder {}; {} undefined CDS)\n",
            self.mean_cs,
            self.mean_cds,
            self.mean_edit_seconds,
            self.successes,
            self.rows.len(),
            self.encoder,
            self.undefined_cds
        )
    }
}

fn job_for(pair: &EditPair, method: &MethodConfig) -> EditJob {
    let source = match &pair.source {
        PairSource::SeededPrompt { seed, prompt } => EditSource::SeededPrompt {
            seed: *seed,
            prompt: prompt.clone(),
        },
        PairSource::Image { path, prompt } => EditSource::RealImage {
            path: path.clone(),
            prompt: Some(prompt.clone()),
        },
    };
    let sampler = match &pair.source {
        PairSource::SeededPrompt { seed, .. } => SamplerConfig {
            seed: *seed,
            ..method.sampler.clone()
        },
        PairSource::Image { .. } => method.sampler.clone(),
    };
    EditJob {
        source,
        target_prompt: pair.target_prompt.clone(),
        sampler,
        policy: method.policy.clone(),
        real: method.real.clone(),
        capture: None,
    }
}

fn score(
    pair: &EditPair,
    outcome: &EditOutcome,
    encoder: &dyn ClipEncoder,
) -> Result<(Option<f64>, Option<f64>)> {
    let dst_img = encoder.embed_image(&outcome.edited_image)?;
    let src_image: RgbImage = match &pair.source {
        PairSource::Image { path, .. } => read_rgb(path)?,
        PairSource::SeededPrompt { .. } => outcome.source_image.clone(),
    };
    let src_img = encoder.embed_image(&src_image)?;
    let dst_txt = encoder.embed_text(&pair.target_prompt)?;
    let src_txt = encoder.embed_text(pair.source_prompt())?;
    Ok((
        clip_score(&dst_img, &dst_txt),
        clip_directional_similarity(&src_img, &dst_img, &src_txt, &dst_txt),
    ))
}

/// Edits and scores every pair in order. Failed pairs are kept in the table
/// with their error and excluded from the means.
pub fn benchmark_run(
    adapter: &ModelAdapter,
    pairs: &[EditPair],
    method: &MethodConfig,
    encoder: &dyn ClipEncoder,
) -> Result<MetricTable> {
    let mut rows = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let job = job_for(pair, method);
        let started = Instant::now();
        let result = run_edit(adapter, &job);
        let edit_seconds = started.elapsed().as_secs_f64();
        let mut row = MetricRow {
            pair_id: pair.pair_id.clone(),
            source_prompt: pair.source_prompt().to_string(),
            target_prompt: pair.target_prompt.clone(),
            cs: None,
            cds: None,
            edit_seconds,
            step_seconds: 0.0,
            error: None,
        };
        match result.and_then(|o| score(pair, &o, encoder).map(|s| (o, s))) {
            Ok((outcome, (cs, cds))) => {
                row.step_seconds = outcome.step_seconds.iter().sum();
                row.cs = cs;
                row.cds = cds;
            }
            Err(e) => {
                tracing::warn!(pair = %pair.pair_id, error = %e, "pair failed");
                row.error = Some(e.to_string());
            }
        }
        rows.push(row);
    }
    let ok: Vec<&MetricRow> = rows.iter().filter(|r| r.error.is_none()).collect();
    let mean = |v: Vec<f64>| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let cds: Vec<f64> = ok.iter().filter_map(|r| r.cds).collect();
    Ok(MetricTable {
        encoder: encoder.id().to_string(),
        backbone: adapter.backbone_id().as_str().to_string(),
        successes: ok.len(),
        failures: rows.len() - ok.len(),
        mean_cs: mean(ok.iter().filter_map(|r| r.cs).collect()),
        undefined_cds: ok.len() - cds.len(),
        mean_cds: mean(cds),
        mean_edit_seconds: mean(ok.iter().map(|r| r.edit_seconds).collect()),
        rows,
    })
}
