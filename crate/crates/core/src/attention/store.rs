//! Captured attention maps keyed by step and site.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::site::{AttentionSite, AttnKind, SiteKey};
use crate::error::{Error, Result};

/// Which captures a store keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Retention {
    /// One record per `(step, site)`.
    #[default]
    AllSteps,
    /// One record per site holding the arithmetic mean over captured steps.
    StepMean,
    /// Only the most recent step; older records are dropped when a new step arrives.
    LatestStep,
}

/// Storage precision of retained maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StoragePrecision {
    #[default]
    F32,
    /// Halves memory. Maps round to about 3 significant digits, so row sums
    /// drift by up to ~1e-3 and replayed maps are no longer bit-exact.
    F16,
}

/// Step component of a record key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKey {
    At(usize),
    Mean,
}

/// One captured map. `matrix` is `[batch, heads, queries, keys]` where batch
/// is the guidance branch (`[uncond, cond]`, or a single pass).
#[derive(Debug, Clone)]
pub struct AttentionMapRecord {
    pub site: AttentionSite,
    pub step: StepKey,
    pub heads: usize,
    pub matrix: Tensor,
}

/// Memory reductions applied at capture time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Reduction {
    /// Keep only the last batch entry (the conditional branch under guidance).
    pub last_branch_only: bool,
    /// Average over heads; stored maps then have one head.
    pub head_mean: bool,
}

#[derive(Debug, Clone)]
struct Entry {
    site: AttentionSite,
    sum: Tensor,
    count: usize,
}

/// Single-writer store of attention maps.
#[derive(Debug, Clone, Default)]
pub struct CaptureStore {
    retention: Retention,
    precision: StoragePrecision,
    reduction: Reduction,
    sites: Option<BTreeSet<SiteKey>>,
    entries: BTreeMap<(StepKey, SiteKey), Entry>,
    latest: Option<usize>,
}

impl CaptureStore {
    pub fn new(retention: Retention) -> Self {
        Self {
            retention,
            ..Default::default()
        }
    }

    /// Restricts capture to the given sites.
    pub fn with_sites(mut self, sites: impl IntoIterator<Item = SiteKey>) -> Self {
        self.sites = Some(sites.into_iter().collect());
        self
    }

    /// Restricts capture to one kind of attention.
    pub fn with_kind(self, kind: AttnKind, sites: &[AttentionSite]) -> Self {
        self.with_sites(sites.iter().filter(|s| s.kind == kind).map(|s| s.key()))
    }

    pub fn with_precision(mut self, precision: StoragePrecision) -> Self {
        self.precision = precision;
        self
    }

    pub fn with_reduction(mut self, reduction: Reduction) -> Self {
        self.reduction = reduction;
        self
    }

    pub fn retention(&self) -> Retention {
        self.retention
    }

    pub fn precision(&self) -> StoragePrecision {
        self.precision
    }

    pub fn wants(&self, site: &AttentionSite) -> bool {
        self.sites.as_ref().map_or(true, |s| s.contains(&site.key()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stores the map computed at `site` while denoising from `t_index`.
    pub fn record(&mut self, site: &AttentionSite, t_index: usize, probs: &Tensor) -> Result<()> {
        if !self.wants(site) {
            return Ok(());
        }
        let mut m = probs.clone();
        if self.reduction.last_branch_only {
            let b = m.dim(0)?;
            m = m.narrow(0, b - 1, 1)?;
        }
        if self.reduction.head_mean {
            m = m.to_dtype(DType::F32)?.mean_keepdim(1)?;
        }
        let key_step = match self.retention {
            Retention::AllSteps => StepKey::At(t_index),
            Retention::LatestStep => {
                if self.latest != Some(t_index) {
                    self.entries.clear();
                    self.latest = Some(t_index);
                }
                StepKey::At(t_index)
            }
            Retention::StepMean => StepKey::Mean,
        };
        let key = (key_step, site.key());
        match (self.retention, self.entries.get_mut(&key)) {
            (Retention::StepMean, Some(entry)) => {
                entry.sum = (&entry.sum + m.to_dtype(DType::F32)?)?;
                entry.count += 1;
            }
            _ => {
                let sum = match self.retention {
                    Retention::StepMean => m.to_dtype(DType::F32)?,
                    _ => m,
                };
                self.entries.insert(
                    key,
                    Entry {
                        site: *site,
                        sum: self.store_precision(sum)?,
                        count: 1,
                    },
                );
            }
        }
        Ok(())
    }

    fn store_precision(&self, t: Tensor) -> Result<Tensor> {
        Ok(match (self.precision, self.retention) {
            // Running sums stay in f32; precision applies on read.
            (_, Retention::StepMean) => t,
            (StoragePrecision::F16, _) => t.to_dtype(DType::F16)?,
            (StoragePrecision::F32, _) => t,
        })
    }

    fn finish(&self, e: &Entry, step: StepKey) -> Result<AttentionMapRecord> {
        let matrix = if e.count > 1 {
            (&e.sum / e.count as f64)?
        } else {
            e.sum.clone()
        };
        let matrix = match (self.precision, self.retention) {
            (StoragePrecision::F16, Retention::StepMean) => matrix.to_dtype(DType::F16)?,
            _ => matrix,
        };
        Ok(AttentionMapRecord {
            site: e.site,
            step,
            heads: matrix.dim(1)?,
            matrix,
        })
    }

    /// The record for `(t_index, site)`, or the step mean under `StepMean` retention.
    pub fn get(&self, t_index: usize, site: SiteKey) -> Result<Option<AttentionMapRecord>> {
        let step = match self.retention {
            Retention::StepMean => StepKey::Mean,
            _ => StepKey::At(t_index),
        };
        self.get_key(step, site)
    }

    pub fn get_key(&self, step: StepKey, site: SiteKey) -> Result<Option<AttentionMapRecord>> {
        self.entries.get(&(step, site)).map(|e| self.finish(e, step)).transpose()
    }

    /// Latest step held by a `LatestStep` store.
    pub fn latest_step(&self) -> Option<usize> {
        self.latest
    }

    /// All records in `(step, site)` order.
    pub fn records(&self) -> Result<Vec<AttentionMapRecord>> {
        self.entries.iter().map(|((step, _), e)| self.finish(e, *step)).collect()
    }

    /// Approximate bytes held.
    pub fn bytes(&self) -> usize {
        self.entries
            .values()
            .map(|e| e.sum.elem_count() * e.sum.dtype().size_in_bytes())
            .sum()
    }

    /// Builds a store from already finished records.
    pub fn from_records(retention: Retention, records: Vec<AttentionMapRecord>) -> Result<Self> {
        let mut store = Self::new(retention);
        for r in records {
            if retention == Retention::StepMean && r.step != StepKey::Mean {
                return Err(Error::validation("step-mean store needs mean records"));
            }
            store.entries.insert(
                (r.step, r.site.key()),
                Entry {
                    site: r.site,
                    sum: r.matrix,
                    count: 1,
                },
            );
        }
        Ok(store)
    }
}

/// Largest deviation of any row sum from 1.
pub fn max_row_sum_deviation(matrix: &Tensor) -> Result<f64> {
    let sums = matrix.to_dtype(DType::F32)?.sum(candle_core::D::Minus1)?;
    let dev = (sums - 1.0)?.abs()?.flatten_all()?.max(0)?.to_scalar::<f32>()?;
    Ok(dev as f64)
}
