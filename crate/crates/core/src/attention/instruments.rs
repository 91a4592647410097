use candle_core::{DType, Tensor, D};

use super::hook::AttentionHook;
use super::policy::InjectionPolicy;
use super::site::{AttentionSite, AttnKind};
use super::store::CaptureStore;
use crate::error::{Error, Result};

/// Source maps plus the policy deciding where they replace live maps.
#[derive(Debug, Clone, Copy)]
pub struct Injection<'a> {
    pub source: &'a CaptureStore,
    pub policy: &'a InjectionPolicy,
    pub step_count: usize,
}

/// Capture and injection for one run. Each job owns its own set.
///
/// At every attention site the set first applies the injection policy, then
/// records the resulting map, so a target run captures the maps it actually
/// used and a source run captures its native maps.
#[derive(Debug, Default)]
pub struct InstrumentSet<'a> {
    captures: Vec<&'a mut CaptureStore>,
    inject: Option<Injection<'a>>,
    t_index: Option<usize>,
    replaced: [usize; 2],
}

impl<'a> InstrumentSet<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a store that records every map after injection.
    pub fn capture(mut self, store: &'a mut CaptureStore) -> Self {
        self.captures.push(store);
        self
    }

    pub fn inject(mut self, injection: Injection<'a>) -> Self {
        self.inject = Some(injection);
        self
    }

    /// Sets the scheduler position of the step about to run.
    pub fn begin_step(&mut self, t_index: usize) {
        self.t_index = Some(t_index);
    }

    /// Number of maps of `kind` replaced so far.
    pub fn replaced(&self, kind: AttnKind) -> usize {
        self.replaced[kind as usize]
    }
}

/// Builds a [`InstrumentSet`] from optional parts.
pub fn attach_instruments<'a>(
    capture: Option<&'a mut CaptureStore>,
    inject_from: Option<&'a CaptureStore>,
    policy: Option<&'a InjectionPolicy>,
    step_count: usize,
) -> Result<InstrumentSet<'a>> {
    let mut set = InstrumentSet::new();
    set.captures.extend(capture);
    match (inject_from, policy) {
        (Some(source), Some(policy)) => {
            set.inject = Some(Injection {
                source,
                policy,
                step_count,
            })
        }
        (None, Some(p)) if !p.is_noop() => {
            return Err(Error::validation("an injection policy needs a source capture store"))
        }
        _ => {}
    }
    Ok(set)
}

impl AttentionHook for InstrumentSet<'_> {
    fn on_attention(&mut self, site: &AttentionSite, probs: Tensor) -> Result<Tensor> {
        let t_index = self
            .t_index
            .ok_or_else(|| Error::validation("instrument set used before begin_step"))?;
        let out = match &self.inject {
            Some(inj) if inj.policy.active(site, t_index, inj.step_count) => {
                let stored = inj.source.get(t_index, site.key())?.ok_or_else(|| Error::MissingSource {
                    site: site.key().to_string(),
                    step: t_index,
                })?;
                self.replaced[site.kind as usize] += 1;
                replace_map(site, &probs, &stored.matrix, inj.policy.token_map.as_deref())?
            }
            _ => probs,
        };
        for store in self.captures.iter_mut() {
            store.record(site, t_index, &out)?;
        }
        Ok(out)
    }
}

/// Replaces a live map `[b, h, q, k]` with a stored one.
///
/// A stored batch of 1 is broadcast over the live batch. Cross maps whose
/// key lengths differ, or that carry an explicit token map, are aligned
/// column by column; unmapped columns keep their live values and rows are
/// renormalized unless the mapping is a bijection.
pub fn replace_map(
    site: &AttentionSite,
    live: &Tensor,
    stored: &Tensor,
    token_map: Option<&[Option<usize>]>,
) -> Result<Tensor> {
    let (bl, hl, ql, kl) = live.dims4()?;
    let (bs, hs, qs, ks) = stored.dims4()?;
    if hs != hl {
        return Err(Error::HeadMismatch {
            site: site.key().to_string(),
            stored: hs,
            live: hl,
        });
    }
    if qs != ql {
        return Err(Error::Shape(format!(
            "site {}: stored map has {qs} queries, live map has {ql}",
            site.key()
        )));
    }
    let stored = stored.to_dtype(live.dtype())?;
    let stored = match (bs, bl) {
        (a, b) if a == b => stored,
        (1, b) => stored.broadcast_as((b, hs, qs, ks))?.contiguous()?,
        _ => {
            return Err(Error::Shape(format!(
                "site {}: stored batch {bs} cannot replace live batch {bl}",
                site.key()
            )))
        }
    };
    if site.kind == AttnKind::SelfAttn || (token_map.is_none() && ks == kl) {
        if ks != kl {
            return Err(Error::Shape(format!(
                "site {}: stored map has {ks} keys, live map has {kl}",
                site.key()
            )));
        }
        return Ok(stored);
    }
    let mapping: Vec<Option<usize>> = match token_map {
        Some(m) => (0..kl).map(|j| m.get(j).copied().flatten()).collect(),
        None => (0..kl).map(|j| (j < ks).then_some(j)).collect(),
    };
    if let Some(bad) = mapping.iter().flatten().find(|&&i| i >= ks) {
        return Err(Error::validation(format!(
            "token_map references source position {bad} but the source has {ks} tokens"
        )));
    }
    let mut seen = vec![false; ks];
    let mut bijective = kl == ks;
    for m in &mapping {
        match m {
            Some(i) if !seen[*i] => seen[*i] = true,
            _ => bijective = false,
        }
    }
    let device = live.device();
    let idx: Vec<u32> = mapping.iter().map(|m| m.unwrap_or(0) as u32).collect();
    let idx = Tensor::new(idx.as_slice(), device)?;
    let gathered = stored.index_select(&idx, 3)?;
    let mask: Vec<u8> = mapping.iter().map(|m| u8::from(m.is_some())).collect();
    let mask = Tensor::new(mask.as_slice(), device)?
        .reshape((1, 1, 1, kl))?
        .broadcast_as(live.shape())?;
    let mixed = mask.where_cond(&gathered, live)?;
    if bijective {
        return Ok(mixed);
    }
    let sums = mixed.to_dtype(DType::F32)?.sum_keepdim(D::Minus1)?;
    Ok(mixed
        .to_dtype(DType::F32)?
        .broadcast_div(&sums)?
        .to_dtype(live.dtype())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::site::BlockKind;
    use crate::attention::store::{max_row_sum_deviation, Retention};
    use candle_core::Device;

    fn cross(k: usize) -> AttentionSite {
        AttentionSite {
            index: 1,
            block: BlockKind::Mid,
            kind: AttnKind::Cross,
            spatial_len: 3,
            context_len: k,
            grid_h: 1,
            grid_w: 3,
            heads: 2,
        }
    }

    fn rand_map(b: usize, k: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..b * 2 * 3 * k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::from_vec(v, (b, 2, 3, k), &Device::Cpu).unwrap();
        candle_nn::ops::softmax_last_dim(&x).unwrap()
    }

    #[test]
    fn broadcasts_single_branch_source() {
        let live = rand_map(2, 4, 0);
        let stored = rand_map(1, 4, 1);
        let out = replace_map(&cross(4), &live, &stored, None).unwrap();
        let a: Vec<f32> = out.narrow(0, 0, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = out.narrow(0, 1, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let s: Vec<f32> = stored.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, s);
        assert_eq!(b, s);
    }

    #[test]
    fn head_mismatch_is_reported() {
        let live = rand_map(1, 4, 0);
        let stored = Tensor::ones((1, 3, 3, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            replace_map(&cross(4), &live, &stored, None),
            Err(Error::HeadMismatch { stored: 3, live: 2, .. })
        ));
    }

    #[test]
    fn token_alignment_truncates_and_renormalizes() {
        let live = rand_map(1, 5, 0);
        let stored = rand_map(1, 3, 1);
        let out = replace_map(&cross(5), &live, &stored, None).unwrap();
        assert!(max_row_sum_deviation(&out).unwrap() < 1e-6);
        // Columns 0..3 keep the stored proportions relative to each other.
        let o: Vec<Vec<f32>> = out.get(0).unwrap().get(0).unwrap().to_vec2().unwrap();
        let s: Vec<Vec<f32>> = stored.get(0).unwrap().get(0).unwrap().to_vec2().unwrap();
        let ratio_out = o[0][0] / o[0][1];
        let ratio_src = s[0][0] / s[0][1];
        assert!((ratio_out - ratio_src).abs() < 1e-5);
    }

    #[test]
    fn explicit_permutation_is_exact() {
        let live = rand_map(1, 3, 0);
        let stored = rand_map(1, 3, 1);
        let map = [Some(2), Some(0), Some(1)];
        let out = replace_map(&cross(3), &live, &stored, Some(&map)).unwrap();
        let o: Vec<Vec<f32>> = out.get(0).unwrap().get(1).unwrap().to_vec2().unwrap();
        let s: Vec<Vec<f32>> = stored.get(0).unwrap().get(1).unwrap().to_vec2().unwrap();
        for r in 0..3 {
            assert_eq!(o[r], vec![s[r][2], s[r][0], s[r][1]]);
        }
    }

    #[test]
    fn missing_source_names_site_and_step() {
        let store = CaptureStore::new(Retention::AllSteps);
        let policy = InjectionPolicy {
            kinds: [AttnKind::Cross].into(),
            replace_ratio: 1.0,
            ..Default::default()
        };
        let mut set = attach_instruments(None, Some(&store), Some(&policy), 5).unwrap();
        set.begin_step(5);
        let err = set.on_attention(&cross(4), rand_map(1, 4, 0)).unwrap_err();
        assert!(matches!(err, Error::MissingSource { step: 5, ref site } if site == "cross01"));
    }

    #[test]
    fn policy_without_source_is_rejected() {
        let p = InjectionPolicy::default();
        assert!(attach_instruments(None, None, Some(&p), 10).is_err());
        assert!(attach_instruments(None, None, Some(&InjectionPolicy::noop()), 10).is_ok());
    }
}
