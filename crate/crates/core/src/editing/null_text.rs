use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::attention::hook::NoHook;
use crate::backend::adapter::{ensure_finite, mse, Conditioning, LatentState, LatentTrajectory, ModelAdapter};
use crate::backend::ddim::{DdimSchedule, SamplerConfig};
use crate::error::{Error, Result};

/// Settings of the per-step null-embedding optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NullTextOptConfig {
    /// Gradient steps per denoising step.
    pub iterations: usize,
    pub step_size: f64,
    /// Stop a step's optimization once its loss drops below this.
    pub early_stop: f64,
    /// Step-size halvings tried before a gradient step is abandoned.
    pub max_backtracks: usize,
    /// Final per-step loss above which the result is flagged as diverged.
    pub divergence_threshold: f64,
}

impl Default for NullTextOptConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            step_size: 1e-2,
            early_stop: 1e-5,
            max_backtracks: 8,
            divergence_threshold: 1e-1,
        }
    }
}

/// Optimized null embeddings, indexed by `t_index - 1`, plus the loss trace.
#[derive(Debug, Clone)]
pub struct NullTextState {
    pub per_step_null_embeddings: Vec<Tensor>,
    /// Losses of every accepted iterate, per step (noisiest step first);
    /// each list starts with the loss of the initial embedding.
    pub losses: Vec<Vec<f64>>,
    /// Steps whose final loss exceeded the divergence threshold.
    pub diverged_steps: Vec<usize>,
}

impl NullTextState {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().and_then(|l| l.last().copied())
    }
}

fn guided_step(
    adapter: &ModelAdapter,
    schedule: &DdimSchedule,
    z: &Tensor,
    t_index: usize,
    null: &Tensor,
    cond: &Tensor,
    scale: f64,
) -> Result<Tensor> {
    let guided = Conditioning::Guided {
        uncond: null,
        cond,
        scale,
    };
    let eps = adapter.predict_noise(z, t_index, schedule, &guided, &mut NoHook)?;
    schedule.step(&eps, z, t_index, 0.0, None)
}

/// First and second gradient moments with bias correction.
struct AdamMoments {
    first: Tensor,
    second: Tensor,
    steps: i32,
}

impl AdamMoments {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(like: &Tensor) -> Result<Self> {
        Ok(Self {
            first: like.zeros_like()?,
            second: like.zeros_like()?,
            steps: 0,
        })
    }

    /// Folds in `grad` and returns the bias-corrected update direction.
    fn update(&mut self, grad: &Tensor) -> Result<Tensor> {
        self.steps += 1;
        self.first = ((&self.first * Self::BETA1)? + (grad * (1.0 - Self::BETA1))?)?;
        self.second = ((&self.second * Self::BETA2)? + (grad.sqr()? * (1.0 - Self::BETA2))?)?;
        let m_hat = (&self.first / (1.0 - Self::BETA1.powi(self.steps)))?;
        let v_hat = (&self.second / (1.0 - Self::BETA2.powi(self.steps)))?;
        Ok((m_hat / (v_hat.sqrt()? + Self::EPS)?)?)
    }
}

/// Fits one null embedding per step so guided denoising from the inverted
/// noise retraces the inversion trajectory.
///
/// The embedding of each step starts from the previous step's result and is
/// updated along Adam's direction with a backtracking step size, so accepted
/// losses never increase.
pub fn optimize_null_text(
    adapter: &ModelAdapter,
    trajectory: &LatentTrajectory,
    source_context: &Tensor,
    sampler: &SamplerConfig,
    opts: &NullTextOptConfig,
) -> Result<NullTextState> {
    let t_count = sampler.step_count;
    if trajectory.states.len() != t_count + 1 {
        return Err(Error::validation(format!(
            "trajectory has {} states, expected {}",
            trajectory.states.len(),
            t_count + 1
        )));
    }
    let schedule = DdimSchedule::from_config(sampler)?;
    let scale = sampler.guidance_scale;
    let source_context = source_context.detach();
    let mut nulls = vec![adapter.null_context().clone(); t_count];
    let mut losses = Vec::with_capacity(t_count);
    let mut diverged_steps = Vec::new();
    let mut current = LatentState {
        z: trajectory.endpoint().z.clone(),
        t_index: t_count,
    };
    let mut null = adapter.null_context().detach();

    for t in (1..=t_count).rev() {
        let target = &trajectory.states[t - 1].z;
        let z = current.z.detach();
        let loss_of = |n: &Tensor| -> Result<f64> {
            let next = guided_step(adapter, &schedule, &z, t, n, &source_context, scale)?;
            mse(&next, target)
        };
        let mut loss = loss_of(&null)?;
        let mut trace = vec![loss];
        let mut moments = AdamMoments::new(&null)?;
        for _ in 0..opts.iterations {
            if loss < opts.early_stop {
                break;
            }
            let var = Var::from_tensor(&null)?;
            let next = guided_step(adapter, &schedule, &z, t, var.as_tensor(), &source_context, scale)?;
            let objective = (next - target)?.sqr()?.mean_all()?;
            let grads = objective.backward()?;
            let grad = grads
                .get(var.as_tensor())
                .ok_or_else(|| Error::Numeric {
                    step: t,
                    what: "null embedding received no gradient".into(),
                })?
                .clone();
            ensure_finite(&grad, t, "null embedding gradient")?;
            let direction = moments.update(&grad)?;
            let mut lr = opts.step_size;
            let mut accepted = None;
            for _ in 0..=opts.max_backtracks {
                let candidate = (&null - (&direction * lr)?)?;
                let candidate_loss = loss_of(&candidate)?;
                if candidate_loss.is_finite() && candidate_loss < loss {
                    accepted = Some((candidate, candidate_loss));
                    break;
                }
                lr *= 0.5;
            }
            match accepted {
                Some((n, l)) => {
                    null = n;
                    loss = l;
                    trace.push(l);
                }
                None => break,
            }
        }
        if loss > opts.divergence_threshold {
            tracing::warn!(step = t, loss, "null-text optimization did not converge");
            diverged_steps.push(t);
        }
        nulls[t - 1] = null.clone();
        losses.push(trace);
        let next = guided_step(adapter, &schedule, &current.z, t, &null, &source_context, scale)?;
        ensure_finite(&next, t, "null-text latent")?;
        current = LatentState { z: next, t_index: t - 1 };
    }
    Ok(NullTextState {
        per_step_null_embeddings: nulls,
        losses,
        diverged_steps,
    })
}
