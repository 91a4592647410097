//! Deterministic weight source for the fixture backbone.
//!
//! Every tensor is drawn from a ChaCha stream keyed by `(seed, name)`, so the
//! same parameter gets the same values no matter which order modules are built.

use candle_core::{DType, Device, Shape, Tensor};
use candle_nn::init::{FanInOut, Init, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// FNV-1a, used to derive per-tensor streams from a parameter path.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// A `SimpleBackend` that materializes parameters from their init hints.
#[derive(Debug, Clone)]
pub struct SeededWeights {
    seed: u64,
    /// Multiplier applied to tensors whose path ends with one of these suffixes.
    scaled: Vec<(String, f64)>,
}

impl SeededWeights {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            scaled: Vec::new(),
        }
    }

    pub fn with_scale(mut self, suffix: &str, factor: f64) -> Self {
        self.scaled.push((suffix.to_string(), factor));
        self
    }

    fn sample(&self, shape: &Shape, name: &str, hint: Init) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()));
        let n = shape.elem_count();
        let uniform = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> Vec<f32> {
            (0..n).map(|_| rng.random_range(lo..hi) as f32).collect()
        };
        let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| -> Vec<f32> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    (mean + std * z) as f32
                })
                .collect()
        };
        let mut values = match hint {
            Init::Const(v) => vec![v as f32; n],
            Init::Uniform { lo, up } => uniform(&mut rng, lo, up),
            Init::Randn { mean, stdev } => normal(&mut rng, mean, stdev),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let fan = match fan {
                    FanInOut::FanIn => FanInOut::FanIn.for_shape(shape),
                    FanInOut::FanOut => FanInOut::FanOut.for_shape(shape),
                };
                let std = non_linearity.gain() / (fan.max(1) as f64).sqrt();
                match dist {
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        uniform(&mut rng, -bound, bound)
                    }
                    NormalOrUniform::Normal => normal(&mut rng, 0.0, std),
                }
            }
        };
        if let Some((_, factor)) = self.scaled.iter().find(|(s, _)| name.ends_with(s.as_str())) {
            let f = *factor as f32;
            values.iter_mut().for_each(|v| *v *= f);
        }
        values
    }
}

impl SimpleBackend for SeededWeights {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        let values = self.sample(&s, name, h);
        Tensor::from_vec(values, s, dev)?.to_dtype(dtype)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        candle_core::bail!("seeded weights need a shape to materialize `{name}`")
    }

    fn contains_tensor(&self, _name: &str) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_nn::VarBuilder;

    #[test]
    fn same_name_same_values_regardless_of_order() {
        let dev = Device::Cpu;
        let vb = VarBuilder::from_backend(Box::new(SeededWeights::new(7)), DType::F32, dev.clone());
        let a = vb.get_with_hints((4, 3), "x.weight", candle_nn::init::DEFAULT_KAIMING_NORMAL).unwrap();
        let _ = vb.get_with_hints((2, 2), "y.weight", candle_nn::init::DEFAULT_KAIMING_NORMAL).unwrap();
        let b = vb.get_with_hints((4, 3), "x.weight", candle_nn::init::DEFAULT_KAIMING_NORMAL).unwrap();
        let a: Vec<f32> = a.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = b.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scale_applies_to_suffix() {
        let w = SeededWeights::new(1).with_scale("conv_out.weight", 0.0);
        let v = w.sample(&Shape::from((3, 3)), "unet.conv_out.weight", Init::Const(2.0));
        assert!(v.iter().all(|x| *x == 0.0));
        let v = w.sample(&Shape::from((3, 3)), "unet.conv_in.weight", Init::Const(2.0));
        assert!(v.iter().all(|x| *x == 2.0));
    }
}
