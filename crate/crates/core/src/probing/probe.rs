use candle_core::{Device, Tensor, Var, D};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-layer perceptron hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Seeds weight init and minibatch order.
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Stratified train/test split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Splits sample indices per class, keeping `train_fraction` of each class
/// (rounded) for training. Both lists come back sorted.
pub fn stratified_split(labels: &[usize], classes: usize, spec: SplitSpec) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let n_train = (members.len() as f64 * spec.train_fraction).round() as usize;
        train.extend_from_slice(&members[..n_train]);
        test.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Per-class test accuracy of one probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReportRow {
    /// Fraction of each class's test samples predicted correctly; `None`
    /// when the class has no test samples.
    pub per_class: Vec<Option<f64>>,
    pub overall: f64,
    pub valid: bool,
    pub note: Option<String>,
}

impl ProbeReportRow {
    pub fn mean_class_accuracy(&self) -> Option<f64> {
        let v: Vec<f64> = self.per_class.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// A trained probe.
#[derive(Debug)]
pub struct ProbeModel {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    pub input_dim: usize,
    pub classes: usize,
}

fn uniform_var(rng: &mut ChaCha8Rng, shape: (usize, usize), bound: f64, device: &Device) -> Result<Var> {
    let v: Vec<f32> = (0..shape.0 * shape.1)
        .map(|_| rng.random_range(-bound..bound) as f32)
        .collect();
    Ok(Var::from_tensor(&Tensor::from_vec(v, shape, device)?)?)
}

impl ProbeModel {
    /// Seeded init matching the usual fan-in uniform scheme.
    pub fn init(input_dim: usize, hidden: usize, classes: usize, seed: u64, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b_in = 1.0 / (input_dim as f64).sqrt();
        let b_hid = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w1: uniform_var(&mut rng, (input_dim, hidden), b_in, device)?,
            b1: uniform_var(&mut rng, (1, hidden), b_in, device)?,
            w2: uniform_var(&mut rng, (hidden, classes), b_hid, device)?,
            b2: uniform_var(&mut rng, (1, classes), b_hid, device)?,
            input_dim,
            classes,
        })
    }

    fn vars(&self) -> Vec<Var> {
        vec![self.w1.clone(), self.b1.clone(), self.w2.clone(), self.b2.clone()]
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let h = x.matmul(self.w1.as_tensor())?.broadcast_add(self.b1.as_tensor())?.relu()?;
        Ok(h.matmul(self.w2.as_tensor())?.broadcast_add(self.b2.as_tensor())?)
    }

    pub fn predict(&self, features: &[Vec<f32>]) -> Result<Vec<usize>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let x = stack(features, self.input_dim, self.w1.device())?;
        Ok(self.logits(&x)?.argmax(D::Minus1)?.to_vec1::<u32>()?.into_iter().map(|v| v as usize).collect())
    }
}

fn stack(rows: &[Vec<f32>], dim: usize, device: &Device) -> Result<Tensor> {
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::Shape(format!("probe expects {dim} features, got {}", bad.len())));
    }
    let flat: Vec<f32> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (rows.len(), dim), device)?)
}

/// Trains a probe on `features[train]` and scores it on `features[test]`.
pub fn train_probe(
    features: &[Vec<f32>],
    labels: &[usize],
    classes: usize,
    split: SplitSpec,
    cfg: &ProbeConfig,
) -> Result<(ProbeModel, ProbeReportRow)> {
    if features.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} labels",
            features.len(),
            labels.len()
        )));
    }
    let dim = features.first().map(Vec::len).ok_or_else(|| Error::validation("empty probe dataset"))?;
    let (train, test) = stratified_split(labels, classes, split);
    let mut present: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::validation("probe training needs at least two classes in the train split"));
    }
    let device = Device::Cpu;
    let model = ProbeModel::init(dim, cfg.hidden, classes, cfg.seed, &device)?;
    let mut opt = AdamW::new(
        model.vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let x_all = stack(features, dim, &device)?;
    let y_all = Tensor::from_vec(labels.iter().map(|&l| l as u32).collect::<Vec<_>>(), labels.len(), &device)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order = train.clone();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let idx = Tensor::from_vec(batch.iter().map(|&i| i as u32).collect::<Vec<_>>(), batch.len(), &device)?;
            let x = x_all.index_select(&idx, 0)?;
            let y = y_all.index_select(&idx, 0)?;
            let loss = candle_nn::loss::cross_entropy(&model.logits(&x)?, &y)?;
            opt.backward_step(&loss)?;
        }
    }
    let test_x: Vec<Vec<f32>> = test.iter().map(|&i| features[i].clone()).collect();
    let test_y: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    let row = evaluate(&model, &test_x, &test_y)?;
    Ok((model, row))
}

/// Scores a trained probe on labeled features.
pub fn evaluate(model: &ProbeModel, features: &[Vec<f32>], labels: &[usize]) -> Result<ProbeReportRow> {
    if let Some(f) = features.first() {
        if f.len() != model.input_dim {
            return Err(Error::Shape(format!(
                "probe trained on {} features cannot score {}-dim features",
                model.input_dim,
                f.len()
            )));
        }
    }
    let pred = model.predict(features)?;
    let mut hits = vec![0usize; model.classes];
    let mut totals = vec![0usize; model.classes];
    for (&p, &l) in pred.iter().zip(labels) {
        if l >= model.classes {
            return Err(Error::validation(format!("label {l} outside {} classes", model.classes)));
        }
        totals[l] += 1;
        hits[l] += usize::from(p == l);
    }
    let per_class: Vec<Option<f64>> = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();
    let missing: Vec<usize> = (0..model.classes).filter(|&c| totals[c] == 0).collect();
    let n = labels.len().max(1);
    Ok(ProbeReportRow {
        overall: hits.iter().sum::<usize>() as f64 / n as f64,
        valid: missing.is_empty(),
        note: (!missing.is_empty()).then(|| format!("classes {missing:?} have no test samples")),
        per_class,
    })
}

/// Features of `dim` values with the class index planted in a block, plus noise.
pub fn planted_signal_dataset(per_class: usize, classes: usize, dim: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = (dim / classes).max(1);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        for _ in 0..per_class {
            let mut f: Vec<f32> = (0..dim).map(|_| rng.random_range(0.0..0.5)).collect();
            for v in f.iter_mut().skip(c * block).take(block) {
                *v += 1.0;
            }
            features.push(f);
            labels.push(c);
        }
    }
    (features, labels)
}

/// Same features with labels permuted by a seeded shuffle.
pub fn shuffled_labels(labels: &[usize], seed: u64) -> Vec<usize> {
    let mut out = labels.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

/// Result of the planted-signal and shuffled-label checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanityResult {
    pub planted_min_class_accuracy: f64,
    pub shuffled_mean_accuracy: f64,
    pub passed: bool,
}

/// Both probe controls must hold before real probing results are trusted:
/// planted signal reaches 0.95 on every class and shuffled labels stay
/// within 0.05 of chance.
pub fn sanity_gate(cfg: &ProbeConfig, seed: u64) -> Result<SanityResult> {
    let classes = 10;
    let (features, labels) = planted_signal_dataset(50, classes, 40, seed);
    let (_, planted) = train_probe(&features, &labels, classes, SplitSpec { seed, ..Default::default() }, cfg)?;
    let shuffled = shuffled_labels(&labels, seed ^ 1);
    let (_, null_row) = train_probe(&features, &shuffled, classes, SplitSpec { seed, ..Default::default() }, cfg)?;
    let planted_min = planted.per_class.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let chance = 1.0 / classes as f64;
    let passed = planted_min >= 0.95 && (null_row.overall - chance).abs() <= 0.05;
    Ok(SanityResult {
        planted_min_class_accuracy: planted_min,
        shuffled_mean_accuracy: null_row.overall,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> ProbeConfig {
        ProbeConfig {
            hidden: 64,
            epochs: 30,
            ..Default::default()
        }
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let a = stratified_split(&labels, 10, SplitSpec::default());
        let b = stratified_split(&labels, 10, SplitSpec::default());
        assert_eq!(a, b);
        assert_eq!((a.0.len(), a.1.len()), (80, 20));
        for c in 0..10 {
            assert_eq!(a.1.iter().filter(|&&i| labels[i] == c).count(), 2);
        }
        let c = stratified_split(&labels, 10, SplitSpec { seed: 9, ..Default::default() });
        assert_ne!(a, c);
    }

    #[test]
    fn planted_signal_is_learned() {
        let (f, l) = planted_signal_dataset(30, 10, 40, 1);
        let (_, row) = train_probe(&f, &l, 10, SplitSpec::default(), &quick()).unwrap();
        assert!(row.valid);
        assert!(row.per_class.iter().all(|a| a.unwrap() >= 0.95), "{row:?}");
    }

    #[test]
    fn degenerate_split_is_marked_invalid() {
        let (f, mut l) = planted_signal_dataset(5, 3, 6, 1);
        // Class 2 keeps a single sample, which lands in the train split.
        l.truncate(11);
        let f = f[..11].to_vec();
        let (_, row) = train_probe(&f, &l, 3, SplitSpec::default(), &quick()).unwrap();
        assert!(!row.valid);
        assert_eq!(row.per_class[2], None);
    }

    #[test]
    fn single_class_is_rejected() {
        let f = vec![vec![0.0; 4]; 10];
        assert!(train_probe(&f, &[0; 10], 2, SplitSpec::default(), &quick()).is_err());
    }
}
