//! Classifier harness: brute-force KNN and a single-hidden-layer MLP,
//! plus the plumbing to compare prediction runs on paired test sets.
//!
//! Both models work on raw 784-dimensional pixel vectors with no
//! preprocessing or augmentation. KNN parallelizes over test items with a
//! deterministic per-item reduction, so predictions never depend on the
//! thread count. MLP training is single-threaded by default for
//! bit-reproducibility; the opt-in parallel minibatch mode sums per-sample
//! gradients in nondeterministic order and is flagged in run manifests.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::DatasetBundle;
use crate::preprocess::Digit28;
use crate::rng::SplitMix64;
use crate::stats::{
    paired_counts, paired_worse, wald_interval, Confidence, ErrorCount, PairedCounts,
    PairedOutcome, StatsError,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("runs evaluate different test sets: {0} vs {1}")]
    TestSetMismatch(String, String),
    #[error("runs come from different models: {0} vs {1}")]
    ModelMismatch(String, String),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
    pub metric: Metric,
}

impl KnnConfig {
    pub fn new(k: usize) -> Result<Self, EvalError> {
        if k == 0 {
            return Err(EvalError::InvalidConfig("k must be at least 1".into()));
        }
        Ok(Self {
            k,
            metric: Metric::Euclidean,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden_units: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Parallel per-sample gradient summation; forfeits bit-exact
    /// reproducibility across runs.
    pub parallel: bool,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.hidden_units == 0 || self.minibatch_size == 0 || self.epochs == 0 {
            return Err(EvalError::InvalidConfig(
                "hidden_units, minibatch_size and epochs must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(EvalError::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

fn squared_distance(a: &Digit28, b: &Digit28) -> i64 {
    let mut acc = 0i64;
    for (x, y) in a.as_bytes().iter().zip(b.as_bytes()) {
        let d = *x as i64 - *y as i64;
        acc += d * d;
    }
    acc
}

/// Majority vote among the k nearest training points. Distance ties
/// resolve to the lower training index; label-count ties resolve to the
/// label of the nearest neighbor carrying a tied label.
pub fn knn_predict(
    train: &DatasetBundle,
    test: &[Digit28],
    cfg: &KnnConfig,
) -> Result<Vec<u8>, EvalError> {
    if train.is_empty() {
        return Err(EvalError::EmptyTrainingSet);
    }
    if cfg.k > train.len() {
        return Err(EvalError::InvalidConfig(format!(
            "k = {} exceeds training size {}",
            cfg.k,
            train.len()
        )));
    }
    let preds = test
        .par_iter()
        .map(|img| {
            let mut dists: Vec<(i64, usize)> = train
                .images()
                .iter()
                .enumerate()
                .map(|(i, t)| (squared_distance(img, t), i))
                .collect();
            // (distance, index) pairs are all distinct, so the k smallest
            // form a unique set regardless of partition order.
            dists.select_nth_unstable(cfg.k - 1);
            let nearest = &mut dists[..cfg.k];
            nearest.sort_unstable();
            let mut counts = [0usize; 256];
            for &(_, i) in nearest.iter() {
                counts[train.labels()[i] as usize] += 1;
            }
            let top = nearest
                .iter()
                .map(|&(_, i)| counts[train.labels()[i] as usize])
                .max()
                .expect("k >= 1");
            nearest
                .iter()
                .find(|&&(_, i)| counts[train.labels()[i] as usize] == top)
                .map(|&(_, i)| train.labels()[i])
                .expect("some neighbor carries a top-count label")
        })
        .collect();
    Ok(preds)
}

/// Fully connected 784 -> hidden -> 10 network: tanh hidden activation,
/// softmax + cross-entropy output. Parameters live in one flat vector
/// (w1, b1, w2, b2 in that order) so gradients can be checked element by
/// element.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    hidden: usize,
    params: Vec<f64>,
}

const INPUT: usize = 784;
const CLASSES: usize = 10;

impl Mlp {
    pub fn param_count(hidden: usize) -> usize {
        hidden * INPUT + hidden + CLASSES * hidden + CLASSES
    }

    /// Seeded initialization: weights uniform in +-1/sqrt(fan_in), biases
    /// zero.
    pub fn init(hidden: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut params = vec![0.0; Self::param_count(hidden)];
        let bound1 = 1.0 / (INPUT as f64).sqrt();
        for p in params[..hidden * INPUT].iter_mut() {
            *p = rng.next_symmetric(bound1);
        }
        let w2_start = hidden * INPUT + hidden;
        let bound2 = 1.0 / (hidden as f64).sqrt();
        for p in params[w2_start..w2_start + CLASSES * hidden].iter_mut() {
            *p = rng.next_symmetric(bound2);
        }
        Self { hidden, params }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn from_params(hidden: usize, params: Vec<f64>) -> Result<Self, EvalError> {
        if params.len() != Self::param_count(hidden) {
            return Err(EvalError::InvalidConfig(format!(
                "{} parameters do not fit a {hidden}-unit network",
                params.len()
            )));
        }
        Ok(Self { hidden, params })
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let h = self.hidden;
        let (w1, rest) = self.params.split_at(h * INPUT);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(CLASSES * h);
        (w1, b1, w2, b2)
    }

    /// Forward pass; returns (hidden activations, class probabilities).
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h = self.hidden;
        let (w1, b1, w2, b2) = self.split();
        let mut a1 = vec![0.0; h];
        for j in 0..h {
            let row = &w1[j * INPUT..(j + 1) * INPUT];
            let mut z = b1[j];
            for (w, xv) in row.iter().zip(x) {
                z += w * xv;
            }
            a1[j] = z.tanh();
        }
        let mut logits = vec![0.0; CLASSES];
        for c in 0..CLASSES {
            let row = &w2[c * h..(c + 1) * h];
            let mut z = b2[c];
            for (w, av) in row.iter().zip(&a1) {
                z += w * av;
            }
            logits[c] = z;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            sum += *l;
        }
        for l in logits.iter_mut() {
            *l /= sum;
        }
        (a1, logits)
    }

    pub fn predict(&self, img: &Digit28) -> u8 {
        let x = to_input(img);
        let (_, probs) = self.forward(&x);
        let mut best = 0usize;
        for c in 1..CLASSES {
            if probs[c] > probs[best] {
                best = c;
            }
        }
        best as u8
    }

    pub fn predict_all(&self, imgs: &[Digit28]) -> Vec<u8> {
        imgs.par_iter().map(|img| self.predict(img)).collect()
    }

    /// Mean cross-entropy over the batch.
    pub fn batch_loss(&self, images: &[Digit28], labels: &[u8]) -> f64 {
        assert_eq!(images.len(), labels.len());
        let mut total = 0.0;
        for (img, &y) in images.iter().zip(labels) {
            let x = to_input(img);
            let (_, probs) = self.forward(&x);
            total += -probs[y as usize].max(1e-300).ln();
        }
        total / images.len() as f64
    }

    fn sample_gradient(&self, img: &Digit28, label: u8, grad: &mut [f64]) {
        let h = self.hidden;
        let (_, _, w2, _) = self.split();
        let x = to_input(img);
        let (a1, probs) = self.forward(&x);
        // output delta: softmax + cross-entropy
        let mut d2 = probs;
        d2[label as usize] -= 1.0;
        let w2_off = h * INPUT + h;
        let b2_off = w2_off + CLASSES * h;
        for c in 0..CLASSES {
            for j in 0..h {
                grad[w2_off + c * h + j] += d2[c] * a1[j];
            }
            grad[b2_off + c] += d2[c];
        }
        let b1_off = h * INPUT;
        for j in 0..h {
            let mut back = 0.0;
            for c in 0..CLASSES {
                back += w2[c * h + j] * d2[c];
            }
            let d1 = back * (1.0 - a1[j] * a1[j]);
            if d1 != 0.0 {
                let row = &mut grad[j * INPUT..(j + 1) * INPUT];
                for (g, xv) in row.iter_mut().zip(&x) {
                    *g += d1 * xv;
                }
            }
            grad[b1_off + j] += d1;
        }
    }

    /// Mean gradient of the cross-entropy over the batch, flat layout
    /// matching `params`.
    pub fn batch_gradient(&self, images: &[Digit28], labels: &[u8]) -> Vec<f64> {
        assert_eq!(images.len(), labels.len());
        let mut grad = vec![0.0; self.params.len()];
        for (img, &y) in images.iter().zip(labels) {
            self.sample_gradient(img, y, &mut grad);
        }
        let scale = 1.0 / images.len() as f64;
        for g in grad.iter_mut() {
            *g *= scale;
        }
        grad
    }

    /// Same mean gradient with parallel per-sample summation. The
    /// floating-point reduction order varies with scheduling.
    pub fn batch_gradient_parallel(&self, images: &[Digit28], labels: &[u8]) -> Vec<f64> {
        assert_eq!(images.len(), labels.len());
        let zero = || vec![0.0; self.params.len()];
        let mut grad = images
            .par_iter()
            .zip(labels)
            .fold(zero, |mut acc, (img, &y)| {
                self.sample_gradient(img, y, &mut acc);
                acc
            })
            .reduce(zero, |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                a
            });
        let scale = 1.0 / images.len() as f64;
        for g in grad.iter_mut() {
            *g *= scale;
        }
        grad
    }

    pub fn apply_gradient(&mut self, grad: &[f64], learning_rate: f64) {
        assert_eq!(grad.len(), self.params.len());
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p -= learning_rate * g;
        }
    }
}

fn to_input(img: &Digit28) -> Vec<f64> {
    img.as_bytes().iter().map(|&p| p as f64 / 255.0).collect()
}

/// Plain minibatch SGD; the visit order reshuffles every epoch from the
/// config seed.
pub fn mlp_train(train: &DatasetBundle, cfg: &MlpConfig) -> Result<Mlp, EvalError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(EvalError::EmptyTrainingSet);
    }
    let mut model = Mlp::init(cfg.hidden_units, cfg.seed);
    // separate stream from the init draws so changing epochs never
    // perturbs the initialization
    let mut order_rng = SplitMix64::new(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch_images: Vec<Digit28> = Vec::with_capacity(cfg.minibatch_size);
    let mut batch_labels: Vec<u8> = Vec::with_capacity(cfg.minibatch_size);
    for _ in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.minibatch_size) {
            batch_images.clear();
            batch_labels.clear();
            for &i in chunk {
                batch_images.push(train.images()[i].clone());
                batch_labels.push(train.labels()[i]);
            }
            let grad = if cfg.parallel {
                model.batch_gradient_parallel(&batch_images, &batch_labels)
            } else {
                model.batch_gradient(&batch_images, &batch_labels)
            };
            model.apply_gradient(&grad, cfg.learning_rate);
        }
    }
    Ok(model)
}

/// Count prediction/label mismatches.
pub fn evaluate(predictions: &[u8], labels: &[u8]) -> Result<ErrorCount, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), labels.len()));
    }
    let n1 = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p != l)
        .count() as u64;
    Ok(ErrorCount::new(predictions.len() as u64, n1)?)
}

/// One model evaluated on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub model_id: String,
    pub train_id: String,
    pub test_id: String,
    pub predictions: Vec<u8>,
    pub error: ErrorCount,
}

impl EvalRun {
    pub fn from_predictions(
        model_id: impl Into<String>,
        train_id: impl Into<String>,
        test_id: impl Into<String>,
        predictions: Vec<u8>,
        truth: &[u8],
    ) -> Result<Self, EvalError> {
        let error = evaluate(&predictions, truth)?;
        Ok(Self {
            model_id: model_id.into(),
            train_id: train_id.into(),
            test_id: test_id.into(),
            predictions,
            error,
        })
    }
}

/// Discordant counts plus the one-sided decision "is run_a worse than
/// run_b". Both runs must target the same test set.
pub fn compare_runs(
    run_a: &EvalRun,
    run_b: &EvalRun,
    truth: &[u8],
    c: Confidence,
) -> Result<(PairedCounts, PairedOutcome), EvalError> {
    if run_a.test_id != run_b.test_id {
        return Err(EvalError::TestSetMismatch(
            run_a.test_id.clone(),
            run_b.test_id.clone(),
        ));
    }
    let counts = paired_counts(&run_a.predictions, &run_b.predictions, truth)?;
    Ok((counts, paired_worse(counts, c)))
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Spearman rank correlation: Pearson correlation of average ranks
/// (handles ties).
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

/// CSV comparing each model's error on two test sets, with Wald
/// halfwidths, rank columns, and the rank correlation across the sweep.
/// Each row pair must come from the same model.
pub fn scatter_report(
    pairs: &[(EvalRun, EvalRun)],
    c: Confidence,
) -> Result<String, EvalError> {
    let mut out = String::from(
        "model_id,error_set1,halfwidth1,error_set2,halfwidth2,rank_set1,rank_set2,spearman_rho\n",
    );
    for (a, b) in pairs {
        if a.model_id != b.model_id {
            return Err(EvalError::ModelMismatch(
                a.model_id.clone(),
                b.model_id.clone(),
            ));
        }
    }
    let err1: Vec<f64> = pairs.iter().map(|(a, _)| a.error.rate()).collect();
    let err2: Vec<f64> = pairs.iter().map(|(_, b)| b.error.rate()).collect();
    let ranks1 = average_ranks(&err1);
    let ranks2 = average_ranks(&err2);
    let rho = spearman_rho(&err1, &err2);
    let rho_cell = rho.map(|r| r.to_string()).unwrap_or_default();
    for (i, (a, b)) in pairs.iter().enumerate() {
        let wa = wald_interval(a.error, c);
        let wb = wald_interval(b.error, c);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            a.model_id, wa.nu, wa.halfwidth, wb.nu, wb.halfwidth, ranks1[i], ranks2[i], rho_cell
        ));
    }
    Ok(out)
}
