//! Cross-entropy training of a single expert with a throwaway linear head.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::AdapterExpert;
use crate::dataset::{ClassId, TaskSample};
use crate::error::{Error, Result};
use crate::numerics::{softmax_slice, DenseMatrix, DenseVector, SeededRng};

const STREAM_HEAD: u64 = 0x4ead_0000;
const STREAM_SHUFFLE: u64 = 0x5af1_0000;

/// Head weights are drawn from `N(0, HEAD_INIT_STD²)`; biases start at zero.
pub const HEAD_INIT_STD: f64 = 0.02;

/// Optimizer settings. Defaults are SGD at lr 0.01 with weight decay 0.005,
/// 20 epochs of batch 48, momentum 0.9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            weight_decay: 0.005,
            epochs: 20,
            batch_size: 48,
            momentum: 0.9,
            seed: 1993,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Invalid("lr0 must be > 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Invalid("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Invalid("weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Invalid("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Linear head over the current task's classes only; discarded after training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    classes: Vec<ClassId>,
    weights: DenseMatrix,
    bias: DenseVector,
}

impl ClassifierHead {
    pub fn new(classes: &BTreeSet<ClassId>, dim: usize, rng: &mut SeededRng) -> Self {
        let c = classes.len();
        let data = (0..c * dim).map(|_| HEAD_INIT_STD * rng.normal()).collect();
        Self {
            classes: classes.iter().copied().collect(),
            weights: DenseMatrix::new(c, dim, data).expect("finite init"),
            bias: DenseVector::zeros(c),
        }
    }

    pub fn from_weights(classes: Vec<ClassId>, weights: DenseMatrix, bias: DenseVector) -> Result<Self> {
        if weights.rows() != classes.len() || bias.dim() != classes.len() {
            return Err(Error::DimensionMismatch {
                expected: classes.len(),
                found: weights.rows(),
            });
        }
        let mut sorted = classes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != classes {
            return Err(Error::Invalid("head classes must be sorted and distinct".into()));
        }
        Ok(Self {
            classes,
            weights,
            bias,
        })
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn weights(&self) -> &DenseMatrix {
        &self.weights
    }

    pub fn bias(&self) -> &DenseVector {
        &self.bias
    }

    fn index_of(&self, label: ClassId) -> Result<usize> {
        self.classes
            .binary_search(&label)
            .map_err(|_| Error::LabelOutsideScope(label))
    }

    fn logits(&self, feature: &[f64]) -> Vec<f64> {
        (0..self.classes.len())
            .map(|j| {
                let w = self.weights.row(j);
                w.iter().zip(feature).fold(self.bias[j], |acc, (a, b)| acc + a * b)
            })
            .collect()
    }
}

/// Gradients of the mean cross-entropy with respect to every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_down: DenseMatrix,
    pub w_up: DenseMatrix,
    pub head_weights: DenseMatrix,
    pub head_bias: Vec<f64>,
}

/// Mean cross-entropy of `softmax(head(F))` over `batch`, with analytic
/// gradients backpropagated through the head, `W_up`, the ReLU mask and
/// `W_down`. The residual paths carry the input straight through and
/// contribute no parameter gradient.
pub fn ce_loss_and_grads(
    expert: &AdapterExpert,
    head: &ClassifierHead,
    batch: &[&TaskSample],
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (d, r, c) = (expert.dim(), expert.bottleneck(), head.classes.len());
    if head.weights.cols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: head.weights.cols(),
        });
    }
    let inv_n = 1.0 / batch.len() as f64;
    let mut g_down = vec![0.0; d * r];
    let mut g_up = vec![0.0; r * d];
    let mut g_w = vec![0.0; c * d];
    let mut g_b = vec![0.0; c];
    let mut loss = 0.0;
    let w_up = expert.w_up();

    for sample in batch {
        let target = head.index_of(sample.label)?;
        let trace = expert.trace(&sample.features, &sample.msa_features)?;
        let z = head.logits(&trace.output);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_norm = z.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        loss -= z[target] - max - log_norm;

        let mut dz = softmax_slice(&z);
        dz[target] -= 1.0;
        for g in &mut dz {
            *g *= inv_n;
        }

        // head
        let mut d_feature = vec![0.0; d];
        for (j, &gz) in dz.iter().enumerate() {
            g_b[j] += gz;
            let row = head.weights.row(j);
            let g_row = &mut g_w[j * d..(j + 1) * d];
            for k in 0..d {
                g_row[k] += gz * trace.output[k];
                d_feature[k] += gz * row[k];
            }
        }

        // W_up and back into the bottleneck
        let mut d_pre = vec![0.0; r];
        for i in 0..r {
            let a = trace.activation[i];
            let up_row = w_up.row(i);
            let g_row = &mut g_up[i * d..(i + 1) * d];
            let mut back = 0.0;
            for k in 0..d {
                g_row[k] += a * d_feature[k];
                back += up_row[k] * d_feature[k];
            }
            if trace.pre_activation[i] > 0.0 {
                d_pre[i] = back;
            }
        }

        let input = match expert.mode() {
            super::AdapterMode::Seq => sample.features.as_slice(),
            super::AdapterMode::Par => sample.msa_features.as_slice(),
        };
        for (k, &x) in input.iter().enumerate() {
            let g_row = &mut g_down[k * r..(k + 1) * r];
            for (g, &dp) in g_row.iter_mut().zip(&d_pre) {
                *g += x * dp;
            }
        }
    }

    let grads = Gradients {
        w_down: DenseMatrix::new(d, r, g_down)?,
        w_up: DenseMatrix::new(r, d, g_up)?,
        head_weights: DenseMatrix::new(c, d, g_w)?,
        head_bias: g_b,
    };
    Ok((loss * inv_n, grads))
}

/// `lr0 · (1 + cos(π·step/total)) / 2`, reaching exactly zero at `total`.
pub fn cosine_anneal_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    let total = total_steps.max(1);
    if step >= total {
        return 0.0;
    }
    if step == 0 {
        return lr0;
    }
    let progress = step as f64 / total as f64;
    lr0 * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_accuracy: f64,
}

fn full_pass(expert: &AdapterExpert, head: &ClassifierHead, data: &[TaskSample]) -> Result<(f64, f64)> {
    let refs: Vec<&TaskSample> = data.iter().collect();
    let (loss, _) = ce_loss_and_grads(expert, head, &refs)?;
    let mut correct = 0usize;
    for s in data {
        let f = expert.forward(&s.features, &s.msa_features)?;
        let z = head.logits(f.as_slice());
        let best = z
            .iter()
            .enumerate()
            .fold(0, |b, (j, &x)| if x > z[b] { j } else { b });
        if head.classes[best] == s.label {
            correct += 1;
        }
    }
    Ok((loss, correct as f64 / data.len() as f64))
}

struct Momentum {
    w_down: Vec<f64>,
    w_up: Vec<f64>,
    head_w: Vec<f64>,
    head_b: Vec<f64>,
}

fn sgd_update(params: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, decay: f64, momentum: f64) {
    for ((p, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *p -= lr * decay * *p;
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Train `expert` on its task's training samples.
///
/// A fresh head over the expert's scope is created and dropped at the end.
/// Each epoch visits the data in a seeded shuffle; weight decay is decoupled
/// (applied before the momentum step) and skips the head bias.
pub fn train_task(
    expert: &mut AdapterExpert,
    data: &[TaskSample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if expert.is_trained() {
        return Err(Error::Invalid(format!(
            "expert {} is already trained",
            expert.task_id()
        )));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(s) = data.iter().find(|s| !expert.scope().contains(&s.label)) {
        return Err(Error::LabelOutsideScope(s.label));
    }

    let task = expert.task_id() as u64;
    let mut head = ClassifierHead::new(
        expert.scope(),
        expert.dim(),
        &mut SeededRng::with_stream(config.seed, STREAM_HEAD + task),
    );
    let mut rng = SeededRng::with_stream(config.seed, STREAM_SHUFFLE + task);

    let (initial_loss, _) = full_pass(expert, &head, data)?;
    let per_epoch = data.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * per_epoch;
    let mut velocity = Momentum {
        w_down: vec![0.0; expert.w_down().as_slice().len()],
        w_up: vec![0.0; expert.w_up().as_slice().len()],
        head_w: vec![0.0; head.weights.as_slice().len()],
        head_b: vec![0.0; head.bias.dim()],
    };

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TaskSample> = chunk.iter().map(|&i| &data[i]).collect();
            let (_, g) = ce_loss_and_grads(expert, &head, &batch)?;
            let lr = cosine_anneal_lr(step, total_steps, config.lr0);
            let (wd, mu) = (config.weight_decay, config.momentum);
            {
                let (w_down, w_up) = expert.weights_mut();
                sgd_update(w_down.as_mut_slice(), &mut velocity.w_down, g.w_down.as_slice(), lr, wd, mu);
                sgd_update(w_up.as_mut_slice(), &mut velocity.w_up, g.w_up.as_slice(), lr, wd, mu);
            }
            sgd_update(head.weights.as_mut_slice(), &mut velocity.head_w, g.head_weights.as_slice(), lr, wd, mu);
            sgd_update(head.bias.as_mut_slice(), &mut velocity.head_b, &g.head_bias, lr, 0.0, mu);
            step += 1;
        }
    }
    if !expert.w_down().is_finite() || !expert.w_up().is_finite() {
        return Err(Error::NonFinite("trained adapter weights"));
    }

    let (final_loss, final_accuracy) = full_pass(expert, &head, data)?;
    expert.mark_trained();
    Ok(TrainReport {
        steps: total_steps,
        initial_loss,
        final_loss,
        final_accuracy,
    })
}
