//! Task-specific adapter experts.
//!
//! An expert is a bottleneck adapter `(W_down: d×r, W_up: r×d)` applied to the
//! frozen backbone features, either sequentially on the block output or in
//! parallel on the pre-FFN activations:
//!
//! ```text
//! Seq: F = h_out + relu(h_out · W_down) · W_up
//! Par: F = h_out + relu(h_msa · W_down) · W_up + h_msa
//! ```
//!
//! `W_up` starts at zero, so an untrained sequential expert is the identity.

mod checkpoint;
mod train;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, TaskId};
use crate::error::{Error, Result};
use crate::numerics::{vec_mat, DenseMatrix, DenseVector, SeededRng};

pub use checkpoint::{decode_expert, encode_expert, read_expert, write_expert, EXPERT_MAGIC};
pub use train::{
    ce_loss_and_grads, cosine_anneal_lr, train_task, ClassifierHead, Gradients, TrainConfig,
    TrainReport,
};

/// Standard deviation of the `W_down` initialization.
pub const W_DOWN_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterMode {
    Seq,
    Par,
}

impl std::str::FromStr for AdapterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "seq" | "sequential" => Ok(Self::Seq),
            "par" | "parallel" => Ok(Self::Par),
            other => Err(Error::Invalid(format!("unknown adapter mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterExpert {
    task_id: TaskId,
    scope: BTreeSet<ClassId>,
    w_down: DenseMatrix,
    w_up: DenseMatrix,
    mode: AdapterMode,
    trained: bool,
}

/// Intermediate values of one forward pass, kept for backpropagation.
pub(crate) struct ForwardTrace {
    pub pre_activation: Vec<f64>,
    pub activation: Vec<f64>,
    pub output: Vec<f64>,
}

impl AdapterExpert {
    /// Fresh expert: `W_down ~ N(0, 0.02²)`, `W_up = 0`.
    pub fn new(
        task_id: TaskId,
        scope: BTreeSet<ClassId>,
        dim: usize,
        bottleneck: usize,
        mode: AdapterMode,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let data = (0..dim * bottleneck)
            .map(|_| W_DOWN_INIT_STD * rng.normal())
            .collect();
        let w_down = DenseMatrix::new(dim, bottleneck, data)?;
        let w_up = DenseMatrix::zeros(bottleneck, dim);
        Self::from_weights(task_id, scope, w_down, w_up, mode, false)
    }

    pub fn from_weights(
        task_id: TaskId,
        scope: BTreeSet<ClassId>,
        w_down: DenseMatrix,
        w_up: DenseMatrix,
        mode: AdapterMode,
        trained: bool,
    ) -> Result<Self> {
        let (d, r) = (w_down.rows(), w_down.cols());
        if r == 0 || r >= d {
            return Err(Error::Invalid(format!(
                "bottleneck {r} must satisfy 1 <= r < d = {d}"
            )));
        }
        if w_up.rows() != r || w_up.cols() != d {
            return Err(Error::DimensionMismatch {
                expected: r * d,
                found: w_up.rows() * w_up.cols(),
            });
        }
        if scope.is_empty() {
            return Err(Error::Invalid(format!("expert {task_id} has an empty scope")));
        }
        if !w_down.is_finite() || !w_up.is_finite() {
            return Err(Error::NonFinite("adapter weights"));
        }
        Ok(Self {
            task_id,
            scope,
            w_down,
            w_up,
            mode,
            trained,
        })
    }

    pub fn task_id(&self) -> TaskId {
        self.task_id
    }

    pub fn scope(&self) -> &BTreeSet<ClassId> {
        &self.scope
    }

    pub fn dim(&self) -> usize {
        self.w_down.rows()
    }

    pub fn bottleneck(&self) -> usize {
        self.w_down.cols()
    }

    pub fn mode(&self) -> AdapterMode {
        self.mode
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn w_down(&self) -> &DenseMatrix {
        &self.w_down
    }

    pub fn w_up(&self) -> &DenseMatrix {
        &self.w_up
    }

    pub(crate) fn weights_mut(&mut self) -> (&mut DenseMatrix, &mut DenseMatrix) {
        (&mut self.w_down, &mut self.w_up)
    }

    pub(crate) fn mark_trained(&mut self) {
        self.trained = true;
    }

    /// Trainable parameter count, `2·d·r`.
    pub fn parameter_count(&self) -> usize {
        2 * self.dim() * self.bottleneck()
    }

    /// Adapted feature `F` for one sample.
    pub fn forward(&self, h_out: &DenseVector, h_msa: &DenseVector) -> Result<DenseVector> {
        Ok(DenseVector::from_raw(self.trace(h_out, h_msa)?.output))
    }

    pub(crate) fn trace(&self, h_out: &DenseVector, h_msa: &DenseVector) -> Result<ForwardTrace> {
        let d = self.dim();
        for v in [h_out, h_msa] {
            if v.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: v.dim(),
                });
            }
        }
        let input = match self.mode {
            AdapterMode::Seq => h_out.as_slice(),
            AdapterMode::Par => h_msa.as_slice(),
        };
        let pre_activation = vec_mat(input, &self.w_down);
        let activation: Vec<f64> = pre_activation.iter().map(|&x| x.max(0.0)).collect();
        let delta = vec_mat(&activation, &self.w_up);
        let mut output: Vec<f64> = h_out
            .as_slice()
            .iter()
            .zip(&delta)
            .map(|(h, dlt)| h + dlt)
            .collect();
        if self.mode == AdapterMode::Par {
            for (o, m) in output.iter_mut().zip(h_msa.as_slice()) {
                *o += m;
            }
        }
        Ok(ForwardTrace {
            pre_activation,
            activation,
            output,
        })
    }
}
