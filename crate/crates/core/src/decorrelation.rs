//! Sample distance correlation under cosine distance, and the task loss
//! regularized by it.
//!
//! Everything is recorded on an autodiff [`Tape`] so the statistic can be
//! minimized by gradient descent.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Below this squared distance variance a sample counts as degenerate and the
/// statistic is defined as 0.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecorrelationConfig {
    pub lambda: f32,
    /// Norm floor used by the cosine distance.
    pub epsilon: f32,
    /// Treat the embedding side as a constant, so the regularizer only
    /// shapes the adapter layers.
    #[serde(default)]
    pub detach_embedding: bool,
}

impl Default for DecorrelationConfig {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            epsilon: 1e-8,
            detach_embedding: false,
        }
    }
}

impl DecorrelationConfig {
    pub fn off() -> Self {
        Self {
            lambda: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TensorError::Contract(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(TensorError::Contract(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

fn rows_of(tape: &Tape, x: Var, what: &str) -> Result<(usize, usize)> {
    match *tape.shape(x) {
        [n, d] if n >= 2 => Ok((n, d)),
        ref s => Err(TensorError::Contract(format!(
            "{what} needs [n >= 2, d] rows, got {s:?}"
        ))),
    }
}

/// `D[i][j] = 1 - cos(r_i, r_j)` with norms floored at `eps`; the diagonal
/// is exactly zero.
pub fn cosine_distance_matrix(tape: &mut Tape, rows: Var, eps: f32) -> Result<Var> {
    let (n, _) = rows_of(tape, rows, "cosine distance")?;
    let sq = tape.mul(rows, rows)?;
    let sq = tape.sum_last(sq)?;
    // max(|r|, eps) == sqrt(max(|r|^2, eps^2)) without an infinite slope at 0
    let sq = tape.clamp_min(sq, eps * eps)?;
    let norm = tape.sqrt(sq)?;
    let inv = tape.recip(norm)?;
    let unit = tape.mul_rows(rows, inv)?;
    let unit_t = tape.transpose(unit)?;
    let cos = tape.matmul(unit, unit_t)?;
    let neg = tape.scale(cos, -1.0)?;
    let dist = tape.add_scalar(neg, 1.0)?;
    let mut off_diag = Tensor::ones(&[n, n]);
    for i in 0..n {
        off_diag.data_mut()[i * n + i] = 0.0;
    }
    let mask = tape.constant(off_diag)?;
    tape.mul(dist, mask)
}

/// Subtracts row means and column means and adds back the grand mean.
pub fn double_center(tape: &mut Tape, d: Var) -> Result<Var> {
    match *tape.shape(d) {
        [n, m] if n == m => {}
        ref s => {
            return Err(TensorError::Dimension(format!(
                "double centering needs a square matrix, got {s:?}"
            )))
        }
    }
    let rows = tape.sub_mean_last(d)?;
    let t = tape.transpose(rows)?;
    let cols = tape.sub_mean_last(t)?;
    tape.transpose(cols)
}

/// Biased sample distance correlation of `x[n, d1]` and `y[n, d2]`.
pub fn distance_correlation(tape: &mut Tape, x: Var, y: Var, eps: f32) -> Result<Var> {
    let (nx, _) = rows_of(tape, x, "distance correlation")?;
    let (ny, _) = rows_of(tape, y, "distance correlation")?;
    if nx != ny {
        return Err(TensorError::Contract(format!("sample counts differ: {nx} vs {ny}")));
    }
    let dx = cosine_distance_matrix(tape, x, eps)?;
    let a = double_center(tape, dx)?;
    let dy = cosine_distance_matrix(tape, y, eps)?;
    let b = double_center(tape, dy)?;
    let aa = tape.mul(a, a)?;
    let aa = tape.mean(aa)?;
    let bb = tape.mul(b, b)?;
    let bb = tape.mean(bb)?;
    let var_x = tape.value(aa).data()[0] as f64;
    let var_y = tape.value(bb).data()[0] as f64;
    if var_x < DEGENERATE_VARIANCE || var_y < DEGENERATE_VARIANCE {
        return tape.constant(Tensor::new(vec![1], vec![0.0])?);
    }
    let ab = tape.mul(a, b)?;
    let ab = tape.mean(ab)?;
    let denom = tape.mul(aa, bb)?;
    let denom = tape.sqrt(denom)?;
    let inv = tape.recip(denom)?;
    let r2 = tape.mul(ab, inv)?;
    // the sample covariance can round slightly below zero
    let r2 = tape.clamp_min(r2, 1e-20)?;
    tape.sqrt(r2)
}

/// Vars making up one evaluation of the regularized loss.
#[derive(Clone, Copy, Debug)]
pub struct CompositeLoss {
    pub total: Var,
    pub task: Var,
    /// Absent when the weight is zero: the statistic is then not computed.
    pub dcor: Option<Var>,
}

/// Cross-entropy of `logits[n, V]` plus `lambda * dCor(emb, theta)` where
/// `emb` and `theta` are `[m, d]` rows, one per token position.
pub fn composite_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    emb: Var,
    theta: Var,
    cfg: &DecorrelationConfig,
) -> Result<CompositeLoss> {
    cfg.validate()?;
    let task = tape.cross_entropy(logits, targets)?;
    if cfg.lambda == 0.0 {
        return Ok(CompositeLoss {
            total: task,
            task,
            dcor: None,
        });
    }
    let dcor = regularizer(tape, emb, theta, cfg)?;
    let weighted = tape.scale(dcor, cfg.lambda)?;
    let total = tape.add(task, weighted)?;
    Ok(CompositeLoss {
        total,
        task,
        dcor: Some(dcor),
    })
}

/// Just the dCor term of [`composite_loss`], honoring `detach_embedding`.
pub fn regularizer(tape: &mut Tape, emb: Var, theta: Var, cfg: &DecorrelationConfig) -> Result<Var> {
    let emb = if cfg.detach_embedding {
        let v = tape.value(emb).detached();
        tape.constant(v)?
    } else {
        emb
    };
    distance_correlation(tape, emb, theta, cfg.epsilon)
}

/// Flattens `[B, T, D]` activations into `[B*T, D]` sample rows.
pub fn token_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let d = *s
        .last()
        .ok_or_else(|| TensorError::Dimension("scalar has no rows".into()))?;
    let n = s.iter().product::<usize>() / d.max(1);
    tape.reshape(x, &[n, d])
}

/// Value-only dCor of two row sets.
pub fn dcor_value(x: &Tensor, y: &Tensor, eps: f32) -> Result<f32> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.detached())?;
    let yv = tape.constant(y.detached())?;
    let d = distance_correlation(&mut tape, xv, yv, eps)?;
    Ok(tape.value(d).data()[0])
}
