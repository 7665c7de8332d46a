//! Relation-based knowledge distillation: centered-cosine representation
//! similarity matrices and the arctanh-matched alignment loss.

use crate::error::{AeslError, Result};
use crate::numerics::matrix::{centered_cosine_matrix, Matrix};
use crate::numerics::tape::{NodeId, Tape};

/// Similarities are clamped into [-1 + ARCTANH_GUARD, 1 - ARCTANH_GUARD]
/// before arctanh. A two-instance batch pins the off-diagonal at exactly -1,
/// hence the batch-size floor below.
pub const ARCTANH_GUARD: f64 = 1e-6;

/// Smallest batch for which an RSM is well defined here.
pub const MIN_RSM_BATCH: usize = 3;

/// Where a representation similarity matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsmSource {
    CurrentModel,
    OldModel,
    Affective,
}

/// Pairwise centered-cosine similarities over a batch.
#[derive(Debug, Clone)]
pub struct Rsm {
    pub matrix: Matrix,
    pub source: RsmSource,
}

/// RSM of a batch of row features, centered by the batch mean.
pub fn rsm(features: &Matrix, source: RsmSource) -> Result<Rsm> {
    if features.rows() < MIN_RSM_BATCH {
        return Err(AeslError::invalid(format!(
            "rsm requires a batch of at least {MIN_RSM_BATCH}, got {}",
            features.rows()
        )));
    }
    Ok(Rsm {
        matrix: centered_cosine_matrix(features)?,
        source,
    })
}

/// Alignment loss between two RSMs: mean over i != j of
/// (arctanh(m_student) - arctanh(m_teacher))^2 after clamping.
pub fn rkd_loss(student: &Rsm, teacher: &Rsm) -> Result<f64> {
    let n = student.matrix.rows();
    if teacher.matrix.shape() != (n, n) {
        return Err(AeslError::ShapeMismatch {
            op: "rkd_loss",
            left_rows: n,
            left_cols: n,
            right_rows: teacher.matrix.rows(),
            right_cols: teacher.matrix.cols(),
        });
    }
    let lo = -1.0 + ARCTANH_GUARD;
    let hi = 1.0 - ARCTANH_GUARD;
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let s = student.matrix.get(i, j).clamp(lo, hi).atanh();
            let t = teacher.matrix.get(i, j).clamp(lo, hi).atanh();
            acc += (s - t) * (s - t);
        }
    }
    Ok(acc / (n * (n - 1)) as f64)
}

/// Tape version of [`rkd_loss`] with a constant (teacher) RSM.
pub fn rkd_loss_on_tape(tape: &mut Tape, student_features: NodeId, teacher: &Rsm) -> Result<NodeId> {
    let n = tape.value(student_features).rows();
    if teacher.matrix.shape() != (n, n) {
        return Err(AeslError::ShapeMismatch {
            op: "rkd_loss",
            left_rows: n,
            left_cols: n,
            right_rows: teacher.matrix.rows(),
            right_cols: teacher.matrix.cols(),
        });
    }
    let lo = -1.0 + ARCTANH_GUARD;
    let hi = 1.0 - ARCTANH_GUARD;

    let centered = tape.center_rows(student_features);
    let normed = tape.normalize_rows(centered)?;
    let cos = tape.gram(normed)?;
    let clamped = tape.clamp(cos, lo, hi);
    let warped = tape.arctanh(clamped);

    let teacher_warped = teacher.matrix.map(|v| v.clamp(lo, hi).atanh());
    let teacher_node = tape.leaf(teacher_warped);
    let diff = tape.sub(warped, teacher_node)?;
    let sq = tape.hadamard(diff, diff)?;

    // Knock out the diagonal before averaging over ordered pairs.
    let mask = {
        let mut m = Matrix::filled(n, n, 1.0);
        for i in 0..n {
            m.set(i, i, 0.0);
        }
        m
    };
    let mask_node = tape.leaf(mask);
    let masked = tape.hadamard(sq, mask_node)?;
    let total = tape.sum_all(masked);
    Ok(tape.scale_const(total, 1.0 / (n * (n - 1)) as f64))
}

/// Overall distillation loss: lambda1 * model term + lambda2 * affective
/// term. The model term is zero on the first task, where no teacher exists.
pub fn combined_kd(
    model_term: Option<f64>,
    affective_term: f64,
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    if lambda1 < 0.0 || lambda2 < 0.0 {
        return Err(AeslError::invalid("distillation weights must be non-negative"));
    }
    Ok(lambda1 * model_term.unwrap_or(0.0) + lambda2 * affective_term)
}
