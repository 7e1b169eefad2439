//! Minimal differentiable numeric core: dense f64 tensors, a reverse-mode
//! autodiff tape, Adam with decoupled weight decay, the warmup/decay learning
//! rate schedule, finite-difference gradient checking, and the tensor blob
//! checkpoint format.

mod adam;
mod blob;
mod gradcheck;
mod graph;
mod schedule;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use blob::{load_tensors, save_tensors};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{log_softmax_rows, softmax_rows, Graph, VarId};
pub use schedule::{lr_at, ScheduleConfig};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumkitError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite values produced by `{0}`")]
    NonFinite(&'static str),
    #[error("backward root must be a scalar")]
    NonScalarRoot,
    #[error("input shorter than kernel: {t} < {k}")]
    InputShorterThanKernel { t: usize, k: usize },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("zero-norm vector in cosine similarity")]
    ZeroNorm,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("schedule step {step} out of range 0..={total}")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("bad checkpoint manifest: {0}")]
    BadManifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Cosine similarity of two vectors. Zero-norm inputs are an error rather
/// than a silent 0.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64, NumkitError> {
    if a.len() != b.len() {
        return Err(NumkitError::ShapeMismatch(format!(
            "cosine_sim on lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(NumkitError::ZeroNorm);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        let v = [1.0, 2.0, -3.0];
        assert!((cosine_sim(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap()).abs() < 1e-15);
        let c = cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(NumkitError::ZeroNorm)
        ));
    }
}
