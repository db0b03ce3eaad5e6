//! Dual-token ViT student, residual CNN teacher, and the named parameter
//! store both are built on.

mod store;
mod teacher;
mod vit;

pub use store::{Bound, Entry, ParamKind, ParamStore};
pub use teacher::{BnUpdate, TeacherCnn, TeacherConfig, TeacherOutput};
pub use vit::{AttentionRecord, DualTokenVit, VitConfig, VitEval, VitOutput};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{argmax_rows, Scalar, Tape, Tensor, Var};

/// Row-wise argmax; ties go to the lowest index.
pub fn hard_label<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    argmax_rows(logits)
}

/// Normal(0, σ) resampled until it lands within ±2σ.
pub fn trunc_normal<T: Scalar, R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::of(v);
        }
    })
}

/// `x · w + b` over the last axis of `x`; `w` is `[in, out]`.
pub(crate) fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_broadcast(y, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hard_label_examples() {
        let t = Tensor::<f32>::from_rows(&[vec![0.1, 0.9, 0.3]]).unwrap();
        assert_eq!(hard_label(&t), vec![1]);
        let t = Tensor::<f32>::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert_eq!(hard_label(&t), vec![0]);
        let t = Tensor::<f32>::from_rows(&[vec![3.0, 1.0], vec![0.0, 2.0], vec![-1.0, -1.0]]).unwrap();
        assert_eq!(hard_label(&t), vec![0, 1, 0]);
    }

    #[test]
    fn trunc_normal_is_bounded() {
        let mut rng = crate::seed::rng(0, &[]);
        let t: Tensor<f64> = trunc_normal([4000], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let std = (t.sq_norm() / 4000.0).sqrt();
        // truncation at 2σ shrinks the std to ≈ 0.88σ
        assert!((std - 0.0176).abs() < 0.001, "{std}");
    }
}
