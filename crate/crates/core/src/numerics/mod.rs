//! Deterministic dense linear algebra and attention primitives.

mod matrix;
mod ops;

pub use matrix::{BoolMask, DType, FrameMatrix, Matrix, Scalar};
pub use ops::{
    count_flops, ffn_apply, ffn_vjp, layer_norm, layer_norm_vjp, masked_softmax,
    masked_softmax_vjp, matmul, matmul_nt, matmul_tn, matmul_vjp, mean_rows, mean_rows_vjp,
    multi_head_attention, multi_head_attention_full, multi_head_attention_vjp, AttentionGrads,
    AttentionOutput, FfnGrads, LayerNormGrads,
};

use rand::Rng;

/// Matrix with entries drawn uniformly from `[-scale, scale)`.
pub fn random_matrix<T: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    scale: f64,
    rng: &mut R,
) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| {
        T::from_f64_lossy(rng.gen_range(-scale..scale))
    })
}
