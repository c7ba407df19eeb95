//! Rotary position encoding.
//!
//! Each coordinate pair (x_{2k}, x_{2k+1}) of a query or key is rotated by
//! the angle m·θ_k, with θ_k = base^(−2k/head_dim) and m the token position.
//! Attention scores between rotated vectors then depend only on relative
//! offsets.

use super::ModelError;
use crate::numerics::{real, Scalar, Tensor};

fn angles(head_dim: usize, base: f64) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|k| base.powf(-2.0 * k as f64 / head_dim as f64))
        .collect()
}

/// Per-position cos/sin tables of shape [len × head_dim], laid out so the
/// rotation is `x ⊙ cos + rotate_pairs(x) ⊙ sin` with
/// `rotate_pairs(x)_{2k, 2k+1} = (-x_{2k+1}, x_{2k})`.
pub fn rope_tables<T: Scalar>(
    positions: &[usize],
    head_dim: usize,
    base: f64,
) -> Result<(Tensor<T>, Tensor<T>), ModelError> {
    if head_dim % 2 != 0 {
        return Err(ModelError::OddHeadDim(head_dim));
    }
    let thetas = angles(head_dim, base);
    let mut cos = Tensor::zeros(&[positions.len(), head_dim]);
    let mut sin = Tensor::zeros(&[positions.len(), head_dim]);
    for (i, &m) in positions.iter().enumerate() {
        let (crow, srow) = (cos.row_mut(i), sin.row_mut(i));
        for (k, &theta) in thetas.iter().enumerate() {
            let angle = m as f64 * theta;
            let (s, c) = angle.sin_cos();
            crow[2 * k] = real::<T>(c);
            crow[2 * k + 1] = real::<T>(c);
            srow[2 * k] = real::<T>(s);
            srow[2 * k + 1] = real::<T>(s);
        }
    }
    Ok((cos, sin))
}

/// Rotate each row of `vectors` by its position's angles. Standalone
/// counterpart of the in-graph application, used directly by tests and
/// probes.
pub fn apply_rope<T: Scalar>(
    vectors: &Tensor<T>,
    positions: &[usize],
    base: f64,
) -> Result<Tensor<T>, ModelError> {
    let head_dim = vectors.cols();
    let (cos, sin) = rope_tables::<T>(positions, head_dim, base)?;
    let mut out = Tensor::zeros(vectors.shape());
    for i in 0..vectors.rows() {
        let (x, c, s) = (vectors.row(i), cos.row(i), sin.row(i));
        let dst = out.row_mut(i);
        for k in (0..head_dim).step_by(2) {
            dst[k] = x[k] * c[k] - x[k + 1] * s[k];
            dst[k + 1] = x[k + 1] * c[k + 1] + x[k] * s[k + 1];
        }
    }
    Ok(out)
}
