//! Prefix-LM attention mask.

use super::ModelError;
use crate::numerics::{real, Scalar, Tensor};

/// Boolean visibility matrix; row = query position, column = key position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.len + key]
    }

    /// Additive form: 0 where allowed, -1e9 where forbidden. The -1e9 shift
    /// underflows to exactly zero probability after softmax.
    pub fn to_additive<T: Scalar>(&self) -> Tensor<T> {
        let neg = real::<T>(-1e9);
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { T::zero() } else { neg })
            .collect();
        Tensor::new(vec![self.len, self.len], data)
    }
}

/// Visibility rule: `allowed(i, j) ⇔ j < prefix_len OR (j ≤ i AND i ≥
/// prefix_len)`. Prefix rows attend bidirectionally across the whole prefix
/// and never into the output region; output rows attend to the prefix and
/// causally to earlier output positions.
pub fn build_prefix_mask(prefix_len: usize, total_len: usize) -> Result<AttentionMask, ModelError> {
    if prefix_len > total_len {
        return Err(ModelError::PrefixExceedsLength {
            prefix_len,
            total_len,
        });
    }
    let mut allowed = vec![false; total_len * total_len];
    for i in 0..total_len {
        for j in 0..total_len {
            allowed[i * total_len + j] = j < prefix_len || (j <= i && i >= prefix_len);
        }
    }
    Ok(AttentionMask {
        len: total_len,
        allowed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(mask: &AttentionMask, i: usize) -> Vec<usize> {
        (0..mask.len()).filter(|&j| mask.allowed(i, j)).collect()
    }

    #[test]
    fn prefix_two_of_four() {
        let m = build_prefix_mask(2, 4).unwrap();
        assert_eq!(row(&m, 0), vec![0, 1]);
        assert_eq!(row(&m, 1), vec![0, 1]);
        assert_eq!(row(&m, 2), vec![0, 1, 2]);
        assert_eq!(row(&m, 3), vec![0, 1, 2, 3]);
    }

    #[test]
    fn empty_prefix_is_pure_causal() {
        let m = build_prefix_mask(0, 3).unwrap();
        for i in 0..3 {
            assert_eq!(row(&m, i), (0..=i).collect::<Vec<_>>());
        }
    }

    #[test]
    fn full_prefix_is_fully_bidirectional() {
        let m = build_prefix_mask(3, 3).unwrap();
        for i in 0..3 {
            assert_eq!(row(&m, i), vec![0, 1, 2]);
        }
    }

    #[test]
    fn prefix_longer_than_total_is_an_error() {
        assert!(matches!(
            build_prefix_mask(5, 4),
            Err(ModelError::PrefixExceedsLength { .. })
        ));
    }

    #[test]
    fn additive_form_marks_forbidden_cells() {
        let m = build_prefix_mask(1, 2).unwrap();
        let t: Tensor<f64> = m.to_additive();
        assert_eq!(t.get2(0, 0), 0.0);
        assert_eq!(t.get2(0, 1), -1e9);
        assert_eq!(t.get2(1, 1), 0.0);
    }
}
