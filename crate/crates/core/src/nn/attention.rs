use super::graph::{attention_forward, AttnMask};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Masked scaled dot-product attention on plain tensors.
///
/// Each output row is a convex combination of the rows of `values`, weighted
/// by a softmax over the visible keys of `queries · keysᵀ / sqrt(key_dim)`.
/// Masked keys receive exactly zero weight. A query that cannot see any key
/// is an error.
pub fn attention(
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    mask: &AttnMask,
) -> Result<Tensor> {
    multi_head_attention(queries, keys, values, mask, 1)
}

/// [`attention`] with the feature columns split into `heads` groups.
pub fn multi_head_attention(
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    mask: &AttnMask,
    heads: usize,
) -> Result<Tensor> {
    let (tq, d) = (queries.rows(), queries.cols());
    let (tk, dk) = (keys.rows(), keys.cols());
    let (tv, dv) = (values.rows(), values.cols());
    if heads == 0 || d != dk || tk != tv || d % heads != 0 || dv % heads != 0 {
        return Err(Error::Shape(format!(
            "attention q {tq}x{d}, k {tk}x{dk}, v {tv}x{dv}, heads {heads}"
        )));
    }
    if let AttnMask::Explicit(m) = mask {
        if m.len() != tq * tk {
            return Err(Error::Shape(format!(
                "mask has {} entries for a {tq}x{tk} score matrix",
                m.len()
            )));
        }
    }
    let (out, _) = attention_forward(
        queries.data(),
        keys.data(),
        values.data(),
        (tq, tk, d, dv, heads),
        mask,
    )?;
    Ok(Tensor::matrix(tq, dv, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_returns_value() {
        let q = Tensor::matrix(1, 2, vec![0.3, -1.0]);
        let k = Tensor::matrix(1, 2, vec![2.0, 5.0]);
        let v = Tensor::matrix(1, 3, vec![7.0, 8.0, 9.0]);
        let out = attention(&q, &k, &v, &AttnMask::None).unwrap();
        assert_eq!(out.data(), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = Tensor::matrix(1, 2, vec![1.5, -0.5]);
        let k = Tensor::matrix(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let v = Tensor::matrix(3, 1, vec![1.0, 2.0, 6.0]);
        let out = attention(&q, &k, &v, &AttnMask::None).unwrap();
        assert!((out.data()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn masked_key_matches_hand_softmax() {
        // 2 queries x 3 keys, key 1 hidden from query 0, key 2 hidden from query 1.
        let q = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]);
        let k = Tensor::matrix(3, 2, vec![1.0, 1.0, 2.0, 0.0, 0.0, -1.0]);
        let v = Tensor::matrix(3, 1, vec![10.0, 20.0, 30.0]);
        let mask = AttnMask::Explicit(vec![true, false, true, true, true, false]);
        let out = attention(&q, &k, &v, &mask).unwrap();
        let s = 1.0 / 2f64.sqrt();
        // Query 0 scores: key0 = 1*s, key2 = 0.
        let (a, b) = ((1.0 * s).exp(), 0f64.exp());
        let expect0 = (a * 10.0 + b * 30.0) / (a + b);
        // Query 1 scores: key0 = 2*s, key1 = 0.
        let (c, d) = ((2.0 * s).exp(), 0f64.exp());
        let expect1 = (c * 10.0 + d * 20.0) / (c + d);
        assert!((out.data()[0] - expect0).abs() < 1e-12);
        assert!((out.data()[1] - expect1).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_row_is_error() {
        let q = Tensor::matrix(1, 1, vec![1.0]);
        let k = Tensor::matrix(2, 1, vec![1.0, 2.0]);
        let v = Tensor::matrix(2, 1, vec![1.0, 2.0]);
        let err = attention(&q, &k, &v, &AttnMask::Explicit(vec![false, false])).unwrap_err();
        assert!(matches!(err, Error::FullyMasked(0)));
    }

    #[test]
    fn causal_mask_hides_future() {
        let q = Tensor::matrix(2, 1, vec![1.0, 1.0]);
        let k = Tensor::matrix(2, 1, vec![0.0, 0.0]);
        let v = Tensor::matrix(2, 1, vec![4.0, 8.0]);
        let out = attention(&q, &k, &v, &AttnMask::Causal).unwrap();
        assert_eq!(out.data()[0], 4.0);
        assert_eq!(out.data()[1], 6.0);
    }
}
