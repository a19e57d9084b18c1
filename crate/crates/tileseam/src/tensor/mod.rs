//! Dense N-dimensional `f64` arrays plus the convolution/pooling kernels,
//! order statistics and deterministic PRNG the rest of the crate builds on.
//!
//! Layout is row-major with the last axis fastest. All kernels fix their
//! inner summation order so results are bit-reproducible across runs,
//! platforms and worker counts.

mod conv;
mod prng;

pub use conv::{
    conv3d, conv3d_backward_input, conv3d_backward_params, conv3d_transposed,
    conv3d_transposed_backward, max_pool3d, max_pool3d_backward,
};
pub use prng::SplitMix64;

use crate::error::{Error, Result};

/// Dense tensor of 64-bit reals. `data.len()` always equals the product of
/// the shape extents; NaN/Inf never appears as a value (operations that
/// could produce one return an error instead).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds a tensor from raw data, validating length and finiteness.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} (= {})",
                data.len(),
                shape,
                n
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "from_vec" });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterprets the buffer under a new shape of equal volume.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn dims3(&self) -> Result<[usize; 3]> {
        match self.shape.as_slice() {
            &[a, b, c] => Ok([a, b, c]),
            s => Err(Error::Shape(format!("expected rank 3, got {s:?}"))),
        }
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[a, b, c, d] => Ok([a, b, c, d]),
            s => Err(Error::Shape(format!("expected rank 4, got {s:?}"))),
        }
    }

    pub fn dims5(&self) -> Result<[usize; 5]> {
        match self.shape.as_slice() {
            &[a, b, c, d, e] => Ok([a, b, c, d, e]),
            s => Err(Error::Shape(format!("expected rank 5, got {s:?}"))),
        }
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Dot product in index order; used by the adjointness checks.
    pub fn dot(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Random tensor with entries uniform in [0,1).
    pub fn uniform(shape: &[usize], rng: &mut SplitMix64) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform()).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Random tensor with standard-normal entries.
    pub fn normal(shape: &[usize], rng: &mut SplitMix64) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.normal()).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }
}

/// Quantile of a value set by linear interpolation at rank `q * (n - 1)`.
///
/// The convention matters: this matches the default of the array libraries
/// the rest of the pipeline interoperates with.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Data("quantile of empty input".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Data(format!("quantile q={q} outside [0,1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        return Ok(sorted[lo]);
    }
    let frac = rank - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn from_vec_rejects_nan() {
        assert!(Tensor::from_vec(&[2], vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn quantile_boundaries_are_min_and_max() {
        let v = vec![3.0, 1.0, 2.0, 5.0, 4.0];
        assert_eq!(quantile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&v, 1.0).unwrap(), 5.0);
    }

    #[test]
    fn quantile_interpolates_between_order_statistics() {
        let v: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(quantile(&v, 0.5).unwrap(), 49.5);
        assert!((quantile(&v, 0.01).unwrap() - 0.99).abs() < 1e-12);
    }

    #[test]
    fn quantile_rejects_empty_and_out_of_range() {
        assert!(quantile(&[], 0.5).is_err());
        assert!(quantile(&[1.0], -0.1).is_err());
        assert!(quantile(&[1.0], 1.1).is_err());
    }

    proptest! {
        #[test]
        fn quantile_is_monotone_in_q(
            mut values in proptest::collection::vec(-100.0f64..100.0, 1..40),
            q1 in 0.0f64..=1.0,
            q2 in 0.0f64..=1.0,
        ) {
            values.iter_mut().for_each(|v| *v = (*v * 16.0).round() / 16.0);
            let (qa, qb) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            let a = quantile(&values, qa).unwrap();
            let b = quantile(&values, qb).unwrap();
            prop_assert!(a <= b, "quantile not monotone: q{qa}->{a} vs q{qb}->{b}");
        }

        #[test]
        fn quantile_is_permutation_invariant(
            values in proptest::collection::vec(-100.0f64..100.0, 1..40),
            q in 0.0f64..=1.0,
            rot in 0usize..40,
        ) {
            let mut permuted = values.clone();
            permuted.rotate_left(rot % values.len().max(1));
            prop_assert_eq!(
                quantile(&values, q).unwrap().to_bits(),
                quantile(&permuted, q).unwrap().to_bits()
            );
        }
    }
}
