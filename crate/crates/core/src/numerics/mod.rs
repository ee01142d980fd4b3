//! Dense channels-last tensors and the probability / label primitives the
//! loss, oracle and trainer modules share.
//!
//! The trailing axis is always the class axis. Binary problems use two
//! explicit channels with background as class 0.

pub mod segt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clipping applied to probabilities before any logarithm.
pub const CLIP_EPS: f64 = 1e-7;

/// Row-major dense tensor of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        validate_shape(&shape)?;
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::invalid(
                "data",
                format!("length {} does not match shape {:?} ({len})", data.len(), shape),
            ));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the trailing (class) axis.
    pub fn channels(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    /// Number of elements (pixels) excluding the class axis.
    pub fn elements(&self) -> usize {
        self.data.len() / self.channels()
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.channels())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::invalid("shape", "must have at least one axis"));
    }
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(Error::invalid("shape", format!("axis {pos} has zero extent")));
    }
    Ok(())
}

/// Per-element class probabilities. Every value lies in `[0, 1]`; rows sum to
/// one unless the tensor came out of [`clip_probs`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbTensor(Tensor);

impl ProbTensor {
    /// Validates range and per-element normalisation (within 1e-9).
    pub fn new(tensor: Tensor) -> Result<Self> {
        for (i, row) in tensor.rows().enumerate() {
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::invalid(
                    "probabilities",
                    format!("value {v} at element {i} outside [0, 1]"),
                ));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(
                    "probabilities",
                    format!("element {i} sums to {s}, expected 1"),
                ));
            }
        }
        Ok(Self(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn classes(&self) -> usize {
        self.0.channels()
    }

    pub fn elements(&self) -> usize {
        self.0.elements()
    }

    /// Hard prediction: per-element argmax, first index wins ties.
    pub fn argmax(&self) -> Labels {
        let data = self.0.rows().map(argmax_row).collect();
        Labels {
            shape: self.0.shape()[..self.0.shape().len() - 1].to_vec(),
            data,
        }
    }
}

/// Ground truth in one-hot layout: exactly one 1 per element.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotMask(Tensor);

impl OneHotMask {
    pub fn new(tensor: Tensor) -> Result<Self> {
        for (i, row) in tensor.rows().enumerate() {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(Error::invalid(
                    "truth",
                    format!("element {i} is not one-hot: {row:?}"),
                ));
            }
        }
        Ok(Self(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn classes(&self) -> usize {
        self.0.channels()
    }

    pub fn elements(&self) -> usize {
        self.0.elements()
    }

    pub fn argmax(&self) -> Labels {
        Labels {
            shape: self.0.shape()[..self.0.shape().len() - 1].to_vec(),
            data: self.0.rows().map(argmax_row).collect(),
        }
    }

    /// Class index of every element.
    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.rows().map(argmax_row)
    }
}

/// Integer class labels without a class axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    pub shape: Vec<usize>,
    pub data: Vec<usize>,
}

impl Labels {
    pub fn new(shape: Vec<usize>, data: Vec<usize>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::invalid(
                "labels",
                format!("length {} does not match shape {shape:?}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = c;
        }
    }
    best
}

/// Neumaier summation. Finite-difference checks difference two loss values
/// and divide by 2h, so a few ulp of summation error would swamp tiny gradients.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    /// `(v, r)` with `v` the rounded total and `r` what rounding dropped.
    pub fn split(self) -> (f64, f64) {
        let v = self.sum + self.carry;
        let bv = v - self.sum;
        (v, (self.sum - (v - bv)) + (self.carry - bv))
    }

    /// Adds `k * x` keeping the rounding error of the product.
    pub fn add_scaled(&mut self, k: f64, x: f64) {
        let prod = k * x;
        self.add(prod);
        self.add(k.mul_add(x, -prod));
    }
}

/// Max-subtracted softmax over the trailing axis.
pub fn softmax(logits: &Tensor) -> Result<ProbTensor> {
    if let Some((index, &value)) = logits.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { index, value });
    }
    let c = logits.channels();
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        softmax_in_place(row);
    }
    Ok(ProbTensor(Tensor::from_parts_unchecked(
        logits.shape().to_vec(),
        out,
    )))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Appends a one-hot class axis to `labels`.
pub fn one_hot(labels: &Labels, num_classes: usize) -> Result<OneHotMask> {
    if num_classes == 0 {
        return Err(Error::invalid("num_classes", "must be positive"));
    }
    let mut data = vec![0.0; labels.data.len() * num_classes];
    for (index, &label) in labels.data.iter().enumerate() {
        if label >= num_classes {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                num_classes,
            });
        }
        data[index * num_classes + label] = 1.0;
    }
    let mut shape = labels.shape.clone();
    shape.push(num_classes);
    validate_shape(&shape)?;
    Ok(OneHotMask(Tensor::from_parts_unchecked(shape, data)))
}

/// Clamps every probability into `[eps, 1 - eps]`.
pub fn clip_probs(p: &ProbTensor, eps: f64) -> ProbTensor {
    assert!(eps > 0.0 && eps < 0.5, "clip eps must lie in (0, 0.5)");
    let data = p.data().iter().map(|v| v.clamp(eps, 1.0 - eps)).collect();
    ProbTensor(Tensor::from_parts_unchecked(p.shape().to_vec(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn compensated_sum_keeps_what_naive_sum_loses() {
        let xs = [1.0, 1e-17, 1e-17, 1e-17, -1.0, 3e-18];
        assert_eq!(xs.iter().sum::<f64>(), 3e-18);
        let mut s = CompensatedSum::default();
        for x in xs {
            s.add(x);
        }
        let (v, r) = s.split();
        assert!((v - 3.3e-17).abs() < 1e-30, "{v}");
        assert!(r.abs() <= f64::EPSILON * v.abs());

        let mut p = CompensatedSum::default();
        p.add_scaled(0.1, 3.0);
        let (v, r) = p.split();
        assert_eq!(v, 0.1 * 3.0);
        assert_eq!(r, 0.1f64.mul_add(3.0, -(0.1 * 3.0)));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&t(&[1, 2], &[0.0, 0.0])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = softmax(&t(&[1, 2], &[1000.0, 1000.0])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = softmax(&t(&[1, 2], &[2f64.ln(), 0.0])).unwrap();
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            Tensor::new(vec![2], vec![0.0, f64::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        let bad = Tensor::from_parts_unchecked(vec![1, 2], vec![f64::INFINITY, 0.0]);
        assert!(matches!(softmax(&bad), Err(Error::NonFinite { index: 0, .. })));
    }

    #[test]
    fn shape_validation() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn one_hot_examples() {
        let m = one_hot(&Labels::new(vec![1], vec![1]).unwrap(), 2).unwrap();
        assert_eq!(m.shape(), &[1, 2]);
        assert_eq!(m.data(), &[0.0, 1.0]);
        let m = one_hot(&Labels::new(vec![2], vec![0, 2]).unwrap(), 3).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn one_hot_out_of_range_names_index() {
        let err = one_hot(&Labels::new(vec![3], vec![0, 1, 5]).unwrap(), 3).unwrap_err();
        assert!(matches!(
            err,
            Error::LabelOutOfRange { index: 2, label: 5, num_classes: 3 }
        ));
    }

    #[test]
    fn clip_examples() {
        let p = ProbTensor::new(t(&[3, 2], &[0.0, 1.0, 0.5, 0.5, 1.0, 0.0])).unwrap();
        let c = clip_probs(&p, 1e-7);
        assert_eq!(c.data(), &[1e-7, 1.0 - 1e-7, 0.5, 0.5, 1.0 - 1e-7, 1e-7]);
    }

    #[test]
    fn prob_and_mask_validation() {
        assert!(ProbTensor::new(t(&[1, 2], &[0.6, 0.6])).is_err());
        assert!(OneHotMask::new(t(&[1, 2], &[1.0, 1.0])).is_err());
        assert!(OneHotMask::new(t(&[1, 2], &[0.5, 0.5])).is_err());
    }

    proptest! {
        #[test]
        fn softmax_normalised_and_shift_invariant(
            logits in prop::collection::vec(-50.0f64..50.0, 2..40),
            shift in -100.0f64..100.0,
        ) {
            let n = logits.len() / 2 * 2;
            let base = t(&[n / 2, 2], &logits[..n]);
            let shifted = t(&[n / 2, 2], &logits[..n].iter().map(|v| v + shift).collect::<Vec<_>>());
            let p = softmax(&base).unwrap();
            let q = softmax(&shifted).unwrap();
            for row in p.tensor().rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            for (a, b) in p.data().iter().zip(q.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn one_hot_argmax_round_trip(labels in prop::collection::vec(0usize..4, 1..64)) {
            let l = Labels::new(vec![labels.len()], labels.clone()).unwrap();
            let m = one_hot(&l, 4).unwrap();
            prop_assert_eq!(&m.argmax().data, &labels);
            let again = one_hot(&m.argmax(), 4).unwrap();
            prop_assert_eq!(again, m);
        }
    }
}
