//! The differentiable-classifier interface shared by explainers and attacks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A classifier over `[H, W, C]` inputs producing one score per class.
///
/// Implementations must be deterministic and safe to evaluate from several
/// threads at once.
pub trait Classifier: Sync {
    /// `[H, W, C]`.
    fn input_shape(&self) -> [usize; 3];

    fn n_classes(&self) -> usize;

    fn logits(&self, x: &Tensor) -> Result<Vec<f64>>;

    /// Evaluates the logits at `x`, asks `coeffs` for a weighting `c` of the
    /// classes given those logits, and returns the logits together with
    /// `d(sum_m c[m] * logits[m]) / dx`.
    fn logits_and_grad(&self, x: &Tensor, coeffs: &dyn Fn(&[f64]) -> Vec<f64>) -> Result<(Vec<f64>, Tensor)>;

    fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(predict_label(&self.logits(x)?))
    }

    /// Gradient of a single class score.
    fn class_gradient(&self, x: &Tensor, class: usize) -> Result<Tensor> {
        let k = self.n_classes();
        if class >= k {
            return Err(Error::OutOfRange { what: "class", index: class, len: k });
        }
        let (_, g) = self.logits_and_grad(x, &|_| one_hot(k, class))?;
        Ok(g)
    }
}

pub fn one_hot(n: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

/// Argmax with ties broken toward the lowest index.
pub fn predict_label(logits: &[f64]) -> usize {
    let mut best = 0;
    for (m, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = m;
        }
    }
    best
}

/// `logits = W vec(x) + b`, useful as a stub with closed-form answers.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    shape: [usize; 3],
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl LinearClassifier {
    pub fn new(shape: [usize; 3], weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        let d: usize = shape.iter().product();
        if weights.is_empty() || weights.len() != bias.len() || weights.iter().any(|r| r.len() != d) {
            return Err(Error::shape("linear classifier", format!("{} rows for input of {d}", weights.len())));
        }
        Ok(LinearClassifier { shape, weights, bias })
    }

    /// Two-class model whose class-1 score is `w . x + b` and class-0 score
    /// is zero, so the decision margin is exactly `w . x + b`.
    pub fn binary(shape: [usize; 3], w: Vec<f64>, b: f64) -> Result<Self> {
        let zeros = vec![0.0; w.len()];
        Self::new(shape, vec![zeros, w], vec![0.0, b])
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }
}

impl Classifier for LinearClassifier {
    fn input_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn n_classes(&self) -> usize {
        self.weights.len()
    }

    fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        let d: usize = self.shape.iter().product();
        if x.len() != d {
            return Err(Error::shape("linear classifier", format!("input {:?} vs {:?}", x.shape(), self.shape)));
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x.data()).map(|(a, v)| a * v).sum::<f64>())
            .collect())
    }

    fn logits_and_grad(&self, x: &Tensor, coeffs: &dyn Fn(&[f64]) -> Vec<f64>) -> Result<(Vec<f64>, Tensor)> {
        let logits = self.logits(x)?;
        let c = coeffs(&logits);
        let mut g = vec![0.0; x.len()];
        for (w, ck) in self.weights.iter().zip(&c) {
            if *ck != 0.0 {
                g.iter_mut().zip(w).for_each(|(gi, wi)| *gi += ck * wi);
            }
        }
        Ok((logits, Tensor::new(x.shape().to_vec(), g)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_and_ties() {
        assert_eq!(predict_label(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(predict_label(&[0.5, 0.5]), 0);
        let scaled: Vec<f64> = [0.1, 0.9, 0.3].iter().map(|v| v * 7.5).collect();
        assert_eq!(predict_label(&scaled), 1);
    }

    #[test]
    fn linear_stub_gradient_is_w() {
        let m = LinearClassifier::binary([1, 2, 1], vec![2.0, -1.0], 0.0).unwrap();
        let x = Tensor::new(vec![1, 2, 1], vec![0.3, 0.4]).unwrap();
        assert_eq!(m.class_gradient(&x, 1).unwrap().data(), &[2.0, -1.0]);
        assert!(m.class_gradient(&x, 2).is_err());
    }
}
