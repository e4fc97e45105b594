//! Multinomial logistic regression with hand-derived gradients.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use crate::error::{Error, Result};
use crate::selection::{normalize_columns, GradientSet};

/// Flat parameter vector: the `classes x features` weight matrix in row-major
/// order, followed by one bias per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub features: usize,
    pub classes: usize,
    pub weights: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(features: usize, classes: usize) -> Self {
        ModelParams { features, classes, weights: vec![0.0; param_count(features, classes)] }
    }

    pub fn from_weights(features: usize, classes: usize, weights: Vec<f64>) -> Result<Self> {
        let d = param_count(features, classes);
        if weights.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: weights.len() });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("model weights"));
        }
        Ok(ModelParams { features, classes, weights })
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    fn bias_offset(&self) -> usize {
        self.features * self.classes
    }

    /// Class probabilities for one feature vector.
    pub fn predict_proba(&self, x: ArrayView1<'_, f64>) -> Vec<f64> {
        let f = self.features;
        let b = self.bias_offset();
        let mut logits: Vec<f64> = (0..self.classes)
            .map(|k| {
                let row = &self.weights[k * f..(k + 1) * f];
                row.iter().zip(x.iter()).map(|(w, v)| w * v).sum::<f64>() + self.weights[b + k]
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            total += *l;
        }
        logits.iter_mut().for_each(|l| *l /= total);
        logits
    }

    /// Cross-entropy of one sample.
    pub fn sample_loss(&self, x: ArrayView1<'_, f64>, label: usize) -> f64 {
        let f = self.features;
        let b = self.bias_offset();
        let logits: Vec<f64> = (0..self.classes)
            .map(|k| {
                let row = &self.weights[k * f..(k + 1) * f];
                row.iter().zip(x.iter()).map(|(w, v)| w * v).sum::<f64>() + self.weights[b + k]
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        lse - logits[label]
    }

    /// Mean cross-entropy over a dataset.
    pub fn mean_loss(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("loss of an empty dataset".into()));
        }
        let total: f64 = (0..data.len()).map(|i| self.sample_loss(data.features.row(i), data.labels[i])).sum();
        let loss = total / data.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss {loss}")));
        }
        Ok(loss)
    }

    /// `exp(mean cross-entropy)`; lower is better.
    pub fn perplexity(&self, data: &Dataset) -> Result<f64> {
        Ok(self.mean_loss(data)?.exp())
    }

    /// Adds the cross-entropy gradient of one sample, scaled by `scale`, into `out`.
    pub fn accumulate_gradient(&self, x: ArrayView1<'_, f64>, label: usize, scale: f64, out: &mut [f64]) {
        let f = self.features;
        let b = self.bias_offset();
        let p = self.predict_proba(x);
        for (k, pk) in p.iter().enumerate() {
            let err = scale * (pk - if k == label { 1.0 } else { 0.0 });
            if err == 0.0 {
                continue;
            }
            for (o, v) in out[k * f..(k + 1) * f].iter_mut().zip(x.iter()) {
                *o += err * v;
            }
            out[b + k] += err;
        }
    }

    /// Cross-entropy gradient of one sample.
    pub fn sample_gradient(&self, x: ArrayView1<'_, f64>, label: usize) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        self.accumulate_gradient(x, label, 1.0, &mut g);
        g
    }

    /// One gradient-descent step on the mean loss of `rows`.
    pub fn step(&mut self, data: &Dataset, rows: &[usize], lr: f64) {
        if rows.is_empty() {
            return;
        }
        let mut grad = vec![0.0; self.dim()];
        let scale = 1.0 / rows.len() as f64;
        for &i in rows {
            self.accumulate_gradient(data.features.row(i), data.labels[i], scale, &mut grad);
        }
        for (w, g) in self.weights.iter_mut().zip(&grad) {
            *w -= lr * g;
        }
    }
}

pub fn param_count(features: usize, classes: usize) -> usize {
    features * classes + classes
}

/// Unit gradient directions of every sample at `w`, as a [`GradientSet`]
/// keyed by the dataset's sample ids. Zero-gradient samples are dropped.
pub fn per_sample_gradients(w: &ModelParams, data: &Dataset) -> Result<GradientSet> {
    let mut raw = Array2::zeros((w.dim(), data.len()));
    for i in 0..data.len() {
        let g = w.sample_gradient(data.features.row(i), data.labels[i]);
        raw.column_mut(i).iter_mut().zip(g).for_each(|(r, v)| *r = v);
    }
    normalize_columns(raw.view(), data.ids.clone())
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;
    use crate::selection::SampleId;

    #[test]
    fn two_class_one_feature_gradient_by_hand() {
        // W = [[0.5], [-0.25]], b = [0.1, 0.2], x = 2, y = 1
        let w = ModelParams::from_weights(1, 2, vec![0.5, -0.25, 0.1, 0.2]).unwrap();
        let x = array![2.0];
        let z0: f64 = 0.5 * 2.0 + 0.1;
        let z1: f64 = -0.25 * 2.0 + 0.2;
        let p0 = z0.exp() / (z0.exp() + z1.exp());
        let p1 = 1.0 - p0;
        let expected = [p0 * 2.0, (p1 - 1.0) * 2.0, p0, p1 - 1.0];
        let g = w.sample_gradient(x.view(), 1);
        for (a, b) in g.iter().zip(expected) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
        // central finite differences at step 1e-6
        for (j, &gj) in g.iter().enumerate() {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus.weights[j] += 1e-6;
            minus.weights[j] -= 1e-6;
            let fd = (plus.sample_loss(x.view(), 1) - minus.sample_loss(x.view(), 1)) / 2e-6;
            assert!((fd - gj).abs() <= 1e-8, "param {j}: {fd} vs {gj}");
        }
    }

    #[test]
    fn certain_sample_is_dropped() {
        // the bias saturates softmax to exactly 1.0 on class 0
        let w = ModelParams::from_weights(1, 2, vec![0.0, 0.0, 800.0, 0.0]).unwrap();
        let data = Dataset {
            features: array![[1.0], [1.0]],
            labels: vec![0, 1],
            ids: vec![SampleId::new("sure"), SampleId::new("wrong")],
        };
        assert_eq!(w.predict_proba(data.features.row(0))[0], 1.0);
        let g = per_sample_gradients(&w, &data).unwrap();
        assert_eq!(g.count(), 1);
        assert_eq!(g.dim(), 4);
        assert_eq!(g.dropped(), &[SampleId::new("sure")]);
    }

    #[test]
    fn zero_model_loss_is_log_classes() {
        let w = ModelParams::zeros(3, 4);
        assert_eq!(w.dim(), 16);
        let x = array![1.0, -2.0, 0.5];
        assert!((w.sample_loss(x.view(), 2) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(ModelParams::from_weights(2, 2, vec![0.0; 5]).is_err());
        assert!(ModelParams::from_weights(1, 2, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
    }
}
