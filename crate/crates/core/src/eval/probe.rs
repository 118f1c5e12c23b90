//! Linear probe: multinomial logistic regression on frozen features.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Full-batch gradient steps.
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Percent.
    pub top1: f64,
    /// Percent.
    pub top5: f64,
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
}

/// A trained softmax classifier over standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    mean: Array1<f64>,
    scale: Array1<f64>,
    weight: Array2<f64>,
    bias: Array1<f64>,
}

impl LinearClassifier {
    pub fn fit(
        feats: ArrayView2<f64>,
        labels: &[usize],
        classes: usize,
        cfg: &ProbeConfig,
        seed: u64,
    ) -> Result<Self> {
        let (n, f) = feats.dim();
        if n == 0 || n != labels.len() {
            return Err(Error::Dimension(format!("{n} feature rows for {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Parameter(format!("label {bad} out of range for {classes} classes")));
        }
        let mean = feats.mean_axis(Axis(0)).expect("non-empty");
        let scale = feats.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { 1.0 / s } else { 1.0 });
        let x = (&feats - &mean) * &scale;

        let normal = Normal::new(0.0, 0.01).expect("finite std");
        let mut r = rng::stream(seed, "linear-probe", 0);
        let mut weight = Array2::from_shape_fn((classes, f), |_| normal.sample(&mut r));
        let mut bias = Array1::zeros(classes);
        let mut onehot = Array2::<f64>::zeros((n, classes));
        for (i, &l) in labels.iter().enumerate() {
            onehot[[i, l]] = 1.0;
        }
        for _ in 0..cfg.iterations {
            let mut p = x.dot(&weight.t()) + &bias;
            softmax_rows(&mut p);
            let d = (p - &onehot) / n as f64;
            let gw = d.t().dot(&x) + &(&weight * cfg.l2);
            let gb = d.sum_axis(Axis(0));
            weight.scaled_add(-cfg.lr, &gw);
            bias.scaled_add(-cfg.lr, &gb);
        }
        Ok(Self { mean, scale, weight, bias })
    }

    pub fn scores(&self, feats: ArrayView2<f64>) -> Array2<f64> {
        ((&feats - &self.mean) * &self.scale).dot(&self.weight.t()) + &self.bias
    }
}

fn softmax_rows(a: &mut Array2<f64>) {
    for mut row in a.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Whether `label` is among the `k` highest scores; equal scores rank by class index.
fn in_top_k(scores: ndarray::ArrayView1<f64>, label: usize, k: usize) -> bool {
    let target = scores[label];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(c, &s)| s > target || (s == target && c < label))
        .count();
    ahead < k
}

/// Fits on the train split and reports top-1/top-5 accuracy on the test split.
pub fn linear_probe(
    train_feats: ArrayView2<f64>,
    train_labels: &[usize],
    test_feats: ArrayView2<f64>,
    test_labels: &[usize],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeReport> {
    if test_feats.nrows() != test_labels.len() || test_labels.is_empty() {
        return Err(Error::Dimension(format!(
            "{} test feature rows for {} labels",
            test_feats.nrows(),
            test_labels.len()
        )));
    }
    if train_feats.ncols() != test_feats.ncols() {
        return Err(Error::Dimension("train and test feature widths differ".into()));
    }
    let mut present = std::collections::BTreeSet::new();
    present.extend(train_labels.iter().copied());
    if let Some(&missing) = test_labels.iter().find(|l| !present.contains(l)) {
        return Err(Error::LabelCoverage(missing));
    }
    let classes = present.last().map_or(0, |&m| m + 1);
    let clf = LinearClassifier::fit(train_feats, train_labels, classes, cfg, seed)?;
    let scores = clf.scores(test_feats);
    let (mut hit1, mut hit5) = (0usize, 0usize);
    for (row, &l) in scores.outer_iter().zip(test_labels) {
        hit1 += in_top_k(row, l, 1) as usize;
        hit5 += in_top_k(row, l, 5) as usize;
    }
    let n = test_labels.len() as f64;
    Ok(ProbeReport {
        top1: 100.0 * hit1 as f64 / n,
        top5: 100.0 * hit5 as f64 / n,
        classes,
        n_train: train_labels.len(),
        n_test: test_labels.len(),
    })
}
