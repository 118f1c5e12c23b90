//! NRMSE decoder probe: how much of a patch's magnitude survives in its
//! embedding.
//!
//! The decoder is `linear → ReLU → (transposed conv → ReLU)* → transposed
//! conv`, each transposed convolution doubling the spatial size from a 4×4
//! seed; the output is cropped to the patch size.

use ndarray::{s, Array1, Array2, Array4, ArrayD, ArrayView2, Axis, Ix1, Ix2, Ix4, IxDyn};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::kernels::{conv_backward_input, conv_backward_weight, conv_forward, ConvGeometry};
use crate::rng;

const SEED_SIZE: usize = 4;
const UP: ConvGeometry = ConvGeometry {
    stride: 2,
    pad: 1,
    kernel: 4,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Channels of the 4×4 seed; halved at every upsampling stage (minimum 4).
    pub channels: usize,
    pub iterations: usize,
    /// Adam step size.
    pub lr: f64,
    /// Share of the patches used to fit the decoder; the rest are scored.
    pub train_fraction: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            iterations: 400,
            lr: 3e-3,
            train_fraction: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NrmseReport {
    pub nrmse: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Patches dropped because their magnitude is identically zero.
    pub excluded: usize,
}

/// `‖pred − truth‖₂ / ‖truth‖₂`; `None` when `truth` is all zeros.
pub fn nrmse(pred: ArrayView2<f64>, truth: ArrayView2<f64>) -> Option<f64> {
    let denom = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    if denom == 0.0 {
        return None;
    }
    let num = pred
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Some(num / denom)
}

struct Decoder {
    patch: usize,
    /// `[fc.weight, fc.bias, up0.weight, up0.bias, ...]`.
    params: Vec<ArrayD<f64>>,
}

struct DecoderCache {
    input: Array2<f64>,
    /// Input of every transposed convolution.
    stage_inputs: Vec<Array4<f64>>,
}

impl Decoder {
    fn new(features: usize, patch: usize, channels: usize, seed: u64) -> Self {
        let mut stages = 0;
        while SEED_SIZE << stages < patch {
            stages += 1;
        }
        let stages = stages.max(1);
        let mut widths = vec![channels];
        for l in 0..stages {
            widths.push(if l + 1 == stages { 1 } else { (widths[l] / 2).max(4) });
        }
        let mut params = Vec::new();
        let mut push = |shape: Vec<usize>, fan_in: usize, index: u64| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite");
            let mut r = rng::stream(seed, "decoder", index);
            params.push(ArrayD::from_shape_fn(IxDyn(&shape), |_| normal.sample(&mut r)));
        };
        push(vec![channels * SEED_SIZE * SEED_SIZE, features], features, 0);
        for l in 0..stages {
            let (a, b) = (widths[l], widths[l + 1]);
            push(vec![a, b, UP.kernel, UP.kernel], a * UP.kernel * UP.kernel / 4, 1 + l as u64);
        }
        let mut with_bias = Vec::new();
        for (k, p) in params.into_iter().enumerate() {
            let outputs = if k == 0 { p.shape()[0] } else { p.shape()[1] };
            with_bias.push(p);
            with_bias.push(ArrayD::zeros(IxDyn(&[outputs])));
        }
        Self {
            patch,
            params: with_bias,
        }
    }

    fn stages(&self) -> usize {
        self.params.len() / 2 - 1
    }

    fn matrix(&self, k: usize) -> ndarray::ArrayView2<'_, f64> {
        self.params[k].view().into_dimensionality::<Ix2>().expect("matrix")
    }

    fn vector(&self, k: usize) -> ndarray::ArrayView1<'_, f64> {
        self.params[k].view().into_dimensionality::<Ix1>().expect("vector")
    }

    fn kernel(&self, k: usize) -> ndarray::ArrayView4<'_, f64> {
        self.params[k].view().into_dimensionality::<Ix4>().expect("kernel")
    }

    /// Full-size output `N × 1 × S × S` and the cache for backward.
    fn forward(&self, x: &Array2<f64>) -> (Array4<f64>, DecoderCache) {
        let n = x.nrows();
        let seed = (x.dot(&self.matrix(0).t()) + &self.vector(1)).mapv(|v| v.max(0.0));
        let channels = seed.ncols() / (SEED_SIZE * SEED_SIZE);
        let mut current = seed
            .to_shape((n, channels, SEED_SIZE, SEED_SIZE))
            .expect("seed shape")
            .into_owned();
        let mut stage_inputs = Vec::new();
        for l in 0..self.stages() {
            let (_, _, h, w) = current.dim();
            let mut y = conv_backward_input(
                current.view(),
                self.kernel(2 + 2 * l),
                UP,
                UP.transposed_output_size(h),
                UP.transposed_output_size(w),
            );
            let bias = self.vector(3 + 2 * l);
            let last = l + 1 == self.stages();
            for mut sample in y.outer_iter_mut() {
                for (mut plane, b) in sample.outer_iter_mut().zip(bias.iter()) {
                    plane.mapv_inplace(|v| if last { v + b } else { (v + b).max(0.0) });
                }
            }
            stage_inputs.push(std::mem::replace(&mut current, y));
        }
        (
            current,
            DecoderCache {
                input: x.clone(),
                stage_inputs,
            },
        )
    }

    fn predict(&self, x: &Array2<f64>) -> Array4<f64> {
        let (out, _) = self.forward(x);
        out.slice(s![.., .., ..self.patch, ..self.patch]).to_owned()
    }

    fn backward(&self, cache: &DecoderCache, d_out: Array4<f64>) -> Vec<ArrayD<f64>> {
        let mut grads: Vec<ArrayD<f64>> = self.params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        let mut d = d_out;
        for l in (0..self.stages()).rev() {
            let input = &cache.stage_inputs[l];
            grads[3 + 2 * l] = d.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn();
            grads[2 + 2 * l] = conv_backward_weight(d.view(), input.view(), UP).into_dyn();
            d = conv_forward(d.view(), self.kernel(2 + 2 * l), UP);
            d.zip_mut_with(input, |g, a| {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            });
        }
        let n = d.dim().0;
        let d_seed = d.into_shape_with_order((n, self.params[0].shape()[0])).expect("seed grad");
        grads[0] = d_seed.t().dot(&cache.input).into_dyn();
        grads[1] = d_seed.sum_axis(Axis(0)).into_dyn();
        grads
    }
}

struct Adam {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &[ArrayD<f64>]) -> Self {
        let zeros = || params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    fn step(&mut self, params: &mut [ArrayD<f64>], grads: &[ArrayD<f64>], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let (c1, c2) = (1.0 - B1.powi(self.t), 1.0 - B2.powi(self.t));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = B1 * *m + (1.0 - B1) * g;
                *v = B2 * *v + (1.0 - B2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
            });
        }
    }
}

/// Fits a decoder from `features` (one row per patch) to `magnitudes` on a
/// seeded train split and reports the mean NRMSE over the held-out patches.
pub fn nrmse_probe(
    features: ArrayView2<f64>,
    magnitudes: &[Array2<f64>],
    cfg: &DecoderConfig,
    seed: u64,
) -> Result<NrmseReport> {
    if features.nrows() != magnitudes.len() {
        return Err(Error::Dimension(format!(
            "{} feature rows for {} patches",
            features.nrows(),
            magnitudes.len()
        )));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) || cfg.channels == 0 {
        return Err(Error::Config("decoder train_fraction must lie in (0, 1)".into()));
    }
    let patch = magnitudes.first().map(|m| m.nrows()).unwrap_or(0);
    if magnitudes.iter().any(|m| m.dim() != (patch, patch)) || patch == 0 {
        return Err(Error::Dimension("magnitude patches must be square and equally sized".into()));
    }
    let mut keep: Vec<usize> = (0..magnitudes.len())
        .filter(|&i| magnitudes[i].iter().any(|&v| v != 0.0))
        .collect();
    let excluded = magnitudes.len() - keep.len();
    if excluded > 0 {
        log::warn!("{excluded} all-zero patches excluded from the NRMSE probe");
    }
    if keep.len() < 2 {
        return Err(Error::Capacity("NRMSE probe needs at least 2 non-zero patches".into()));
    }
    keep.shuffle(&mut rng::stream(seed, "nrmse-split", 0));
    let n_train = ((keep.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, keep.len() - 1);
    let (train, test) = keep.split_at(n_train);

    let rows = |idx: &[usize]| features.select(Axis(0), idx);
    let train_x = rows(train);
    let mean = train_x.mean_axis(Axis(0)).expect("non-empty");
    let scale: Array1<f64> = train_x
        .std_axis(Axis(0), 0.0)
        .mapv(|s| if s > 1e-12 { 1.0 / s } else { 1.0 });
    let standardize = |x: Array2<f64>| (x - &mean) * &scale;
    let train_x = standardize(train_x);
    let test_x = standardize(rows(test));
    let target = Array4::from_shape_fn((train.len(), 1, patch, patch), |(i, _, y, x)| {
        magnitudes[train[i]][[y, x]]
    });

    let mut decoder = Decoder::new(features.ncols(), patch, cfg.channels, seed);
    let mut adam = Adam::new(&decoder.params);
    let norm = (train.len() * patch * patch) as f64;
    for _ in 0..cfg.iterations {
        let (out, cache) = decoder.forward(&train_x);
        let mut d_out = Array4::zeros(out.raw_dim());
        d_out
            .slice_mut(s![.., .., ..patch, ..patch])
            .assign(&((&out.slice(s![.., .., ..patch, ..patch]) - &target) * (2.0 / norm)));
        let grads = decoder.backward(&cache, d_out);
        adam.step(&mut decoder.params, &grads, cfg.lr);
    }

    let pred = decoder.predict(&test_x);
    let total: f64 = test
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            nrmse(pred.slice(s![k, 0, .., ..]), magnitudes[i].view()).expect("non-zero patch")
        })
        .sum();
    Ok(NrmseReport {
        nrmse: total / test.len() as f64,
        n_train: train.len(),
        n_test: test.len(),
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identities() {
        let x = array![[1.0, -2.0], [0.5, 3.0]];
        assert_eq!(nrmse(x.view(), x.view()), Some(0.0));
        assert_eq!(nrmse(Array2::zeros((2, 2)).view(), x.view()), Some(1.0));
        assert_eq!(nrmse((&x * 2.0).view(), x.view()), Some(1.0));
        assert_eq!(nrmse(x.view(), Array2::zeros((2, 2)).view()), None);
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let dec = Decoder::new(3, 7, 4, 5);
        let x = Array2::from_shape_fn((2, 3), |(i, j)| (i as f64 - j as f64) * 0.3 + 0.1);
        let (out, cache) = dec.forward(&x);
        let w = Array4::from_shape_fn(out.raw_dim(), |(n, _, y, x)| ((n + 2 * y + 3 * x) % 5) as f64 - 2.0);
        let loss = |d: &Decoder| (d.forward(&x).0 * &w).sum();
        let grads = dec.backward(&cache, w.clone());
        for (k, g) in grads.iter().enumerate() {
            for idx in [0, g.len() / 2, g.len() - 1] {
                let h = 1e-6;
                let mut plus = Decoder { patch: dec.patch, params: dec.params.clone() };
                let mut minus = Decoder { patch: dec.patch, params: dec.params.clone() };
                plus.params[k].as_slice_mut().unwrap()[idx] += h;
                minus.params[k].as_slice_mut().unwrap()[idx] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = g.as_slice().unwrap()[idx];
                assert!((fd - an).abs() <= 1e-5 * (1.0 + an.abs()), "param {k}[{idx}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn zero_patches_are_excluded() {
        let feats = Array2::from_shape_fn((6, 2), |(i, j)| (i * 2 + j) as f64);
        let mut mags: Vec<Array2<f64>> = (0..6).map(|i| Array2::from_elem((4, 4), 1.0 + i as f64)).collect();
        mags[2].fill(0.0);
        let cfg = DecoderConfig { iterations: 5, ..DecoderConfig::default() };
        let r = nrmse_probe(feats.view(), &mags, &cfg, 0).unwrap();
        assert_eq!(r.excluded, 1);
        assert_eq!(r.n_train + r.n_test, 5);
        assert_eq!(r, nrmse_probe(feats.view(), &mags, &cfg, 0).unwrap());
    }
}
