//! Backbone and projection head.
//!
//! The backbone is a stack of `conv → ReLU` blocks with configurable widths
//! and strides. The head is global average pooling followed by
//! `linear → ReLU → linear` and unit normalization, so the network maps an
//! `H×W×C` image to a point on the `D`-dimensional unit sphere.
//!
//! Forward and backward passes are written out by hand in `f64`; the
//! backward pass returns gradients for every parameter and for the input.

pub mod kernels;

use ndarray::{Array2, Array3, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use kernels::{conv_backward_input, conv_backward_weight, conv_forward, ConvGeometry};

/// Network shape. Every field is part of the checkpoint header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub in_channels: usize,
    /// Output channels of each convolution block.
    pub widths: Vec<usize>,
    /// Stride of each convolution block.
    pub strides: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Hidden width of the projection MLP.
    pub hidden: usize,
    /// Embedding dimension `D`.
    pub embed_dim: usize,
}

fn default_kernel() -> usize {
    3
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config("architecture sizes must be positive".into()));
        }
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::Config(
                "architecture needs one stride per convolution width".into(),
            ));
        }
        if self.widths.contains(&0) || self.strides.contains(&0) || self.kernel % 2 == 0 {
            return Err(Error::Config(
                "widths and strides must be positive and the kernel odd".into(),
            ));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    fn geometry(&self, block: usize) -> ConvGeometry {
        ConvGeometry {
            stride: self.strides[block],
            pad: self.kernel / 2,
            kernel: self.kernel,
        }
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let mut c_in = self.in_channels;
        for (b, &width) in self.widths.iter().enumerate() {
            specs.push((
                format!("backbone.conv{b}.weight"),
                vec![width, c_in, self.kernel, self.kernel],
            ));
            specs.push((format!("backbone.conv{b}.bias"), vec![width]));
            c_in = width;
        }
        specs.push(("head.fc1.weight".into(), vec![self.hidden, c_in]));
        specs.push(("head.fc1.bias".into(), vec![self.hidden]));
        specs.push(("head.fc2.weight".into(), vec![self.embed_dim, self.hidden]));
        specs.push(("head.fc2.bias".into(), vec![self.embed_dim]));
        specs
    }

    fn head_start(&self) -> usize {
        2 * self.widths.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
}

/// Kaiming-normal weights and zero biases, drawn from `(seed, parameter index)`.
fn init_param(name: &str, shape: &[usize], seed: u64, index: usize) -> ArrayD<f64> {
    if shape.len() == 1 {
        return ArrayD::zeros(IxDyn(shape));
    }
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut r = rng::stream(seed, &format!("init:{name}"), index as u64);
    ArrayD::from_shape_fn(IxDyn(shape), |_| normal.sample(&mut r))
}

/// A backbone plus projection head with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkHandle {
    arch: Architecture,
    params: Vec<Param>,
    frozen: bool,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array4<f64>,
    /// Post-activation output of each conv block.
    activations: Vec<Array4<f64>>,
    pooled: Array2<f64>,
    hidden: Array2<f64>,
    raw: Array2<f64>,
    pub embeddings: Array2<f64>,
}

/// Gradients aligned with [`NetworkHandle::params`].
pub type Gradients = Vec<ArrayD<f64>>;

impl NetworkHandle {
    /// Randomly initialized network.
    pub fn random(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let params = arch
            .param_specs()
            .into_iter()
            .enumerate()
            .map(|(k, (name, shape))| {
                let value = init_param(&name, &shape, seed, k);
                Param { name, value }
            })
            .collect();
        Ok(Self {
            arch,
            params,
            frozen: false,
        })
    }

    /// Assembles a network from named arrays.
    ///
    /// When the head parameters are all missing (a backbone-only checkpoint),
    /// the head is initialized from `head_seed`.
    pub fn from_named(
        arch: Architecture,
        mut named: Vec<(String, ArrayD<f64>)>,
        head_seed: Option<u64>,
    ) -> Result<Self> {
        arch.validate()?;
        let specs = arch.param_specs();
        let has_head = named.iter().any(|(n, _)| n.starts_with("head."));
        let mut params = Vec::with_capacity(specs.len());
        for (k, (name, shape)) in specs.into_iter().enumerate() {
            let found = named.iter().position(|(n, _)| *n == name);
            let value = match (found, has_head, head_seed) {
                (Some(pos), _, _) => named.swap_remove(pos).1,
                (None, false, Some(seed)) if name.starts_with("head.") => {
                    init_param(&name, &shape, seed, k)
                }
                _ => {
                    return Err(Error::Checkpoint(format!("parameter {name} is missing")));
                }
            };
            if value.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, architecture expects {shape:?}",
                    value.shape()
                )));
            }
            if value.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("parameter {name} is not finite")));
            }
            params.push(Param { name, value });
        }
        if let Some((extra, _)) = named.first() {
            return Err(Error::Checkpoint(format!(
                "unexpected parameter {extra} for this architecture"
            )));
        }
        Ok(Self {
            arch,
            params,
            frozen: false,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Mutable access for optimizers; refused on frozen networks.
    pub fn params_mut(&mut self) -> Result<&mut [Param]> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(&mut self.params)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Unfrozen copy.
    pub fn thawed(&self) -> Self {
        Self {
            frozen: false,
            ..self.clone()
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names, shapes and the exact bits of every parameter.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.name.as_bytes());
            for d in p.value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in p.value.iter() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn conv_weight(&self, block: usize) -> ndarray::ArrayView4<'_, f64> {
        self.params[2 * block]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv weight rank")
    }

    fn vector(&self, index: usize) -> ndarray::ArrayView1<'_, f64> {
        self.params[index]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias rank")
    }

    fn matrix(&self, index: usize) -> ndarray::ArrayView2<'_, f64> {
        self.params[index]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("linear weight rank")
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let (n, c, h, w) = x.dim();
        if n == 0 {
            return Err(Error::Capacity("empty input batch".into()));
        }
        if c != self.arch.in_channels {
            return Err(Error::Dimension(format!(
                "network expects {} channels, input has {c}",
                self.arch.in_channels
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::Dimension(format!("input {h}×{w} is too small")));
        }
        Ok(())
    }

    /// Full forward pass keeping intermediate values.
    pub fn forward(&self, x: &Array4<f64>) -> Result<ForwardCache> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.arch.widths.len());
        let mut current = x.clone();
        for block in 0..self.arch.widths.len() {
            let mut y = conv_forward(current.view(), self.conv_weight(block), self.arch.geometry(block));
            let bias = self.vector(2 * block + 1);
            for mut sample in y.outer_iter_mut() {
                for (mut plane, b) in sample.outer_iter_mut().zip(bias.iter()) {
                    plane.mapv_inplace(|v| (v + b).max(0.0));
                }
            }
            activations.push(y);
            current = activations.last().expect("pushed").clone();
        }
        let pooled = current
            .mean_axis(Axis(3))
            .and_then(|a| a.mean_axis(Axis(2)))
            .expect("non-empty spatial dims");
        let h0 = self.arch.head_start();
        let mut hidden = pooled.dot(&self.matrix(h0).t()) + &self.vector(h0 + 1);
        hidden.mapv_inplace(|v| v.max(0.0));
        let raw = hidden.dot(&self.matrix(h0 + 2).t()) + &self.vector(h0 + 3);
        let embeddings = crate::loss::normalize_rows(&raw);
        Ok(ForwardCache {
            input: x.clone(),
            activations,
            pooled,
            hidden,
            raw,
            embeddings,
        })
    }

    /// Unit-normalized embeddings.
    pub fn embed(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.embeddings)
    }

    /// Pooled backbone features (the input of the projection head).
    pub fn features(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.pooled)
    }

    /// Backpropagates `d_embeddings` (`N × D`) to every parameter and to the input.
    pub fn backward(&self, cache: &ForwardCache, d_embeddings: &Array2<f64>) -> Result<(Gradients, Array4<f64>)> {
        if d_embeddings.dim() != cache.embeddings.dim() {
            return Err(Error::Dimension(format!(
                "embedding gradient {:?} does not match forward output {:?}",
                d_embeddings.dim(),
                cache.embeddings.dim()
            )));
        }
        let mut grads: Gradients = self
            .params
            .iter()
            .map(|p| ArrayD::zeros(p.value.raw_dim()))
            .collect();

        // Unit normalization: dz = (dy - y (y·dy)) / |z|.
        let mut d_raw = Array2::zeros(cache.raw.dim());
        for i in 0..cache.raw.nrows() {
            let z = cache.raw.row(i);
            let norm = z.dot(&z).sqrt();
            if norm == 0.0 {
                continue;
            }
            let y = cache.embeddings.row(i);
            let dy = d_embeddings.row(i);
            let proj = y.dot(&dy);
            d_raw.row_mut(i).assign(&((&dy - &(&y * proj)) / norm));
        }

        let h0 = self.arch.head_start();
        grads[h0 + 2] = d_raw.t().dot(&cache.hidden).into_dyn();
        grads[h0 + 3] = d_raw.sum_axis(Axis(0)).into_dyn();
        let mut d_hidden = d_raw.dot(&self.matrix(h0 + 2));
        d_hidden.zip_mut_with(&cache.hidden, |d, h| {
            if *h <= 0.0 {
                *d = 0.0;
            }
        });
        grads[h0] = d_hidden.t().dot(&cache.pooled).into_dyn();
        grads[h0 + 1] = d_hidden.sum_axis(Axis(0)).into_dyn();
        let d_pooled = d_hidden.dot(&self.matrix(h0));

        // Global average pooling spreads the gradient evenly.
        let last = cache.activations.last().expect("at least one block");
        let (n, c, h, w) = last.dim();
        let scale = 1.0 / (h * w) as f64;
        let mut d_act = Array4::from_shape_fn((n, c, h, w), |(s, k, _, _)| d_pooled[[s, k]] * scale);

        for block in (0..self.arch.widths.len()).rev() {
            let act = &cache.activations[block];
            d_act.zip_mut_with(act, |d, a| {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            });
            let input = if block == 0 {
                &cache.input
            } else {
                &cache.activations[block - 1]
            };
            let g = self.arch.geometry(block);
            grads[2 * block] = conv_backward_weight(input.view(), d_act.view(), g).into_dyn();
            grads[2 * block + 1] = d_act.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn();
            let (_, _, ih, iw) = input.dim();
            d_act = conv_backward_input(d_act.view(), self.conv_weight(block), g, ih, iw);
        }
        Ok((grads, d_act))
    }
}

/// Stacks `H×W×C` images into an `N×C×H×W` batch.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Array3<f64>>) -> Result<Array4<f64>> {
    let images: Vec<&Array3<f64>> = images.into_iter().collect();
    let first = images
        .first()
        .ok_or_else(|| Error::Capacity("cannot stack an empty image list".into()))?;
    let (h, w, c) = first.dim();
    if let Some(bad) = images.iter().find(|im| im.dim() != (h, w, c)) {
        return Err(Error::Dimension(format!(
            "image shape {:?} differs from {:?}",
            bad.dim(),
            (h, w, c)
        )));
    }
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (mut slot, image) in out.outer_iter_mut().zip(&images) {
        slot.assign(&image.view().permuted_axes([2, 0, 1]));
    }
    Ok(out)
}

/// Inverse of [`stack_images`] for a single sample.
pub fn unstack_image(batch: &Array4<f64>, index: usize) -> Array3<f64> {
    batch
        .index_axis(Axis(0), index)
        .permuted_axes([1, 2, 0])
        .as_standard_layout()
        .to_owned()
}

/// Euclidean norm of a list of arrays taken as one flat vector.
pub fn global_norm(arrays: &[ArrayD<f64>]) -> f64 {
    arrays
        .iter()
        .map(|a| a.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_arch() -> Architecture {
        Architecture {
            in_channels: 2,
            widths: vec![3, 4],
            strides: vec![1, 2],
            kernel: 3,
            hidden: 5,
            embed_dim: 4,
        }
    }

    fn random_batch(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
        let mut r = rng::stream(seed, "nn-test", 0);
        Array4::from_shape_fn((n, c, h, w), |_| r.random_range(-1.0..1.0))
    }

    /// Scalar test objective: Σ embeddings ⊙ weights.
    fn objective(net: &NetworkHandle, x: &Array4<f64>, weights: &Array2<f64>) -> f64 {
        (&net.embed(x).unwrap() * weights).sum()
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let net = NetworkHandle::random(tiny_arch(), 3).unwrap();
        let e = net.embed(&random_batch(3, 2, 6, 6, 1)).unwrap();
        for row in e.outer_iter() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
        }
        assert_eq!(e.ncols(), 4);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut net = NetworkHandle::random(tiny_arch(), 7).unwrap();
        // Positive biases keep ReLUs away from their kink.
        for p in net.params_mut().unwrap() {
            if p.name.ends_with("bias") {
                p.value.fill(0.05);
            }
        }
        let x = random_batch(2, 2, 5, 5, 2);
        let mut r = rng::stream(9, "nn-test", 1);
        let weights = Array2::from_shape_fn((2, 4), |_| r.random_range(-1.0..1.0));
        let cache = net.forward(&x).unwrap();
        let (grads, d_input) = net.backward(&cache, &weights).unwrap();

        let h = 1e-6;
        for (k, grad) in grads.iter().enumerate() {
            for idx in [0, grad.len() / 2, grad.len() - 1] {
                let mut plus = net.clone();
                plus.params_mut().unwrap()[k].value.as_slice_mut().unwrap()[idx] += h;
                let mut minus = net.clone();
                minus.params_mut().unwrap()[k].value.as_slice_mut().unwrap()[idx] -= h;
                let fd = (objective(&plus, &x, &weights) - objective(&minus, &x, &weights)) / (2.0 * h);
                let an = grad.as_slice().unwrap()[idx];
                assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}[{idx}]: {fd} vs {an}");
            }
        }
        for idx in [(0, 0, 0, 0), (1, 1, 2, 3), (0, 1, 4, 4)] {
            let mut plus = x.clone();
            plus[idx] += h;
            let mut minus = x.clone();
            minus[idx] -= h;
            let fd = (objective(&net, &plus, &weights) - objective(&net, &minus, &weights)) / (2.0 * h);
            assert!((fd - d_input[idx]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn frozen_network_refuses_updates() {
        let mut net = NetworkHandle::random(tiny_arch(), 1).unwrap().freeze();
        assert!(matches!(net.params_mut(), Err(Error::Frozen)));
        assert!(net.thawed().params_mut().is_ok());
    }

    #[test]
    fn named_roundtrip_and_missing_head() {
        let net = NetworkHandle::random(tiny_arch(), 5).unwrap();
        let named: Vec<_> = net.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        let back = NetworkHandle::from_named(tiny_arch(), named.clone(), None).unwrap();
        assert_eq!(back.fingerprint(), net.fingerprint());

        let backbone: Vec<_> = named.iter().filter(|(n, _)| n.starts_with("backbone")).cloned().collect();
        assert!(matches!(
            NetworkHandle::from_named(tiny_arch(), backbone.clone(), None),
            Err(Error::Checkpoint(_))
        ));
        let a = NetworkHandle::from_named(tiny_arch(), backbone.clone(), Some(11)).unwrap();
        let b = NetworkHandle::from_named(tiny_arch(), backbone, Some(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stack_roundtrip() {
        let mut r = rng::stream(4, "nn-test", 2);
        let img = Array3::from_shape_fn((3, 5, 2), |_| r.random_range(-1.0..1.0));
        let batch = stack_images([&img, &img]).unwrap();
        assert_eq!(batch.dim(), (2, 2, 3, 5));
        assert_eq!(unstack_image(&batch, 1), img);
    }
}
