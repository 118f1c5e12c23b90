//! Input-gradient norm of the task loss.

use ndarray::{Array2, Axis};

use crate::error::Result;
use crate::loss::{batch_objective_with_grad, BlendedBatch, NegativePolicy, Objective};
use crate::nn::{stack_images, NetworkHandle};
use crate::train::PreparedBatch;

/// Mean over samples `i` and blends `m` of `‖∇_{x̂_{i,m}} L_task(i, m)‖₂`.
///
/// The gradient is taken with respect to the blended image that enters the
/// network; the clean negatives are held fixed.
pub fn input_grad_norm_probe(
    net: &NetworkHandle,
    batch: &PreparedBatch,
    tau: f64,
    negatives: NegativePolicy,
) -> Result<f64> {
    let norms = input_grad_norms(net, batch, tau, negatives)?;
    Ok(norms.mean().unwrap_or(0.0))
}

/// `B × M` table of per-blend input-gradient norms.
pub fn input_grad_norms(
    net: &NetworkHandle,
    batch: &PreparedBatch,
    tau: f64,
    negatives: NegativePolicy,
) -> Result<Array2<f64>> {
    let objective = Objective {
        tau,
        anchor_term: false,
        negatives,
    };
    let b = batch.images.len();
    let clean = net.embed(&stack_images(&batch.images)?)?;
    let (partners, lams) = batch.partner_table();
    let mut norms = Array2::zeros((b, batch.blend_count()));
    for m in 0..batch.blend_count() {
        let cache = net.forward(&stack_images(batch.blend_images(m))?)?;
        let blended = BlendedBatch {
            embeddings: vec![cache.embeddings.clone()],
            partners: partners.slice(ndarray::s![.., m..m + 1]).to_owned(),
            lams: lams.slice(ndarray::s![.., m..m + 1]).to_owned(),
        };
        let (_, grad) = batch_objective_with_grad(&objective, clean.view(), None, &blended)?;
        // The objective averages over the batch; each sample's own term has weight 1.
        let d_blend = &grad.d_blends[0] * b as f64;
        let (_, d_input) = net.backward(&cache, &d_blend)?;
        for (i, sample) in d_input.axis_iter(Axis(0)).enumerate() {
            norms[[i, m]] = sample.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
    }
    Ok(norms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugPolicy;
    use crate::loss::batch_objective;
    use crate::nn::Architecture;
    use crate::train::prepare_batch;
    use ndarray::Array3;

    fn setup() -> (NetworkHandle, PreparedBatch) {
        let arch = Architecture {
            in_channels: 1,
            widths: vec![3],
            strides: vec![1],
            kernel: 3,
            hidden: 5,
            embed_dim: 3,
        };
        let net = NetworkHandle::random(arch, 4).unwrap();
        let images: Vec<Array3<f64>> = (0..3)
            .map(|k| Array3::from_shape_fn((5, 5, 1), |(y, x, _)| ((y * 5 + x + 7 * k) as f64 * 0.37).sin()))
            .collect();
        let batch = prepare_batch(images, &AugPolicy::default(), 2, 11, 0).unwrap();
        (net, batch)
    }

    fn task_term(net: &NetworkHandle, batch: &PreparedBatch, i: usize, m: usize) -> f64 {
        let clean = net.embed(&stack_images(&batch.images).unwrap()).unwrap();
        let (partners, lams) = batch.partner_table();
        let blended = BlendedBatch {
            embeddings: vec![net.embed(&stack_images(batch.blend_images(m)).unwrap()).unwrap()],
            partners: partners.slice(ndarray::s![.., m..m + 1]).to_owned(),
            lams: lams.slice(ndarray::s![.., m..m + 1]).to_owned(),
        };
        let objective = Objective::new(0.07, false);
        batch_objective(&objective, clean.view(), None, &blended).unwrap().l_task[[i, 0]]
    }

    #[test]
    fn matches_finite_differences() {
        let (net, batch) = setup();
        let norms = input_grad_norms(&net, &batch, 0.07, NegativePolicy::default()).unwrap();
        for i in 0..3 {
            for m in 0..2 {
                let mut sq = 0.0;
                for idx in 0..25 {
                    let (y, x) = (idx / 5, idx % 5);
                    let h = 1e-5;
                    let mut plus = batch.clone();
                    plus.blends[i][m].mixed[[y, x, 0]] += h;
                    let mut minus = batch.clone();
                    minus.blends[i][m].mixed[[y, x, 0]] -= h;
                    let g = (task_term(&net, &plus, i, m) - task_term(&net, &minus, i, m)) / (2.0 * h);
                    sq += g * g;
                }
                let fd = sq.sqrt();
                assert!((fd - norms[[i, m]]).abs() <= 1e-4 * fd.max(1e-8), "{fd} vs {}", norms[[i, m]]);
            }
        }
    }

    #[test]
    fn constant_network_has_zero_gradient() {
        let (mut net, batch) = setup();
        for p in net.params_mut().unwrap() {
            if p.name.starts_with("backbone") {
                p.value.fill(0.0);
            }
        }
        net.params_mut().unwrap().last_mut().unwrap().value.fill(1.0);
        let v = input_grad_norm_probe(&net, &batch, 0.07, NegativePolicy::default()).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn deterministic() {
        let (net, batch) = setup();
        let a = input_grad_norm_probe(&net, &batch, 0.07, NegativePolicy::default()).unwrap();
        let b = input_grad_norm_probe(&net, &batch, 0.07, NegativePolicy::default()).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a > 0.0);
    }
}
