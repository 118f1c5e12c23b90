//! 2-D convolution kernels on `N×C×H×W` batches.
//!
//! Samples are processed in parallel; weight gradients are reduced over the
//! batch in sample order so results do not depend on thread scheduling.

use ndarray::{Array4, ArrayView4};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    pub fn output_size(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Output size of the transposed convolution with this geometry.
    pub fn transposed_output_size(&self, input: usize) -> usize {
        (input - 1) * self.stride + self.kernel - 2 * self.pad
    }

    /// Output columns `ox` whose tap `kx` lands inside `0..width`.
    fn valid_range(&self, tap: usize, width: usize, out: usize) -> std::ops::Range<usize> {
        let (s, p) = (self.stride, self.pad);
        let lo = if p > tap { (p - tap).div_ceil(s) } else { 0 };
        if width + p <= tap {
            return 0..0;
        }
        let hi = ((width - 1 + p - tap) / s + 1).min(out);
        lo.min(hi)..hi
    }
}

fn contiguous<'a>(a: &'a ArrayView4<'_, f64>) -> std::borrow::Cow<'a, [f64]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().copied().collect()),
    }
}

/// `y[n,o] = Σ_c w[o,c] ⋆ x[n,c]` without bias.
pub fn conv_forward(x: ArrayView4<f64>, w: ArrayView4<f64>, g: ConvGeometry) -> Array4<f64> {
    let (n, c_in, h, wd) = x.dim();
    let (c_out, wc, k, _) = w.dim();
    assert_eq!(wc, c_in, "weight input channels");
    let (oh, ow) = (g.output_size(h), g.output_size(wd));
    let xs = contiguous(&x);
    let ws = contiguous(&w);
    let mut out = vec![0.0; n * c_out * oh * ow];
    out.par_chunks_mut(c_out * oh * ow)
        .enumerate()
        .for_each(|(s, out)| {
            let x = &xs[s * c_in * h * wd..(s + 1) * c_in * h * wd];
            for o in 0..c_out {
                let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
                for c in 0..c_in {
                    let xp = &x[c * h * wd..(c + 1) * h * wd];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = ws[((o * c_in + c) * k + ky) * k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let cols = g.valid_range(kx, wd, ow);
                            for oy in g.valid_range(ky, h, oh) {
                                let iy = oy * g.stride + ky - g.pad;
                                let row = &xp[iy * wd..(iy + 1) * wd];
                                let orow = &mut plane[oy * ow..(oy + 1) * ow];
                                for ox in cols.clone() {
                                    orow[ox] += wv * row[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        });
    Array4::from_shape_vec((n, c_out, oh, ow), out).expect("shape")
}

/// Gradient of [`conv_forward`] with respect to its input. Also the forward
/// pass of the transposed convolution.
pub fn conv_backward_input(
    dout: ArrayView4<f64>,
    w: ArrayView4<f64>,
    g: ConvGeometry,
    in_h: usize,
    in_w: usize,
) -> Array4<f64> {
    let (n, c_out, oh, ow) = dout.dim();
    let (wo, c_in, k, _) = w.dim();
    assert_eq!(wo, c_out, "weight output channels");
    let ds = contiguous(&dout);
    let ws = contiguous(&w);
    let mut dx = vec![0.0; n * c_in * in_h * in_w];
    dx.par_chunks_mut(c_in * in_h * in_w)
        .enumerate()
        .for_each(|(s, dx)| {
            let d = &ds[s * c_out * oh * ow..(s + 1) * c_out * oh * ow];
            for o in 0..c_out {
                let dp = &d[o * oh * ow..(o + 1) * oh * ow];
                for c in 0..c_in {
                    let xp = &mut dx[c * in_h * in_w..(c + 1) * in_h * in_w];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = ws[((o * c_in + c) * k + ky) * k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let cols = g.valid_range(kx, in_w, ow);
                            for oy in g.valid_range(ky, in_h, oh) {
                                let iy = oy * g.stride + ky - g.pad;
                                let row = &mut xp[iy * in_w..(iy + 1) * in_w];
                                let drow = &dp[oy * ow..(oy + 1) * ow];
                                for ox in cols.clone() {
                                    row[ox * g.stride + kx - g.pad] += wv * drow[ox];
                                }
                            }
                        }
                    }
                }
            }
        });
    Array4::from_shape_vec((n, c_in, in_h, in_w), dx).expect("shape")
}

/// Gradient of [`conv_forward`] with respect to its weight.
pub fn conv_backward_weight(
    x: ArrayView4<f64>,
    dout: ArrayView4<f64>,
    g: ConvGeometry,
) -> Array4<f64> {
    let (n, c_in, h, wd) = x.dim();
    let (_, c_out, oh, ow) = dout.dim();
    let k = g.kernel;
    let xs = contiguous(&x);
    let ds = contiguous(&dout);
    let partials: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let x = &xs[s * c_in * h * wd..(s + 1) * c_in * h * wd];
            let d = &ds[s * c_out * oh * ow..(s + 1) * c_out * oh * ow];
            let mut dw = vec![0.0; c_out * c_in * k * k];
            for o in 0..c_out {
                let dp = &d[o * oh * ow..(o + 1) * oh * ow];
                for c in 0..c_in {
                    let xp = &x[c * h * wd..(c + 1) * h * wd];
                    for ky in 0..k {
                        for kx in 0..k {
                            let cols = g.valid_range(kx, wd, ow);
                            let mut acc = 0.0;
                            for oy in g.valid_range(ky, h, oh) {
                                let iy = oy * g.stride + ky - g.pad;
                                let row = &xp[iy * wd..(iy + 1) * wd];
                                let drow = &dp[oy * ow..(oy + 1) * ow];
                                for ox in cols.clone() {
                                    acc += drow[ox] * row[ox * g.stride + kx - g.pad];
                                }
                            }
                            dw[((o * c_in + c) * k + ky) * k + kx] = acc;
                        }
                    }
                }
            }
            dw
        })
        .collect();
    let mut total = vec![0.0; c_out * c_in * k * k];
    for part in &partials {
        total.iter_mut().zip(part).for_each(|(t, p)| *t += p);
    }
    Array4::from_shape_vec((c_out, c_in, k, k), total).expect("shape")
}
