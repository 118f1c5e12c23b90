//! Two-dimensional loss-landscape slices along filter-normalized directions.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayD, Axis};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::NetworkHandle;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeGrid {
    /// `grid[[a, b]]` is the loss at `θ + coords[a]·d₁ + coords[b]·d₂`.
    pub grid: Array2<f64>,
    /// Evenly spaced over `[-1, 1]`; the middle entry is exactly 0.
    pub coords: Vec<f64>,
    pub directions: [Vec<ArrayD<f64>>; 2],
    pub center: Vec<ArrayD<f64>>,
    pub center_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeSummary {
    pub grid_size: usize,
    pub center_loss: f64,
    pub min: f64,
    pub max: f64,
    /// Mean absolute difference between neighboring cells.
    pub roughness: f64,
}

impl LandscapeGrid {
    pub fn center_index(&self) -> usize {
        self.coords.len() / 2
    }

    pub fn summary(&self) -> LandscapeSummary {
        let finite = || self.grid.iter().copied().filter(|v| v.is_finite());
        let (mut diff, mut count) = (0.0, 0usize);
        for axis in [Axis(0), Axis(1)] {
            for pair in self.grid.axis_windows(axis, 2) {
                let (a, b) = (pair.index_axis(axis, 0), pair.index_axis(axis, 1));
                for (x, y) in a.iter().zip(b.iter()) {
                    if x.is_finite() && y.is_finite() {
                        diff += (x - y).abs();
                        count += 1;
                    }
                }
            }
        }
        LandscapeSummary {
            grid_size: self.coords.len(),
            center_loss: self.center_loss,
            min: finite().fold(f64::INFINITY, f64::min),
            max: finite().fold(f64::NEG_INFINITY, f64::max),
            roughness: if count > 0 { diff / count as f64 } else { 0.0 },
        }
    }

    /// The grid as `G` comma-separated rows of `G` values.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for row in self.grid.outer_iter() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Random direction with every filter (slice along the first axis) rescaled
/// to the norm of the matching weight filter. Bias directions are zero.
pub fn filter_normalized_direction(params: &[ArrayD<f64>], seed: u64, which: u64) -> Vec<ArrayD<f64>> {
    params
        .iter()
        .enumerate()
        .map(|(k, p)| {
            if p.ndim() < 2 {
                return ArrayD::zeros(p.raw_dim());
            }
            let mut r = rng::stream(seed, &format!("landscape:{which}"), k as u64);
            let mut d = ArrayD::from_shape_fn(p.raw_dim(), |_| StandardNormal.sample(&mut r));
            for (mut df, pf) in d.outer_iter_mut().zip(p.outer_iter()) {
                let dn = df.iter().map(|v| v * v).sum::<f64>().sqrt();
                let pn = pf.iter().map(|v| v * v).sum::<f64>().sqrt();
                if dn > 0.0 {
                    df *= pn / dn;
                }
            }
            d
        })
        .collect()
}

/// Evaluates `loss_eval` on a `grid_size × grid_size` grid of perturbed
/// copies of `net`. `net` itself is never modified.
pub fn loss_landscape<F>(net: &NetworkHandle, loss_eval: F, grid_size: usize, seed: u64) -> Result<LandscapeGrid>
where
    F: Fn(&NetworkHandle) -> Result<f64> + Sync,
{
    if grid_size % 2 == 0 {
        return Err(Error::Parameter(format!("grid size must be odd, got {grid_size}")));
    }
    let center: Vec<ArrayD<f64>> = net.params().iter().map(|p| p.value.clone()).collect();
    let d1 = filter_normalized_direction(&center, seed, 1);
    let d2 = filter_normalized_direction(&center, seed, 2);
    let half = (grid_size / 2) as f64;
    let coords: Vec<f64> = (0..grid_size)
        .map(|k| if grid_size == 1 { 0.0 } else { (k as f64 - half) / half })
        .collect();
    let center_loss = loss_eval(net)?;

    let cells: Vec<f64> = (0..grid_size * grid_size)
        .into_par_iter()
        .map(|cell| {
            let (a, b) = (coords[cell / grid_size], coords[cell % grid_size]);
            let mut copy = net.thawed();
            if a != 0.0 || b != 0.0 {
                for ((p, x), y) in copy.params_mut()?.iter_mut().zip(&d1).zip(&d2) {
                    p.value.scaled_add(a, x);
                    p.value.scaled_add(b, y);
                }
            }
            let loss = loss_eval(&copy)?;
            Ok(if loss.is_finite() { loss } else { f64::INFINITY })
        })
        .collect::<Result<_>>()?;
    let grid = Array2::from_shape_vec((grid_size, grid_size), cells).expect("grid shape");
    Ok(LandscapeGrid {
        grid,
        coords,
        directions: [d1, d2],
        center,
        center_loss,
    })
}

/// Per-filter norms of `a`, for checking normalization.
pub fn filter_norms(a: &ArrayD<f64>) -> Vec<f64> {
    if a.ndim() < 2 {
        return vec![a.iter().map(|v| v * v).sum::<f64>().sqrt()];
    }
    a.outer_iter()
        .map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, NetworkHandle};

    fn net() -> NetworkHandle {
        let arch = Architecture {
            in_channels: 1,
            widths: vec![3],
            strides: vec![1],
            kernel: 3,
            hidden: 4,
            embed_dim: 2,
        };
        NetworkHandle::random(arch, 9).unwrap().freeze()
    }

    fn sq_loss(n: &NetworkHandle) -> Result<f64> {
        Ok(n.params().iter().map(|p| p.value.iter().map(|v| v * v).sum::<f64>()).sum())
    }

    #[test]
    fn center_and_restoration() {
        let n = net();
        let before = n.fingerprint();
        let g = loss_landscape(&n, sq_loss, 5, 3).unwrap();
        assert_eq!(g.grid.dim(), (5, 5));
        assert_eq!(g.coords[2], 0.0);
        assert_eq!(g.coords[0], -1.0);
        assert_eq!(g.coords[4], 1.0);
        assert!((g.grid[[2, 2]] - g.center_loss).abs() <= 1e-12);
        assert_eq!(n.fingerprint(), before);
        assert!(n.is_frozen());
    }

    #[test]
    fn directions_are_filter_normalized() {
        let n = net();
        let params: Vec<ArrayD<f64>> = n.params().iter().map(|p| p.value.clone()).collect();
        let d = filter_normalized_direction(&params, 1, 1);
        for (p, dir) in params.iter().zip(&d) {
            if p.ndim() < 2 {
                assert!(dir.iter().all(|&v| v == 0.0));
                continue;
            }
            for (a, b) in filter_norms(p).iter().zip(filter_norms(dir)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn non_finite_losses_become_infinite() {
        let g = loss_landscape(&net(), |_| Ok(f64::NAN), 3, 0).unwrap();
        assert!(g.grid.iter().all(|v| *v == f64::INFINITY));
        assert!(loss_landscape(&net(), sq_loss, 4, 0).is_err());
    }
}
