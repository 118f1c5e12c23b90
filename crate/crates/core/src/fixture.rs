//! Procedural datasets for offline experiments.
//!
//! Image domains share one class structure, the orientation of a grating:
//!
//! * domain `a`: clean grayscale sinusoidal gratings;
//! * domain `b`: tinted square-wave gratings on a blotchy background with
//!   heavier noise and lower contrast.
//!
//! Complex domains are `H×W×2` slices whose magnitude is a sum of ellipses
//! and whose phase varies smoothly:
//!
//! * domain `knee`: a few large, overlapping ellipses;
//! * domain `brain`: an elliptical skull ring enclosing small structures.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{write_dataset, SampleRecord};
use crate::error::Result;
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageDomain {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplexDomain {
    Knee,
    Brain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageFixtureSpec {
    pub classes: usize,
    pub size: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    pub eval_per_class: usize,
    /// Pixel noise of domain `b`.
    pub target_noise: f64,
    pub seed: u64,
}

impl Default for ImageFixtureSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            size: 16,
            source_per_class: 40,
            target_per_class: 30,
            eval_per_class: 20,
            target_noise: 0.6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComplexFixtureSpec {
    pub size: usize,
    pub source_slices: usize,
    pub target_slices: usize,
    pub eval_slices: usize,
    pub seed: u64,
}

impl Default for ComplexFixtureSpec {
    fn default() -> Self {
        Self {
            size: 32,
            source_slices: 48,
            target_slices: 16,
            eval_slices: 96,
            seed: 0,
        }
    }
}

/// Manifests written by the fixture generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixturePaths {
    pub source: PathBuf,
    pub target: PathBuf,
    pub eval_train: PathBuf,
    pub eval_test: PathBuf,
}

fn domain_tag(d: ImageDomain) -> &'static str {
    match d {
        ImageDomain::A => "a",
        ImageDomain::B => "b",
    }
}

/// One grating image of `class` out of `classes` orientations.
fn grating(domain: ImageDomain, class: usize, classes: usize, size: usize, noise_b: f64, r: &mut StreamRng) -> Array3<f64> {
    let theta = PI * class as f64 / classes as f64 + r.random_range(-0.12..0.12);
    let cycles = r.random_range(2.0..3.5);
    let freq = 2.0 * PI * cycles / size as f64;
    let phase = r.random_range(0.0..2.0 * PI);
    let (s, c) = theta.sin_cos();
    let wave = |y: usize, x: usize| (freq * (x as f64 * c + y as f64 * s) + phase).sin();
    match domain {
        ImageDomain::A => {
            let noise = Normal::new(0.0, 0.1).expect("finite");
            let contrast = r.random_range(0.8..1.2);
            let mut img = Array3::zeros((size, size, 3));
            for y in 0..size {
                for x in 0..size {
                    let v = contrast * wave(y, x) + noise.sample(r);
                    for k in 0..3 {
                        img[[y, x, k]] = v;
                    }
                }
            }
            img
        }
        ImageDomain::B => {
            let noise = Normal::new(0.0, noise_b).expect("finite");
            let tint = [
                r.random_range(0.9..1.3),
                r.random_range(0.3..0.7),
                r.random_range(-0.2..0.3),
            ];
            let contrast = r.random_range(0.4..0.8);
            let (by, bx) = (r.random_range(0.0..size as f64), r.random_range(0.0..size as f64));
            let blob_width = r.random_range(3.0..6.0);
            let blob_gain = r.random_range(-0.8..0.8);
            let mut img = Array3::zeros((size, size, 3));
            for y in 0..size {
                for x in 0..size {
                    let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                    let blob = blob_gain * (-d2 / (2.0 * blob_width * blob_width)).exp();
                    let square = contrast * wave(y, x).signum();
                    for k in 0..3 {
                        img[[y, x, k]] = tint[k] * square + blob + noise.sample(r);
                    }
                }
            }
            img
        }
    }
}

/// `per_class` labelled images of every class in `domain`.
pub fn image_domain(
    domain: ImageDomain,
    split: &str,
    classes: usize,
    per_class: usize,
    size: usize,
    target_noise: f64,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    let tag = domain_tag(domain);
    let mut out = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let mut r = rng::stream(seed, &format!("fixture:{tag}:{split}"), class as u64);
        for k in 0..per_class {
            out.push(SampleRecord::new(
                format!("{tag}_{split}_c{class}_{k:04}"),
                grating(domain, class, classes, size, target_noise, &mut r),
                Some(class),
                tag,
            )?);
        }
    }
    Ok(out)
}

/// Source (domain a) and target/eval (domain b) image datasets under `dir`.
pub fn write_image_fixture(dir: &Path, spec: &ImageFixtureSpec) -> Result<FixturePaths> {
    let make = |domain, split: &str, per_class| {
        image_domain(domain, split, spec.classes, per_class, spec.size, spec.target_noise, spec.seed)
    };
    Ok(FixturePaths {
        source: write_dataset(&dir.join("source"), &make(ImageDomain::A, "train", spec.source_per_class)?)?,
        target: write_dataset(&dir.join("target"), &make(ImageDomain::B, "pool", spec.target_per_class)?)?,
        eval_train: write_dataset(&dir.join("eval_train"), &make(ImageDomain::B, "evtrain", spec.eval_per_class)?)?,
        eval_test: write_dataset(&dir.join("eval_test"), &make(ImageDomain::B, "evtest", spec.eval_per_class)?)?,
    })
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    value: f64,
}

impl Ellipse {
    fn inside(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

fn phantom(domain: ComplexDomain, size: usize, r: &mut StreamRng) -> Array3<f64> {
    let n = size as f64;
    let mut shapes = Vec::new();
    match domain {
        ComplexDomain::Knee => {
            for _ in 0..r.random_range(3..6) {
                shapes.push(Ellipse {
                    cy: r.random_range(0.2 * n..0.8 * n),
                    cx: r.random_range(0.2 * n..0.8 * n),
                    ry: r.random_range(0.15 * n..0.4 * n),
                    rx: r.random_range(0.08 * n..0.25 * n),
                    angle: r.random_range(0.0..PI),
                    value: r.random_range(0.3..1.0),
                });
            }
        }
        ComplexDomain::Brain => {
            let (cy, cx) = (0.5 * n + r.random_range(-2.0..2.0), 0.5 * n + r.random_range(-2.0..2.0));
            let (ry, rx) = (r.random_range(0.4 * n..0.47 * n), r.random_range(0.32 * n..0.42 * n));
            shapes.push(Ellipse { cy, cx, ry, rx, angle: 0.0, value: 1.0 });
            shapes.push(Ellipse { cy, cx, ry: ry - 2.0, rx: rx - 2.0, angle: 0.0, value: -0.6 });
            for _ in 0..r.random_range(2..5) {
                shapes.push(Ellipse {
                    cy: cy + r.random_range(-0.2 * n..0.2 * n),
                    cx: cx + r.random_range(-0.15 * n..0.15 * n),
                    ry: r.random_range(0.04 * n..0.12 * n),
                    rx: r.random_range(0.04 * n..0.12 * n),
                    angle: r.random_range(0.0..PI),
                    value: r.random_range(-0.2..0.5),
                });
            }
        }
    }
    let (gy, gx, g0) = (r.random_range(-0.3..0.3), r.random_range(-0.3..0.3), r.random_range(0.0..2.0 * PI));
    let curvature = r.random_range(-0.01..0.01);
    let noise = Normal::new(0.0, 0.02).expect("finite");
    let mut out = Array3::zeros((size, size, 2));
    let mut magnitude = Array2::<f64>::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            magnitude[[y, x]] = shapes.iter().filter(|e| e.inside(fy, fx)).map(|e| e.value).sum::<f64>().max(0.0);
        }
    }
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 - 0.5 * n, x as f64 - 0.5 * n);
            let phi = g0 + gy * dy + gx * dx + curvature * (dy * dy + dx * dx);
            let m = magnitude[[y, x]];
            out[[y, x, 0]] = m * phi.cos() + noise.sample(r);
            out[[y, x, 1]] = m * phi.sin() + noise.sample(r);
        }
    }
    out
}

/// Unlabelled complex slices of `domain`.
pub fn complex_domain(domain: ComplexDomain, split: &str, count: usize, size: usize, seed: u64) -> Result<Vec<SampleRecord>> {
    let tag = match domain {
        ComplexDomain::Knee => "knee",
        ComplexDomain::Brain => "brain",
    };
    let mut r = rng::stream(seed, &format!("fixture:{tag}:{split}"), 0);
    (0..count)
        .map(|k| SampleRecord::new(format!("{tag}_{split}_{k:04}"), phantom(domain, size, &mut r), None, tag))
        .collect()
}

/// Source (knee) and target/eval (brain) complex datasets under `dir`.
pub fn write_complex_fixture(dir: &Path, spec: &ComplexFixtureSpec) -> Result<FixturePaths> {
    let make = |domain, split: &str, count| complex_domain(domain, split, count, spec.size, spec.seed);
    Ok(FixturePaths {
        source: write_dataset(&dir.join("source"), &make(ComplexDomain::Knee, "train", spec.source_slices)?)?,
        target: write_dataset(&dir.join("target"), &make(ComplexDomain::Brain, "pool", spec.target_slices)?)?,
        eval_train: write_dataset(&dir.join("eval_train"), &make(ComplexDomain::Brain, "evtrain", spec.eval_slices)?)?,
        eval_test: write_dataset(&dir.join("eval_test"), &make(ComplexDomain::Brain, "evtest", spec.eval_slices)?)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_domains_are_deterministic_and_labelled() {
        let a = image_domain(ImageDomain::B, "x", 3, 2, 8, 0.5, 1).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a[5].label, Some(2));
        assert_eq!(a[0].tensor.dim(), (8, 8, 3));
        assert_eq!(a, image_domain(ImageDomain::B, "x", 3, 2, 8, 0.5, 1).unwrap());
        assert_ne!(a[0].tensor, image_domain(ImageDomain::A, "x", 3, 2, 8, 0.5, 1).unwrap()[0].tensor);
    }

    #[test]
    fn complex_slices_have_two_channels() {
        let s = complex_domain(ComplexDomain::Brain, "x", 2, 16, 0).unwrap();
        assert!(s[0].is_complex());
        assert!(s[0].magnitude().unwrap().iter().any(|&m| m > 0.5));
    }
}
