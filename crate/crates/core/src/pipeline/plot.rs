//! PNG plots: landscape heatmaps and retrieval montages.

use std::collections::HashMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::eval::RetrievalResult;

const CELL: u32 = 12;
const THUMB: u32 = 4;
const GAP: u32 = 2;

/// Blue (low) to yellow (high); non-finite cells are black.
fn colormap(t: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 4] = [[48.0, 18.0, 120.0], [33.0, 145.0, 140.0], [120.0, 200.0, 80.0], [253.0, 231.0, 37.0]];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let k = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - k as f64;
    let c = |i: usize| (STOPS[k][i] + f * (STOPS[k + 1][i] - STOPS[k][i])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))
}

pub fn landscape_heatmap(path: &Path, grid: &Array2<f64>) -> Result<()> {
    let finite: Vec<f64> = grid.iter().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (rows, cols) = grid.dim();
    let img = RgbImage::from_fn(cols as u32 * CELL, rows as u32 * CELL, |x, y| {
        let v = grid[[(y / CELL) as usize, (x / CELL) as usize]];
        if v.is_finite() {
            colormap((v - lo) / span)
        } else {
            Rgb([0, 0, 0])
        }
    });
    save(&img, path)
}

/// Channel mean for real images, magnitude for complex ones.
fn intensity(t: &Array3<f64>) -> Array2<f64> {
    let (h, w, c) = t.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if c == 2 {
            t[[y, x, 0]].hypot(t[[y, x, 1]])
        } else {
            (0..c).map(|k| t[[y, x, k]]).sum::<f64>() / c as f64
        }
    })
}

/// One row per query: the query, then its neighbors in rank order.
pub fn retrieval_montage(
    path: &Path,
    results: &[RetrievalResult],
    queries: &[SampleRecord],
    bank: &[SampleRecord],
) -> Result<()> {
    let lookup: HashMap<&str, &SampleRecord> = queries.iter().chain(bank).map(|r| (r.id.as_str(), r)).collect();
    let rows: Vec<Vec<Array2<f64>>> = results
        .iter()
        .map(|res| {
            std::iter::once(&res.query_id)
                .chain(&res.neighbors)
                .map(|id| {
                    lookup
                        .get(id.as_str())
                        .map(|r| intensity(&r.tensor))
                        .ok_or_else(|| Error::State(format!("no sample {id} for the montage")))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let Some(first) = rows.first().and_then(|r| r.first()) else {
        return Ok(());
    };
    let (h, w) = (first.nrows() as u32 * THUMB, first.ncols() as u32 * THUMB);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(1) as u32;
    let mut img = RgbImage::from_pixel(
        cols * (w + GAP) + GAP,
        rows.len() as u32 * (h + GAP) + GAP,
        Rgb([255, 255, 255]),
    );
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            let lo = tile.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = tile.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            let (x0, y0) = (GAP + c as u32 * (w + GAP), GAP + r as u32 * (h + GAP));
            for y in 0..h.min(tile.nrows() as u32 * THUMB) {
                for x in 0..w.min(tile.ncols() as u32 * THUMB) {
                    let v = ((tile[[(y / THUMB) as usize, (x / THUMB) as usize]] - lo) / span * 255.0).round() as u8;
                    img.put_pixel(x0 + x, y0 + y, Rgb([v, v, v]));
                }
            }
        }
    }
    save(&img, path)
}
