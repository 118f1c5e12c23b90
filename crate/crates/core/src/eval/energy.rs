//! Hyperspherical energy of a set of unit vectors.

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::check_unit_rows;

pub const ENERGY_CONVENTION: &str = "ordered-pairs";

/// `E_0`, `E_1`, `E_2` of one embedding set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub e0: f64,
    pub e1: f64,
    pub e2: f64,
    pub n: usize,
    pub convention: String,
}

impl EnergyReport {
    pub fn compute(z: ArrayView2<f64>) -> Result<Self> {
        Ok(Self {
            e0: hyperspherical_energy(z, 0)?,
            e1: hyperspherical_energy(z, 1)?,
            e2: hyperspherical_energy(z, 2)?,
            n: z.nrows(),
            convention: ENERGY_CONVENTION.to_string(),
        })
    }
}

/// `Σ_{i≠j} ‖z_i − z_j‖^{-s}` for `s ∈ {1, 2}` and `Σ_{i≠j} log ‖z_i − z_j‖^{-1}`
/// for `s = 0`, over ordered pairs.
pub fn hyperspherical_energy(z: ArrayView2<f64>, s: u32) -> Result<f64> {
    if s > 2 {
        return Err(Error::Parameter(format!("energy order must be 0, 1 or 2, got {s}")));
    }
    let n = z.nrows();
    if n < 2 {
        return Err(Error::Capacity(format!("energy needs at least 2 points, got {n}")));
    }
    check_unit_rows(z)?;
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let zi = z.row(i);
            let mut acc = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let d = zi
                    .iter()
                    .zip(z.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if d == 0.0 {
                    return Err(Error::Singularity { i: i.min(j), j: i.max(j) });
                }
                acc += match s {
                    0 => -d.ln(),
                    1 => 1.0 / d,
                    _ => 1.0 / (d * d),
                };
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    Ok(rows.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn antipodal_pair() {
        let z = array![[1.0, 0.0], [-1.0, 0.0]];
        let r = EnergyReport::compute(z.view()).unwrap();
        assert!((r.e0 - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((r.e0 + 1.3863).abs() < 1e-4);
        assert!((r.e1 - 1.0).abs() < 1e-12);
        assert!((r.e2 - 0.5).abs() < 1e-12);
        assert_eq!(r.convention, "ordered-pairs");
    }

    #[test]
    fn orthogonal_pair() {
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        assert!((hyperspherical_energy(z.view(), 1).unwrap() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn duplicates_are_singular() {
        let z = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        assert!(matches!(
            hyperspherical_energy(z.view(), 1),
            Err(Error::Singularity { i: 0, j: 2 })
        ));
    }

    #[test]
    fn rejects_bad_inputs() {
        let one = array![[1.0, 0.0]];
        assert!(matches!(hyperspherical_energy(one.view(), 1), Err(Error::Capacity(_))));
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(matches!(hyperspherical_energy(z.view(), 3), Err(Error::Parameter(_))));
        let long = array![[2.0, 0.0], [0.0, 1.0]];
        assert!(matches!(hyperspherical_energy(long.view(), 1), Err(Error::Parameter(_))));
    }
}
