//! Dataset ingestion, few-shot subsetting, patch extraction and normalization.
//!
//! Samples are `H×W×C` arrays of `f64`. Complex-valued data is stored as two
//! real channels (real, imaginary). On disk each sample is one `.npy` file and
//! a dataset is described by a line-oriented manifest:
//!
//! ```text
//! path            label  domain
//! img_000.npy     3      source
//! img_001.npy     -      source
//! ```
//!
//! Paths are resolved relative to the manifest's directory and `-` marks an
//! absent label.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD, Axis, Ix3};
use ndarray_npy::{read_npy, write_npy};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST_HEADER: &str = "path\tlabel\tdomain";

/// One data instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    /// `H×W×C`, complex data as `C = 2`.
    pub tensor: Array3<f64>,
    /// Evaluation-only class label.
    pub label: Option<usize>,
    pub domain: String,
}

impl SampleRecord {
    pub fn new(
        id: impl Into<String>,
        tensor: Array3<f64>,
        label: Option<usize>,
        domain: impl Into<String>,
    ) -> Result<Self> {
        let id = id.into();
        if tensor.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data { id });
        }
        Ok(Self {
            id,
            tensor,
            label,
            domain: domain.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.tensor.dim().0
    }

    pub fn width(&self) -> usize {
        self.tensor.dim().1
    }

    pub fn channels(&self) -> usize {
        self.tensor.dim().2
    }

    pub fn is_complex(&self) -> bool {
        self.channels() == 2
    }

    /// Per-pixel modulus of a complex (two-channel) sample.
    pub fn magnitude(&self) -> Result<ndarray::Array2<f64>> {
        if !self.is_complex() {
            return Err(Error::Schema(format!(
                "sample {} has {} channels, magnitude needs 2",
                self.id,
                self.channels()
            )));
        }
        let (h, w, _) = self.tensor.dim();
        Ok(ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
            self.tensor[[y, x, 0]].hypot(self.tensor[[y, x, 1]])
        }))
    }
}

/// Training inputs with labels removed.
///
/// Training losses only ever see this type, so a label can never leak into
/// the unsupervised objective.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub ids: Vec<String>,
    pub tensors: Vec<Array3<f64>>,
}

impl TrainingSet {
    pub fn from_records(records: &[SampleRecord]) -> Result<Self> {
        if let Some(first) = records.first() {
            let shape = first.tensor.dim();
            if let Some(bad) = records.iter().find(|r| r.tensor.dim() != shape) {
                return Err(Error::Schema(format!(
                    "sample {} has shape {:?}, expected {:?}",
                    bad.id,
                    bad.tensor.dim(),
                    shape
                )));
            }
        }
        Ok(Self {
            ids: records.iter().map(|r| r.id.clone()).collect(),
            tensors: records.iter().map(|r| r.tensor.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// `(H, W, C)` of every sample, or `None` when empty.
    pub fn sample_shape(&self) -> Option<(usize, usize, usize)> {
        self.tensors.first().map(|t| t.dim())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotSpec {
    pub class_ids: Vec<usize>,
    pub per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub patch_size: usize,
    pub patches_per_slice: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Population statistics over every pixel of every record.
    pub fn from_records(records: &[SampleRecord]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Capacity("cannot compute statistics of an empty dataset".into()))?;
        let channels = first.channels();
        let mut sum = vec![0.0; channels];
        let mut sum_sq = vec![0.0; channels];
        let mut count = 0usize;
        for record in records {
            if record.channels() != channels {
                return Err(Error::Schema(format!(
                    "sample {} has {} channels, expected {channels}",
                    record.id,
                    record.channels()
                )));
            }
            for (c, lane) in record.tensor.axis_iter(Axis(2)).enumerate() {
                sum[c] += lane.sum();
                sum_sq[c] += lane.iter().map(|v| v * v).sum::<f64>();
            }
            count += record.height() * record.width();
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / n - m * m).max(0.0).sqrt())
            .collect();
        Ok(Self { mean, std })
    }

    fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::Dimension(format!(
                "statistics cover {} / {} channels, sample has {channels}",
                self.mean.len(),
                self.std.len()
            )));
        }
        if let Some(s) = self.std.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Parameter(format!(
                "standard deviation must be strictly positive, got {s}"
            )));
        }
        Ok(())
    }
}

fn read_tensor(path: &Path) -> Result<Array3<f64>> {
    let dynamic: ArrayD<f64> = match read_npy::<_, ArrayD<f64>>(path) {
        Ok(a) => a,
        Err(first) => match read_npy::<_, ArrayD<f32>>(path) {
            Ok(a) => a.mapv(f64::from),
            Err(_) => return Err(Error::load(path, first)),
        },
    };
    let dynamic = match dynamic.ndim() {
        2 => dynamic.insert_axis(Axis(2)),
        3 => dynamic,
        n => {
            return Err(Error::Schema(format!(
                "{} has {n} dimensions, expected H×W or H×W×C",
                path.display()
            )))
        }
    };
    Ok(dynamic
        .into_dimensionality::<Ix3>()
        .expect("rank checked above"))
}

/// Reads a manifest and every tensor it references, in manifest order.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::load(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .map(|l| l.split_whitespace().collect())
        .unwrap_or_default();
    if header != ["path", "label", "domain"] {
        return Err(Error::Schema(format!(
            "{}: manifest header must be `path label domain`",
            manifest_path.display()
        )));
    }

    let mut records = Vec::new();
    let mut channels: Option<usize> = None;
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [path, label, domain] = fields[..] else {
            return Err(Error::Schema(format!(
                "{}: record {} has {} fields, expected 3",
                manifest_path.display(),
                lineno + 1,
                fields.len()
            )));
        };
        let label = match label {
            "-" => None,
            text => Some(text.parse::<usize>().map_err(|_| {
                Error::Schema(format!("invalid label `{text}` for {path}"))
            })?),
        };
        let file = base.join(path);
        if !file.is_file() {
            return Err(Error::load(&file, "file not found"));
        }
        let tensor = read_tensor(&file)?;
        let c = tensor.dim().2;
        match channels {
            None => channels = Some(c),
            Some(expected) if expected != c => {
                return Err(Error::Schema(format!(
                    "{path} has {c} channels but earlier samples have {expected}"
                )))
            }
            _ => {}
        }
        let id = Path::new(path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.to_string());
        records.push(SampleRecord::new(id, tensor, label, domain)?);
    }
    Ok(records)
}

/// Writes records as `<id>.npy` files plus a `manifest.tsv` into `dir`.
pub fn write_dataset(dir: &Path, records: &[SampleRecord]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest = dir.join("manifest.tsv");
    let mut out = fs::File::create(&manifest)?;
    writeln!(out, "{MANIFEST_HEADER}")?;
    for record in records {
        let file = format!("{}.npy", record.id);
        write_npy(dir.join(&file), &record.tensor)
            .map_err(|e| Error::load(dir.join(&file), e))?;
        let label = record
            .label
            .map(|l| l.to_string())
            .unwrap_or_else(|| "-".into());
        writeln!(out, "{file}\t{label}\t{}", record.domain)?;
    }
    Ok(manifest)
}

/// Draws `per_class` records of every requested class.
///
/// Each class uses its own random stream keyed on `(seed, class_id)`, so the
/// selection for one class does not depend on which other classes are
/// requested. Within a class the output keeps dataset order.
pub fn subset_few_shot(records: &[SampleRecord], spec: &FewShotSpec) -> Result<Vec<SampleRecord>> {
    if spec.class_ids.is_empty() {
        return Err(Error::Parameter("few-shot class list is empty".into()));
    }
    if spec.per_class == 0 {
        return Err(Error::Parameter("per_class must be at least 1".into()));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = spec.class_ids.iter().find(|c| !seen.insert(**c)) {
        return Err(Error::Parameter(format!("class {dup} requested twice")));
    }

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, record) in records.iter().enumerate() {
        if let Some(label) = record.label {
            by_class.entry(label).or_default().push(i);
        }
    }

    let mut out = Vec::with_capacity(spec.class_ids.len() * spec.per_class);
    for &class in &spec.class_ids {
        let pool = by_class.get(&class).map(Vec::as_slice).unwrap_or(&[]);
        if pool.len() < spec.per_class {
            return Err(Error::Capacity(format!(
                "class {class} has {} labeled records, {} requested",
                pool.len(),
                spec.per_class
            )));
        }
        let mut rng = rng::stream(spec.seed, "few-shot", class as u64);
        let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), spec.per_class)
            .into_iter()
            .map(|k| pool[k])
            .collect();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| records[i].clone()));
    }
    Ok(out)
}

/// Top-left corners of the patches cut from `slice`.
pub fn patch_positions(slice: &SampleRecord, spec: &PatchSpec) -> Result<Vec<(usize, usize)>> {
    if spec.patch_size == 0 || spec.patches_per_slice == 0 {
        return Err(Error::Parameter(
            "patch_size and patches_per_slice must be positive".into(),
        ));
    }
    let (h, w, _) = slice.tensor.dim();
    if spec.patch_size > h.min(w) {
        return Err(Error::Dimension(format!(
            "patch size {} exceeds slice {} ({h}×{w})",
            spec.patch_size, slice.id
        )));
    }
    let mut rng = rng::stream(spec.seed ^ fnv_id(&slice.id), "patch", 0);
    Ok((0..spec.patches_per_slice)
        .map(|_| {
            (
                rng.random_range(0..=h - spec.patch_size),
                rng.random_range(0..=w - spec.patch_size),
            )
        })
        .collect())
}

fn fnv_id(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Cuts `patches_per_slice` square patches at uniformly drawn positions.
pub fn extract_patches(slice: &SampleRecord, spec: &PatchSpec) -> Result<Vec<SampleRecord>> {
    let positions = patch_positions(slice, spec)?;
    let p = spec.patch_size;
    positions
        .into_iter()
        .enumerate()
        .map(|(k, (top, left))| {
            let tensor = slice
                .tensor
                .slice(ndarray::s![top..top + p, left..left + p, ..])
                .to_owned();
            SampleRecord::new(
                format!("{}_p{k:02}", slice.id),
                tensor,
                slice.label,
                slice.domain.clone(),
            )
        })
        .collect()
}

/// `(x - mean_c) / std_c` for every channel `c`.
pub fn normalize(record: &SampleRecord, stats: &ChannelStats) -> Result<SampleRecord> {
    stats.validate(record.channels())?;
    let mut out = record.clone();
    for (c, mut lane) in out.tensor.axis_iter_mut(Axis(2)).enumerate() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        lane.mapv_inplace(|v| (v - m) / s);
    }
    Ok(out)
}

pub fn denormalize(record: &SampleRecord, stats: &ChannelStats) -> Result<SampleRecord> {
    stats.validate(record.channels())?;
    let mut out = record.clone();
    for (c, mut lane) in out.tensor.axis_iter_mut(Axis(2)).enumerate() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        lane.mapv_inplace(|v| v * s + m);
    }
    Ok(out)
}
