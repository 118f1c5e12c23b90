#![allow(dead_code)]

use std::path::Path;

use fewmax::config::ExperimentConfig;
use fewmax::fixture::FixturePaths;
use fewmax::loss::BlendedBatch;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random composite-loss instance: unit embeddings for the clean batch, the
/// anchor and `M` blend sets, plus partners and coefficients.
pub struct Instance {
    pub clean: Array2<f64>,
    pub anchor: Array2<f64>,
    pub blends: BlendedBatch,
}

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut a = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0f64..1.0));
    for mut row in a.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    a
}

pub fn instance(seed: u64, b: usize, d: usize, m: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = unit_rows(&mut rng, b, d);
    let anchor = unit_rows(&mut rng, b, d);
    let embeddings = (0..m).map(|_| unit_rows(&mut rng, b, d)).collect();
    let partners = Array2::from_shape_fn((b, m), |(i, _)| {
        let k = rng.random_range(0..b - 1);
        if k >= i {
            k + 1
        } else {
            k
        }
    });
    let lams = Array2::from_shape_fn((b, m), |_| rng.random_range(0.0..=1.0));
    Instance {
        clean,
        anchor,
        blends: BlendedBatch {
            embeddings,
            partners,
            lams,
        },
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// `-log(e^pos / (e^pos + Σ e^neg))`, written out term by term.
fn ce(pos: f64, negs: &[f64]) -> f64 {
    let mut denom = pos.exp();
    for &n in negs {
        denom += n.exp();
    }
    -(pos.exp() / denom).ln()
}

pub struct OracleOut {
    pub l_cl: Vec<f64>,
    pub l_task: Vec<Vec<f64>>,
    pub total: f64,
}

/// Composite loss by explicit loops over samples, blends and negatives.
pub fn oracle(inst: &Instance, tau: f64, anchor_term: bool, exclude_partner: bool) -> OracleOut {
    let rows = |a: &Array2<f64>| -> Vec<Vec<f64>> { a.rows().into_iter().map(|r| r.to_vec()).collect() };
    let clean = rows(&inst.clean);
    let anchor = rows(&inst.anchor);
    let blends: Vec<Vec<Vec<f64>>> = inst.blends.embeddings.iter().map(rows).collect();
    let b = clean.len();
    let m = blends.len();
    let mut l_cl = vec![0.0; b];
    let mut l_task = vec![vec![0.0; m]; b];
    let mut total = 0.0;
    for i in 0..b {
        if anchor_term {
            let pos = dot(&clean[i], &anchor[i]) / tau;
            let mut negs = Vec::new();
            for k in 0..b {
                if k != i {
                    negs.push(dot(&clean[i], &anchor[k]) / tau);
                }
            }
            l_cl[i] = ce(pos, &negs);
        }
        let mut worst = f64::NEG_INFINITY;
        for t in 0..m {
            let j = inst.blends.partners[[i, t]];
            let lam = inst.blends.lams[[i, t]];
            let xhat = &blends[t][i];
            let mut negs = Vec::new();
            for k in 0..b {
                if k == i || (exclude_partner && k == j) {
                    continue;
                }
                negs.push(dot(xhat, &clean[k]) / tau);
            }
            let ce_i = ce(dot(&clean[i], xhat) / tau, &negs);
            let ce_j = ce(dot(&clean[j], xhat) / tau, &negs);
            l_task[i][t] = lam * ce_i + (1.0 - lam) * ce_j;
            if l_task[i][t] > worst {
                worst = l_task[i][t];
            }
        }
        total += l_cl[i] + worst;
    }
    OracleOut {
        l_cl,
        l_task,
        total: total / b as f64,
    }
}

/// Config for the bundled image fixture with a small network.
pub fn image_config(paths: &FixturePaths, per_class: usize, epochs: usize, batch: usize, lr: f64) -> ExperimentConfig {
    let text = format!(
        r#"
seed = 0
[data]
source = "{}"
target = "{}"
eval_train = "{}"
eval_test = "{}"
per_class = {per_class}
[model]
widths = [16, 32, 32]
strides = [1, 2, 2]
hidden = 64
embed_dim = 32
[optim]
batch_size = {batch}
epochs = {epochs}
lr = {lr}
"#,
        paths.source.display(),
        paths.target.display(),
        paths.eval_train.display(),
        paths.eval_test.display()
    );
    ExperimentConfig::from_toml(&text).expect("valid config")
}

/// A deliberately tiny config for fast pipeline tests.
pub fn tiny_config(paths: &FixturePaths, out: &Path) -> ExperimentConfig {
    let mut cfg = image_config(paths, 4, 2, 8, 0.05);
    cfg.model.widths = vec![4, 8];
    cfg.model.strides = vec![1, 2];
    cfg.model.hidden = 16;
    cfg.model.embed_dim = 8;
    cfg.output_dir = Some(out.to_path_buf());
    cfg
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
