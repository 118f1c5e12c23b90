//! Training loops for the four adaptation methods.
//!
//! | method     | initialization | anchor term | blends per sample |
//! |------------|----------------|-------------|-------------------|
//! | `baseline` | random         | no          | 1                 |
//! | `finetune` | anchor copy    | no          | 1                 |
//! | `few_mix`  | anchor copy    | yes         | 1                 |
//! | `few_max`  | anchor copy    | yes         | `M`, hardest kept |
//!
//! Every random choice (shuffling, partners, boxes, coefficients, complex
//! augmentations) is drawn from a stream keyed on the run seed, the epoch and
//! the batch index, so an epoch can be replayed exactly after a restart.

pub mod checkpoint;
pub mod optim;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, Array3, ArrayD};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{blend_set, mri_augment, AugPolicy, BlendResult};
use crate::data::{SampleRecord, TrainingSet};
use crate::error::{Error, Result};
use crate::loss::{
    batch_objective, batch_objective_with_grad, gather_rows, BlendedBatch, LossBreakdown,
    NegativePolicy, Objective,
};
use crate::nn::{stack_images, Gradients, NetworkHandle};
use crate::rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use optim::{OptimConfig, Sgd};

/// Mean batch losses above this value abort training.
pub const DIVERGENCE_THRESHOLD: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Finetune,
    FewMix,
    FewMax,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::Finetune, Method::FewMix, Method::FewMax];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Finetune => "finetune",
            Method::FewMix => "few_mix",
            Method::FewMax => "few_max",
        }
    }

    /// Whether the objective contains the anchor-distillation term.
    pub fn anchor_term(self) -> bool {
        matches!(self, Method::FewMix | Method::FewMax)
    }

    /// Whether the method starts from a pretrained anchor.
    pub fn requires_anchor(self) -> bool {
        self != Method::Baseline
    }

    pub fn blend_count(self, policy: &AugPolicy) -> usize {
        match self {
            Method::FewMax => policy.blend_count,
            _ => 1,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Everything that determines the per-batch objective and update.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub method: Method,
    pub policy: AugPolicy,
    pub optim: OptimConfig,
    pub tau: f64,
    pub negatives: NegativePolicy,
}

impl TrainSettings {
    pub fn objective(&self) -> Objective {
        Objective {
            tau: self.tau,
            anchor_term: self.method.anchor_term(),
            negatives: self.negatives,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub method: Method,
    pub mean_loss: f64,
    pub mean_l_cl: f64,
    pub mean_l_task_selected: f64,
    /// Seconds spent in the epoch. Not part of the determinism contract.
    pub wall_time: f64,
    pub batch_losses: Vec<f64>,
}

impl EpochRecord {
    /// Equality ignoring `wall_time`.
    pub fn same_values(&self, other: &EpochRecord) -> bool {
        EpochRecord {
            wall_time: 0.0,
            ..self.clone()
        } == EpochRecord {
            wall_time: 0.0,
            ..other.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub task_net: NetworkHandle,
    /// Always frozen.
    pub anchor_net: Option<NetworkHandle>,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Root of every random stream of the run.
    pub seed: u64,
    pub optimizer: Sgd,
    pub metric_log: Vec<EpochRecord>,
}

/// Unfrozen deep copy of the anchor, the starting point of adaptation.
pub fn init_from_anchor(anchor: &NetworkHandle) -> Result<NetworkHandle> {
    if let Some(p) = anchor
        .params()
        .iter()
        .find(|p| p.value.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::State(format!("anchor parameter {} is not finite", p.name)));
    }
    Ok(anchor.thawed())
}

impl TrainState {
    pub fn new(task_net: NetworkHandle, anchor_net: Option<NetworkHandle>, seed: u64) -> Self {
        let optimizer = Sgd::new(&task_net);
        Self {
            task_net,
            anchor_net: anchor_net.map(NetworkHandle::freeze),
            epoch: 0,
            seed,
            optimizer,
            metric_log: Vec::new(),
        }
    }

    /// Wall times are dropped from the stored log so that identical runs
    /// produce identical files.
    pub fn to_checkpoint(&self, mut meta: serde_json::Value) -> Checkpoint {
        let mut arrays = Vec::new();
        let named = |prefix: &str, net: &NetworkHandle| -> Vec<(String, ArrayD<f64>)> {
            net.params()
                .iter()
                .map(|p| (format!("{prefix}{}", p.name), p.value.clone()))
                .collect()
        };
        arrays.extend(named("net/", &self.task_net));
        if let Some(anchor) = &self.anchor_net {
            arrays.extend(named("anchor/", anchor));
        }
        for (p, v) in self.task_net.params().iter().zip(self.optimizer.buffers()) {
            arrays.push((format!("velocity/{}", p.name), v.clone()));
        }
        if let serde_json::Value::Object(map) = &mut meta {
            map.insert(
                "metric_log".into(),
                serde_json::to_value(
                    self.metric_log
                        .iter()
                        .map(|r| EpochRecord { wall_time: 0.0, ..r.clone() })
                        .collect::<Vec<_>>(),
                )
                .expect("serializable"),
            );
        }
        Checkpoint {
            epoch: self.epoch,
            seed: self.seed,
            architecture: self.task_net.architecture().clone(),
            meta,
            arrays,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let arch = ckpt.architecture.clone();
        let task_net = NetworkHandle::from_named(arch.clone(), ckpt.group("net/"), None)?;
        let anchor_net = if ckpt.has_group("anchor/") {
            Some(NetworkHandle::from_named(arch, ckpt.group("anchor/"), None)?)
        } else {
            None
        };
        let velocity = ckpt.group("velocity/");
        let optimizer = if velocity.is_empty() {
            Sgd::new(&task_net)
        } else {
            let mut buffers = Vec::with_capacity(velocity.len());
            for p in task_net.params() {
                let (_, v) = velocity
                    .iter()
                    .find(|(n, _)| *n == p.name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing momentum for {}", p.name)))?;
                if v.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!("momentum shape mismatch for {}", p.name)));
                }
                buffers.push(v.clone());
            }
            Sgd::from_buffers(buffers)
        };
        let metric_log = match ckpt.meta.get("metric_log") {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| Error::Checkpoint(format!("bad metric log: {e}")))?,
            None => Vec::new(),
        };
        Ok(Self {
            task_net,
            anchor_net: anchor_net.map(NetworkHandle::freeze),
            epoch: ckpt.epoch,
            seed: ckpt.seed,
            optimizer,
            metric_log,
        })
    }
}

/// Network from a checkpoint's `net/` group, e.g. a pretrained anchor.
///
/// A checkpoint without head parameters gets a head initialized from
/// `head_seed`, so anchor and task copies share the same head.
pub fn network_from_checkpoint(ckpt: &Checkpoint, head_seed: u64) -> Result<NetworkHandle> {
    NetworkHandle::from_named(ckpt.architecture.clone(), ckpt.group("net/"), Some(head_seed))
}

/// Clean images of one batch and their `M` blends.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub images: Vec<Array3<f64>>,
    /// `blends[i]` holds the `M` blends of sample `i`.
    pub blends: Vec<Vec<BlendResult>>,
}

impl PreparedBatch {
    pub fn blend_count(&self) -> usize {
        self.blends.first().map(Vec::len).unwrap_or(0)
    }

    /// Blended images of set `m`, one per sample.
    pub fn blend_images(&self, m: usize) -> Vec<&Array3<f64>> {
        self.blends.iter().map(|b| &b[m].mixed).collect()
    }

    pub fn partner_table(&self) -> (Array2<usize>, Array2<f64>) {
        let (b, m) = (self.blends.len(), self.blend_count());
        let partners = Array2::from_shape_fn((b, m), |(i, k)| self.blends[i][k].partner);
        let lams = Array2::from_shape_fn((b, m), |(i, k)| self.blends[i][k].lam);
        (partners, lams)
    }
}

/// Applies the complex augmentation (when enabled) and draws `blend_count`
/// blends per sample, all from streams keyed on `(seed, stream_id)`.
pub fn prepare_batch(
    images: Vec<Array3<f64>>,
    policy: &AugPolicy,
    blend_count: usize,
    seed: u64,
    stream_id: u64,
) -> Result<PreparedBatch> {
    let policy = AugPolicy {
        blend_count,
        ..policy.clone()
    };
    policy.validate()?;
    let images = if policy.physical {
        let mut r = rng::stream(seed, "physical", stream_id);
        images
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                let rec = SampleRecord::new(format!("batch{i}"), t, None, "train")?;
                Ok(mri_augment(&rec, &policy, &mut r)?.tensor)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        images
    };
    let mut r = rng::stream(seed, "blend", stream_id);
    let blends = (0..images.len())
        .map(|i| blend_set(&images, i, &policy, &mut r))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedBatch { images, blends })
}

/// Loss of one prepared batch and, when requested, the parameter gradient.
pub fn evaluate_batch(
    task: &NetworkHandle,
    anchor: Option<&NetworkHandle>,
    batch: &PreparedBatch,
    objective: &Objective,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Gradients>)> {
    let clean = stack_images(&batch.images)?;
    let anchor_emb = match (objective.anchor_term, anchor) {
        (true, Some(a)) => Some(a.embed(&clean)?),
        (true, None) => {
            return Err(Error::State("objective needs an anchor network".into()));
        }
        (false, _) => None,
    };
    let (partners, lams) = batch.partner_table();
    let blend_embeddings = (0..batch.blend_count())
        .map(|m| task.embed(&stack_images(batch.blend_images(m))?))
        .collect::<Result<Vec<_>>>()?;
    let blended = BlendedBatch {
        embeddings: blend_embeddings,
        partners,
        lams,
    };

    if !want_grad {
        let clean_emb = task.embed(&clean)?;
        let breakdown = batch_objective(objective, clean_emb.view(), anchor_emb.as_ref().map(|a| a.view()), &blended)?;
        return Ok((breakdown, None));
    }

    let clean_cache = task.forward(&clean)?;
    let (breakdown, grad) = batch_objective_with_grad(
        objective,
        clean_cache.embeddings.view(),
        anchor_emb.as_ref().map(|a| a.view()),
        &blended,
    )?;
    let (mut grads, _) = task.backward(&clean_cache, &grad.d_clean)?;

    // Only the selected blend of each sample carries gradient.
    let selected = stack_images(
        batch
            .blends
            .iter()
            .zip(&breakdown.m_star)
            .map(|(b, &m)| &b[m].mixed),
    )?;
    let selected_cache = task.forward(&selected)?;
    let d_selected = gather_rows(&grad.d_blends, &breakdown.m_star);
    let (blend_grads, _) = task.backward(&selected_cache, &d_selected)?;
    for (g, b) in grads.iter_mut().zip(&blend_grads) {
        *g += b;
    }
    Ok((breakdown, Some(grads)))
}

/// Sample order of an epoch, cut into full batches (a short final batch is dropped).
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "shuffle", epoch as u64));
    order
        .chunks(batch_size)
        .filter(|c| c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

fn check_ready(state: &TrainState, data: &TrainingSet, settings: &TrainSettings) -> Result<()> {
    settings.optim.validate()?;
    settings.policy.validate()?;
    if data.is_empty() {
        return Err(Error::Capacity("training set is empty".into()));
    }
    if settings.optim.batch_size > data.len() {
        return Err(Error::Capacity(format!(
            "batch size {} exceeds the {} training samples",
            settings.optim.batch_size,
            data.len()
        )));
    }
    if settings.method.anchor_term() && state.anchor_net.is_none() {
        return Err(Error::Config(format!(
            "method {} needs an anchor network",
            settings.method
        )));
    }
    if state.task_net.is_frozen() {
        return Err(Error::Frozen);
    }
    Ok(())
}

/// One pass over `data`: one SGD step per batch, one record appended to the log.
pub fn train_epoch(
    state: &mut TrainState,
    data: &TrainingSet,
    settings: &TrainSettings,
) -> Result<EpochRecord> {
    check_ready(state, data, settings)?;
    let started = Instant::now();
    let objective = settings.objective();
    let blend_count = settings.method.blend_count(&settings.policy);
    let epoch = state.epoch;
    let mut batch_losses = Vec::new();
    let (mut sum_cl, mut sum_task) = (0.0, 0.0);

    for (b, indices) in epoch_batches(data.len(), settings.optim.batch_size, state.seed, epoch)
        .into_iter()
        .enumerate()
    {
        let images = indices.iter().map(|&i| data.tensors[i].clone()).collect();
        let stream_id = rng::pair(epoch as u64, b as u64);
        let batch = prepare_batch(images, &settings.policy, blend_count, state.seed, stream_id)?;
        let (breakdown, grads) = evaluate_batch(
            &state.task_net,
            state.anchor_net.as_ref(),
            &batch,
            &objective,
            true,
        )?;
        let (l_cl, l_task) = (breakdown.mean_l_cl(), breakdown.mean_l_task_selected());
        if !breakdown.total.is_finite() || breakdown.total > DIVERGENCE_THRESHOLD {
            return Err(Error::Divergence {
                batch: b,
                loss: breakdown.total,
                l_cl,
                l_task,
            });
        }
        state.optimizer.step(
            &mut state.task_net,
            &grads.expect("gradient requested"),
            &settings.optim,
        )?;
        batch_losses.push(breakdown.total);
        sum_cl += l_cl;
        sum_task += l_task;
    }

    let n = batch_losses.len().max(1) as f64;
    let record = EpochRecord {
        epoch,
        method: settings.method,
        mean_loss: batch_losses.iter().sum::<f64>() / n,
        mean_l_cl: sum_cl / n,
        mean_l_task_selected: sum_task / n,
        wall_time: started.elapsed().as_secs_f64(),
        batch_losses,
    };
    state.metric_log.push(record.clone());
    state.epoch += 1;
    Ok(record)
}
