//! Experiment lifecycle: pretrain an anchor, adapt, evaluate, compare.
//!
//! A run directory holds everything a run produces:
//!
//! ```text
//! config.toml            resolved configuration
//! metrics.jsonl          one record per epoch
//! checkpoints/           periodic checkpoints
//! final.ckpt             last state
//! eval/                  reports and plots
//! ```

pub mod plot;
pub mod report;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{EvalConfig, ExperimentConfig};
use crate::data::{extract_patches, load_dataset, normalize, subset_few_shot, FewShotSpec, SampleRecord, TrainingSet};
use crate::error::{Error, Result};
use crate::eval::{
    input_grad_norm_probe, linear_probe, loss_landscape, nrmse_probe, retrieve_all, EnergyReport, MemoryBank,
};
use crate::nn::{stack_images, NetworkHandle};
use crate::rng;
use crate::train::{
    evaluate_batch, init_from_anchor, load_checkpoint, network_from_checkpoint, prepare_batch, save_checkpoint,
    train_epoch, Method, TrainState,
};

pub use report::{cmd_report, Report};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const EVAL_DIR: &str = "eval";
pub const SUMMARY_FILE: &str = "summary.json";

/// Loads a manifest and applies the configured patching and normalization.
pub fn load_records(path: &Path, cfg: &ExperimentConfig) -> Result<Vec<SampleRecord>> {
    let mut records = load_dataset(path)?;
    if let Some(spec) = &cfg.data.patches {
        let mut patches = Vec::new();
        for r in &records {
            patches.extend(extract_patches(r, spec)?);
        }
        records = patches;
    }
    if let Some(stats) = &cfg.data.normalization {
        records = records.iter().map(|r| normalize(r, stats)).collect::<Result<_>>()?;
    }
    Ok(records)
}

fn require_path<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let path = path
        .as_deref()
        .ok_or_else(|| Error::Config(format!("no {what} dataset configured")))?;
    if !path.is_file() {
        return Err(Error::Config(format!("{what} dataset {} does not exist", path.display())));
    }
    Ok(path)
}

/// The few-shot adaptation subset of the target dataset.
pub fn adaptation_records(cfg: &ExperimentConfig) -> Result<Vec<SampleRecord>> {
    let records = load_records(require_path(&cfg.data.target, "target")?, cfg)?;
    if cfg.data.per_class == 0 {
        return Ok(records);
    }
    let class_ids = if cfg.data.classes.is_empty() {
        let mut c: Vec<usize> = records.iter().filter_map(|r| r.label).collect();
        c.sort_unstable();
        c.dedup();
        c
    } else {
        cfg.data.classes.clone()
    };
    subset_few_shot(
        &records,
        &FewShotSpec {
            class_ids,
            per_class: cfg.data.per_class,
            seed: cfg.seed,
        },
    )
}

fn write_snapshot(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    Ok(())
}

/// Reads the resolved config a run was started with.
pub fn read_snapshot(run_dir: &Path) -> Result<ExperimentConfig> {
    let path = run_dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::load(&path, e))?;
    ExperimentConfig::from_toml(&text)
}

/// The stored config omits the output directory so that reruns elsewhere
/// produce identical checkpoints.
fn checkpoint_meta(cfg: &ExperimentConfig) -> serde_json::Value {
    let cfg = ExperimentConfig {
        output_dir: None,
        ..cfg.clone()
    };
    serde_json::json!({
        "method": cfg.method,
        "config": cfg.to_toml(),
    })
}

fn write_metrics(path: &Path, state: &TrainState) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for record in &state.metric_log {
        writeln!(out, "{}", serde_json::to_string(record).expect("serializable"))?;
    }
    Ok(())
}

/// Most recent checkpoint of a run, final or periodic.
pub fn latest_checkpoint(run_dir: &Path) -> Option<PathBuf> {
    let last = run_dir.join(FINAL_CHECKPOINT);
    if last.is_file() {
        return Some(last);
    }
    let mut periodic: Vec<PathBuf> = fs::read_dir(run_dir.join("checkpoints"))
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .collect();
    periodic.sort();
    periodic.pop()
}

fn initial_state(cfg: &ExperimentConfig, data: &TrainingSet) -> Result<TrainState> {
    let (_, _, channels) = data
        .sample_shape()
        .ok_or_else(|| Error::Config("training set is empty".into()))?;
    let arch = cfg.model.architecture(channels);
    arch.validate()?;
    if cfg.method == Method::Baseline {
        return Ok(TrainState::new(NetworkHandle::random(arch, cfg.seed)?, None, cfg.seed));
    }
    let ckpt = load_checkpoint(require_anchor(cfg)?)?;
    if ckpt.architecture != arch {
        return Err(Error::Config(format!(
            "anchor architecture {:?} does not match the configured {:?}",
            ckpt.architecture, arch
        )));
    }
    let anchor = network_from_checkpoint(&ckpt, cfg.seed)?.freeze();
    let task = init_from_anchor(&anchor)?;
    Ok(TrainState::new(task, Some(anchor), cfg.seed))
}

fn require_anchor(cfg: &ExperimentConfig) -> Result<&Path> {
    let path = cfg
        .anchor
        .as_deref()
        .ok_or_else(|| Error::Config(format!("method {} needs an anchor checkpoint", cfg.method)))?;
    if !path.is_file() {
        return Err(Error::Config(format!("anchor checkpoint {} does not exist", path.display())));
    }
    Ok(path)
}

/// Trains `records` under `cfg` inside `run_dir`, resuming from the latest
/// checkpoint there when `resume` is set.
pub fn run_training(
    cfg: &ExperimentConfig,
    records: &[SampleRecord],
    run_dir: &Path,
    resume: bool,
) -> Result<TrainState> {
    cfg.validate()?;
    if cfg.method.requires_anchor() {
        require_anchor(cfg)?;
    }
    let data = TrainingSet::from_records(records)?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    write_snapshot(run_dir, cfg)?;
    let mut state = match latest_checkpoint(run_dir).filter(|_| resume) {
        Some(path) => {
            log::info!("resuming from {}", path.display());
            TrainState::from_checkpoint(&load_checkpoint(&path)?)?
        }
        None => initial_state(cfg, &data)?,
    };
    let settings = cfg.settings();
    let metrics = run_dir.join(METRICS_FILE);
    write_metrics(&metrics, &state)?;
    while state.epoch < cfg.optim.epochs {
        let record = train_epoch(&mut state, &data, &settings)?;
        log::info!(
            "epoch {} {}: loss {:.4} (l_cl {:.4}, l_task {:.4})",
            record.epoch,
            record.method,
            record.mean_loss,
            record.mean_l_cl,
            record.mean_l_task_selected
        );
        let mut out = fs::OpenOptions::new().append(true).open(&metrics)?;
        writeln!(out, "{}", serde_json::to_string(&record).expect("serializable"))?;
        if cfg.checkpoint_interval > 0 && state.epoch % cfg.checkpoint_interval == 0 && state.epoch < cfg.optim.epochs {
            let path = run_dir.join("checkpoints").join(format!("epoch_{:04}.ckpt", state.epoch));
            save_checkpoint(&path, &state.to_checkpoint(checkpoint_meta(cfg)))?;
        }
    }
    save_checkpoint(&run_dir.join(FINAL_CHECKPOINT), &state.to_checkpoint(checkpoint_meta(cfg)))?;
    Ok(state)
}

/// Trains an anchor on the source dataset with the plain contrastive objective.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let source = require_path(&cfg.data.source, "source")?;
    let records = load_records(source, cfg)?;
    if records.is_empty() {
        return Err(Error::Config(format!("source dataset {} is empty", source.display())));
    }
    let cfg = ExperimentConfig {
        method: Method::Baseline,
        anchor: None,
        ..cfg.clone()
    };
    let run_dir = cfg.run_dir("anchor");
    run_training(&cfg, &records, &run_dir, false)?;
    Ok(run_dir.join(FINAL_CHECKPOINT))
}

/// Adapts to the few-shot target subset; returns the run directory.
pub fn cmd_adapt(cfg: &ExperimentConfig, resume: bool) -> Result<PathBuf> {
    cfg.validate()?;
    if cfg.method.requires_anchor() {
        require_anchor(cfg)?;
    }
    let records = adaptation_records(cfg)?;
    let run_dir = cfg.run_dir(cfg.method.as_str());
    run_training(cfg, &records, &run_dir, resume)?;
    Ok(run_dir)
}

/// Flat metrics of one evaluated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub run: String,
    pub method: Method,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value).expect("serializable"))?;
    Ok(())
}

fn labels_of(records: &[SampleRecord], what: &str) -> Result<Vec<usize>> {
    records
        .iter()
        .map(|r| {
            r.label
                .ok_or_else(|| Error::Config(format!("{what} sample {} has no label", r.id)))
        })
        .collect()
}

fn embed_records(net: &NetworkHandle, records: &[SampleRecord]) -> Result<Array2<f64>> {
    net.embed(&stack_images(records.iter().map(|r| &r.tensor))?)
}

fn feature_records(net: &NetworkHandle, records: &[SampleRecord]) -> Result<Array2<f64>> {
    net.features(&stack_images(records.iter().map(|r| &r.tensor))?)
}

/// Runs the evaluations enabled in `opts` on the final checkpoint of `run_dir`.
pub fn cmd_eval(run_dir: &Path, opts: &EvalConfig) -> Result<EvalSummary> {
    let ckpt_path = run_dir.join(FINAL_CHECKPOINT);
    if !ckpt_path.is_file() {
        return Err(Error::State(format!("{} has no final checkpoint", run_dir.display())));
    }
    let cfg = read_snapshot(run_dir)?;
    let mut summary = EvalSummary {
        run: run_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        method: cfg.method,
        seed: cfg.seed,
        metrics: BTreeMap::new(),
    };
    if opts.is_empty() {
        return Ok(summary);
    }
    let state = TrainState::from_checkpoint(&load_checkpoint(&ckpt_path)?)?;
    let net = state.task_net.clone().freeze();
    let out = run_dir.join(EVAL_DIR);
    fs::create_dir_all(&out)?;

    let needs_train = opts.probe || opts.retrieval_k > 0 || opts.nrmse;
    let eval_train = if needs_train {
        load_records(require_path(&cfg.data.eval_train, "eval_train")?, &cfg)?
    } else {
        Vec::new()
    };
    let eval_test = load_records(require_path(&cfg.data.eval_test, "eval_test")?, &cfg)?;
    let m = &mut summary.metrics;

    if opts.energy {
        let report = EnergyReport::compute(embed_records(&net, &eval_test)?.view())?;
        write_json(&out.join("energy.json"), &report)?;
        m.insert("e0".into(), report.e0);
        m.insert("e1".into(), report.e1);
        m.insert("e2".into(), report.e2);
    }
    if opts.probe {
        let report = linear_probe(
            feature_records(&net, &eval_train)?.view(),
            &labels_of(&eval_train, "eval_train")?,
            feature_records(&net, &eval_test)?.view(),
            &labels_of(&eval_test, "eval_test")?,
            &opts.linear,
            cfg.seed,
        )?;
        write_json(&out.join("probe.json"), &report)?;
        m.insert("top1".into(), report.top1);
        m.insert("top5".into(), report.top5);
    }
    if opts.retrieval_k > 0 {
        let bank = MemoryBank::new(
            embed_records(&net, &eval_train)?,
            eval_train.iter().map(|r| r.id.clone()).collect(),
        )?;
        let ids: Vec<String> = eval_test.iter().map(|r| r.id.clone()).collect();
        let results = retrieve_all(&bank, &embed_records(&net, &eval_test)?, &ids, opts.retrieval_k)?;
        write_json(&out.join("retrieval.json"), &results)?;
        if opts.montage_queries > 0 {
            plot::retrieval_montage(
                &out.join("retrieval.png"),
                &results[..opts.montage_queries.min(results.len())],
                &eval_test,
                &eval_train,
            )?;
        }
        if eval_train.iter().all(|r| r.label.is_some()) && eval_test.iter().all(|r| r.label.is_some()) {
            let label: BTreeMap<&str, usize> =
                eval_train.iter().map(|r| (r.id.as_str(), r.label.expect("checked"))).collect();
            let hits: usize = results
                .iter()
                .zip(&eval_test)
                .map(|(res, q)| res.neighbors.iter().filter(|n| label[n.as_str()] == q.label.expect("checked")).count())
                .sum();
            m.insert(
                "retrieval_precision".into(),
                100.0 * hits as f64 / (results.len() * opts.retrieval_k) as f64,
            );
        }
    }
    if opts.nrmse {
        let all: Vec<SampleRecord> = eval_train.iter().chain(&eval_test).cloned().collect();
        let magnitudes = all.iter().map(SampleRecord::magnitude).collect::<Result<Vec<_>>>()?;
        let report = nrmse_probe(feature_records(&net, &all)?.view(), &magnitudes, &opts.decoder, cfg.seed)?;
        write_json(&out.join("nrmse.json"), &report)?;
        m.insert("nrmse".into(), report.nrmse);
    }

    let probe_images = || -> Vec<ndarray::Array3<f64>> {
        eval_test.iter().take(opts.probe_batch.max(2)).map(|r| r.tensor.clone()).collect()
    };
    let settings = cfg.settings();
    if opts.landscape_grid > 0 {
        let batch = prepare_batch(
            probe_images(),
            &settings.policy,
            settings.method.blend_count(&settings.policy),
            cfg.seed,
            rng::pair(u32::MAX as u64, 0),
        )?;
        let objective = settings.objective();
        let anchor = state.anchor_net.as_ref();
        let grid = loss_landscape(
            &net,
            |n| evaluate_batch(n, anchor, &batch, &objective, false).map(|(b, _)| b.total),
            opts.landscape_grid,
            cfg.seed,
        )?;
        grid.write_csv(&out.join("landscape.csv"))?;
        let s = grid.summary();
        write_json(&out.join("landscape.json"), &s)?;
        plot::landscape_heatmap(&out.join("landscape.png"), &grid.grid)?;
        m.insert("landscape_center".into(), s.center_loss);
        m.insert("landscape_roughness".into(), s.roughness);
    }
    if opts.gradnorm {
        let batch = prepare_batch(
            probe_images(),
            &settings.policy,
            opts.gradnorm_blends,
            cfg.seed,
            rng::pair(u32::MAX as u64, 1),
        )?;
        let value = input_grad_norm_probe(&net, &batch, settings.tau, settings.negatives)?;
        write_json(&out.join("gradnorm.json"), &serde_json::json!({ "mean_input_grad_norm": value }))?;
        m.insert("gradnorm".into(), value);
    }
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}
