use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fewmax::config::{EvalConfig, ExperimentConfig, Overrides};
use fewmax::fixture::{write_complex_fixture, write_image_fixture, ComplexFixtureSpec, FixturePaths, ImageFixtureSpec};
use fewmax::pipeline::{cmd_adapt, cmd_eval, cmd_pretrain, cmd_report, read_snapshot};
use fewmax::train::Method;
use fewmax::Result;

#[derive(Parser)]
#[command(name = "fewmax", version, about = "Few-shot label-free domain adaptation for contrastive encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the anchor encoder on the source domain.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Adapt to the few-shot target domain.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: Method,
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Blends per sample (M).
        #[arg(long)]
        blends: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Anchor checkpoint; overrides the config.
        #[arg(long)]
        anchor: Option<PathBuf>,
    },
    /// Evaluate a finished run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        energy: bool,
        #[arg(long)]
        probe: bool,
        /// Neighbors per query.
        #[arg(long, value_name = "K")]
        retrieval: Option<usize>,
        #[arg(long)]
        nrmse: bool,
        /// Landscape grid size (odd).
        #[arg(long, value_name = "G")]
        landscape: Option<usize>,
        #[arg(long)]
        gradnorm: bool,
    },
    /// Compare evaluated runs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Print CSV instead of an aligned table.
        #[arg(long)]
        csv: bool,
    },
    /// Write a synthetic two-domain dataset and a starter config.
    Fixture {
        #[arg(long, value_enum, default_value_t = FixtureKind::Image)]
        kind: FixtureKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FixtureKind {
    Image,
    Complex,
}

fn load(config: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    cfg.apply(overrides);
    cfg.validate()?;
    Ok(cfg)
}

/// Config next to the fixture; data paths are relative to `dir`.
fn starter_config(kind: FixtureKind, dir: &Path, paths: &FixturePaths, seed: u64) -> String {
    let rel = |p: &Path| p.strip_prefix(dir).unwrap_or(p).to_path_buf();
    let data = format!(
        "source = {:?}\ntarget = {:?}\neval_train = {:?}\neval_test = {:?}\n",
        rel(&paths.source),
        rel(&paths.target),
        rel(&paths.eval_train),
        rel(&paths.eval_test)
    );
    match kind {
        FixtureKind::Image => format!(
            "seed = {seed}\n\n[data]\n{data}per_class = 10\n\n\
             [model]\nhidden = 64\nembed_dim = 32\n\n[optim]\nbatch_size = 20\nepochs = 60\n\n\
             [eval]\nretrieval_k = 5\nlandscape_grid = 11\n"
        ),
        FixtureKind::Complex => format!(
            "seed = {seed}\n\n[data]\n{data}\
             patches = {{ patch_size = 16, patches_per_slice = 4 }}\n\n\
             [model]\nhidden = 64\nembed_dim = 32\n\n[augment]\nphysical = true\n\n\
             [optim]\nbatch_size = 32\nepochs = 20\n\n\
             [eval]\nprobe = false\nretrieval_k = 0\nnrmse = true\nlandscape_grid = 0\n"
        ),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { config, seed, epochs, output } => {
            let cfg = load(&config, &Overrides { seed, epochs, output_dir: output, ..Default::default() })?;
            let ckpt = cmd_pretrain(&cfg)?;
            println!("{}", ckpt.display());
        }
        Command::Adapt { config, method, resume, seed, epochs, blends, output, anchor } => {
            let overrides = Overrides {
                method: Some(method),
                seed,
                epochs,
                blend_count: blends,
                output_dir: output,
                anchor,
            };
            let cfg = load(&config, &overrides)?;
            let dir = cmd_adapt(&cfg, resume)?;
            println!("{}", dir.display());
        }
        Command::Eval { run, energy, probe, retrieval, nrmse, landscape, gradnorm } => {
            let base = match read_snapshot(&run) {
                Ok(cfg) => cfg.eval,
                Err(_) => EvalConfig::default(),
            };
            let opts = EvalConfig {
                energy,
                probe,
                retrieval_k: retrieval.unwrap_or(0),
                nrmse,
                landscape_grid: landscape.unwrap_or(0),
                gradnorm,
                ..base
            };
            let summary = cmd_eval(&run, &opts)?;
            for (name, value) in &summary.metrics {
                println!("{name}\t{value}");
            }
        }
        Command::Report { runs, csv } => {
            let report = cmd_report(&runs)?;
            if csv {
                print!("{}", report.to_csv());
            } else {
                print!("{}", report.to_text());
            }
        }
        Command::Fixture { kind, out, seed } => {
            let paths = match kind {
                FixtureKind::Image => write_image_fixture(&out, &ImageFixtureSpec { seed, ..Default::default() })?,
                FixtureKind::Complex => write_complex_fixture(&out, &ComplexFixtureSpec { seed, ..Default::default() })?,
            };
            let config = out.join("config.toml");
            std::fs::write(&config, starter_config(kind, &out, &paths, seed))?;
            println!("{}", config.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code().clamp(1, 255) as u8)
        }
    }
}
