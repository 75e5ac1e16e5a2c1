//! The `sal-lab` command line.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::avr::TaskKind;
use crate::error::{Error, Result};
use crate::io::{encode_dataset, read_dataset, read_dataset_with_header};
use crate::model::{Preset, ScarModel};
use crate::taskgen::{generate, instances, GeneratorConfig, Rule};
use crate::training::{evaluate, gradient_check, run_regime, GradcheckConfig, Regime, RegimeSpec, TaskData, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sal-lab", version, about = "Structure-aware reasoning lab: generate, train, evaluate, check")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a toy dataset as an AVRB file.
    Generate {
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Panels per O3 instance.
        #[arg(long)]
        panels: Option<usize>,
        /// Comma-separated `attribute:relation` rules to draw from.
        #[arg(long)]
        rules: Option<String>,
        /// Panel size as `HxW`.
        #[arg(long)]
        size: Option<String>,
        /// Most rules active in one grid instance.
        #[arg(long)]
        max_rules: Option<usize>,
    },
    /// Train a model under a regime.
    Train {
        #[arg(long)]
        regime: Regime,
        /// Comma-separated datasets (pre-training set for mtl / tl).
        #[arg(long, value_delimiter = ',', required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
        /// Fine-tuning target dataset (mtl / tl).
        #[arg(long)]
        finetune: Option<PathBuf>,
        #[arg(long)]
        deterministic: bool,
        /// Flat `key = value` training overrides.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Report accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of the end-to-end loss gradient (double precision).
    Gradcheck {
        #[arg(long)]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Print a dataset header and label histogram.
    Inspect {
        #[arg(long)]
        data: PathBuf,
    },
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::invalid(format!("size `{s}` is not HxW")))?;
    let p = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| Error::invalid(format!("size `{s}` is not HxW")))
    };
    Ok((p(h)?, p(w)?))
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Generate {
            task,
            count,
            seed,
            out: path,
            panels,
            rules,
            size,
            max_rules,
        } => {
            let mut cfg = GeneratorConfig::new(task, count, seed);
            if let Some(p) = panels {
                if task != TaskKind::O3 {
                    return Err(Error::invalid("--panels only applies to o3"));
                }
                cfg.o3_panels = p;
            }
            if let Some(list) = rules {
                let parsed = list
                    .split(',')
                    .map(|r| r.trim().parse::<Rule>())
                    .collect::<Result<Vec<_>>>()?;
                cfg = cfg.with_rules(parsed);
            }
            if let Some(s) = size {
                (cfg.height, cfg.width) = parse_size(&s)?;
            }
            if let Some(k) = max_rules {
                cfg.max_rules = k;
            }
            let structure = cfg.structure()?;
            let data = instances(generate(&cfg)?);
            let bytes = encode_dataset(&data, &structure, (cfg.height, cfg.width))?;
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            writeln!(out, "wrote {count} {task} instances ({} bytes) to {}", bytes.len(), path.display()).map_err(io_err)?;
            Ok(EXIT_OK)
        }
        Command::Train {
            regime,
            data,
            preset,
            out: dir,
            finetune,
            deterministic,
            config,
        } => train(regime, &data, preset, &dir, finetune.as_deref(), deterministic, config.as_deref(), out),
        Command::Eval { model, data } => {
            let model = ScarModel::<f32>::load(&model)?;
            let (structure, instances) = read_dataset(&data)?;
            let acc = evaluate(&model, &instances, &structure)?;
            let correct = (acc * instances.len() as f64).round() as usize;
            writeln!(out, "accuracy {acc:.4} ({correct}/{})", instances.len()).map_err(io_err)?;
            Ok(EXIT_OK)
        }
        Command::Gradcheck { preset, seed, tolerance } => {
            let gc = GradcheckConfig {
                seed,
                tolerance,
                ..GradcheckConfig::default()
            };
            let report = gradient_check(&preset.config(), &gc)?;
            let worst = report.worst().cloned();
            writeln!(
                out,
                "checked {} coordinates ({} in W*), {} redrawn at ReLU kinks",
                report.entries.len(),
                report.w_star_checked,
                report.kink_skips
            )
            .map_err(io_err)?;
            if let Some(w) = worst {
                writeln!(
                    out,
                    "max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
                    w.relative_error, w.name, w.index, w.analytic, w.numeric
                )
                .map_err(io_err)?;
            }
            writeln!(
                out,
                "W* sharing factor {:.6} verified to relative error {:.3e}",
                report.sharing_factor, report.sharing_max_error
            )
            .map_err(io_err)?;
            let passed = report.passed();
            writeln!(out, "{} (tolerance {tolerance:e})", if passed { "PASS" } else { "FAIL" }).map_err(io_err)?;
            Ok(if passed { EXIT_OK } else { EXIT_CHECK_FAILED })
        }
        Command::Inspect { data } => {
            let (header, instances) = read_dataset_with_header(&data)?;
            let s = header.structure;
            writeln!(out, "format     AVRB v{}", header.version).map_err(io_err)?;
            writeln!(out, "task       {}", s.kind).map_err(io_err)?;
            writeln!(
                out,
                "structure  {}x{}, {} context, {} answers",
                s.rows, s.cols, s.context, s.answers
            )
            .map_err(io_err)?;
            writeln!(out, "panels     {}x{}", header.height, header.width).map_err(io_err)?;
            writeln!(out, "rule bits  {}", header.rule_len).map_err(io_err)?;
            writeln!(out, "instances  {}", header.count).map_err(io_err)?;
            let mut hist = vec![0usize; s.answers];
            for i in &instances {
                hist[i.label] += 1;
            }
            writeln!(out, "labels").map_err(io_err)?;
            for (label, n) in hist.iter().enumerate() {
                writeln!(out, "  {label}: {n}").map_err(io_err)?;
            }
            Ok(EXIT_OK)
        }
    }
}

fn load_task(path: &Path, config: &TrainConfig) -> Result<TaskData<f32>> {
    let (structure, instances) = read_dataset(path)?;
    TaskData::split(structure, instances, config.val_fraction, config.seed)
}

#[allow(clippy::too_many_arguments)]
fn train(
    regime: Regime,
    data: &[PathBuf],
    preset: Preset,
    dir: &Path,
    finetune: Option<&Path>,
    deterministic: bool,
    config_path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<i32> {
    let mut config = TrainConfig::default();
    if let Some(p) = config_path {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        config.apply_overrides(&text)?;
    }
    config.deterministic = deterministic;

    let mut datasets: BTreeMap<TaskKind, TaskData<f32>> = BTreeMap::new();
    let mut pretrain = Vec::new();
    for p in data {
        let task = load_task(p, &config)?;
        let kind = task.kind();
        if datasets.insert(kind, task).is_some() {
            return Err(Error::invalid(format!("two datasets for {kind}")));
        }
        pretrain.push(kind);
    }
    let target = match finetune {
        Some(p) => {
            let task = load_task(p, &config)?;
            let kind = task.kind();
            datasets.insert(kind, task);
            Some(kind)
        }
        None => None,
    };
    let spec = match regime {
        Regime::Stl if target.is_some() => return Err(Error::invalid("stl takes no --finetune dataset")),
        Regime::Stl => RegimeSpec {
            regime,
            pretrain,
            target: None,
        },
        Regime::Mtl => RegimeSpec::mtl(pretrain, target),
        Regime::Tl => RegimeSpec {
            regime,
            pretrain,
            target,
        },
    };
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let model = ScarModel::<f32>::new(preset.config(), config.seed)?;
    let datasets: Vec<TaskData<f32>> = datasets.into_values().collect();
    let outcome = run_regime(&spec, &datasets, &config, model, Some(dir))?;
    for phase in &outcome.phases {
        let (name, report) = (&phase.name, &phase.report);
        let val: Vec<String> = phase
            .rows
            .iter()
            .filter(|r| r.epoch == report.best_epoch && r.split == "val")
            .map(|r| format!("{} {:.4}", r.task, r.accuracy))
            .collect();
        writeln!(
            out,
            "{name}: {} epochs, best epoch {} (val loss {:.4}; accuracy {})",
            report.epochs,
            report.best_epoch,
            report.best_val_loss,
            val.join(", ")
        )
        .map_err(io_err)?;
    }
    writeln!(out, "checkpoints and logs in {}", dir.display()).map_err(io_err)?;
    Ok(EXIT_OK)
}
