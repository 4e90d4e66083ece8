use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pim::cache::WindowSet;
use pim::eval::{accuracy, macro_f1};
use pim::eval::{
    evaluate_downstream, finetune_sets, generate_synthetic, load_series, prepare, run_pretrain,
    to_tsv, window_all, Budget, CsvSource, DataConfig, ExperimentConfig, ExperimentReport, Method,
    PreparedData,
};
use pim::model::{finetune, predict, save_history, PimModel, TrainConfig};
use pim::nn::Archive;
use pim::pseudo_labels::write_jsonl;
use pim::timeseries::write_csv;
use pim::{PimError, Result};

#[derive(Parser)]
#[command(
    name = "pim",
    version,
    about = "Physics-informed multi-task pre-training for HAR"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// CSV template for a PAMAP2-style export.
    #[value(alias = "default")]
    Pamap2,
    Synthetic,
}

#[derive(Subcommand)]
enum Command {
    /// Print an experiment config template.
    Config {
        #[arg(long, value_enum, default_value = "synthetic")]
        preset: Preset,
    },
    /// Write the synthetic corpus as CSV files plus a config that reads them.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Load and window the configured recordings into a binary cache.
    Ingest {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit discretizers on the pre-training subjects and export pseudo-labels.
    Pseudolabel {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        windows: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Pre-train encoder and pretext heads; writes the best-validation checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        windows: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Fine-tune one (run, fold) and test on the held-out subject.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        windows: Option<PathBuf>,
        /// Pre-trained checkpoint; omit for the from-scratch baseline.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, default_value_t = 0)]
        run: usize,
        /// Examples per class, or "all".
        #[arg(long, default_value = "4")]
        budget: String,
        #[arg(long)]
        out: PathBuf,
        /// Fold metrics as JSON.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Run the whole experiment; writes metrics.json and metrics.tsv.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        windows: Option<PathBuf>,
        /// Reuse a pre-trained checkpoint instead of pre-training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Merge experiment reports into one table.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        tsv: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| PimError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| PimError::io(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s)
}

fn load_windows(cfg: &ExperimentConfig, cache: Option<&Path>) -> Result<WindowSet> {
    match cache {
        Some(p) => WindowSet::load(p),
        None => {
            let series = load_series(cfg)?;
            let (layout, sample_rate_hz, windows) = window_all(&series, &cfg.windowing)?;
            Ok(WindowSet {
                layout,
                sample_rate_hz,
                windows,
                config_fingerprint: Some(cfg.fingerprint()),
            })
        }
    }
}

fn prepared(cfg: &ExperimentConfig, cache: Option<&Path>) -> Result<PreparedData> {
    let set = load_windows(cfg, cache)?;
    prepare(cfg, &set.layout, set.sample_rate_hz, set.windows)
}

fn load_model(path: &Path) -> Result<PimModel> {
    Ok(PimModel::from_archive(&Archive::load(path)?)?.0)
}

fn parse_budget(s: &str) -> Result<Budget> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(Budget::All(pim::eval::experiment::AllMarker::All));
    }
    s.parse::<usize>().map(Budget::PerClass).map_err(|_| {
        PimError::InvalidParameter(format!("budget must be a count or `all`, got `{s}`"))
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config { preset } => {
            let cfg = match preset {
                Preset::Pamap2 => ExperimentConfig::pamap2_template(),
                Preset::Synthetic => ExperimentConfig::synthetic(),
            };
            print!("{}", cfg.to_toml()?);
        }
        Command::Synth { config, out } => {
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::synthetic(),
            };
            let DataConfig::Synthetic(spec) = &cfg.data else {
                return Err(PimError::InvalidParameter(
                    "config data source is not synthetic".into(),
                ));
            };
            let series = generate_synthetic(spec, cfg.seed)?;
            let mut files = Vec::with_capacity(series.len());
            fs::create_dir_all(&out).map_err(|e| PimError::io(&out, e))?;
            for s in &series {
                let name = format!("{}_{}.csv", s.subject_id, s.session_id);
                let path = out.join(&name);
                let f = fs::File::create(&path).map_err(|e| PimError::io(&path, e))?;
                write_csv(s, std::io::BufWriter::new(f))?;
                files.push(CsvSource {
                    path: PathBuf::from(name),
                    subject: s.subject_id.clone(),
                    session: s.session_id.clone(),
                });
            }
            cfg.n_classes = Some(spec.n_classes());
            cfg.data = DataConfig::Csv {
                sample_rate_hz: spec.sample_rate_hz,
                files,
            };
            write_file(&out.join("experiment.toml"), cfg.to_toml()?)?;
            log::info!("wrote {} recordings to {}", series.len(), out.display());
        }
        Command::Ingest { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let set = load_windows(&cfg, None)?;
            set.save(&out)?;
            log::info!("cached {} windows in {}", set.windows.len(), out.display());
        }
        Command::Pseudolabel {
            config,
            windows,
            out_dir,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = prepared(&cfg, windows.as_deref())?;
            let path = out_dir.join("pseudo_labels.jsonl");
            fs::create_dir_all(&out_dir).map_err(|e| PimError::io(&out_dir, e))?;
            let f = fs::File::create(&path).map_err(|e| PimError::io(&path, e))?;
            write_jsonl(&data.pretrain, std::io::BufWriter::new(f))?;
            write_file(
                &out_dir.join("discretizers.json"),
                data.discretizers.to_json()?,
            )?;
            write_json(&out_dir.join("normalization.json"), &data.normalization)?;
            let (speed, angle, symmetry) = data.labeler.class_counts();
            write_json(
                &out_dir.join("manifest.json"),
                &serde_json::json!({
                    "config_fingerprint": cfg.fingerprint(),
                    "n_windows": data.pretrain.len(),
                    "pseudo_classes": {"speed": speed, "angle": angle, "symmetry": symmetry},
                }),
            )?;
        }
        Command::Pretrain {
            config,
            windows,
            out,
            history,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = prepared(&cfg, windows.as_deref())?;
            let (model, summary) = run_pretrain(&cfg, &data)?;
            let extra = serde_json::json!({
                "config_fingerprint": cfg.fingerprint(),
                "best_epoch": summary.best_epoch,
                "best_val_loss": summary.best_val_loss,
            });
            model.to_archive(extra)?.save(&out)?;
            if let Some(h) = history {
                save_history(&summary.history, &h)?;
            }
        }
        Command::Finetune {
            config,
            windows,
            checkpoint,
            fold,
            run,
            budget,
            out,
            metrics,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = prepared(&cfg, windows.as_deref())?;
            let pretrained = checkpoint.as_deref().map(load_model).transpose()?;
            let f = data.plan.folds.get(fold).ok_or(PimError::IndexOutOfRange {
                index: fold,
                len: data.plan.folds.len(),
            })?;
            let budget = parse_budget(&budget)?;
            let seed = cfg.run_seed(run);
            let pool: Vec<_> = data
                .downstream
                .iter()
                .filter(|w| w.label.is_some() && f.train_subjects.contains(&w.subject_id))
                .cloned()
                .collect();
            let test: Vec<_> = data
                .downstream
                .iter()
                .filter(|w| w.label.is_some() && w.subject_id == f.test_subject)
                .cloned()
                .collect();
            let few_shot_seed = pim::rng::derive_seed(seed, &[fold as u64]);
            let (train, val) =
                finetune_sets(&pool, budget, cfg.finetune.val_fraction, few_shot_seed)?;
            let ft = TrainConfig {
                seed,
                ..cfg.finetune.clone()
            };
            let outcome = finetune(pretrained.as_ref(), &train, &val, data.n_classes, &ft)?;
            outcome
                .model
                .to_archive(serde_json::json!({
                    "config_fingerprint": cfg.fingerprint(),
                    "selected_epoch": outcome.selected_epoch,
                }))?
                .save(&out)?;
            if let Some(m) = metrics {
                let pred = predict(&outcome.model, &test)?;
                let truth: Vec<usize> = test.iter().filter_map(|w| w.label).collect();
                write_json(
                    &m,
                    &serde_json::json!({
                        "test_subject": f.test_subject,
                        "method": if pretrained.is_some() { Method::Pim } else { Method::Baseline },
                        "budget": budget,
                        "run": run,
                        "macro_f1": macro_f1(&pred.class_ids, &truth, data.n_classes)?,
                        "accuracy": accuracy(&pred.class_ids, &truth)?,
                        "config_fingerprint": cfg.fingerprint(),
                    }),
                )?;
            }
        }
        Command::Evaluate {
            config,
            windows,
            checkpoint,
            out_dir,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = prepared(&cfg, windows.as_deref())?;
            let (pretrained, summary) = match (&checkpoint, cfg.methods.contains(&Method::Pim)) {
                (Some(p), _) => (Some(load_model(p)?), None),
                (None, true) => {
                    let (m, s) = run_pretrain(&cfg, &data)?;
                    (Some(m), Some(s))
                }
                (None, false) => (None, None),
            };
            let results = evaluate_downstream(&cfg, &data, pretrained.as_ref())?;
            let report = ExperimentReport {
                name: cfg.name.clone(),
                config_fingerprint: cfg.fingerprint(),
                split: data.plan,
                n_classes: data.n_classes,
                pretrain: summary,
                results,
            };
            write_json(&out_dir.join("metrics.json"), &report)?;
            write_file(
                &out_dir.join("metrics.tsv"),
                to_tsv(std::slice::from_ref(&report))?,
            )?;
            for r in &report.results {
                println!(
                    "{}\tbudget {}\tmacro-F1 {:.4} ± {:.4}\taccuracy {:.4} ± {:.4}",
                    r.method,
                    r.budget,
                    r.macro_f1.mean,
                    r.macro_f1.std,
                    r.accuracy.mean,
                    r.accuracy.std
                );
            }
        }
        Command::Report { inputs, tsv, json } => {
            let reports = inputs
                .iter()
                .map(|p| {
                    let s = fs::read_to_string(p).map_err(|e| PimError::io(p, e))?;
                    Ok(serde_json::from_str::<ExperimentReport>(&s)?)
                })
                .collect::<Result<Vec<_>>>()?;
            write_file(&tsv, to_tsv(&reports)?)?;
            if let Some(j) = json {
                write_json(&j, &reports)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
