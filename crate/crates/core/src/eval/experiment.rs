use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{accuracy, macro_f1, Summary};
use super::splits::{assert_no_subjects, SplitPlan};
use super::synthetic::{generate_synthetic, SyntheticSpec};
use crate::augment::{build_pretrain_set, AugmentConfig};
use crate::error::{PimError, Result};
use crate::model::{
    finetune, heads_for, predict, pretrain, sample_few_shot, split_train_val, EncoderSpec,
    EpochRecord, LossWeights, PimModel, TrainConfig,
};
use crate::par;
use crate::pseudo_labels::{build_pseudo_labels, AngleSource, DiscretizerSet, PseudoLabeler};
use crate::rng;
use crate::timeseries::{
    apply_normalization, fit_normalization, interpolate_nan, read_csv, sliding_windows, Layout,
    MultiChannelSeries, NormalizationStats, Window,
};

/// One recording in a CSV-backed experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSource {
    pub path: PathBuf,
    pub subject: String,
    #[serde(default)]
    pub session: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataConfig {
    Synthetic(SyntheticSpec),
    Csv {
        sample_rate_hz: f64,
        files: Vec<CsvSource>,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub window_s: f64,
    /// Hop between window starts; defaults to the window length.
    pub step_s: Option<f64>,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window_s: 2.0,
            step_s: None,
        }
    }
}

impl WindowConfig {
    pub fn lengths(&self, sample_rate_hz: f64) -> Result<(usize, usize)> {
        let len = (self.window_s * sample_rate_hz).round() as usize;
        let step = (self.step_s.unwrap_or(self.window_s) * sample_rate_hz).round() as usize;
        if len == 0 || step == 0 {
            return Err(PimError::InvalidParameter(format!(
                "window of {} s and step of {:?} s are empty at {sample_rate_hz} Hz",
                self.window_s, self.step_s
            )));
        }
        Ok((len, step))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoConfig {
    pub angle_source: AngleSource,
    pub ahrs_beta: f64,
    pub dtw_band: Option<usize>,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        PseudoConfig {
            angle_source: AngleSource::Auto,
            ahrs_beta: crate::pseudo_labels::DEFAULT_AHRS_BETA,
            dtw_band: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub pretrain_subjects: Vec<String>,
    pub downstream_subjects: Vec<String>,
    /// Evaluate only the first folds.
    pub max_folds: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllMarker {
    All,
}

/// Labelled examples per class for fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Budget {
    PerClass(usize),
    All(AllMarker),
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Pim => "pim",
            Method::Baseline => "baseline",
        })
    }
}

impl std::fmt::Display for Budget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Budget::PerClass(k) => write!(f, "{k}"),
            Budget::All(_) => f.write_str("all"),
        }
    }
}

/// Budgets up to this size train on every labelled example and keep the last
/// epoch; larger ones hold out a validation split.
pub const FEW_SHOT_MAX: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Fine-tuned from the pre-trained encoder.
    Pim,
    /// Trained from a random init.
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub n_runs: usize,
    /// Class count; inferred from the labels when absent.
    pub n_classes: Option<usize>,
    pub methods: Vec<Method>,
    pub budgets: Vec<Budget>,
    pub data: DataConfig,
    pub windowing: WindowConfig,
    pub split: SplitConfig,
    pub pseudo: PseudoConfig,
    pub augment: AugmentConfig,
    pub encoder: EncoderSpec,
    pub loss: LossWeights,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            seed: 0,
            n_runs: 10,
            n_classes: None,
            methods: vec![Method::Pim, Method::Baseline],
            budgets: vec![Budget::PerClass(4)],
            data: DataConfig::default(),
            windowing: WindowConfig::default(),
            split: SplitConfig::default(),
            pseudo: PseudoConfig::default(),
            augment: AugmentConfig::default(),
            encoder: EncoderSpec::default(),
            loss: LossWeights::default(),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig {
                val_fraction: 0.2,
                ..TrainConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    /// The desk-scale synthetic experiment: six subjects (four for
    /// pre-training, two for leave-one-subject-out), four labelled windows
    /// per class, ten runs.
    pub fn synthetic() -> Self {
        let spec = SyntheticSpec::default();
        let ids = spec.subject_ids();
        ExperimentConfig {
            name: "synthetic".into(),
            split: SplitConfig {
                pretrain_subjects: ids[..4].to_vec(),
                downstream_subjects: ids[4..].to_vec(),
                max_folds: None,
            },
            data: DataConfig::Synthetic(spec),
            pretrain: TrainConfig {
                max_epochs: 30,
                patience: 5,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    /// Template for a PAMAP2-style CSV export: 100 Hz, 2 s windows with a
    /// 0.5 s hop, even subject numbers pre-train and odd ones are evaluated
    /// leave-one-subject-out. File paths are placeholders.
    pub fn pamap2_template() -> Self {
        let ids: Vec<String> = (101..=108).map(|i| format!("subject{i}")).collect();
        let (pretrain, downstream): (Vec<String>, Vec<String>) = ids
            .iter()
            .cloned()
            .partition(|s| s.ends_with(['2', '4', '6', '8']));
        ExperimentConfig {
            name: "pamap2".into(),
            n_classes: Some(12),
            budgets: vec![
                Budget::PerClass(1),
                Budget::PerClass(2),
                Budget::PerClass(4),
                Budget::PerClass(8),
                Budget::All(AllMarker::All),
            ],
            data: DataConfig::Csv {
                sample_rate_hz: 100.0,
                files: ids
                    .iter()
                    .map(|s| CsvSource {
                        path: PathBuf::from(format!("{s}.csv")),
                        subject: s.clone(),
                        session: String::new(),
                    })
                    .collect(),
            },
            windowing: WindowConfig {
                window_s: 2.0,
                step_s: Some(0.5),
            },
            split: SplitConfig {
                pretrain_subjects: pretrain,
                downstream_subjects: downstream,
                max_folds: None,
            },
            ..ExperimentConfig::default()
        }
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| PimError::io(path, e))?;
        let mut cfg = Self::from_toml(&s).map_err(|e| e.context(path.display().to_string()))?;
        // relative CSV paths are relative to the config file
        if let (DataConfig::Csv { files, .. }, Some(dir)) = (&mut cfg.data, path.parent()) {
            for f in files.iter_mut().filter(|f| f.path.is_relative()) {
                f.path = dir.join(&f.path);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| {
            PimError::InvalidParameter(format!("config is not TOML-serializable: {e}"))
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 || self.methods.is_empty() || self.budgets.is_empty() {
            return Err(PimError::InvalidParameter(
                "n_runs, methods and budgets must be non-empty".into(),
            ));
        }
        if self.budgets.contains(&Budget::PerClass(0)) {
            return Err(PimError::InvalidParameter("a budget of 0 per class".into()));
        }
        self.encoder.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        SplitPlan::new(
            self.split.pretrain_subjects.clone(),
            self.split.downstream_subjects.clone(),
        )?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn split_plan(&self) -> Result<SplitPlan> {
        let mut plan = SplitPlan::new(
            self.split.pretrain_subjects.clone(),
            self.split.downstream_subjects.clone(),
        )?;
        if let Some(k) = self.split.max_folds {
            plan.folds.truncate(k);
        }
        Ok(plan)
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        rng::derive_seed(self.seed, &[run as u64])
    }
}

/// Loads and gap-fills the configured recordings.
pub fn load_series(cfg: &ExperimentConfig) -> Result<Vec<MultiChannelSeries>> {
    let raw = match &cfg.data {
        DataConfig::Synthetic(spec) => generate_synthetic(spec, cfg.seed)?,
        DataConfig::Csv {
            sample_rate_hz,
            files,
        } => files
            .iter()
            .map(|f| read_csv(&f.path, *sample_rate_hz, &f.subject, &f.session))
            .collect::<Result<Vec<_>>>()?,
    };
    if raw.is_empty() {
        return Err(PimError::EmptyInput("no recordings"));
    }
    raw.iter().map(interpolate_nan).collect()
}

/// Windows every series; all series must share layout and rate.
pub fn window_all(
    series: &[MultiChannelSeries],
    windowing: &WindowConfig,
) -> Result<(Layout, f64, Vec<Window>)> {
    let first = series
        .first()
        .ok_or(PimError::EmptyInput("no recordings"))?;
    let (len, step) = windowing.lengths(first.sample_rate_hz)?;
    let mut windows = Vec::new();
    for s in series {
        if s.layout != first.layout || s.sample_rate_hz != first.sample_rate_hz {
            return Err(PimError::ShapeMismatch(format!(
                "recording {}/{} differs in layout or rate from the first",
                s.subject_id, s.session_id
            )));
        }
        windows.extend(sliding_windows(s, len, step)?);
    }
    Ok((first.layout.clone(), first.sample_rate_hz, windows))
}

/// Everything the training stages need, fitted on pre-training subjects only.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub plan: SplitPlan,
    pub labeler: PseudoLabeler,
    pub discretizers: DiscretizerSet,
    pub normalization: NormalizationStats,
    /// Normalized pre-training windows with pseudo-labels.
    pub pretrain: Vec<Window>,
    /// Normalized downstream windows.
    pub downstream: Vec<Window>,
    pub n_classes: usize,
}

pub fn make_labeler(
    layout: &Layout,
    sample_rate_hz: f64,
    cfg: &PseudoConfig,
) -> Result<PseudoLabeler> {
    let mut labeler = PseudoLabeler::from_layout(layout, sample_rate_hz)?;
    labeler.angle_source = cfg.angle_source;
    labeler.ahrs_beta = cfg.ahrs_beta;
    labeler.dtw_band = cfg.dtw_band;
    Ok(labeler)
}

pub fn prepare(
    cfg: &ExperimentConfig,
    layout: &Layout,
    sample_rate_hz: f64,
    windows: Vec<Window>,
) -> Result<PreparedData> {
    let plan = cfg.split_plan()?;
    let downstream_ids: Vec<&str> = plan
        .downstream_subjects
        .iter()
        .map(String::as_str)
        .collect();
    let (raw_pretrain, raw_downstream): (Vec<Window>, Vec<Window>) = windows
        .into_iter()
        .filter(|w| {
            plan.pretrain_subjects.contains(&w.subject_id)
                || plan.downstream_subjects.contains(&w.subject_id)
        })
        .partition(|w| plan.pretrain_subjects.contains(&w.subject_id));
    if raw_pretrain.is_empty() {
        return Err(PimError::EmptyInput(
            "no windows from pre-training subjects",
        ));
    }
    assert_no_subjects(&raw_pretrain, &downstream_ids, "pseudo-label fitting")?;

    let labeler = make_labeler(layout, sample_rate_hz, &cfg.pseudo)?;
    let features = labeler.features_all(&raw_pretrain)?;
    let discretizers = labeler.fit(&features)?;
    let labelled = build_pseudo_labels(&raw_pretrain, &labeler, &discretizers)?;

    assert_no_subjects(&labelled, &downstream_ids, "normalization fitting")?;
    let normalization = fit_normalization(&labelled)?;
    let pretrain = labelled
        .iter()
        .map(|w| apply_normalization(w, &normalization))
        .collect::<Result<Vec<_>>>()?;
    let downstream = raw_downstream
        .iter()
        .map(|w| apply_normalization(w, &normalization))
        .collect::<Result<Vec<_>>>()?;

    let n_classes = match cfg.n_classes {
        Some(n) => n,
        None => downstream
            .iter()
            .filter_map(|w| w.label)
            .max()
            .map(|m| m + 1)
            .ok_or(PimError::EmptyInput("no labelled downstream windows"))?,
    };
    Ok(PreparedData {
        plan,
        labeler,
        discretizers,
        normalization,
        pretrain,
        downstream,
        n_classes,
    })
}

/// Summary of the pre-training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub n_train: usize,
    pub n_val: usize,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub history: Vec<EpochRecord>,
}

/// Splits pre-training windows 70/30 (before augmentation, so no augmented
/// copy of a validation window is trained on), augments the training part
/// and pre-trains with the experiment seed.
pub fn run_pretrain(
    cfg: &ExperimentConfig,
    data: &PreparedData,
) -> Result<(PimModel, PretrainSummary)> {
    let (train, val) = split_train_val(&data.pretrain, cfg.pretrain.val_fraction, cfg.seed);
    let train = build_pretrain_set(&train, &cfg.augment, cfg.seed)?;
    let heads = heads_for(&data.labeler)?;
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.pretrain.clone()
    };
    let out = pretrain(&train, &val, &heads, &cfg.encoder, &train_cfg, cfg.loss)?;
    let s = &out.session;
    let summary = PretrainSummary {
        n_train: train.len(),
        n_val: val.len(),
        epochs: s.epoch,
        best_epoch: s.best_epoch,
        best_val_loss: s.best_val,
        history: s.history.clone(),
    };
    Ok((out.best, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub test_subject: String,
    pub n_train: usize,
    pub n_test: usize,
    pub macro_f1: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    /// Mean over folds.
    pub macro_f1: f64,
    pub accuracy: f64,
    pub folds: Vec<FoldResult>,
}

/// Per-method, per-budget metrics across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: Method,
    pub budget: Budget,
    pub macro_f1: Summary,
    pub accuracy: Summary,
    pub runs: Vec<RunResult>,
    pub config_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config_fingerprint: String,
    pub split: SplitPlan,
    pub n_classes: usize,
    pub pretrain: Option<PretrainSummary>,
    pub results: Vec<MetricReport>,
}

impl ExperimentReport {
    pub fn result(&self, method: Method, budget: Budget) -> Option<&MetricReport> {
        self.results
            .iter()
            .find(|r| r.method == method && r.budget == budget)
    }
}

/// Labelled windows for fine-tuning at `budget`, plus a validation split when
/// the budget is large enough to afford one.
pub fn finetune_sets(
    pool: &[Window],
    budget: Budget,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<Window>, Vec<Window>)> {
    let (labeled, few_shot) = match budget {
        Budget::All(_) => (pool.to_vec(), false),
        Budget::PerClass(k) => (sample_few_shot(pool, k, seed)?, k <= FEW_SHOT_MAX),
    };
    if few_shot || val_fraction <= 0.0 {
        return Ok((labeled, Vec::new()));
    }
    Ok(split_train_val(&labeled, val_fraction, seed))
}

struct Job {
    run: usize,
    fold: usize,
    budget: Budget,
    method: Method,
}

/// Fine-tunes and tests every (run, fold, budget, method) combination.
pub fn evaluate_downstream(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    pretrained: Option<&PimModel>,
) -> Result<Vec<MetricReport>> {
    let mut jobs = Vec::new();
    for run in 0..cfg.n_runs {
        for fold in 0..data.plan.folds.len() {
            for &budget in &cfg.budgets {
                for &method in &cfg.methods {
                    jobs.push(Job {
                        run,
                        fold,
                        budget,
                        method,
                    });
                }
            }
        }
    }
    let results = par::map(&jobs, |job| -> Result<FoldResult> {
        let fold = &data.plan.folds[job.fold];
        let seed = cfg.run_seed(job.run);
        let ctx = |e: PimError| {
            e.context(format!(
                "run {} fold {} ({:?}, budget {})",
                job.run, fold.test_subject, job.method, job.budget
            ))
        };
        let pool: Vec<Window> = data
            .downstream
            .iter()
            .filter(|w| w.label.is_some() && fold.train_subjects.contains(&w.subject_id))
            .cloned()
            .collect();
        let test: Vec<Window> = data
            .downstream
            .iter()
            .filter(|w| w.label.is_some() && w.subject_id == fold.test_subject)
            .cloned()
            .collect();
        let few_shot_seed = rng::derive_seed(seed, &[job.fold as u64]);
        let (train, val) =
            finetune_sets(&pool, job.budget, cfg.finetune.val_fraction, few_shot_seed)
                .map_err(ctx)?;
        assert_no_subjects(&train, &[fold.test_subject.as_str()], "fine-tuning").map_err(ctx)?;
        assert_no_subjects(&val, &[fold.test_subject.as_str()], "fine-tuning").map_err(ctx)?;
        let checkpoint = match job.method {
            Method::Pim => Some(pretrained.ok_or_else(|| {
                PimError::InvalidParameter("PIM method needs a pre-trained model".into())
            })?),
            Method::Baseline => None,
        };
        let ft_cfg = TrainConfig {
            seed,
            ..cfg.finetune.clone()
        };
        let out = finetune(checkpoint, &train, &val, data.n_classes, &ft_cfg).map_err(ctx)?;
        let pred = predict(&out.model, &test).map_err(ctx)?;
        let truth: Vec<usize> = test.iter().map(|w| w.label.expect("filtered")).collect();
        Ok(FoldResult {
            test_subject: fold.test_subject.clone(),
            n_train: train.len(),
            n_test: test.len(),
            macro_f1: macro_f1(&pred.class_ids, &truth, data.n_classes).map_err(ctx)?,
            accuracy: accuracy(&pred.class_ids, &truth).map_err(ctx)?,
        })
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let fingerprint = cfg.fingerprint();
    let mut reports = Vec::new();
    for &budget in &cfg.budgets {
        for &method in &cfg.methods {
            let mut runs = Vec::with_capacity(cfg.n_runs);
            for run in 0..cfg.n_runs {
                let folds: Vec<FoldResult> = jobs
                    .iter()
                    .zip(&results)
                    .filter(|(j, _)| j.run == run && j.budget == budget && j.method == method)
                    .map(|(_, r)| r.clone())
                    .collect();
                let n = folds.len() as f64;
                runs.push(RunResult {
                    run,
                    seed: cfg.run_seed(run),
                    macro_f1: folds.iter().map(|f| f.macro_f1).sum::<f64>() / n,
                    accuracy: folds.iter().map(|f| f.accuracy).sum::<f64>() / n,
                    folds,
                });
            }
            let f1: Vec<f64> = runs.iter().map(|r| r.macro_f1).collect();
            let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
            reports.push(MetricReport {
                method,
                budget,
                macro_f1: Summary::of(&f1)?,
                accuracy: Summary::of(&acc)?,
                runs,
                config_fingerprint: fingerprint.clone(),
            });
        }
    }
    Ok(reports)
}

/// Full pipeline: load, window, pseudo-label, pre-train once, then fine-tune
/// and test every run, fold, budget and method.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let series = load_series(cfg)?;
    let (layout, rate, windows) = window_all(&series, &cfg.windowing)?;
    let data = prepare(cfg, &layout, rate, windows)?;
    log::info!(
        "{}: {} pre-training and {} downstream windows, {} classes",
        cfg.name,
        data.pretrain.len(),
        data.downstream.len(),
        data.n_classes
    );
    let (pretrained, summary) = if cfg.methods.contains(&Method::Pim) {
        let (m, s) = run_pretrain(cfg, &data)?;
        log::info!("pre-training kept epoch {:?} of {}", s.best_epoch, s.epochs);
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    let results = evaluate_downstream(cfg, &data, pretrained.as_ref())?;
    Ok(ExperimentReport {
        name: cfg.name.clone(),
        config_fingerprint: cfg.fingerprint(),
        split: data.plan,
        n_classes: data.n_classes,
        pretrain: summary,
        results,
    })
}
