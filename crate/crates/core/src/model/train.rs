use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::network::{LossTerms, Objective, PimModel};
use super::spec::{EncoderSpec, HeadSpec, LossWeights, TrainConfig};
use crate::error::{PimError, Result};
use crate::nn::{adam_step, AdamState, Archive, Tensor};
use crate::par;
use crate::rng::{self, tag};
use crate::timeseries::Window;

/// Minibatches are split into fixed chunks that run in parallel; gradients
/// are summed in chunk order so results do not depend on the thread count.
pub const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerTerm {
    pub angle: f64,
    pub motion: f64,
    pub symmetry: f64,
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub per_term: PerTerm,
}

pub fn write_history_jsonl<W: Write>(history: &[EpochRecord], mut w: W) -> Result<()> {
    for r in history {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")
            .map_err(|e| PimError::io("<history>", e))?;
    }
    Ok(())
}

pub fn save_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| PimError::io(path, e))?;
    write_history_jsonl(history, std::io::BufWriter::new(f))
}

/// Resumable training state. Shuffling and dropout streams are derived from
/// `(seed, epoch, batch, chunk)`, so the model, its optimizer moments and the
/// epoch counter are the whole state.
#[derive(Debug, Clone)]
pub struct TrainSession {
    pub model: PimModel,
    pub cfg: TrainConfig,
    pub objective: Objective,
    /// Epochs completed.
    pub epoch: usize,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_model: Option<PimModel>,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct SessionMeta {
    cfg: TrainConfig,
    objective: Objective,
    epoch: usize,
    best_val: Option<f64>,
    best_epoch: Option<usize>,
    history: Vec<EpochRecord>,
}

pub const SESSION_KIND: &str = "pim-session";

impl TrainSession {
    pub fn new(model: PimModel, cfg: TrainConfig, objective: Objective) -> Result<Self> {
        cfg.validate()?;
        Ok(TrainSession {
            model,
            cfg,
            objective,
            epoch: 0,
            best_val: None,
            best_epoch: None,
            best_model: None,
            history: Vec::new(),
        })
    }

    pub fn is_finished(&self) -> bool {
        if self.epoch >= self.cfg.max_epochs {
            return true;
        }
        match self.best_epoch {
            Some(b) => self.epoch - b >= self.cfg.patience,
            None => false,
        }
    }

    /// One pass over `train`, then validation on `val` if non-empty.
    pub fn run_epoch(&mut self, train: &[Window], val: &[Window]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(PimError::EmptyInput("training windows"));
        }
        let epoch = self.epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(
            self.cfg.seed,
            &[tag::SHUFFLE, epoch as u64],
        ));

        let mut sum = LossTerms::default();
        for (b, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            let windows: Vec<&Window> = batch.iter().map(|&i| &train[i]).collect();
            let terms = self.step(&windows, epoch, b)?;
            sum.add(&terms.scaled(batch.len() as f64));
        }
        let train_terms = sum.scaled(1.0 / train.len() as f64);

        let val_loss = if val.is_empty() {
            None
        } else {
            Some(evaluate_loss(&self.model, val, &self.objective)?.total)
        };
        self.epoch += 1;
        let improved = match (val_loss, self.best_val) {
            (Some(v), Some(best)) => v < best,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            self.best_val = val_loss;
            self.best_epoch = Some(epoch);
            self.best_model = Some(self.model.clone());
        }
        let rec = EpochRecord {
            epoch,
            train_loss: train_terms.total,
            val_loss,
            per_term: PerTerm {
                angle: train_terms.angle,
                motion: train_terms.motion,
                symmetry: train_terms.symmetry,
            },
        };
        log::debug!(
            "epoch {epoch}: train {:.5} val {val_loss:?}",
            rec.train_loss
        );
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Forward/backward over one minibatch and an Adam update. Returns the
    /// batch-mean loss.
    fn step(&mut self, batch: &[&Window], epoch: usize, b: usize) -> Result<LossTerms> {
        let chunks: Vec<&[&Window]> = batch.chunks(CHUNK).collect();
        let n = batch.len() as f64;
        let model = &self.model;
        let objective = &self.objective;
        let seed = self.cfg.seed;
        let results = par::map_indexed(&chunks, |c, chunk| {
            let mut r = rng::stream(seed, &[tag::DROPOUT, epoch as u64, b as u64, c as u64]);
            model.loss_and_grads(chunk, objective, true, &mut r, chunk.len() as f64 / n, true)
        });
        let mut terms = LossTerms::default();
        let mut grads: Option<Vec<Tensor>> = None;
        for res in results {
            let (t, g) = res?;
            terms.add(&t);
            let g = g.expect("gradients requested");
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, x) in acc.iter_mut().zip(&g) {
                        a.add_assign(x)?;
                    }
                }
            }
        }
        let grads = grads.expect("non-empty batch");
        let mut adam = self.model.adam;
        let mut params = self.model.params_mut();
        for (p, g) in params.iter_mut().zip(grads) {
            p.grad = g;
        }
        adam_step(&mut params, &mut adam);
        self.model.adam = adam;
        Ok(terms)
    }

    /// Runs epochs until the budget or patience is exhausted.
    pub fn run(&mut self, train: &[Window], val: &[Window]) -> Result<()> {
        while !self.is_finished() {
            self.run_epoch(train, val)?;
        }
        Ok(())
    }

    /// The model to keep: best validation epoch if validation ran, else the
    /// latest weights.
    pub fn selected_model(&self) -> &PimModel {
        self.best_model.as_ref().unwrap_or(&self.model)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let meta = SessionMeta {
            cfg: self.cfg.clone(),
            objective: self.objective,
            epoch: self.epoch,
            best_val: self.best_val,
            best_epoch: self.best_epoch,
            history: self.history.clone(),
        };
        let mut a = self.model.to_archive(serde_json::to_value(meta)?)?;
        a.kind = SESSION_KIND.into();
        if let Some(best) = &self.best_model {
            for mut e in best.to_archive(serde_json::Value::Null)?.entries {
                e.name = format!("best.{}", e.name);
                a.entries.push(e);
            }
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.kind != SESSION_KIND {
            return Err(PimError::Format(format!(
                "expected a `{SESSION_KIND}` archive, found `{}`",
                a.kind
            )));
        }
        let mut current = a.clone();
        current.kind = super::network::CHECKPOINT_KIND.into();
        current.entries.retain(|e| !e.name.starts_with("best."));
        let (model, extra) = PimModel::from_archive(&current)?;
        let meta: SessionMeta = serde_json::from_value(extra)?;

        let best_model = if a.entries.iter().any(|e| e.name.starts_with("best.")) {
            let mut best = current.clone();
            best.entries = a
                .entries
                .iter()
                .filter_map(|e| {
                    e.name.strip_prefix("best.").map(|n| {
                        let mut e = e.clone();
                        e.name = n.to_string();
                        e
                    })
                })
                .collect();
            Some(PimModel::from_archive(&best)?.0)
        } else {
            None
        };
        Ok(TrainSession {
            model,
            cfg: meta.cfg,
            objective: meta.objective,
            epoch: meta.epoch,
            best_val: meta.best_val,
            best_epoch: meta.best_epoch,
            best_model,
            history: meta.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// Mean loss over `windows` with dropout off.
pub fn evaluate_loss(
    model: &PimModel,
    windows: &[Window],
    objective: &Objective,
) -> Result<LossTerms> {
    if windows.is_empty() {
        return Err(PimError::EmptyInput("evaluation windows"));
    }
    let refs: Vec<&Window> = windows.iter().collect();
    let chunks: Vec<&[&Window]> = refs.chunks(CHUNK).collect();
    let n = windows.len() as f64;
    let parts = par::map(&chunks, |chunk| {
        let mut r = rng::stream(0, &[]);
        model.loss_and_grads(
            chunk,
            objective,
            false,
            &mut r,
            chunk.len() as f64 / n,
            false,
        )
    });
    let mut total = LossTerms::default();
    for p in parts {
        total.add(&p?.0);
    }
    Ok(total)
}

/// Random split into `(train, val)` with `round(val_fraction * n)` windows in
/// `val`, seeded.
pub fn split_train_val(
    windows: &[Window],
    val_fraction: f64,
    seed: u64,
) -> (Vec<Window>, Vec<Window>) {
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::VAL_SPLIT]));
    let n_val = ((windows.len() as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(windows.len().saturating_sub(1));
    let (val_idx, train_idx) = order.split_at(n_val);
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| windows[i].clone()).collect()
    };
    (pick(train_idx), pick(val_idx))
}

pub struct PretrainOutcome {
    /// Weights of the best validation epoch (latest if no validation).
    pub best: PimModel,
    pub session: TrainSession,
}

fn check_pseudo(windows: &[Window]) -> Result<()> {
    if let Some(i) = windows.iter().position(|w| w.pseudo.is_none()) {
        return Err(PimError::NoPseudoLabels(i));
    }
    Ok(())
}

fn input_shape(windows: &[Window]) -> Result<(usize, usize)> {
    let first = windows
        .first()
        .ok_or(PimError::EmptyInput("training windows"))?;
    Ok((first.n_channels(), first.len()))
}

/// Starts a pre-training session on pseudo-labelled windows.
pub fn pretrain_session(
    train: &[Window],
    heads: &[HeadSpec],
    encoder: &EncoderSpec,
    cfg: &TrainConfig,
    weights: LossWeights,
) -> Result<TrainSession> {
    check_pseudo(train)?;
    let (nc, len) = input_shape(train)?;
    let model = PimModel::new(encoder, heads, nc, len, cfg.lr, cfg.seed)?;
    TrainSession::new(model, cfg.clone(), Objective::Pretrain(weights))
}

/// Trains encoder and pretext heads; `val` (already split off, not
/// augmented) drives best-epoch selection.
pub fn pretrain(
    train: &[Window],
    val: &[Window],
    heads: &[HeadSpec],
    encoder: &EncoderSpec,
    cfg: &TrainConfig,
    weights: LossWeights,
) -> Result<PretrainOutcome> {
    check_pseudo(val)?;
    let mut session = pretrain_session(train, heads, encoder, cfg, weights)?;
    session.run(train, val)?;
    Ok(PretrainOutcome {
        best: session.selected_model().clone(),
        session,
    })
}

pub struct FinetuneOutcome {
    pub model: PimModel,
    pub history: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub selected_epoch: usize,
}

/// Downstream model: encoder from `pretrained` (or a seeded random init when
/// `None`) plus a fresh linear classifier. The classifier init depends only on
/// `seed`, so a baseline and a pre-trained run differ only in the encoder.
pub fn init_classifier_model(
    pretrained: Option<&PimModel>,
    encoder: &EncoderSpec,
    n_channels: usize,
    window_len: usize,
    n_classes: usize,
    cfg: &TrainConfig,
) -> Result<PimModel> {
    if n_classes == 0 {
        return Err(PimError::InvalidParameter(
            "n_classes must be at least 1".into(),
        ));
    }
    let heads = [HeadSpec::classifier(n_classes)];
    let mut model = PimModel::new(encoder, &heads, n_channels, window_len, cfg.lr, cfg.seed)?;
    if let Some(p) = pretrained {
        if p.n_channels != n_channels || p.window_len != window_len || p.encoder.spec != *encoder {
            return Err(PimError::ShapeMismatch(format!(
                "checkpoint encoder takes {}x{}, data is {}x{}",
                p.n_channels, p.window_len, n_channels, window_len
            )));
        }
        model.encoder = p.encoder.clone();
        for param in model.encoder.params_mut() {
            param.adam_m.data_mut().fill(0.0);
            param.adam_v.data_mut().fill(0.0);
        }
    }
    model.adam = AdamState::new(cfg.lr)?;
    Ok(model)
}

/// Fine-tunes encoder and classifier jointly on labelled windows. With a
/// non-empty `val` the best validation epoch is kept, otherwise the last.
pub fn finetune(
    pretrained: Option<&PimModel>,
    labeled: &[Window],
    val: &[Window],
    n_classes: usize,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    let (nc, len) = input_shape(labeled)?;
    for w in labeled.iter().chain(val) {
        match w.label {
            None => return Err(PimError::EmptyInput("unlabeled window in fine-tuning")),
            Some(l) if l >= n_classes => {
                return Err(PimError::IndexOutOfRange {
                    index: l,
                    len: n_classes,
                })
            }
            _ => {}
        }
    }
    let encoder = pretrained
        .map(|p| p.encoder.spec.clone())
        .unwrap_or_default();
    let model = init_classifier_model(pretrained, &encoder, nc, len, n_classes, cfg)?;
    let mut session = TrainSession::new(model, cfg.clone(), Objective::Classify)?;
    session.run(labeled, val)?;
    let selected_epoch = session
        .best_epoch
        .unwrap_or(session.epoch.saturating_sub(1));
    Ok(FinetuneOutcome {
        model: session.selected_model().clone(),
        history: session.history,
        selected_epoch,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_ids: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
}

/// Argmax of classifier softmax, dropout off.
pub fn predict(model: &PimModel, windows: &[Window]) -> Result<Prediction> {
    if windows.is_empty() {
        return Ok(Prediction {
            class_ids: Vec::new(),
            probabilities: Vec::new(),
        });
    }
    let refs: Vec<&Window> = windows.iter().collect();
    let chunks: Vec<&[&Window]> = refs.chunks(CHUNK).collect();
    let parts = par::try_map(&chunks, |c| model.predict_proba(c))?;
    let mut out = Prediction {
        class_ids: Vec::with_capacity(windows.len()),
        probabilities: Vec::with_capacity(windows.len()),
    };
    for p in parts {
        for row in p.rows() {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            out.class_ids.push(best);
            out.probabilities.push(row.to_vec());
        }
    }
    Ok(out)
}

/// Up to `k` windows per class, drawn uniformly without replacement.
/// Classes with fewer than `k` examples contribute all of them.
pub fn sample_few_shot(pool: &[Window], k_per_class: usize, seed: u64) -> Result<Vec<Window>> {
    if pool.is_empty() {
        return Err(PimError::EmptyInput("few-shot pool"));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, w) in pool.iter().enumerate() {
        if let Some(l) = w.label {
            by_class.entry(l).or_default().push(i);
        }
    }
    if by_class.is_empty() {
        return Err(PimError::EmptyInput(
            "few-shot pool has no labelled windows",
        ));
    }
    let mut picked = Vec::new();
    for (&class, idx) in &by_class {
        let mut idx = idx.clone();
        if idx.len() <= k_per_class {
            if idx.len() < k_per_class {
                log::warn!(
                    "class {class} has {} examples, fewer than k = {k_per_class}; taking all",
                    idx.len()
                );
            }
        } else {
            idx.shuffle(&mut rng::stream(seed, &[tag::FEW_SHOT, class as u64]));
            idx.truncate(k_per_class);
        }
        idx.sort_unstable();
        picked.extend(idx);
    }
    Ok(picked.into_iter().map(|i| pool[i].clone()).collect())
}
