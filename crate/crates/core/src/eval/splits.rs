use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{PimError, Result};
use crate::timeseries::Window;

/// One leave-one-subject-out fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train_subjects: Vec<String>,
    pub test_subject: String,
}

/// Subject partition of an experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub pretrain_subjects: Vec<String>,
    pub downstream_subjects: Vec<String>,
    pub folds: Vec<Fold>,
}

/// One fold per subject, in input order, each holding that subject out.
pub fn make_loso_folds(subjects: &[String]) -> Result<Vec<Fold>> {
    let unique: BTreeSet<&String> = subjects.iter().collect();
    if unique.len() != subjects.len() {
        return Err(PimError::InvalidParameter("duplicate subject ids".into()));
    }
    if subjects.len() < 2 {
        return Err(PimError::TooFewSubjects(subjects.len()));
    }
    Ok(subjects
        .iter()
        .map(|test| Fold {
            train_subjects: subjects.iter().filter(|s| *s != test).cloned().collect(),
            test_subject: test.clone(),
        })
        .collect())
}

impl SplitPlan {
    pub fn new(pretrain: Vec<String>, downstream: Vec<String>) -> Result<Self> {
        let a: BTreeSet<&String> = pretrain.iter().collect();
        if let Some(s) = downstream.iter().find(|s| a.contains(s)) {
            return Err(PimError::InvalidParameter(format!(
                "subject `{s}` is in both the pre-training and downstream sets"
            )));
        }
        let folds = make_loso_folds(&downstream)?;
        Ok(SplitPlan {
            pretrain_subjects: pretrain,
            downstream_subjects: downstream,
            folds,
        })
    }
}

/// Errors if any window belongs to one of `forbidden` subjects.
pub fn assert_no_subjects(windows: &[Window], forbidden: &[&str], stage: &str) -> Result<()> {
    if let Some(w) = windows
        .iter()
        .find(|w| forbidden.contains(&w.subject_id.as_str()))
    {
        return Err(PimError::InvalidParameter(format!(
            "subject `{}` leaked into {stage}",
            w.subject_id
        )));
    }
    Ok(())
}

pub fn windows_of<'a>(windows: &'a [Window], subjects: &[String]) -> Vec<&'a Window> {
    windows
        .iter()
        .filter(|w| subjects.contains(&w.subject_id))
        .collect()
}
