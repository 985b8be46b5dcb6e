//! Batch-instance screening: trap-question accuracy with an Otsu cut, then
//! correlation-based outlier removal against the per-question MOS.
//!
//! Both stages operate on batch instances rather than subjects, because a
//! subject's behavior can change between their first and second batch.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{QuestionKind, RatingTable};
use crate::numerics::{self, NumericsError};

/// Upper bound on the outlier cutoff.
pub const MAX_CR_CUTOFF: f64 = 0.85;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScreeningError {
    #[error("question kind {0:?} is not a trap")]
    NotATrap(QuestionKind),
    #[error("batch instance {0} has no trap ratings")]
    NoTrapQuestions(String),
    #[error("no batch instances to screen")]
    Empty,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Accuracy of one trap response: `v/100` for type I, `1 - v/100` for type II.
pub fn trap_accuracy(score: f64, kind: QuestionKind) -> Result<f64, ScreeningError> {
    match kind {
        QuestionKind::TrapI => Ok(score / 100.0),
        QuestionKind::TrapII => Ok(1.0 - score / 100.0),
        QuestionKind::Study => Err(ScreeningError::NotATrap(kind)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleansingReport {
    pub threshold: f64,
    pub bins: usize,
    pub per_instance_accuracy: BTreeMap<String, f64>,
    pub kept: BTreeSet<String>,
    pub discarded: BTreeSet<String>,
}

/// Mean trap accuracy of every batch instance.
pub fn instance_accuracies(table: &RatingTable) -> Result<BTreeMap<String, f64>, ScreeningError> {
    let mut out = BTreeMap::new();
    for id in table.instances().keys() {
        // summed in question order so the result ignores rating file order
        let mut traps: Vec<(&str, f64)> = Vec::new();
        for rating in table.instance_ratings(id) {
            let kind = table.questions()[&rating.question_id].kind;
            if kind.is_trap() {
                traps.push((&rating.question_id, trap_accuracy(rating.score, kind)?));
            }
        }
        if traps.is_empty() {
            return Err(ScreeningError::NoTrapQuestions(id.clone()));
        }
        traps.sort_by(|a, b| a.0.cmp(b.0));
        let sum: f64 = traps.iter().map(|t| t.1).sum();
        out.insert(id.clone(), sum / traps.len() as f64);
    }
    Ok(out)
}

/// Discards every instance whose trap accuracy falls strictly below the Otsu
/// threshold of the accuracy histogram.
pub fn cleanse(table: &RatingTable, bins: usize) -> Result<CleansingReport, ScreeningError> {
    if table.instances().is_empty() {
        return Err(ScreeningError::Empty);
    }
    let accuracies = instance_accuracies(table)?;
    let values: Vec<f64> = accuracies.values().copied().collect();
    let threshold = numerics::otsu_threshold(&values, bins)?;
    let (kept, discarded): (Vec<_>, Vec<_>) =
        accuracies.iter().partition(|(_, &acc)| acc >= threshold);
    Ok(CleansingReport {
        threshold,
        bins,
        kept: kept.into_iter().map(|(id, _)| id.clone()).collect(),
        discarded: discarded.into_iter().map(|(id, _)| id.clone()).collect(),
        per_instance_accuracy: accuracies,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MosReference {
    /// Per-question MOS over all kept instances, including the one under test.
    IncludeSelf,
    /// Per-question MOS over the other kept instances only.
    LeaveOneOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub per_instance_cr: BTreeMap<String, f64>,
    pub mu: f64,
    pub sigma: f64,
    pub cutoff: f64,
    pub kept: BTreeSet<String>,
    pub removed: BTreeSet<String>,
    /// Instances whose scores (or matching MOS values) were constant; they get CR = 0.
    pub degenerate: BTreeSet<String>,
    pub mos_reference: MosReference,
}

/// Correlation-based outlier removal with the default self-inclusive MOS.
pub fn remove_outliers(
    table: &RatingTable,
    kept: &BTreeSet<String>,
) -> Result<OutlierReport, ScreeningError> {
    remove_outliers_with(table, kept, MosReference::IncludeSelf)
}

/// For each instance, CR is min(PLCC, SROCC) between its scores and the MOS
/// of the same questions; an instance is removed when CR < min(μ − σ, 0.85)
/// with μ, σ taken over all instances in `kept`.
pub fn remove_outliers_with(
    table: &RatingTable,
    kept: &BTreeSet<String>,
    reference: MosReference,
) -> Result<OutlierReport, ScreeningError> {
    let ids: Vec<&String> = kept
        .iter()
        .filter(|id| table.instances().contains_key(*id))
        .collect();
    if ids.is_empty() {
        return Err(ScreeningError::Empty);
    }

    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for id in &ids {
        for r in table.instance_ratings(id) {
            let e = sums.entry(r.question_id.as_str()).or_insert((0.0, 0));
            e.0 += r.score;
            e.1 += 1;
        }
    }

    let scored: Vec<(String, Option<f64>)> = ids
        .par_iter()
        .map(|id| {
            let mut own = Vec::new();
            let mut mos = Vec::new();
            for r in table.instance_ratings(id) {
                let (sum, count) = sums[r.question_id.as_str()];
                let m = match reference {
                    MosReference::IncludeSelf => sum / count as f64,
                    MosReference::LeaveOneOut if count > 1 => (sum - r.score) / (count - 1) as f64,
                    MosReference::LeaveOneOut => continue,
                };
                own.push(r.score);
                mos.push(m);
            }
            let cr = match (
                numerics::pearson(&own, &mos),
                numerics::spearman(&own, &mos),
            ) {
                (Ok(p), Ok(s)) => Some(p.min(s)),
                _ => None,
            };
            ((*id).clone(), cr)
        })
        .collect();

    let mut per_instance_cr = BTreeMap::new();
    let mut degenerate = BTreeSet::new();
    for (id, cr) in scored {
        let value = cr.unwrap_or_else(|| {
            degenerate.insert(id.clone());
            0.0
        });
        per_instance_cr.insert(id, value);
    }

    let values: Vec<f64> = per_instance_cr.values().copied().collect();
    let mu = numerics::mean(&values);
    let sigma = if values.len() > 1 {
        (values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    let cutoff = (mu - sigma).min(MAX_CR_CUTOFF);
    let (removed, kept_ids): (Vec<_>, Vec<_>) =
        per_instance_cr.iter().partition(|(_, &cr)| cr < cutoff);
    Ok(OutlierReport {
        mu,
        sigma,
        cutoff,
        kept: kept_ids.into_iter().map(|(id, _)| id.clone()).collect(),
        removed: removed.into_iter().map(|(id, _)| id.clone()).collect(),
        per_instance_cr,
        degenerate,
        mos_reference: reference,
    })
}
