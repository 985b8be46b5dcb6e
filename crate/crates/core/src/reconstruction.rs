//! Soft-rejection quality reconstruction, DMOS derivation and bootstrap
//! confidence intervals.
//!
//! The estimator alternates between per-subject bias, per-subject residual
//! variance and a consistency-weighted, bias-corrected MOS per question,
//! starting from the raw per-question mean:
//!
//! ```text
//! B_i     = mean_q [ S_i(q) - MOS(q) ]
//! R_i(q)  = S_i(q) - MOS(q) - B_i
//! W_i     = 1 / max(var(R_i), floor)
//! MOS'(q) = Σ_i W_i (S_i(q) - B_i) / Σ_i W_i
//! ```
//!
//! and stops once `Σ_q (MOS' - MOS)² < epsilon`. Subjects are pooled over all
//! their retained batch instances.
//!
//! The update conserves the grand mean of the MOS, so the scale is pinned by
//! the raw data: a constant shift of one subject moves every MOS by the same
//! amount. Differences between questions, and therefore DMOS, are unaffected.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Question, RatingTable, Stimulus};

/// Floor on the residual variance before inversion (half-point sd).
pub const VARIANCE_FLOOR: f64 = 0.25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReconstructionError {
    #[error("no ratings for question {0}")]
    NoRatings(String),
    #[error("rating table is empty")]
    EmptyTable,
    #[error("no convergence within {0} iterations")]
    NonConvergence(usize),
    #[error("no level 0 MOS available for source {0}")]
    MissingReferenceMos(String),
    #[error("unknown question {0}")]
    UnknownQuestion(String),
    #[error("invalid bootstrap parameters: {0}")]
    InvalidParameters(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructOptions {
    pub epsilon: f64,
    pub max_iter: usize,
    pub variance_floor: f64,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        ReconstructOptions {
            epsilon: 1e-6,
            max_iter: 1000,
            variance_floor: VARIANCE_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    pub mos: BTreeMap<String, f64>,
    pub bias: BTreeMap<String, f64>,
    pub consistency: BTreeMap<String, f64>,
    pub residual_sd: BTreeMap<String, f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Value of the stopping statistic at the last iteration.
    pub last_change: f64,
}

impl ReconstructionResult {
    pub fn require_converged(&self) -> Result<&Self, ReconstructionError> {
        if self.converged {
            Ok(self)
        } else {
            Err(ReconstructionError::NonConvergence(self.iterations))
        }
    }
}

/// Dense observation list used by the fixed-point solver.
#[derive(Debug, Clone, Copy)]
struct Observation {
    question: usize,
    subject: usize,
    score: f64,
}

struct Solution {
    mos: Vec<f64>,
    bias: Vec<f64>,
    variance: Vec<f64>,
    iterations: usize,
    converged: bool,
    last_change: f64,
}

fn solve(
    n_questions: usize,
    n_subjects: usize,
    obs: &[Observation],
    options: &ReconstructOptions,
) -> Solution {
    let mut per_question = vec![(0.0, 0usize); n_questions];
    let mut per_subject_count = vec![0usize; n_subjects];
    for o in obs {
        per_question[o.question].0 += o.score;
        per_question[o.question].1 += 1;
        per_subject_count[o.subject] += 1;
    }
    let mut mos: Vec<f64> = per_question
        .iter()
        .map(|&(sum, count)| sum / count as f64)
        .collect();

    let mut bias = vec![0.0; n_subjects];
    let mut variance = vec![0.0; n_subjects];
    let mut weights = vec![0.0; n_subjects];
    let mut iterations = 0;
    let mut converged = false;
    let mut last_change = f64::INFINITY;

    while iterations < options.max_iter {
        iterations += 1;

        bias.iter_mut().for_each(|b| *b = 0.0);
        for o in obs {
            bias[o.subject] += o.score - mos[o.question];
        }
        for (b, &count) in bias.iter_mut().zip(&per_subject_count) {
            *b /= count.max(1) as f64;
        }

        variance.iter_mut().for_each(|v| *v = 0.0);
        for o in obs {
            let residual = o.score - mos[o.question] - bias[o.subject];
            variance[o.subject] += residual * residual;
        }
        for s in 0..n_subjects {
            variance[s] /= per_subject_count[s].max(1) as f64;
            weights[s] = 1.0 / variance[s].max(options.variance_floor);
        }

        let mut num = vec![0.0; n_questions];
        let mut den = vec![0.0; n_questions];
        for o in obs {
            let w = weights[o.subject];
            num[o.question] += w * (o.score - bias[o.subject]);
            den[o.question] += w;
        }
        let mut change = 0.0;
        for q in 0..n_questions {
            let next = num[q] / den[q];
            change += (next - mos[q]) * (next - mos[q]);
            mos[q] = next;
        }
        last_change = change;
        if change < options.epsilon {
            converged = true;
            break;
        }
    }

    Solution {
        mos,
        bias,
        variance,
        iterations,
        converged,
        last_change,
    }
}

/// Indexes a table's ratings for the solver; ids come back sorted.
fn index_table(table: &RatingTable) -> (Vec<String>, Vec<String>, Vec<Observation>) {
    let mut questions: BTreeMap<&str, usize> = BTreeMap::new();
    let mut subjects: BTreeMap<&str, usize> = BTreeMap::new();
    for r in table.ratings() {
        questions.entry(r.question_id.as_str()).or_insert(0);
        subjects.entry(r.subject_id.as_str()).or_insert(0);
    }
    for (i, v) in questions.values_mut().enumerate() {
        *v = i;
    }
    for (i, v) in subjects.values_mut().enumerate() {
        *v = i;
    }
    let obs = table
        .ratings()
        .iter()
        .map(|r| Observation {
            question: questions[r.question_id.as_str()],
            subject: subjects[r.subject_id.as_str()],
            score: r.score,
        })
        .collect();
    (
        questions.keys().map(|s| s.to_string()).collect(),
        subjects.keys().map(|s| s.to_string()).collect(),
        obs,
    )
}

fn assemble(
    question_ids: &[String],
    subject_ids: &[String],
    solution: Solution,
    floor: f64,
) -> ReconstructionResult {
    ReconstructionResult {
        mos: question_ids.iter().cloned().zip(solution.mos).collect(),
        bias: subject_ids.iter().cloned().zip(solution.bias).collect(),
        consistency: subject_ids
            .iter()
            .cloned()
            .zip(solution.variance.iter().map(|v| 1.0 / v.max(floor)))
            .collect(),
        residual_sd: subject_ids
            .iter()
            .cloned()
            .zip(solution.variance.iter().map(|v| v.sqrt()))
            .collect(),
        iterations: solution.iterations,
        converged: solution.converged,
        last_change: solution.last_change,
    }
}

/// Runs the fixed-point reconstruction over every rated question of `table`.
/// A run that exhausts `max_iter` is still returned, with `converged = false`.
pub fn reconstruct(
    table: &RatingTable,
    options: &ReconstructOptions,
) -> Result<ReconstructionResult, ReconstructionError> {
    if table.is_empty() {
        return Err(ReconstructionError::EmptyTable);
    }
    let (question_ids, subject_ids, obs) = index_table(table);
    let solution = solve(question_ids.len(), subject_ids.len(), &obs, options);
    Ok(assemble(
        &question_ids,
        &subject_ids,
        solution,
        options.variance_floor,
    ))
}

/// Like [`reconstruct`], but requires every listed question to carry ratings.
pub fn reconstruct_questions<'a>(
    table: &RatingTable,
    required: impl IntoIterator<Item = &'a str>,
    options: &ReconstructOptions,
) -> Result<ReconstructionResult, ReconstructionError> {
    let rated = table.ratings_by_question();
    for q in required {
        if !rated.contains_key(q) {
            return Err(ReconstructionError::NoRatings(q.to_string()));
        }
    }
    reconstruct(table, options)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DmosTable {
    pub dmos: BTreeMap<Stimulus, f64>,
    /// Stimulus-level MOS (mean over the questions showing the stimulus).
    pub mos: BTreeMap<Stimulus, f64>,
    pub reference_mos: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmosRow {
    pub source_id: String,
    pub codec: crate::domain::Codec,
    pub distortion_level: u8,
    pub mos: f64,
    pub dmos: f64,
}

impl DmosTable {
    pub fn rows(&self) -> Vec<DmosRow> {
        self.dmos
            .iter()
            .map(|(s, &d)| DmosRow {
                source_id: s.source_id.clone(),
                codec: s.codec,
                distortion_level: s.distortion_level,
                mos: self.mos[s],
                dmos: d,
            })
            .collect()
    }
}

/// DMOS = stimulus MOS minus the MOS of its source at level 0. Stimuli shown
/// by several questions first average their question MOS values.
pub fn compute_dmos(
    result: &ReconstructionResult,
    questions: &BTreeMap<String, Question>,
) -> Result<DmosTable, ReconstructionError> {
    let mut acc: BTreeMap<&Stimulus, (f64, usize)> = BTreeMap::new();
    for (qid, &mos) in &result.mos {
        let q = questions
            .get(qid)
            .ok_or_else(|| ReconstructionError::UnknownQuestion(qid.clone()))?;
        let e = acc.entry(&q.test).or_insert((0.0, 0));
        e.0 += mos;
        e.1 += 1;
    }
    let mos: BTreeMap<Stimulus, f64> = acc
        .into_iter()
        .map(|(s, (sum, n))| (s.clone(), sum / n as f64))
        .collect();
    let reference_mos: BTreeMap<String, f64> = mos
        .iter()
        .filter(|(s, _)| s.is_pristine())
        .map(|(s, &m)| (s.source_id.clone(), m))
        .collect();
    let mut dmos = BTreeMap::new();
    for (s, &m) in &mos {
        let reference = reference_mos
            .get(&s.source_id)
            .ok_or_else(|| ReconstructionError::MissingReferenceMos(s.source_id.clone()))?;
        dmos.insert(s.clone(), m - reference);
    }
    Ok(DmosTable {
        dmos,
        mos,
        reference_mos,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
    pub reconstruct: ReconstructOptions,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            replicates: 1000,
            level: 0.95,
            seed: 0,
            reconstruct: ReconstructOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapCi {
    pub intervals: BTreeMap<Stimulus, Interval>,
    /// Replicate DMOS values per stimulus, in replicate order.
    pub replicate_values: BTreeMap<Stimulus, Vec<f64>>,
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
    /// Replicates whose reconstruction hit `max_iter`; their values are kept.
    pub nonconverged: usize,
}

/// Linear-interpolation quantile of sorted data (the "type 7" definition).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// RNG for replicate `r`: the run seed selects the key, the replicate the stream.
fn replicate_rng(seed: u64, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    rng
}

/// Percentile bootstrap of the DMOS table. Each replicate resamples every
/// question's ratings with replacement (subject identity travels with the
/// rating), reruns the reconstruction and recomputes DMOS.
pub fn bootstrap_ci(
    table: &RatingTable,
    options: &BootstrapOptions,
) -> Result<BootstrapCi, ReconstructionError> {
    if options.replicates == 0 {
        return Err(ReconstructionError::InvalidParameters(
            "replicates must be positive".into(),
        ));
    }
    if !(options.level > 0.0 && options.level < 1.0) {
        return Err(ReconstructionError::InvalidParameters(format!(
            "confidence level {} outside (0, 1)",
            options.level
        )));
    }
    let point_result = reconstruct(table, &options.reconstruct)?;
    let point = compute_dmos(&point_result, table.questions())?;

    let (question_ids, subject_ids, obs) = index_table(table);
    let mut by_question: Vec<Vec<Observation>> = vec![Vec::new(); question_ids.len()];
    for o in obs {
        by_question[o.question].push(o);
    }

    let replicates: Vec<(Result<DmosTable, ReconstructionError>, bool)> = (0..options.replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(options.seed, r);
            let mut sample = Vec::with_capacity(table.ratings().len());
            for ratings in &by_question {
                for _ in 0..ratings.len() {
                    sample.push(ratings[rng.random_range(0..ratings.len())]);
                }
            }
            let solution = solve(
                question_ids.len(),
                subject_ids.len(),
                &sample,
                &options.reconstruct,
            );
            let converged = solution.converged;
            let result = assemble(
                &question_ids,
                &subject_ids,
                solution,
                options.reconstruct.variance_floor,
            );
            (compute_dmos(&result, table.questions()), converged)
        })
        .collect();

    let mut replicate_values: BTreeMap<Stimulus, Vec<f64>> = point
        .dmos
        .keys()
        .map(|s| (s.clone(), Vec::with_capacity(options.replicates)))
        .collect();
    let mut nonconverged = 0;
    for (dmos, converged) in replicates {
        let dmos = dmos?;
        if !converged {
            nonconverged += 1;
        }
        for (s, values) in replicate_values.iter_mut() {
            values.push(dmos.dmos[s]);
        }
    }

    let lower = (1.0 - options.level) / 2.0;
    let upper = (1.0 + options.level) / 2.0;
    let intervals = replicate_values
        .iter()
        .map(|(s, values)| {
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            (
                s.clone(),
                Interval {
                    point: point.dmos[s],
                    lo: quantile_sorted(&sorted, lower),
                    hi: quantile_sorted(&sorted, upper),
                    median: quantile_sorted(&sorted, 0.5),
                },
            )
        })
        .collect();

    Ok(BootstrapCi {
        intervals,
        replicate_values,
        replicates: options.replicates,
        level: options.level,
        seed: options.seed,
        nonconverged,
    })
}
