//! Synthetic rater populations with known ground truth.
//!
//! Diligent raters report `clip(truth + bias + N(0, sd²), 0, 100)`; random
//! clickers report uniform scores. The generated tables use the regular
//! rating format, so every pipeline stage can be checked against the truth.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Codec, Question, QuestionKind, Rating, RatingTable, Stimulus, StudyConfig};
use crate::numerics;
use crate::reconstruction::ReconstructionResult;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("ground truth does not cover stimulus {0}")]
    CoverageGap(Stimulus),
    #[error("config defines no batches")]
    NoBatches,
    #[error("invalid table: {0}")]
    Domain(#[from] crate::domain::DomainError),
    #[error("malformed truth record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RaterKind {
    Diligent,
    RandomClicker,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaterProfile {
    pub kind: RaterKind,
    pub bias: f64,
    pub residual_sd: f64,
    /// Probability that a diligent rater actually looks; otherwise a uniform score.
    pub attention: f64,
}

impl RaterProfile {
    pub fn diligent(bias: f64, residual_sd: f64) -> Self {
        RaterProfile {
            kind: RaterKind::Diligent,
            bias,
            residual_sd,
            attention: 1.0,
        }
    }

    pub fn clicker() -> Self {
        RaterProfile {
            kind: RaterKind::RandomClicker,
            bias: 0.0,
            residual_sd: 0.0,
            attention: 0.0,
        }
    }

    fn score(&self, truth: f64, rng: &mut impl Rng) -> f64 {
        match self.kind {
            RaterKind::RandomClicker => rng.random_range(0.0..=100.0),
            RaterKind::Diligent => {
                if self.attention < 1.0 && rng.random::<f64>() >= self.attention {
                    return rng.random_range(0.0..=100.0);
                }
                let noise = if self.residual_sd > 0.0 {
                    Normal::new(0.0, self.residual_sd)
                        .expect("positive sd")
                        .sample(rng)
                } else {
                    0.0
                };
                (truth + self.bias + noise).clamp(0.0, 100.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub true_quality: BTreeMap<Stimulus, f64>,
    pub profiles: BTreeMap<String, RaterProfile>,
}

/// Population recipe for [`GroundTruth::generate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub diligent: usize,
    pub clickers: usize,
    pub bias_sd: f64,
    pub residual_sd_min: f64,
    pub residual_sd_max: f64,
    pub attention: f64,
}

impl Default for Population {
    fn default() -> Self {
        Population {
            diligent: 45,
            clickers: 0,
            bias_sd: 5.0,
            residual_sd_min: 2.0,
            residual_sd_max: 15.0,
            attention: 1.0,
        }
    }
}

impl GroundTruth {
    /// Monotone truth for every stimulus of `config` plus a rater population.
    ///
    /// Each level adds about 2.5 JND-like units, mapped to 10 score points,
    /// scaled by a per-(source, codec) factor in [0.8, 0.95]. Level 0 is 0.
    pub fn generate(config: &StudyConfig, population: &Population, seed: u64) -> GroundTruth {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut factors: BTreeMap<(String, Codec), f64> = BTreeMap::new();
        let mut true_quality = BTreeMap::new();
        for s in config.stimuli() {
            let value = if s.is_pristine() {
                0.0
            } else {
                let f = *factors
                    .entry((s.source_id.clone(), s.codec))
                    .or_insert_with(|| rng.random_range(0.8..=0.95));
                10.0 * s.distortion_level as f64 * f
            };
            true_quality.insert(s, value);
        }
        let bias = Normal::new(0.0, population.bias_sd.max(f64::MIN_POSITIVE)).expect("sd");
        let mut profiles = BTreeMap::new();
        for i in 0..population.diligent {
            let sd = if population.residual_sd_max > population.residual_sd_min {
                rng.random_range(population.residual_sd_min..=population.residual_sd_max)
            } else {
                population.residual_sd_min
            };
            let b = if population.bias_sd > 0.0 {
                bias.sample(&mut rng)
            } else {
                0.0
            };
            profiles.insert(
                format!("d{:04}", i + 1),
                RaterProfile {
                    attention: population.attention,
                    ..RaterProfile::diligent(b, sd)
                },
            );
        }
        for i in 0..population.clickers {
            profiles.insert(format!("c{:04}", i + 1), RaterProfile::clicker());
        }
        GroundTruth {
            true_quality,
            profiles,
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (s, &q) in &self.true_quality {
            serde_json::to_writer(
                &mut w,
                &TruthRecord::Quality {
                    source_id: s.source_id.clone(),
                    codec: s.codec,
                    distortion_level: s.distortion_level,
                    true_quality: q,
                },
            )?;
            w.write_all(b"\n")?;
        }
        for (id, p) in &self.profiles {
            serde_json::to_writer(
                &mut w,
                &TruthRecord::Rater {
                    subject_id: id.clone(),
                    profile: *p,
                },
            )?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self, SimulationError> {
        let mut truth = GroundTruth::default();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |reason: String| SimulationError::MalformedRecord {
                line: idx + 1,
                reason,
            };
            match serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))? {
                TruthRecord::Quality {
                    source_id,
                    codec,
                    distortion_level,
                    true_quality,
                } => {
                    let s = Stimulus::new(source_id, codec, distortion_level)
                        .map_err(|e| malformed(e.to_string()))?;
                    truth.true_quality.insert(s, true_quality);
                }
                TruthRecord::Rater {
                    subject_id,
                    profile,
                } => {
                    truth.profiles.insert(subject_id, profile);
                }
            }
        }
        Ok(truth)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimulationError> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SimulationError> {
        let file = std::fs::File::create(path)?;
        Ok(self.write(std::io::BufWriter::new(file))?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum TruthRecord {
    Quality {
        source_id: String,
        codec: Codec,
        distortion_level: u8,
        true_quality: f64,
    },
    Rater {
        subject_id: String,
        #[serde(flatten)]
        profile: RaterProfile,
    },
}

/// Each subject (in id order) takes `batches_per_subject` consecutive batches
/// of the config, wrapping around, so batch loads stay balanced.
pub fn simulate(
    config: &StudyConfig,
    truth: &GroundTruth,
    seed: u64,
) -> Result<RatingTable, SimulationError> {
    if config.batches.is_empty() {
        return Err(SimulationError::NoBatches);
    }
    let questions = config.question_map();
    for batch in &config.batches {
        for qid in &batch.questions {
            if let Some(q) = questions.get(qid) {
                if !truth.true_quality.contains_key(&q.test) {
                    return Err(SimulationError::CoverageGap(q.test.clone()));
                }
            }
        }
    }
    let per_subject = config
        .session
        .batches_per_subject
        .clamp(1, config.batches.len());

    let mut ratings = Vec::new();
    let mut clock: u64 = 1_700_000_000_000;
    for (k, (subject, profile)) in truth.profiles.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        for j in 0..per_subject {
            let batch = &config.batches[(k * per_subject + j) % config.batches.len()];
            let instance = format!("{subject}-{}", batch.batch_id);
            let mut order: Vec<&String> = batch.questions.iter().collect();
            order.shuffle(&mut rng);
            for qid in order {
                let q: &Question = &questions[qid];
                let score = profile.score(truth.true_quality[&q.test], &mut rng);
                let elapsed_ms = rng.random_range(2_000..20_000u64);
                clock += elapsed_ms;
                ratings.push(Rating {
                    subject_id: subject.clone(),
                    batch_instance_id: instance.clone(),
                    batch_id: batch.batch_id.clone(),
                    question_id: qid.clone(),
                    score,
                    toggle_count: rng.random_range(0..12),
                    elapsed_ms,
                    timestamp: clock,
                });
            }
            clock += 180_000;
        }
    }
    Ok(RatingTable::new(questions.into_values(), ratings)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryMetrics {
    pub rmse: f64,
    pub plcc: Option<f64>,
    /// Correlation of injected and estimated biases over diligent raters.
    pub bias_corr: Option<f64>,
    pub n_questions: usize,
    pub n_subjects: usize,
}

/// Compares the reconstructed MOS of study questions with the true quality
/// of their test stimuli.
pub fn evaluate_recovery(
    truth: &GroundTruth,
    result: &ReconstructionResult,
    questions: &BTreeMap<String, Question>,
) -> RecoveryMetrics {
    let mut est = Vec::new();
    let mut real = Vec::new();
    for (qid, &mos) in &result.mos {
        let Some(q) = questions.get(qid) else {
            continue;
        };
        if q.kind != QuestionKind::Study {
            continue;
        }
        if let Some(&t) = truth.true_quality.get(&q.test) {
            est.push(mos);
            real.push(t);
        }
    }
    let rmse = if est.is_empty() {
        f64::NAN
    } else {
        (est.iter()
            .zip(&real)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / est.len() as f64)
            .sqrt()
    };
    let (mut injected, mut estimated) = (Vec::new(), Vec::new());
    for (id, p) in &truth.profiles {
        if p.kind != RaterKind::Diligent {
            continue;
        }
        if let Some(&b) = result.bias.get(id) {
            injected.push(p.bias);
            estimated.push(b);
        }
    }
    RecoveryMetrics {
        rmse,
        plcc: numerics::pearson(&est, &real).ok(),
        bias_corr: numerics::pearson(&injected, &estimated).ok(),
        n_questions: est.len(),
        n_subjects: injected.len(),
    }
}
