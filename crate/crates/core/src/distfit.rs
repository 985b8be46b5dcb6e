//! Beta models of per-question score distributions.
//!
//! Scores are normalized to [0, 1], fitted by maximum likelihood (Newton on
//! the digamma score equations, started from the method-of-moments estimate)
//! and checked with a chi-square goodness-of-fit test on equal-probability
//! bins.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ChiSquared, ContinuousCDF};
use statrs::function::beta::ln_beta;
use thiserror::Error;

use crate::domain::{Codec, QuestionKind, RatingTable};
use crate::numerics::{digamma, trigamma};

/// Samples are clamped into [CLAMP, 1 - CLAMP] so 0 and 100 scores keep finite logs.
pub const CLAMP: f64 = 1e-4;
pub const MAX_NEWTON_ITER: usize = 500;
const PARAM_MIN: f64 = 1e-6;
const PARAM_MAX: f64 = 1e6;
pub const GOF_BINS: usize = 10;
pub const MIN_EXPECTED: f64 = 5.0;
pub const MIN_GOF_SAMPLES: usize = 10;

#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
pub enum DistFitError {
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("too few samples for the goodness-of-fit test: {0}")]
    TooFewSamples(usize),
    #[error("invalid Beta parameters ({0}, {1})")]
    InvalidParameters(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FitMethod {
    Mle,
    Moments,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaFit {
    pub alpha: f64,
    pub beta: f64,
    pub method: FitMethod,
    pub loglik: f64,
    pub n: usize,
}

impl BetaFit {
    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn variance(&self) -> f64 {
        let s = self.alpha + self.beta;
        self.alpha * self.beta / (s * s * (s + 1.0))
    }
}

/// Sufficient statistics of a clamped sample.
#[derive(Debug, Clone, Copy)]
struct SampleStats {
    n: usize,
    mean: f64,
    variance: f64,
    mean_log: f64,
    mean_log1m: f64,
}

impl SampleStats {
    fn new(samples: &[f64]) -> Result<Self, DistFitError> {
        if samples.len() < 3 {
            return Err(DistFitError::DegenerateSample(format!(
                "{} samples, need at least 3",
                samples.len()
            )));
        }
        let clamped: Vec<f64> = samples
            .iter()
            .map(|&x| x.clamp(CLAMP, 1.0 - CLAMP))
            .collect();
        let n = clamped.len() as f64;
        let mean = clamped.iter().sum::<f64>() / n;
        let variance = clamped.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let all_equal = clamped.iter().all(|&x| x == clamped[0]);
        if all_equal || variance <= 0.0 {
            return Err(DistFitError::DegenerateSample("zero variance".into()));
        }
        Ok(SampleStats {
            n: clamped.len(),
            mean,
            variance,
            mean_log: clamped.iter().map(|x| x.ln()).sum::<f64>() / n,
            mean_log1m: clamped.iter().map(|x| (1.0 - x).ln()).sum::<f64>() / n,
        })
    }

    fn loglik(&self, alpha: f64, beta: f64) -> f64 {
        self.n as f64
            * ((alpha - 1.0) * self.mean_log + (beta - 1.0) * self.mean_log1m
                - ln_beta(alpha, beta))
    }
}

/// Method-of-moments parameters for mean `m` and variance `v`:
/// κ = m(1−m)/v − 1, α = mκ, β = (1−m)κ.
pub fn moments_estimate(mean: f64, variance: f64) -> Result<(f64, f64), DistFitError> {
    if !(mean > 0.0 && mean < 1.0) || !(variance > 0.0) {
        return Err(DistFitError::DegenerateSample(format!(
            "mean {mean}, variance {variance}"
        )));
    }
    let kappa = mean * (1.0 - mean) / variance - 1.0;
    if kappa <= 0.0 {
        return Err(DistFitError::DegenerateSample(format!(
            "variance {variance} too large for mean {mean}"
        )));
    }
    Ok((mean * kappa, (1.0 - mean) * kappa))
}

/// Method-of-moments fit on the clamped sample (population variance).
pub fn fit_beta_moments(samples: &[f64]) -> Result<BetaFit, DistFitError> {
    let stats = SampleStats::new(samples)?;
    let (alpha, beta) = moments_estimate(stats.mean, stats.variance)?;
    Ok(BetaFit {
        alpha,
        beta,
        method: FitMethod::Moments,
        loglik: stats.loglik(alpha, beta),
        n: stats.n,
    })
}

/// Newton ascent in (log α, log β) along the natural-parameter Newton
/// direction; steps are halved until the log-likelihood does not decrease.
fn newton(stats: &SampleStats, start: (f64, f64)) -> Option<(f64, f64, f64)> {
    let (mut alpha, mut beta) = start;
    let mut ll = stats.loglik(alpha, beta);
    for _ in 0..MAX_NEWTON_ITER {
        let psi_sum = digamma(alpha + beta).ok()?;
        let ga = stats.mean_log - digamma(alpha).ok()? + psi_sum;
        let gb = stats.mean_log1m - digamma(beta).ok()? + psi_sum;
        let tri_sum = trigamma(alpha + beta).ok()?;
        let haa = tri_sum - trigamma(alpha).ok()?;
        let hbb = tri_sum - trigamma(beta).ok()?;
        let hab = tri_sum;
        let det = haa * hbb - hab * hab;
        if !(det > 0.0) || !det.is_finite() {
            return None;
        }
        // δ = -H⁻¹ g
        let da = -(hbb * ga - hab * gb) / det;
        let db = -(haa * gb - hab * ga) / det;
        let (ua, ub) = (da / alpha, db / beta);
        if ua.abs().max(ub.abs()) < 1e-12 {
            return Some((alpha, beta, ll));
        }
        if ua.abs().max(ub.abs()) < 1e-6 {
            // inside the quadratic basin the likelihood is flat to rounding,
            // so plain Newton steps replace the ascent test
            alpha *= ua.exp();
            beta *= ub.exp();
            ll = stats.loglik(alpha, beta);
            continue;
        }

        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let na = alpha * (t * ua).exp();
            let nb = beta * (t * ub).exp();
            if !(na > PARAM_MIN && na < PARAM_MAX && nb > PARAM_MIN && nb < PARAM_MAX) {
                return None;
            }
            let nll = stats.loglik(na, nb);
            if nll >= ll {
                let tiny = (na / alpha - 1.0).abs().max((nb / beta - 1.0).abs()) < 1e-12;
                alpha = na;
                beta = nb;
                ll = nll;
                accepted = true;
                if tiny {
                    return Some((alpha, beta, ll));
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // no representable ascent left: accept only if already stationary
            return (ga.abs().max(gb.abs()) < 1e-8).then_some((alpha, beta, ll));
        }
    }
    None
}

/// Maximum-likelihood Beta fit, falling back to the moments estimate when
/// Newton fails to converge or the parameters leave (1e-6, 1e6).
pub fn fit_beta(samples: &[f64]) -> Result<BetaFit, DistFitError> {
    let stats = SampleStats::new(samples)?;
    let (a0, b0) = moments_estimate(stats.mean, stats.variance)?;
    let moments = BetaFit {
        alpha: a0,
        beta: b0,
        method: FitMethod::Moments,
        loglik: stats.loglik(a0, b0),
        n: stats.n,
    };
    match newton(&stats, (a0, b0)) {
        Some((alpha, beta, loglik)) => Ok(BetaFit {
            alpha,
            beta,
            method: FitMethod::Mle,
            loglik,
            n: stats.n,
        }),
        None => Ok(moments),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub passed: bool,
    pub bins_used: usize,
    pub significance: f64,
    /// Set when merging left fewer than 4 bins; dof is then clamped to 1.
    pub insufficient_bins: bool,
    pub observed: Vec<u64>,
    pub expected: Vec<f64>,
}

/// Adjacent-bin merge so every expected count reaches `MIN_EXPECTED`. A short
/// tail is folded into the last complete group.
fn merge_bins(observed: &[u64], expected: &[f64]) -> (Vec<u64>, Vec<f64>) {
    let mut obs_out: Vec<u64> = Vec::new();
    let mut exp_out: Vec<f64> = Vec::new();
    let (mut o_acc, mut e_acc) = (0u64, 0.0);
    for (&o, &e) in observed.iter().zip(expected) {
        o_acc += o;
        e_acc += e;
        if e_acc >= MIN_EXPECTED {
            obs_out.push(o_acc);
            exp_out.push(e_acc);
            o_acc = 0;
            e_acc = 0.0;
        }
    }
    if e_acc > 0.0 || o_acc > 0 {
        if let (Some(lo), Some(le)) = (obs_out.last_mut(), exp_out.last_mut()) {
            *lo += o_acc;
            *le += e_acc;
        } else {
            obs_out.push(o_acc);
            exp_out.push(e_acc);
        }
    }
    (obs_out, exp_out)
}

/// Pearson chi-square test of `samples` against `fit`: 10 equal-probability
/// bins, merged until each expects at least 5, with dof = bins − 1 − 2.
pub fn chi_square_gof(
    samples: &[f64],
    fit: &BetaFit,
    significance: f64,
) -> Result<GofResult, DistFitError> {
    if samples.len() < MIN_GOF_SAMPLES {
        return Err(DistFitError::TooFewSamples(samples.len()));
    }
    let dist = Beta::new(fit.alpha, fit.beta)
        .map_err(|_| DistFitError::InvalidParameters(fit.alpha, fit.beta))?;
    let edges: Vec<f64> = (1..GOF_BINS)
        .map(|k| dist.inverse_cdf(k as f64 / GOF_BINS as f64))
        .collect();
    let mut observed = vec![0u64; GOF_BINS];
    for &x in samples {
        let x = x.clamp(0.0, 1.0);
        observed[edges.partition_point(|&e| e <= x)] += 1;
    }
    let n = samples.len() as f64;
    let expected = vec![n / GOF_BINS as f64; GOF_BINS];
    let (observed, expected) = merge_bins(&observed, &expected);

    let statistic: f64 = observed
        .iter()
        .zip(&expected)
        .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
        .sum();
    let bins_used = observed.len();
    let insufficient_bins = bins_used < 4;
    let dof = bins_used.saturating_sub(3).max(1);
    let p_value = ChiSquared::new(dof as f64)
        .map(|d| d.sf(statistic))
        .unwrap_or(0.0)
        .clamp(0.0, 1.0);
    Ok(GofResult {
        statistic,
        dof,
        p_value,
        passed: p_value >= significance,
        bins_used,
        significance,
        insufficient_bins,
        observed,
        expected,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Shape {
    Symmetric,
    UShaped,
    LeftSkewed,
    RightSkewed,
    Uniform,
}

/// Shape label of a fit. α > β puts mass toward 1, i.e. toward severe
/// distortion, and is labeled right-skewed.
pub fn classify_shape(fit: &BetaFit, tolerance: f64) -> Shape {
    let (a, b) = (fit.alpha, fit.beta);
    if (a - 1.0).abs() <= tolerance && (b - 1.0).abs() <= tolerance {
        Shape::Uniform
    } else if (a - b).abs() <= tolerance * (a + b) {
        if (a + b) / 2.0 <= 1.0 {
            Shape::UShaped
        } else {
            Shape::Symmetric
        }
    } else if a > b {
        Shape::RightSkewed
    } else {
        Shape::LeftSkewed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionFit {
    pub question_id: String,
    pub kind: QuestionKind,
    pub source_id: String,
    pub codec: Codec,
    pub distortion_level: u8,
    pub n: usize,
    pub fit: Option<BetaFit>,
    pub shape: Option<Shape>,
    pub gof: Option<GofResult>,
    /// Why the fit or the test could not be produced.
    pub error: Option<DistFitError>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub significance: f64,
    pub shape_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            significance: 0.05,
            shape_tolerance: 0.05,
        }
    }
}

/// Fits every question rated by the `kept` instances, scores divided by 100.
/// Per-question failures are recorded on the entry.
pub fn fit_all_questions(
    table: &RatingTable,
    kept: &BTreeSet<String>,
    options: &FitOptions,
) -> BTreeMap<String, QuestionFit> {
    let mut samples: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in table.ratings() {
        if kept.contains(&r.batch_instance_id) {
            samples
                .entry(r.question_id.as_str())
                .or_default()
                .push(r.score / 100.0);
        }
    }
    let entries: Vec<(&str, Vec<f64>)> = samples.into_iter().collect();
    entries
        .into_par_iter()
        .map(|(qid, xs)| {
            let q = &table.questions()[qid];
            let mut entry = QuestionFit {
                question_id: qid.to_string(),
                kind: q.kind,
                source_id: q.test.source_id.clone(),
                codec: q.test.codec,
                distortion_level: q.test.distortion_level,
                n: xs.len(),
                fit: None,
                shape: None,
                gof: None,
                error: None,
            };
            match fit_beta(&xs) {
                Ok(fit) => {
                    entry.shape = Some(classify_shape(&fit, options.shape_tolerance));
                    match chi_square_gof(&xs, &fit, options.significance) {
                        Ok(gof) => entry.gof = Some(gof),
                        Err(e) => entry.error = Some(e),
                    }
                    entry.fit = Some(fit);
                }
                Err(e) => entry.error = Some(e),
            }
            (qid.to_string(), entry)
        })
        .collect()
}

/// Share of study questions with a completed test that passed it.
pub fn pass_rate(fits: &BTreeMap<String, QuestionFit>) -> Option<f64> {
    let tested: Vec<bool> = fits
        .values()
        .filter(|f| f.kind == QuestionKind::Study)
        .filter_map(|f| f.gof.as_ref().map(|g| g.passed))
        .collect();
    if tested.is_empty() {
        None
    } else {
        Some(tested.iter().filter(|&&p| p).count() as f64 / tested.len() as f64)
    }
}
