//! Staged analysis driver and the report files each stage emits.
//!
//! Stages always run in the order cleanse → outliers → reconstruct →
//! bootstrap → fit-beta → align. A manifest may drop stages but never reorder
//! them. All randomness derives from the manifest seed, and every output is
//! written from ordered maps, so a manifest reproduces its bundle byte for
//! byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::alignment::{self, AlignmentReport, Grouping, JndTable};
use crate::distfit::{self, FitOptions, QuestionFit};
use crate::domain::{self, Codec, RatingTable, Stimulus};
use crate::numerics::DEFAULT_OTSU_BINS;
use crate::reconstruction::{
    self, BootstrapCi, BootstrapOptions, DmosRow, DmosTable, ReconstructOptions,
    ReconstructionResult,
};
use crate::screening::{self, CleansingReport, OutlierReport};
use crate::simulator::{self, GroundTruth, RecoveryMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Cleanse,
    Outliers,
    Reconstruct,
    Bootstrap,
    FitBeta,
    Align,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Cleanse,
        Stage::Outliers,
        Stage::Reconstruct,
        Stage::Bootstrap,
        Stage::FitBeta,
        Stage::Align,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Cleanse => "cleanse",
            Stage::Outliers => "outliers",
            Stage::Reconstruct => "reconstruct",
            Stage::Bootstrap => "bootstrap",
            Stage::FitBeta => "fit-beta",
            Stage::Align => "align",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineParams {
    pub otsu_bins: usize,
    pub epsilon: f64,
    pub max_iter: usize,
    pub replicates: usize,
    pub level: f64,
    pub significance: f64,
    pub grouping: Grouping,
}

impl Default for PipelineParams {
    fn default() -> Self {
        PipelineParams {
            otsu_bins: DEFAULT_OTSU_BINS,
            epsilon: 1e-6,
            max_iter: 1000,
            replicates: 1000,
            level: 0.95,
            significance: 0.05,
            grouping: Grouping::PerSource,
        }
    }
}

impl PipelineParams {
    pub fn reconstruct_options(&self) -> ReconstructOptions {
        ReconstructOptions {
            epsilon: self.epsilon,
            max_iter: self.max_iter,
            ..ReconstructOptions::default()
        }
    }
}

fn default_stages() -> Vec<Stage> {
    Stage::ALL.to_vec()
}

/// TOML description of a full run. Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub ratings: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub jnd: Option<PathBuf>,
    #[serde(default)]
    pub truth: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_stages")]
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub params: PipelineParams,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("stage {stage}: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
    #[error("malformed report bundle: {0}")]
    Bundle(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn stage_err(stage: Stage) -> impl FnOnce(String) -> PipelineError {
    move |message| PipelineError::Stage {
        stage: stage.name(),
        message,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl PipelineManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut manifest: PipelineManifest =
            toml::from_str(&text).map_err(|e| PipelineError::Manifest(e.to_string()))?;
        if let Some(base) = path.parent() {
            manifest.resolve_relative_to(base);
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.ratings);
        fix(&mut self.out_dir);
        if let Some(p) = self.jnd.as_mut() {
            fix(p);
        }
        if let Some(p) = self.truth.as_mut() {
            fix(p);
        }
    }

    /// Stages must appear in canonical order without repeats.
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.stages.is_empty() {
            return Err(PipelineError::Manifest("no stages listed".into()));
        }
        for pair in self.stages.windows(2) {
            if pair[0] >= pair[1] {
                return Err(PipelineError::Manifest(format!(
                    "stage {} cannot run after {}",
                    pair[1].name(),
                    pair[0].name()
                )));
            }
        }
        let has = |s| self.stages.contains(&s);
        if has(Stage::Align) && !has(Stage::Reconstruct) {
            return Err(PipelineError::Manifest(
                "align needs the reconstruct stage".into(),
            ));
        }
        if has(Stage::Align) && self.jnd.is_none() {
            return Err(PipelineError::Manifest("align needs a jnd file".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub group: String,
    pub plcc: f64,
    pub srocc: f64,
    pub kendall_tau: f64,
    pub n: usize,
    pub monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub instances_total: usize,
    pub instances_after_cleansing: usize,
    pub instances_after_outliers: usize,
    pub otsu_threshold: Option<f64>,
    pub outlier_cutoff: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub bootstrap_replicates: Option<usize>,
    pub bootstrap_nonconverged: Option<usize>,
    pub gof_pass_rate: Option<f64>,
    pub alignment: Vec<AlignmentSummary>,
    pub recovery: Option<RecoveryMetrics>,
}

impl PipelineSummary {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "stages: {}",
            self.stages
                .iter()
                .map(|s| s.name())
                .collect::<Vec<_>>()
                .join(" -> ")
        );
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "batch instances: {}", self.instances_total);
        if let Some(t) = self.otsu_threshold {
            let _ = writeln!(
                s,
                "cleansing: otsu threshold {t:.2}, {} kept, {} discarded",
                self.instances_after_cleansing,
                self.instances_total - self.instances_after_cleansing
            );
        }
        if let Some(c) = self.outlier_cutoff {
            let _ = writeln!(
                s,
                "outliers: cutoff {c:.4}, {} removed, {} remaining",
                self.instances_after_cleansing - self.instances_after_outliers,
                self.instances_after_outliers
            );
        }
        if let (Some(it), Some(conv)) = (self.iterations, self.converged) {
            let _ = writeln!(s, "reconstruction: {it} iterations, converged = {conv}");
        }
        if let Some(r) = self.bootstrap_replicates {
            let _ = writeln!(
                s,
                "bootstrap: {r} replicates, {} without convergence",
                self.bootstrap_nonconverged.unwrap_or(0)
            );
        }
        if let Some(p) = self.gof_pass_rate {
            let _ = writeln!(
                s,
                "beta fits: {:.1}% of study questions pass chi-square",
                100.0 * p
            );
        }
        for a in &self.alignment {
            let _ = writeln!(
                s,
                "alignment {}: PLCC {:.3}  SROCC {:.3}  Kendall {:.3}  (n = {}{})",
                a.group,
                a.plcc,
                a.srocc,
                a.kendall_tau,
                a.n,
                if a.monotone {
                    ""
                } else {
                    ", non-monotone cubic"
                }
            );
        }
        if let Some(r) = &self.recovery {
            let _ = writeln!(
                s,
                "recovery: RMSE {:.3}, PLCC {}, bias correlation {}",
                r.rmse,
                r.plcc.map_or("n/a".into(), |v| format!("{v:.4}")),
                r.bias_corr.map_or("n/a".into(), |v| format!("{v:.4}"))
            );
        }
        s
    }
}

/// Everything a run produced, kept in memory for callers and tests.
#[derive(Debug, Clone, Default)]
pub struct PipelineOutput {
    pub cleansing: Option<CleansingReport>,
    pub outliers: Option<OutlierReport>,
    pub kept: BTreeSet<String>,
    pub reconstruction: Option<ReconstructionResult>,
    pub dmos: Option<DmosTable>,
    pub bootstrap: Option<BootstrapCi>,
    pub fits: Option<BTreeMap<String, QuestionFit>>,
    pub alignment: Option<AlignmentReport>,
}

pub const CLEANSING_FILE: &str = "cleansing.jsonl";
pub const OUTLIERS_FILE: &str = "outliers.jsonl";
pub const MOS_FILE: &str = "mos.jsonl";
pub const DMOS_FILE: &str = "dmos.jsonl";
pub const CI_FILE: &str = "ci.jsonl";
pub const SERIES_FILE: &str = "dmos_series.csv";
pub const BETA_FILE: &str = "beta.jsonl";
pub const ALIGNMENT_FILE: &str = "alignment.jsonl";
pub const SCATTER_FILE: &str = "alignment_scatter.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_TXT: &str = "summary.txt";

/// Runs the analysis stages in memory without touching the filesystem.
pub fn run_stages(
    table: &RatingTable,
    stages: &[Stage],
    params: &PipelineParams,
    seed: u64,
    jnd: Option<&JndTable>,
) -> Result<PipelineOutput, PipelineError> {
    let has = |s| stages.contains(&s);
    let mut out = PipelineOutput {
        kept: table.instance_ids(),
        ..Default::default()
    };

    if has(Stage::Cleanse) {
        let report = screening::cleanse(table, params.otsu_bins)
            .map_err(|e| stage_err(Stage::Cleanse)(e.to_string()))?;
        out.kept = report.kept.clone();
        out.cleansing = Some(report);
    }
    if has(Stage::Outliers) {
        let report = screening::remove_outliers(table, &out.kept)
            .map_err(|e| stage_err(Stage::Outliers)(e.to_string()))?;
        out.kept = report.kept.clone();
        out.outliers = Some(report);
    }
    let screened = table.restrict(&out.kept);
    if has(Stage::Reconstruct) {
        let err = stage_err(Stage::Reconstruct);
        let result = reconstruction::reconstruct(&screened, &params.reconstruct_options())
            .map_err(|e| err(e.to_string()))?;
        let dmos = reconstruction::compute_dmos(&result, screened.questions())
            .map_err(|e| stage_err(Stage::Reconstruct)(e.to_string()))?;
        out.reconstruction = Some(result);
        out.dmos = Some(dmos);
    }
    if has(Stage::Bootstrap) {
        let options = BootstrapOptions {
            replicates: params.replicates,
            level: params.level,
            seed,
            reconstruct: params.reconstruct_options(),
        };
        out.bootstrap = Some(
            reconstruction::bootstrap_ci(&screened, &options)
                .map_err(|e| stage_err(Stage::Bootstrap)(e.to_string()))?,
        );
    }
    if has(Stage::FitBeta) {
        let options = FitOptions {
            significance: params.significance,
            ..FitOptions::default()
        };
        out.fits = Some(distfit::fit_all_questions(table, &out.kept, &options));
    }
    if has(Stage::Align) {
        let err = stage_err(Stage::Align);
        let (Some(dmos), Some(jnd)) = (out.dmos.as_ref(), jnd) else {
            return Err(err("needs reconstructed DMOS and a JND table".into()));
        };
        out.alignment =
            Some(alignment::align(dmos, jnd, params.grouping).map_err(|e| err(e.to_string()))?);
    }
    Ok(out)
}

/// Loads the manifest inputs, runs every listed stage and writes the bundle.
pub fn run_pipeline(manifest: &PipelineManifest) -> Result<PipelineSummary, PipelineError> {
    manifest.validate()?;
    let table = domain::load_ratings(&manifest.ratings).map_err(|e| PipelineError::Stage {
        stage: "ingest",
        message: e.to_string(),
    })?;
    let jnd = match &manifest.jnd {
        Some(p) if manifest.stages.contains(&Stage::Align) => {
            Some(JndTable::load(p).map_err(|e| stage_err(Stage::Align)(e.to_string()))?)
        }
        _ => None,
    };
    let truth = match &manifest.truth {
        Some(p) => Some(GroundTruth::load(p).map_err(|e| PipelineError::Stage {
            stage: "ingest",
            message: e.to_string(),
        })?),
        None => None,
    };
    let output = run_stages(
        &table,
        &manifest.stages,
        &manifest.params,
        manifest.seed,
        jnd.as_ref(),
    )?;

    let dir = &manifest.out_dir;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    if let Some(r) = &output.cleansing {
        write_file(&dir.join(CLEANSING_FILE), |w| write_cleansing(r, w))?;
    }
    if let Some(r) = &output.outliers {
        write_file(&dir.join(OUTLIERS_FILE), |w| write_outliers(r, w))?;
    }
    if let Some(r) = &output.reconstruction {
        write_file(&dir.join(MOS_FILE), |w| write_mos(r, w))?;
    }
    if let Some(d) = &output.dmos {
        write_file(&dir.join(DMOS_FILE), |w| write_dmos(d, w))?;
        write_file(&dir.join(SERIES_FILE), |w| {
            write_series(d, output.bootstrap.as_ref(), w)
        })?;
    }
    if let Some(ci) = &output.bootstrap {
        write_file(&dir.join(CI_FILE), |w| write_ci(ci, w))?;
    }
    if let Some(f) = &output.fits {
        write_file(&dir.join(BETA_FILE), |w| write_fits(f, w))?;
    }
    if let Some(a) = &output.alignment {
        write_file(&dir.join(ALIGNMENT_FILE), |w| write_alignment(a, w))?;
        write_file(&dir.join(SCATTER_FILE), |w| write_scatter(a, w))?;
    }

    let summary = summarize(manifest, &table, &output, truth.as_ref());
    write_file(&dir.join(SUMMARY_JSON), |w| {
        serde_json::to_writer_pretty(&mut *w, &summary)?;
        w.write_all(b"\n")
    })?;
    write_file(&dir.join(SUMMARY_TXT), |w| {
        w.write_all(summary.to_text().as_bytes())
    })?;
    Ok(summary)
}

fn summarize(
    manifest: &PipelineManifest,
    table: &RatingTable,
    output: &PipelineOutput,
    truth: Option<&GroundTruth>,
) -> PipelineSummary {
    let total = table.instances().len();
    let after_cleansing = output.cleansing.as_ref().map_or(total, |r| r.kept.len());
    PipelineSummary {
        seed: manifest.seed,
        stages: manifest.stages.clone(),
        instances_total: total,
        instances_after_cleansing: after_cleansing,
        instances_after_outliers: output.kept.len(),
        otsu_threshold: output.cleansing.as_ref().map(|r| r.threshold),
        outlier_cutoff: output.outliers.as_ref().map(|r| r.cutoff),
        iterations: output.reconstruction.as_ref().map(|r| r.iterations),
        converged: output.reconstruction.as_ref().map(|r| r.converged),
        bootstrap_replicates: output.bootstrap.as_ref().map(|b| b.replicates),
        bootstrap_nonconverged: output.bootstrap.as_ref().map(|b| b.nonconverged),
        gof_pass_rate: output.fits.as_ref().and_then(distfit::pass_rate),
        alignment: output
            .alignment
            .as_ref()
            .map(|a| {
                a.groups
                    .iter()
                    .map(|g| AlignmentSummary {
                        group: g.group.clone(),
                        plcc: g.correlations.plcc,
                        srocc: g.correlations.srocc,
                        kendall_tau: g.correlations.kendall_tau,
                        n: g.correlations.n,
                        monotone: g.monotone,
                    })
                    .collect()
            })
            .unwrap_or_default(),
        recovery: match (truth, &output.reconstruction) {
            (Some(t), Some(r)) => Some(simulator::evaluate_recovery(t, r, table.questions())),
            _ => None,
        },
    }
}

pub fn write_file(
    path: &Path,
    body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> Result<(), PipelineError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    body(&mut w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn line(w: &mut dyn Write, value: serde_json::Value) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, &value)?;
    w.write_all(b"\n")
}

pub fn write_cleansing(r: &CleansingReport, w: &mut dyn Write) -> std::io::Result<()> {
    line(
        w,
        json!({
            "record": "cleansing",
            "threshold": r.threshold,
            "bins": r.bins,
            "kept": r.kept.len(),
            "discarded": r.discarded.len(),
        }),
    )?;
    for (id, acc) in &r.per_instance_accuracy {
        line(
            w,
            json!({
                "record": "instance",
                "batch_instance_id": id,
                "accuracy": acc,
                "kept": r.kept.contains(id),
            }),
        )?;
    }
    Ok(())
}

pub fn write_outliers(r: &OutlierReport, w: &mut dyn Write) -> std::io::Result<()> {
    line(
        w,
        json!({
            "record": "outliers",
            "mu": r.mu,
            "sigma": r.sigma,
            "cutoff": r.cutoff,
            "mos_reference": r.mos_reference,
            "kept": r.kept.len(),
            "removed": r.removed.len(),
        }),
    )?;
    for (id, cr) in &r.per_instance_cr {
        line(
            w,
            json!({
                "record": "instance",
                "batch_instance_id": id,
                "cr": cr,
                "kept": r.kept.contains(id),
                "degenerate": r.degenerate.contains(id),
            }),
        )?;
    }
    Ok(())
}

/// Ids of instances marked `kept` in a cleansing or outlier report.
pub fn read_kept(path: &Path) -> Result<BTreeSet<String>, PipelineError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut kept = BTreeSet::new();
    for (idx, l) in BufReader::new(file).lines().enumerate() {
        let l = l.map_err(io_err(path))?;
        if l.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&l)
            .map_err(|e| PipelineError::Manifest(format!("{}:{}: {e}", path.display(), idx + 1)))?;
        if v["record"] == "instance" && v["kept"] == true {
            if let Some(id) = v["batch_instance_id"].as_str() {
                kept.insert(id.to_string());
            }
        }
    }
    Ok(kept)
}

pub fn write_mos(r: &ReconstructionResult, w: &mut dyn Write) -> std::io::Result<()> {
    line(
        w,
        json!({
            "record": "reconstruction",
            "iterations": r.iterations,
            "converged": r.converged,
            "last_change": r.last_change,
        }),
    )?;
    for (q, mos) in &r.mos {
        line(
            w,
            json!({"record": "question", "question_id": q, "mos": mos}),
        )?;
    }
    for (s, bias) in &r.bias {
        line(
            w,
            json!({
                "record": "subject",
                "subject_id": s,
                "bias": bias,
                "consistency": r.consistency[s],
                "residual_sd": r.residual_sd[s],
            }),
        )?;
    }
    Ok(())
}

pub fn write_dmos(d: &DmosTable, w: &mut dyn Write) -> std::io::Result<()> {
    for row in d.rows() {
        serde_json::to_writer(&mut *w, &row)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a file written by [`write_dmos`].
pub fn read_dmos(path: &Path) -> Result<DmosTable, PipelineError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut table = DmosTable::default();
    for (idx, l) in BufReader::new(file).lines().enumerate() {
        let l = l.map_err(io_err(path))?;
        if l.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| {
            PipelineError::Manifest(format!("{}:{}: {reason}", path.display(), idx + 1))
        };
        let row: DmosRow = serde_json::from_str(&l).map_err(|e| bad(e.to_string()))?;
        let s = Stimulus::new(row.source_id, row.codec, row.distortion_level)
            .map_err(|e| bad(e.to_string()))?;
        if s.is_pristine() {
            table.reference_mos.insert(s.source_id.clone(), row.mos);
        }
        table.mos.insert(s.clone(), row.mos);
        table.dmos.insert(s, row.dmos);
    }
    Ok(table)
}

/// Summary of a report bundle previously written by [`run_pipeline`].
pub fn read_summary(dir: &Path) -> Result<PipelineSummary, PipelineError> {
    let path = dir.join(SUMMARY_JSON);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text)
        .map_err(|e| PipelineError::Bundle(format!("{}: {e}", path.display())))
}

fn stimulus_json(s: &Stimulus) -> serde_json::Map<String, serde_json::Value> {
    let mut m = serde_json::Map::new();
    m.insert("source_id".into(), json!(s.source_id));
    m.insert("codec".into(), json!(s.codec));
    m.insert("distortion_level".into(), json!(s.distortion_level));
    m
}

pub fn write_ci(ci: &BootstrapCi, w: &mut dyn Write) -> std::io::Result<()> {
    line(
        w,
        json!({
            "record": "bootstrap",
            "replicates": ci.replicates,
            "level": ci.level,
            "seed": ci.seed,
            "nonconverged": ci.nonconverged,
        }),
    )?;
    for (s, iv) in &ci.intervals {
        let mut m = stimulus_json(s);
        m.insert("record".into(), json!("interval"));
        m.insert("point".into(), json!(iv.point));
        m.insert("lo".into(), json!(iv.lo));
        m.insert("hi".into(), json!(iv.hi));
        m.insert("median".into(), json!(iv.median));
        line(w, serde_json::Value::Object(m))?;
    }
    Ok(())
}

/// CSV series per (source, codec): level, DMOS and CI bounds when available.
pub fn write_series(
    d: &DmosTable,
    ci: Option<&BootstrapCi>,
    w: &mut dyn Write,
) -> std::io::Result<()> {
    writeln!(w, "source_id,codec,distortion_level,dmos,ci_lo,ci_hi")?;
    let mut curves: BTreeMap<(&str, Codec), Vec<(&Stimulus, f64)>> = BTreeMap::new();
    for (s, &v) in &d.dmos {
        curves
            .entry((s.source_id.as_str(), s.codec))
            .or_default()
            .push((s, v));
    }
    for ((source, codec), points) in curves {
        for (s, v) in points {
            let (lo, hi) = ci
                .and_then(|c| c.intervals.get(s))
                .map_or((String::new(), String::new()), |iv| {
                    (iv.lo.to_string(), iv.hi.to_string())
                });
            writeln!(w, "{source},{codec},{},{v},{lo},{hi}", s.distortion_level)?;
        }
    }
    Ok(())
}

pub fn write_fits(fits: &BTreeMap<String, QuestionFit>, w: &mut dyn Write) -> std::io::Result<()> {
    for f in fits.values() {
        serde_json::to_writer(&mut *w, f)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_alignment(a: &AlignmentReport, w: &mut dyn Write) -> std::io::Result<()> {
    for g in &a.groups {
        line(
            w,
            json!({
                "record": "group",
                "grouping": a.grouping,
                "group": g.group,
                "cubic_coeffs": g.cubic_coeffs,
                "monotone": g.monotone,
                "plcc": g.correlations.plcc,
                "srocc": g.correlations.srocc,
                "kendall_tau": g.correlations.kendall_tau,
                "n": g.correlations.n,
                "raw_plcc": g.raw_correlations.plcc,
                "raw_srocc": g.raw_correlations.srocc,
                "raw_kendall_tau": g.raw_correlations.kendall_tau,
            }),
        )?;
    }
    Ok(())
}

pub fn write_scatter(a: &AlignmentReport, w: &mut dyn Write) -> std::io::Result<()> {
    writeln!(w, "source_id,codec,distortion_level,dmos,jnd,mapped")?;
    for r in a.scatter() {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.source_id, r.codec, r.distortion_level, r.dmos, r.jnd, r.mapped
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(stages: Vec<Stage>) -> PipelineManifest {
        PipelineManifest {
            ratings: "r.jsonl".into(),
            out_dir: "out".into(),
            jnd: None,
            truth: None,
            seed: 1,
            stages,
            params: PipelineParams::default(),
        }
    }

    #[test]
    fn stage_order_is_enforced() {
        assert!(
            manifest(vec![Stage::Cleanse, Stage::Outliers, Stage::Reconstruct])
                .validate()
                .is_ok()
        );
        assert!(manifest(vec![Stage::Outliers, Stage::Reconstruct])
            .validate()
            .is_ok());
        assert!(manifest(vec![Stage::Outliers, Stage::Cleanse])
            .validate()
            .is_err());
        assert!(manifest(vec![Stage::Reconstruct, Stage::Reconstruct])
            .validate()
            .is_err());
        assert!(manifest(vec![]).validate().is_err());
        // align without a JND file
        assert!(manifest(vec![Stage::Reconstruct, Stage::Align])
            .validate()
            .is_err());
    }

    #[test]
    fn manifest_toml_defaults() {
        let m: PipelineManifest = toml::from_str(
            r#"
ratings = "ratings.jsonl"
out_dir = "out"
seed = 42
stages = ["outliers", "reconstruct", "fit-beta"]
[params]
replicates = 200
"#,
        )
        .unwrap();
        assert_eq!(m.params.replicates, 200);
        assert_eq!(m.params.otsu_bins, 100);
        assert_eq!(
            m.stages,
            vec![Stage::Outliers, Stage::Reconstruct, Stage::FitBeta]
        );
        assert!(m.validate().is_ok());
    }
}
