//! Study entities, study configuration files and the line-delimited rating format.
//!
//! A rating file is UTF-8 JSON Lines. Every line is an object tagged by a
//! `record` key:
//!
//! ```text
//! {"record":"question","question_id":"s2-jpeg-4","kind":"STUDY","source_id":"2","codec":"JPEG","distortion_level":4}
//! {"record":"rating","subject_id":"w17","batch_instance_id":"w17-b1","batch_id":"b1","question_id":"s2-jpeg-4","score":37.5,"toggle_count":6,"elapsed_ms":8120,"timestamp":1718000000000}
//! ```
//!
//! Question records carry the test stimulus; the reference is always the
//! pristine (level 0) image of the same source. Ratings may reference
//! questions defined anywhere in the file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_DISTORTION_LEVEL: u8 = 10;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("dangling reference to {0}")]
    DanglingReference(String),
    #[error("score {value} out of range [0, 100] at line {line}")]
    ScoreOutOfRange { line: usize, value: f64 },
    #[error("invalid stimulus: {0}")]
    InvalidStimulus(String),
    #[error("invalid question {id}: {reason}")]
    InvalidQuestion { id: String, reason: String },
    #[error("invalid study config: {0}")]
    Config(String),
}

impl DomainError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DomainError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Codec {
    #[serde(rename = "JPEG")]
    Jpeg,
    #[serde(rename = "JPEG2000")]
    Jpeg2000,
    #[serde(rename = "AVIF")]
    Avif,
    #[serde(rename = "VVC_INTRA")]
    VvcIntra,
    #[serde(rename = "JPEGXL")]
    JpegXl,
    #[serde(rename = "NONE")]
    None,
}

impl Codec {
    pub const DISTORTING: [Codec; 5] = [
        Codec::Jpeg,
        Codec::Jpeg2000,
        Codec::Avif,
        Codec::VvcIntra,
        Codec::JpegXl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Codec::Jpeg => "JPEG",
            Codec::Jpeg2000 => "JPEG2000",
            Codec::Avif => "AVIF",
            Codec::VvcIntra => "VVC_INTRA",
            Codec::JpegXl => "JPEGXL",
            Codec::None => "NONE",
        }
    }
}

impl fmt::Display for Codec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Codec {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_uppercase().as_str() {
            "JPEG" => Codec::Jpeg,
            "JPEG2000" => Codec::Jpeg2000,
            "AVIF" => Codec::Avif,
            "VVC_INTRA" => Codec::VvcIntra,
            "JPEGXL" => Codec::JpegXl,
            "NONE" => Codec::None,
            other => {
                return Err(DomainError::InvalidStimulus(format!(
                    "unknown codec {other}"
                )))
            }
        })
    }
}

/// One rendered image: a source at a given codec and distortion level.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Stimulus {
    pub source_id: String,
    pub codec: Codec,
    pub distortion_level: u8,
}

impl Stimulus {
    pub fn new(
        source_id: impl Into<String>,
        codec: Codec,
        distortion_level: u8,
    ) -> Result<Self, DomainError> {
        let stimulus = Stimulus {
            source_id: source_id.into(),
            codec,
            distortion_level,
        };
        stimulus.validate()?;
        Ok(stimulus)
    }

    pub fn pristine(source_id: impl Into<String>) -> Self {
        Stimulus {
            source_id: source_id.into(),
            codec: Codec::None,
            distortion_level: 0,
        }
    }

    pub fn is_pristine(&self) -> bool {
        self.distortion_level == 0
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.source_id.is_empty() {
            return Err(DomainError::InvalidStimulus("empty source id".into()));
        }
        if self.distortion_level > MAX_DISTORTION_LEVEL {
            return Err(DomainError::InvalidStimulus(format!(
                "distortion level {} above {MAX_DISTORTION_LEVEL}",
                self.distortion_level
            )));
        }
        match (self.distortion_level, self.codec) {
            (0, Codec::None) => Ok(()),
            (0, codec) => Err(DomainError::InvalidStimulus(format!(
                "level 0 stimulus of source {} must use codec NONE, got {codec}",
                self.source_id
            ))),
            (level, Codec::None) => Err(DomainError::InvalidStimulus(format!(
                "level {level} stimulus of source {} needs a codec",
                self.source_id
            ))),
            _ => Ok(()),
        }
    }

    /// Asset file name, `{source_id}_{codec}_{level}.png`.
    pub fn file_name(&self) -> String {
        format!(
            "{}_{}_{}.png",
            self.source_id, self.codec, self.distortion_level
        )
    }
}

impl fmt::Display for Stimulus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}",
            self.source_id, self.codec, self.distortion_level
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuestionKind {
    #[serde(rename = "STUDY")]
    Study,
    #[serde(rename = "TRAP_I")]
    TrapI,
    #[serde(rename = "TRAP_II")]
    TrapII,
}

impl QuestionKind {
    pub fn is_trap(self) -> bool {
        !matches!(self, QuestionKind::Study)
    }
}

/// A reference/test pair shown to a rater.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "QuestionRecord", try_from = "QuestionRecord")]
pub struct Question {
    pub question_id: String,
    pub kind: QuestionKind,
    pub reference: Stimulus,
    pub test: Stimulus,
}

/// Flat on-disk form of a [`Question`]; the reference is implied by the source.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct QuestionRecord {
    question_id: String,
    kind: QuestionKind,
    source_id: String,
    codec: Codec,
    distortion_level: u8,
}

impl From<Question> for QuestionRecord {
    fn from(q: Question) -> Self {
        QuestionRecord {
            question_id: q.question_id,
            kind: q.kind,
            source_id: q.test.source_id,
            codec: q.test.codec,
            distortion_level: q.test.distortion_level,
        }
    }
}

impl TryFrom<QuestionRecord> for Question {
    type Error = DomainError;

    fn try_from(r: QuestionRecord) -> Result<Self, Self::Error> {
        let test = Stimulus::new(r.source_id, r.codec, r.distortion_level)?;
        Question::new(r.question_id, r.kind, test)
    }
}

impl Question {
    pub fn new(
        question_id: impl Into<String>,
        kind: QuestionKind,
        test: Stimulus,
    ) -> Result<Self, DomainError> {
        let question = Question {
            question_id: question_id.into(),
            kind,
            reference: Stimulus::pristine(test.source_id.clone()),
            test,
        };
        question.validate()?;
        Ok(question)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let fail = |reason: String| DomainError::InvalidQuestion {
            id: self.question_id.clone(),
            reason,
        };
        if self.question_id.is_empty() {
            return Err(fail("empty question id".into()));
        }
        self.reference.validate()?;
        self.test.validate()?;
        if !self.reference.is_pristine() {
            return Err(fail("reference must be the level 0 source".into()));
        }
        if self.reference.source_id != self.test.source_id {
            return Err(fail(
                "reference and test come from different sources".into(),
            ));
        }
        match self.kind {
            QuestionKind::TrapI if self.test.distortion_level != MAX_DISTORTION_LEVEL => {
                Err(fail(format!(
                    "type I trap needs level {MAX_DISTORTION_LEVEL}, got {}",
                    self.test.distortion_level
                )))
            }
            QuestionKind::TrapII if self.test != self.reference => {
                Err(fail("type II trap must show the reference as test".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchDef {
    pub batch_id: String,
    /// Question ids in their canonical order.
    pub questions: Vec<String>,
}

/// One submitted score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub subject_id: String,
    pub batch_instance_id: String,
    pub batch_id: String,
    pub question_id: String,
    pub score: f64,
    #[serde(default)]
    pub toggle_count: u32,
    #[serde(default)]
    pub elapsed_ms: u64,
    /// Milliseconds since the Unix epoch.
    #[serde(default)]
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchInstance {
    pub batch_instance_id: String,
    pub subject_id: String,
    pub batch_id: String,
    pub completed_at: u64,
    /// Indices into [`RatingTable::ratings`].
    pub rating_indices: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Question(Question),
    Rating(Rating),
}

/// Cross-referenced collection of ratings, their questions and batch instances.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RatingTable {
    questions: BTreeMap<String, Question>,
    ratings: Vec<Rating>,
    instances: BTreeMap<String, BatchInstance>,
}

impl RatingTable {
    /// Builds a table, rejecting ratings that break the table invariants.
    pub fn new(
        questions: impl IntoIterator<Item = Question>,
        ratings: Vec<Rating>,
    ) -> Result<Self, DomainError> {
        let mut question_map = BTreeMap::new();
        for q in questions {
            q.validate()?;
            if let Some(prev) = question_map.insert(q.question_id.clone(), q) {
                return Err(DomainError::InvalidQuestion {
                    id: prev.question_id,
                    reason: "defined twice".into(),
                });
            }
        }
        let lines: Vec<usize> = (1..=ratings.len()).collect();
        Self::assemble(question_map, ratings, &lines)
    }

    fn assemble(
        questions: BTreeMap<String, Question>,
        ratings: Vec<Rating>,
        lines: &[usize],
    ) -> Result<Self, DomainError> {
        let mut instances: BTreeMap<String, BatchInstance> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for (idx, (rating, &line)) in ratings.iter().zip(lines).enumerate() {
            if !(0.0..=100.0).contains(&rating.score) {
                return Err(DomainError::ScoreOutOfRange {
                    line,
                    value: rating.score,
                });
            }
            if !questions.contains_key(&rating.question_id) {
                return Err(DomainError::DanglingReference(rating.question_id.clone()));
            }
            if !seen.insert((
                rating.batch_instance_id.as_str(),
                rating.question_id.as_str(),
            )) {
                return Err(DomainError::MalformedRecord {
                    line,
                    reason: format!(
                        "second rating of question {} in batch instance {}",
                        rating.question_id, rating.batch_instance_id
                    ),
                });
            }
            let instance = instances
                .entry(rating.batch_instance_id.clone())
                .or_insert_with(|| BatchInstance {
                    batch_instance_id: rating.batch_instance_id.clone(),
                    subject_id: rating.subject_id.clone(),
                    batch_id: rating.batch_id.clone(),
                    completed_at: rating.timestamp,
                    rating_indices: Vec::new(),
                });
            if instance.subject_id != rating.subject_id || instance.batch_id != rating.batch_id {
                return Err(DomainError::MalformedRecord {
                    line,
                    reason: format!(
                        "batch instance {} mixes subjects or batches",
                        rating.batch_instance_id
                    ),
                });
            }
            instance.completed_at = instance.completed_at.max(rating.timestamp);
            instance.rating_indices.push(idx);
        }
        Ok(RatingTable {
            questions,
            ratings,
            instances,
        })
    }

    pub fn questions(&self) -> &BTreeMap<String, Question> {
        &self.questions
    }

    pub fn question(&self, id: &str) -> Option<&Question> {
        self.questions.get(id)
    }

    pub fn ratings(&self) -> &[Rating] {
        &self.ratings
    }

    pub fn instances(&self) -> &BTreeMap<String, BatchInstance> {
        &self.instances
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    pub fn instance_ids(&self) -> BTreeSet<String> {
        self.instances.keys().cloned().collect()
    }

    pub fn instance_ratings<'a>(
        &'a self,
        instance_id: &str,
    ) -> impl Iterator<Item = &'a Rating> + 'a {
        self.instances
            .get(instance_id)
            .map(|inst| inst.rating_indices.as_slice())
            .unwrap_or(&[])
            .iter()
            .map(move |&i| &self.ratings[i])
    }

    /// Ratings grouped by question id.
    pub fn ratings_by_question(&self) -> BTreeMap<&str, Vec<&Rating>> {
        let mut out: BTreeMap<&str, Vec<&Rating>> = BTreeMap::new();
        for r in &self.ratings {
            out.entry(r.question_id.as_str()).or_default().push(r);
        }
        out
    }

    /// Sub-table holding only the given batch instances. Questions are kept
    /// whole so ids stay resolvable.
    pub fn restrict(&self, keep: &BTreeSet<String>) -> RatingTable {
        let ratings: Vec<Rating> = self
            .ratings
            .iter()
            .filter(|r| keep.contains(&r.batch_instance_id))
            .cloned()
            .collect();
        let lines: Vec<usize> = (1..=ratings.len()).collect();
        Self::assemble(self.questions.clone(), ratings, &lines)
            .expect("subset of a valid table is valid")
    }

    /// Instances that do not hold exactly one rating for each question of
    /// their batch.
    pub fn incomplete_instances(&self, config: &StudyConfig) -> Vec<String> {
        let batches: BTreeMap<&str, BTreeSet<&str>> = config
            .batches
            .iter()
            .map(|b| {
                (
                    b.batch_id.as_str(),
                    b.questions.iter().map(String::as_str).collect(),
                )
            })
            .collect();
        self.instances
            .values()
            .filter(|inst| {
                let answered: BTreeSet<&str> = self
                    .instance_ratings(&inst.batch_instance_id)
                    .map(|r| r.question_id.as_str())
                    .collect();
                batches.get(inst.batch_id.as_str()) != Some(&answered)
            })
            .map(|inst| inst.batch_instance_id.clone())
            .collect()
    }
}

pub fn read_ratings<R: BufRead>(reader: R) -> Result<RatingTable, DomainError> {
    let mut questions = BTreeMap::new();
    let mut ratings = Vec::new();
    let mut lines = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| DomainError::MalformedRecord {
            line: line_no,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(&line).map_err(|e| DomainError::MalformedRecord {
                line: line_no,
                reason: e.to_string(),
            })?;
        match record {
            Record::Question(q) => {
                if questions.insert(q.question_id.clone(), q).is_some() {
                    return Err(DomainError::MalformedRecord {
                        line: line_no,
                        reason: "question defined twice".into(),
                    });
                }
            }
            Record::Rating(r) => {
                ratings.push(r);
                lines.push(line_no);
            }
        }
    }
    RatingTable::assemble(questions, ratings, &lines)
}

pub fn load_ratings(path: impl AsRef<Path>) -> Result<RatingTable, DomainError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| DomainError::io(path, e))?;
    read_ratings(BufReader::new(file))
}

/// Writes questions (sorted by id) followed by ratings in table order.
pub fn write_ratings<W: Write>(table: &RatingTable, mut writer: W) -> std::io::Result<()> {
    for q in table.questions.values() {
        serde_json::to_writer(&mut writer, &Record::Question(q.clone()))?;
        writer.write_all(b"\n")?;
    }
    for r in &table.ratings {
        serde_json::to_writer(&mut writer, &Record::Rating(r.clone()))?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn save_ratings(table: &RatingTable, path: impl AsRef<Path>) -> Result<(), DomainError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| DomainError::io(path, e))?;
    write_ratings(table, BufWriter::new(file)).map_err(|e| DomainError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Composition {
    pub study_per_batch: usize,
    pub trap_i_per_batch: usize,
    pub trap_ii_per_batch: usize,
}

impl Default for Composition {
    fn default() -> Self {
        Composition {
            study_per_batch: 79,
            trap_i_per_batch: 5,
            trap_ii_per_batch: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRules {
    pub break_secs: u64,
    pub min_width: u32,
    pub min_height: u32,
    pub batches_per_subject: usize,
}

impl Default for SessionRules {
    fn default() -> Self {
        SessionRules {
            break_secs: 180,
            min_width: 1920,
            min_height: 1080,
            batches_per_subject: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcuityPlate {
    /// Image path relative to the asset directory.
    pub image: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingItem {
    pub item_id: String,
    pub reference: String,
    pub test: String,
    pub expected_min: f64,
    pub expected_max: f64,
    /// Easy items must land inside the expected range before the session proceeds.
    #[serde(default)]
    pub easy: bool,
}

/// Declarative description of one study, stored as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub study_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asset_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    pub sources: Vec<String>,
    pub codecs: Vec<Codec>,
    #[serde(default)]
    pub composition: Composition,
    #[serde(default)]
    pub session: SessionRules,
    #[serde(default)]
    pub acuity: Vec<AcuityPlate>,
    #[serde(default)]
    pub training: Vec<TrainingItem>,
    pub questions: Vec<Question>,
    pub batches: Vec<BatchDef>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NoSources,
    NoBatches,
    DuplicateQuestion(String),
    DuplicateBatch(String),
    InvalidQuestion {
        question: String,
        reason: String,
    },
    UnknownSource {
        question: String,
        source: String,
    },
    UnknownCodec {
        question: String,
        codec: Codec,
    },
    UnknownQuestion {
        batch: String,
        question: String,
    },
    RepeatedInBatch {
        batch: String,
        question: String,
    },
    WrongStudyCount {
        batch: String,
        expected: usize,
        found: usize,
    },
    MissingTraps {
        batch: String,
    },
    WrongTrapCount {
        batch: String,
        kind: QuestionKind,
        expected: usize,
        found: usize,
    },
    BadSessionRule(String),
    MissingAsset(PathBuf),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoSources => write!(f, "no sources listed"),
            Violation::NoBatches => write!(f, "no batches defined"),
            Violation::DuplicateQuestion(q) => write!(f, "question {q} defined twice"),
            Violation::DuplicateBatch(b) => write!(f, "batch {b} defined twice"),
            Violation::InvalidQuestion { question, reason } => {
                write!(f, "question {question}: {reason}")
            }
            Violation::UnknownSource { question, source } => {
                write!(f, "question {question} uses unlisted source {source}")
            }
            Violation::UnknownCodec { question, codec } => {
                write!(f, "question {question} uses unlisted codec {codec}")
            }
            Violation::UnknownQuestion { batch, question } => {
                write!(f, "batch {batch} references unknown question {question}")
            }
            Violation::RepeatedInBatch { batch, question } => {
                write!(f, "batch {batch} lists question {question} more than once")
            }
            Violation::WrongStudyCount {
                batch,
                expected,
                found,
            } => {
                write!(
                    f,
                    "batch {batch} has {found} study questions, expected {expected}"
                )
            }
            Violation::MissingTraps { batch } => write!(f, "batch {batch} has no trap questions"),
            Violation::WrongTrapCount {
                batch,
                kind,
                expected,
                found,
            } => write!(
                f,
                "batch {batch} has {found} {kind:?} traps, expected {expected}"
            ),
            Violation::BadSessionRule(msg) => write!(f, "session rules: {msg}"),
            Violation::MissingAsset(p) => write!(f, "missing asset {}", p.display()),
        }
    }
}

impl StudyConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DomainError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DomainError::io(path, e))?;
        let mut config: StudyConfig =
            toml::from_str(&text).map_err(|e| DomainError::Config(e.to_string()))?;
        // relative asset dirs resolve against the config file location
        if let (Some(dir), Some(parent)) = (config.asset_dir.as_ref(), path.parent()) {
            if dir.is_relative() {
                config.asset_dir = Some(parent.join(dir));
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String, DomainError> {
        toml::to_string_pretty(self).map_err(|e| DomainError::Config(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DomainError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()?).map_err(|e| DomainError::io(path, e))
    }

    pub fn question_map(&self) -> BTreeMap<String, Question> {
        self.questions
            .iter()
            .map(|q| (q.question_id.clone(), q.clone()))
            .collect()
    }

    pub fn batch(&self, batch_id: &str) -> Option<&BatchDef> {
        self.batches.iter().find(|b| b.batch_id == batch_id)
    }

    /// Every stimulus that some question shows, reference or test.
    pub fn stimuli(&self) -> BTreeSet<Stimulus> {
        self.questions
            .iter()
            .flat_map(|q| [q.reference.clone(), q.test.clone()])
            .collect()
    }

    /// Generates a study over the full source × codec × level grid. Every
    /// distorted stimulus becomes one study question; batches are filled by
    /// walking a shuffled cycle of those questions, so a question may recur in
    /// several batches when the slots outnumber the stimuli.
    pub fn generate(options: &GenerateOptions) -> StudyConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let codecs: Vec<Codec> = options
            .codecs
            .iter()
            .copied()
            .filter(|c| *c != Codec::None)
            .collect();
        let mut questions = Vec::new();
        let mut study_ids = Vec::new();
        for source in &options.sources {
            for &codec in &codecs {
                for level in 1..=options.max_level {
                    let id = format!("s{source}-{}-{level}", codec.as_str().to_lowercase());
                    let test = Stimulus {
                        source_id: source.clone(),
                        codec,
                        distortion_level: level,
                    };
                    questions.push(Question {
                        question_id: id.clone(),
                        kind: QuestionKind::Study,
                        reference: Stimulus::pristine(source.clone()),
                        test,
                    });
                    study_ids.push(id);
                }
            }
        }
        study_ids.shuffle(&mut rng);

        let mut composition = options.composition.clone();
        composition.study_per_batch = composition.study_per_batch.min(study_ids.len());
        let per_batch = composition.study_per_batch.max(1);
        let n_batches = options
            .batches
            .max(study_ids.len().div_ceil(per_batch))
            .max(1);

        let mut batches = Vec::with_capacity(n_batches);
        let mut cursor = 0usize;
        let mut trap_i_counter = 0usize;
        let mut trap_ii_counter = 0usize;
        for b in 0..n_batches {
            let batch_id = format!("b{}", b + 1);
            let mut ids = Vec::new();
            for _ in 0..composition.study_per_batch {
                ids.push(study_ids[cursor % study_ids.len()].clone());
                cursor += 1;
            }
            for k in 0..composition.trap_i_per_batch {
                let source = &options.sources[trap_i_counter % options.sources.len()];
                let codec = codecs[(trap_i_counter / options.sources.len()) % codecs.len()];
                trap_i_counter += 1;
                let id = format!("{batch_id}-t1-{}", k + 1);
                questions.push(Question {
                    question_id: id.clone(),
                    kind: QuestionKind::TrapI,
                    reference: Stimulus::pristine(source.clone()),
                    test: Stimulus {
                        source_id: source.clone(),
                        codec,
                        distortion_level: MAX_DISTORTION_LEVEL,
                    },
                });
                ids.push(id);
            }
            for k in 0..composition.trap_ii_per_batch {
                let source = &options.sources[trap_ii_counter % options.sources.len()];
                trap_ii_counter += 1;
                let id = format!("{batch_id}-t2-{}", k + 1);
                questions.push(Question {
                    question_id: id.clone(),
                    kind: QuestionKind::TrapII,
                    reference: Stimulus::pristine(source.clone()),
                    test: Stimulus::pristine(source.clone()),
                });
                ids.push(id);
            }
            ids.shuffle(&mut rng);
            batches.push(BatchDef {
                batch_id,
                questions: ids,
            });
        }

        let first_source = options.sources.first().cloned().unwrap_or_default();
        let first_codec = codecs.first().copied().unwrap_or(Codec::Jpeg);
        let pristine = Stimulus::pristine(first_source.clone()).file_name();
        let distorted = |level: u8| {
            Stimulus {
                source_id: first_source.clone(),
                codec: first_codec,
                distortion_level: level,
            }
            .file_name()
        };
        StudyConfig {
            study_id: options.study_id.clone(),
            asset_dir: options.asset_dir.clone(),
            seed: options.seed,
            sources: options.sources.clone(),
            codecs,
            composition,
            session: SessionRules::default(),
            acuity: vec![
                AcuityPlate {
                    image: "acuity/plate3.png".into(),
                    answer: "6".into(),
                },
                AcuityPlate {
                    image: "acuity/plate4.png".into(),
                    answer: "29".into(),
                },
            ],
            training: vec![
                TrainingItem {
                    item_id: "train-severe".into(),
                    reference: pristine.clone(),
                    test: distorted(options.max_level.max(1)),
                    expected_min: 60.0,
                    expected_max: 100.0,
                    easy: true,
                },
                TrainingItem {
                    item_id: "train-identical".into(),
                    reference: pristine.clone(),
                    test: pristine.clone(),
                    expected_min: 0.0,
                    expected_max: 30.0,
                    easy: true,
                },
                TrainingItem {
                    item_id: "train-subtle".into(),
                    reference: pristine,
                    test: distorted(3.min(options.max_level.max(1))),
                    expected_min: 0.0,
                    expected_max: 60.0,
                    easy: false,
                },
            ],
            questions,
            batches,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub study_id: String,
    pub sources: Vec<String>,
    pub codecs: Vec<Codec>,
    pub max_level: u8,
    pub batches: usize,
    pub composition: Composition,
    pub asset_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            study_id: "idsqs".into(),
            sources: ["2", "6", "7", "9", "10"].map(String::from).to_vec(),
            codecs: Codec::DISTORTING.to_vec(),
            max_level: MAX_DISTORTION_LEVEL,
            batches: 4,
            composition: Composition::default(),
            asset_dir: None,
            seed: 0,
        }
    }
}

/// Checks composition rules, question validity and (when an asset directory
/// is configured) the presence of every referenced image. An empty result
/// means the config is usable.
pub fn validate_study_config(config: &StudyConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    if config.sources.is_empty() {
        out.push(Violation::NoSources);
    }
    if config.batches.is_empty() {
        out.push(Violation::NoBatches);
    }

    let sources: BTreeSet<&str> = config.sources.iter().map(String::as_str).collect();
    let codecs: BTreeSet<Codec> = config.codecs.iter().copied().collect();
    let mut questions: BTreeMap<&str, &Question> = BTreeMap::new();
    for q in &config.questions {
        if questions.insert(q.question_id.as_str(), q).is_some() {
            out.push(Violation::DuplicateQuestion(q.question_id.clone()));
        }
        if let Err(e) = q.validate() {
            out.push(Violation::InvalidQuestion {
                question: q.question_id.clone(),
                reason: e.to_string(),
            });
        }
        if !sources.contains(q.test.source_id.as_str()) {
            out.push(Violation::UnknownSource {
                question: q.question_id.clone(),
                source: q.test.source_id.clone(),
            });
        }
        if q.test.codec != Codec::None && !codecs.contains(&q.test.codec) {
            out.push(Violation::UnknownCodec {
                question: q.question_id.clone(),
                codec: q.test.codec,
            });
        }
    }

    let rules = &config.composition;
    let mut batch_ids = BTreeSet::new();
    let mut assets = BTreeSet::new();
    for batch in &config.batches {
        if !batch_ids.insert(batch.batch_id.as_str()) {
            out.push(Violation::DuplicateBatch(batch.batch_id.clone()));
        }
        let mut seen = BTreeSet::new();
        let (mut study, mut trap_i, mut trap_ii) = (0, 0, 0);
        for qid in &batch.questions {
            if !seen.insert(qid.as_str()) {
                out.push(Violation::RepeatedInBatch {
                    batch: batch.batch_id.clone(),
                    question: qid.clone(),
                });
            }
            let Some(q) = questions.get(qid.as_str()) else {
                out.push(Violation::UnknownQuestion {
                    batch: batch.batch_id.clone(),
                    question: qid.clone(),
                });
                continue;
            };
            match q.kind {
                QuestionKind::Study => study += 1,
                QuestionKind::TrapI => trap_i += 1,
                QuestionKind::TrapII => trap_ii += 1,
            }
            assets.insert(q.reference.file_name());
            assets.insert(q.test.file_name());
        }
        if study != rules.study_per_batch {
            out.push(Violation::WrongStudyCount {
                batch: batch.batch_id.clone(),
                expected: rules.study_per_batch,
                found: study,
            });
        }
        let expected_traps = rules.trap_i_per_batch + rules.trap_ii_per_batch;
        if expected_traps > 0 && trap_i + trap_ii == 0 {
            out.push(Violation::MissingTraps {
                batch: batch.batch_id.clone(),
            });
        } else {
            for (kind, expected, found) in [
                (QuestionKind::TrapI, rules.trap_i_per_batch, trap_i),
                (QuestionKind::TrapII, rules.trap_ii_per_batch, trap_ii),
            ] {
                if expected != found {
                    out.push(Violation::WrongTrapCount {
                        batch: batch.batch_id.clone(),
                        kind,
                        expected,
                        found,
                    });
                }
            }
        }
    }

    let session = &config.session;
    if session.batches_per_subject == 0 || session.batches_per_subject > 2 {
        out.push(Violation::BadSessionRule(format!(
            "batches_per_subject must be 1 or 2, got {}",
            session.batches_per_subject
        )));
    } else if session.batches_per_subject > config.batches.len() && !config.batches.is_empty() {
        out.push(Violation::BadSessionRule(format!(
            "batches_per_subject {} exceeds the {} defined batches",
            session.batches_per_subject,
            config.batches.len()
        )));
    }
    for item in &config.training {
        if !(0.0..=100.0).contains(&item.expected_min)
            || !(0.0..=100.0).contains(&item.expected_max)
            || item.expected_min > item.expected_max
        {
            out.push(Violation::BadSessionRule(format!(
                "training item {} has an invalid expected range",
                item.item_id
            )));
        }
    }

    if let Some(dir) = &config.asset_dir {
        assets.extend(config.acuity.iter().map(|p| p.image.clone()));
        for item in &config.training {
            assets.insert(item.reference.clone());
            assets.insert(item.test.clone());
        }
        for name in assets {
            let path = dir.join(&name);
            if !path.is_file() {
                out.push(Violation::MissingAsset(path));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_options() -> GenerateOptions {
        GenerateOptions {
            sources: vec!["a".into(), "b".into()],
            codecs: vec![Codec::Jpeg, Codec::Avif],
            max_level: 10,
            batches: 2,
            composition: Composition {
                study_per_batch: 20,
                trap_i_per_batch: 2,
                trap_ii_per_batch: 2,
            },
            ..GenerateOptions::default()
        }
    }

    fn rating(instance: &str, question: &str, score: f64) -> Rating {
        Rating {
            subject_id: "s1".into(),
            batch_instance_id: instance.into(),
            batch_id: "b1".into(),
            question_id: question.into(),
            score,
            toggle_count: 2,
            elapsed_ms: 1500,
            timestamp: 10,
        }
    }

    #[test]
    fn stimulus_invariants() {
        assert!(Stimulus::new("1", Codec::Jpeg, 0).is_err());
        assert!(Stimulus::new("1", Codec::None, 3).is_err());
        assert!(Stimulus::new("1", Codec::Jpeg, 11).is_err());
        let s = Stimulus::new("7", Codec::VvcIntra, 4).unwrap();
        assert_eq!(s.file_name(), "7_VVC_INTRA_4.png");
        assert_eq!(Stimulus::pristine("7").file_name(), "7_NONE_0.png");
    }

    #[test]
    fn trap_kinds_constrain_test_level() {
        let level9 = Stimulus::new("1", Codec::Jpeg, 9).unwrap();
        assert!(Question::new("t", QuestionKind::TrapI, level9).is_err());
        let level10 = Stimulus::new("1", Codec::Jpeg, 10).unwrap();
        assert!(Question::new("t", QuestionKind::TrapI, level10.clone()).is_ok());
        assert!(Question::new("t", QuestionKind::TrapII, level10).is_err());
        let q = Question::new("t", QuestionKind::TrapII, Stimulus::pristine("1")).unwrap();
        assert_eq!(q.test, q.reference);
    }

    #[test]
    fn single_record_file_loads() {
        let text = r#"{"record":"question","question_id":"q1","kind":"STUDY","source_id":"2","codec":"AVIF","distortion_level":3}
{"record":"rating","subject_id":"s","batch_instance_id":"i","batch_id":"b","question_id":"q1","score":40,"toggle_count":1,"elapsed_ms":10,"timestamp":5}
"#;
        let table = read_ratings(text.as_bytes()).unwrap();
        assert_eq!(table.ratings().len(), 1);
        assert_eq!(table.ratings()[0].score, 40.0);
        assert_eq!(table.instances().len(), 1);
    }

    #[test]
    fn out_of_range_score_rejected() {
        let text = r#"{"record":"question","question_id":"q1","kind":"STUDY","source_id":"2","codec":"AVIF","distortion_level":3}
{"record":"rating","subject_id":"s","batch_instance_id":"i","batch_id":"b","question_id":"q1","score":101,"toggle_count":1,"elapsed_ms":10,"timestamp":5}
"#;
        match read_ratings(text.as_bytes()) {
            Err(DomainError::ScoreOutOfRange { line, value }) => {
                assert_eq!(line, 2);
                assert_eq!(value, 101.0);
            }
            other => panic!("expected ScoreOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn dangling_and_malformed_records() {
        let dangling = r#"{"record":"rating","subject_id":"s","batch_instance_id":"i","batch_id":"b","question_id":"nope","score":1}"#;
        assert!(matches!(
            read_ratings(dangling.as_bytes()),
            Err(DomainError::DanglingReference(id)) if id == "nope"
        ));
        let broken = "{\"record\":\"rating\",\n";
        assert!(matches!(
            read_ratings(broken.as_bytes()),
            Err(DomainError::MalformedRecord { line: 1, .. })
        ));
        let bad_question = r#"{"record":"question","question_id":"q","kind":"TRAP_I","source_id":"2","codec":"AVIF","distortion_level":3}"#;
        assert!(matches!(
            read_ratings(bad_question.as_bytes()),
            Err(DomainError::MalformedRecord { line: 1, .. })
        ));
    }

    #[test]
    fn duplicate_rating_in_instance_rejected() {
        let q = Question::new(
            "q",
            QuestionKind::Study,
            Stimulus::new("a", Codec::Jpeg, 2).unwrap(),
        )
        .unwrap();
        let err = RatingTable::new([q], vec![rating("i", "q", 1.0), rating("i", "q", 2.0)]);
        assert!(matches!(
            err,
            Err(DomainError::MalformedRecord { line: 2, .. })
        ));
    }

    #[test]
    fn generated_config_is_valid() {
        let config = StudyConfig::generate(&small_options());
        assert_eq!(validate_study_config(&config), vec![]);
        let default = StudyConfig::generate(&GenerateOptions::default());
        assert_eq!(validate_study_config(&default), vec![]);
        assert_eq!(default.batches.len(), 4);
        for batch in &default.batches {
            assert_eq!(batch.questions.len(), 89);
        }
        // every source needs a pristine rating for DMOS
        let trap_ii_sources: BTreeSet<_> = default
            .questions
            .iter()
            .filter(|q| q.kind == QuestionKind::TrapII)
            .map(|q| q.test.source_id.clone())
            .collect();
        assert_eq!(trap_ii_sources.len(), 5);
    }

    #[test]
    fn batch_without_traps_is_flagged() {
        let mut config = StudyConfig::generate(&small_options());
        let question_map = config.question_map();
        config.batches[0]
            .questions
            .retain(|id| question_map[id].kind == QuestionKind::Study);
        assert_eq!(
            validate_study_config(&config),
            vec![Violation::MissingTraps { batch: "b1".into() }]
        );
    }

    #[test]
    fn missing_asset_is_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = StudyConfig::generate(&small_options());
        config.asset_dir = Some(dir.path().to_path_buf());
        let mut needed = BTreeSet::new();
        for q in &config.questions {
            needed.insert(q.reference.file_name());
            needed.insert(q.test.file_name());
        }
        needed.extend(config.acuity.iter().map(|p| p.image.clone()));
        for t in &config.training {
            needed.insert(t.reference.clone());
            needed.insert(t.test.clone());
        }
        std::fs::create_dir_all(dir.path().join("acuity")).unwrap();
        for name in &needed {
            std::fs::write(dir.path().join(name), b"png").unwrap();
        }
        assert_eq!(validate_study_config(&config), vec![]);

        let gone = dir.path().join("a_JPEG_10.png");
        std::fs::remove_file(&gone).unwrap();
        assert_eq!(
            validate_study_config(&config),
            vec![Violation::MissingAsset(gone)]
        );
    }

    #[test]
    fn config_toml_round_trip() {
        let config = StudyConfig::generate(&small_options());
        let text = config.to_toml().unwrap();
        let back: StudyConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn restrict_keeps_only_selected_instances() {
        let q = Question::new(
            "q",
            QuestionKind::Study,
            Stimulus::new("a", Codec::Jpeg, 2).unwrap(),
        )
        .unwrap();
        let table =
            RatingTable::new([q], vec![rating("i1", "q", 1.0), rating("i2", "q", 2.0)]).unwrap();
        let sub = table.restrict(&BTreeSet::from(["i2".to_string()]));
        assert_eq!(sub.ratings().len(), 1);
        assert_eq!(sub.instance_ids(), BTreeSet::from(["i2".to_string()]));
        assert_eq!(sub.instance_ratings("i2").next().unwrap().score, 2.0);
    }
}
