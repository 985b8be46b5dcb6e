use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use idsqs_core::domain::{self, Question, Rating, RatingTable, StudyConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::clock::Clock;
use crate::error::ServiceError;
use crate::log::{Event, EventLog, LogError};
use crate::session::{AcceptedResponse, ClientMetadata, Gate, GateResult, Phase, Session};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    pub subject_id: String,
    pub client_metadata: ClientMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPrompt {
    pub item_id: String,
    pub reference_url: String,
    pub test_url: String,
}

/// What the client should show next. Question payloads carry only opaque
/// per-session tokens, so trap questions look like any other question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "directive", rename_all = "snake_case")]
pub enum Directive {
    Consent,
    Acuity {
        plates: Vec<String>,
    },
    Training {
        items: Vec<TrainingPrompt>,
    },
    Question {
        question_id: String,
        reference_url: String,
        test_url: String,
        batch: usize,
        index: usize,
        total: usize,
    },
    Break {
        wait_remaining_ms: u64,
    },
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub question_id: String,
    pub score: f64,
    #[serde(default)]
    pub toggle_count: u32,
    #[serde(default)]
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub accepted: bool,
    pub phase: Phase,
    pub answered: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingFeedback {
    pub item_id: String,
    pub score: f64,
    pub expected_min: f64,
    pub expected_max: f64,
    pub within_range: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub phase: Phase,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub feedback: Vec<TrainingFeedback>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reason: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ConsentPayload {
    #[serde(default)]
    agree: bool,
}

#[derive(Debug, Deserialize)]
struct AcuityPayload {
    answers: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct TrainingAnswer {
    item_id: String,
    score: f64,
}

#[derive(Debug, Deserialize)]
struct TrainingPayload {
    responses: Vec<TrainingAnswer>,
}

/// Client-facing tokens of one session.
#[derive(Debug, Default, Clone)]
struct Tokens {
    question_by_token: HashMap<String, String>,
    token_by_question: HashMap<String, String>,
}

struct State {
    log: EventLog,
    key: String,
    sessions: BTreeMap<String, Session>,
    tokens: HashMap<String, Tokens>,
    by_subject: HashMap<String, String>,
    /// Sessions assigned to each batch so far.
    load: BTreeMap<String, usize>,
    /// Asset token → path relative to the asset directory.
    assets: HashMap<String, String>,
    next_ordinal: u64,
}

/// Runs live sessions for one study. All mutations go through the event log
/// and are synced before the call returns.
pub struct StudyService {
    config: StudyConfig,
    questions: BTreeMap<String, Question>,
    clock: Arc<dyn Clock>,
    state: Mutex<State>,
}

fn digest_hex(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl StudyService {
    /// Opens the event log at `log_path`, creating it when missing, and
    /// replays it into memory.
    pub fn open(
        config: StudyConfig,
        log_path: impl AsRef<Path>,
        clock: Arc<dyn Clock>,
    ) -> Result<StudyService, ServiceError> {
        let violations = domain::validate_study_config(&config);
        if !violations.is_empty() {
            let text: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(ServiceError::Config(text.join("; ")));
        }
        let (mut log, events) = EventLog::open(log_path)?;
        let mut events = events.into_iter();
        let key = match events.next() {
            Some(Event::LogOpened { study_id, key, .. }) => {
                if study_id != config.study_id {
                    return Err(LogError::StudyMismatch {
                        expected: config.study_id.clone(),
                        found: study_id,
                    }
                    .into());
                }
                key
            }
            Some(_) => return Err(LogError::MissingHeader.into()),
            None => {
                let bytes: [u8; 16] = rand::rng().random();
                let key: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
                log.append(&Event::LogOpened {
                    study_id: config.study_id.clone(),
                    key: key.clone(),
                    at: clock.now_ms(),
                })?;
                key
            }
        };
        let load = config
            .batches
            .iter()
            .map(|b| (b.batch_id.clone(), 0))
            .collect();
        let mut state = State {
            log,
            key,
            sessions: BTreeMap::new(),
            tokens: HashMap::new(),
            by_subject: HashMap::new(),
            load,
            assets: HashMap::new(),
            next_ordinal: 0,
        };
        let questions = config.question_map();
        let service_parts = (&config, &questions);
        for event in events {
            apply(service_parts, &mut state, &event);
        }
        Ok(StudyService {
            config,
            questions,
            clock,
            state: Mutex::new(state),
        })
    }

    pub fn config(&self) -> &StudyConfig {
        &self.config
    }

    pub fn log_path(&self) -> PathBuf {
        self.lock().log.path().to_path_buf()
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn break_ms(&self) -> u64 {
        self.config.session.break_secs * 1000
    }

    /// Write-ahead: the event reaches disk before the in-memory state moves.
    fn commit(&self, state: &mut State, event: Event) -> Result<(), ServiceError> {
        state.log.append(&event)?;
        apply((&self.config, &self.questions), state, &event);
        Ok(())
    }

    pub fn session(&self, session_id: &str) -> Option<Session> {
        self.lock().sessions.get(session_id).cloned()
    }

    pub fn sessions(&self) -> Vec<Session> {
        self.lock().sessions.values().cloned().collect()
    }

    /// Sessions assigned to each batch.
    pub fn batch_load(&self) -> BTreeMap<String, usize> {
        self.lock().load.clone()
    }

    pub fn create_session(&self, request: CreateSession) -> Result<SessionCreated, ServiceError> {
        let subject = request.subject_id.trim().to_string();
        if subject.is_empty() {
            return Err(ServiceError::BadRequest("empty subject_id".into()));
        }
        let rules = &self.config.session;
        let res = request.client_metadata.resolution;
        if res.width < rules.min_width || res.height < rules.min_height {
            return Err(ServiceError::InsufficientDisplay {
                width: res.width,
                height: res.height,
                min_width: rules.min_width,
                min_height: rules.min_height,
            });
        }
        let mut state = self.lock();
        if state.by_subject.contains_key(&subject) {
            return Err(ServiceError::DuplicateSubject(subject));
        }
        let ordinal = state.next_ordinal;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(ordinal);

        let wanted = rules
            .batches_per_subject
            .clamp(1, self.config.batches.len());
        let mut load = state.load.clone();
        let mut batches = Vec::with_capacity(wanted);
        for _ in 0..wanted {
            let min = load.values().copied().min().unwrap_or(0);
            let candidates: Vec<&String> = load
                .iter()
                .filter(|(_, &n)| n == min)
                .map(|(b, _)| b)
                .collect();
            let chosen = candidates[rng.random_range(0..candidates.len())].clone();
            load.remove(&chosen);
            batches.push(chosen);
        }
        let orders = batches
            .iter()
            .map(|b| {
                let mut order = self
                    .config
                    .batch(b)
                    .map(|d| d.questions.clone())
                    .unwrap_or_default();
                order.shuffle(&mut rng);
                order
            })
            .collect();
        let session_id = format!(
            "s{ordinal:05}-{}",
            &digest_hex(&[&state.key, "session", &ordinal.to_string()])[..12]
        );
        let event = Event::SessionCreated {
            session_id: session_id.clone(),
            subject_id: subject,
            ordinal,
            client: request.client_metadata,
            batches,
            orders,
            at: self.clock.now_ms(),
        };
        self.commit(&mut state, event)?;
        Ok(SessionCreated {
            session_id,
            phase: Phase::Consent,
        })
    }

    fn asset_url(token: &str) -> String {
        format!("/assets/{token}")
    }

    pub fn next_question(&self, session_id: &str) -> Result<Directive, ServiceError> {
        let now = self.clock.now_ms();
        let state = self.lock();
        let session = state
            .sessions
            .get(session_id)
            .ok_or_else(|| ServiceError::SessionNotFound(session_id.into()))?;
        let key = &state.key;
        let phase = session.phase_at(now, self.break_ms());
        match phase {
            Phase::Consent => Ok(Directive::Consent),
            Phase::Acuity => Ok(Directive::Acuity {
                plates: (0..self.config.acuity.len())
                    .map(|i| Self::asset_url(&acuity_token(key, session_id, i)))
                    .collect(),
            }),
            Phase::Training => Ok(Directive::Training {
                items: self
                    .config
                    .training
                    .iter()
                    .map(|item| TrainingPrompt {
                        item_id: item.item_id.clone(),
                        reference_url: Self::asset_url(&training_token(
                            key,
                            session_id,
                            &item.item_id,
                            "reference",
                        )),
                        test_url: Self::asset_url(&training_token(
                            key,
                            session_id,
                            &item.item_id,
                            "test",
                        )),
                    })
                    .collect(),
            }),
            Phase::Batch1 | Phase::Batch2 => {
                let b = Session::batch_index(phase).unwrap_or(0);
                let Some(qid) = session.current_question(phase) else {
                    return Ok(Directive::Done);
                };
                let tokens = &state.tokens[session_id];
                let token = tokens.token_by_question[qid].clone();
                Ok(Directive::Question {
                    reference_url: Self::asset_url(&image_token(
                        key,
                        session_id,
                        &token,
                        "reference",
                    )),
                    test_url: Self::asset_url(&image_token(key, session_id, &token, "test")),
                    question_id: token,
                    batch: b + 1,
                    index: session.responses[b].len(),
                    total: session.orders[b].len(),
                })
            }
            Phase::Break => Ok(Directive::Break {
                wait_remaining_ms: session.break_remaining(now, self.break_ms()),
            }),
            Phase::Done => Ok(Directive::Done),
            Phase::Rejected => Err(ServiceError::Rejected(
                session.rejection.clone().unwrap_or_default(),
            )),
        }
    }

    pub fn submit_response(
        &self,
        session_id: &str,
        response: SubmitResponse,
    ) -> Result<Ack, ServiceError> {
        let now = self.clock.now_ms();
        let mut state = self.lock();
        let session = state
            .sessions
            .get(session_id)
            .ok_or_else(|| ServiceError::SessionNotFound(session_id.into()))?;
        let phase = session.phase_at(now, self.break_ms());
        if phase == Phase::Rejected {
            return Err(ServiceError::Rejected(
                session.rejection.clone().unwrap_or_default(),
            ));
        }
        let Some(expected) = session.current_question(phase) else {
            let reason = match phase {
                Phase::Break => format!(
                    "break has {} s left",
                    session.break_remaining(now, self.break_ms()).div_ceil(1000)
                ),
                _ => "no question is open".into(),
            };
            return Err(ServiceError::PhaseViolation { phase, reason });
        };
        let tokens = &state.tokens[session_id];
        let question_id = tokens.question_by_token.get(&response.question_id);
        if let Some(q) = question_id {
            if session.has_answered(q) {
                return Err(ServiceError::DuplicateResponse(response.question_id));
            }
        }
        if question_id.map(String::as_str) != Some(expected) {
            return Err(ServiceError::OutOfOrder {
                expected: tokens.token_by_question[expected].clone(),
            });
        }
        if !(response.score.is_finite() && (0.0..=100.0).contains(&response.score)) {
            return Err(ServiceError::ScoreOutOfRange(response.score));
        }
        let event = Event::Response {
            session_id: session_id.into(),
            question_id: expected.to_string(),
            score: response.score,
            toggle_count: response.toggle_count,
            elapsed_ms: response.elapsed_ms,
            at: now,
        };
        let b = Session::batch_index(phase).unwrap_or(0);
        self.commit(&mut state, event)?;
        let session = &state.sessions[session_id];
        Ok(Ack {
            accepted: true,
            phase: session.phase,
            answered: session.responses[b].len(),
            total: session.orders[b].len(),
        })
    }

    pub fn record_gate(
        &self,
        session_id: &str,
        gate: Gate,
        payload: Value,
    ) -> Result<GateOutcome, ServiceError> {
        let now = self.clock.now_ms();
        let mut state = self.lock();
        let session = state
            .sessions
            .get(session_id)
            .ok_or_else(|| ServiceError::SessionNotFound(session_id.into()))?;
        // decline is judged on the stored phase: it stays open after the break ends
        // until the first second-batch answer arrives
        let phase = if gate == Gate::Decline {
            session.phase
        } else {
            session.phase_at(now, self.break_ms())
        };
        if phase == Phase::Rejected {
            return Err(ServiceError::Rejected(
                session.rejection.clone().unwrap_or_default(),
            ));
        }
        if phase != gate.phase() {
            return Err(ServiceError::PhaseViolation {
                phase,
                reason: format!("gate {gate:?} belongs to phase {}", gate.phase()),
            });
        }
        let bad = |e: serde_json::Error| ServiceError::BadRequest(e.to_string());
        let mut feedback = Vec::new();
        let result = match gate {
            Gate::Consent => {
                let p: ConsentPayload = serde_json::from_value(payload.clone()).map_err(bad)?;
                if p.agree {
                    GateResult::Passed
                } else {
                    GateResult::Rejected {
                        reason: "consent not given".into(),
                    }
                }
            }
            Gate::Acuity => {
                let p: AcuityPayload = serde_json::from_value(payload.clone()).map_err(bad)?;
                if p.answers.len() != self.config.acuity.len() {
                    return Err(ServiceError::BadRequest(format!(
                        "expected {} acuity answers, got {}",
                        self.config.acuity.len(),
                        p.answers.len()
                    )));
                }
                let wrong = self
                    .config
                    .acuity
                    .iter()
                    .zip(&p.answers)
                    .position(|(plate, a)| !a.trim().eq_ignore_ascii_case(plate.answer.trim()));
                match wrong {
                    None => GateResult::Passed,
                    Some(i) => GateResult::Rejected {
                        reason: format!("acuity plate {} answered incorrectly", i + 1),
                    },
                }
            }
            Gate::Training => {
                let p: TrainingPayload = serde_json::from_value(payload.clone()).map_err(bad)?;
                let answers: HashMap<&str, f64> = p
                    .responses
                    .iter()
                    .map(|a| (a.item_id.as_str(), a.score))
                    .collect();
                let mut missed_easy = false;
                for item in &self.config.training {
                    let Some(&score) = answers.get(item.item_id.as_str()) else {
                        return Err(ServiceError::BadRequest(format!(
                            "missing training item {}",
                            item.item_id
                        )));
                    };
                    if !(score.is_finite() && (0.0..=100.0).contains(&score)) {
                        return Err(ServiceError::ScoreOutOfRange(score));
                    }
                    let within = (item.expected_min..=item.expected_max).contains(&score);
                    missed_easy |= item.easy && !within;
                    feedback.push(TrainingFeedback {
                        item_id: item.item_id.clone(),
                        score,
                        expected_min: item.expected_min,
                        expected_max: item.expected_max,
                        within_range: within,
                    });
                }
                if missed_easy {
                    GateResult::Feedback
                } else {
                    GateResult::Passed
                }
            }
            Gate::Decline => GateResult::Passed,
        };
        let reason = match &result {
            GateResult::Rejected { reason } => Some(reason.clone()),
            _ => None,
        };
        self.commit(
            &mut state,
            Event::Gate {
                session_id: session_id.into(),
                gate,
                result,
                payload,
                at: now,
            },
        )?;
        Ok(GateOutcome {
            phase: state.sessions[session_id].phase,
            feedback,
            reason,
        })
    }

    /// Ratings of every completed batch instance (and, on request, of partial
    /// ones) as a rating table. Instance ids are `{session}-b1` / `{session}-b2`.
    pub fn export_ratings(
        &self,
        study_id: &str,
        include_partial: bool,
    ) -> Result<RatingTable, ServiceError> {
        if study_id != self.config.study_id {
            return Err(ServiceError::StudyNotFound(study_id.into()));
        }
        let state = self.lock();
        let mut ratings = Vec::new();
        for session in state.sessions.values() {
            for (b, responses) in session.responses.iter().enumerate() {
                if responses.is_empty() || !(include_partial || session.batch_complete(b)) {
                    continue;
                }
                let instance = format!("{}-b{}", session.session_id, b + 1);
                ratings.extend(responses.iter().map(|r| Rating {
                    subject_id: session.subject_id.clone(),
                    batch_instance_id: instance.clone(),
                    batch_id: session.batches[b].clone(),
                    question_id: r.question_id.clone(),
                    score: r.score,
                    toggle_count: r.toggle_count,
                    elapsed_ms: r.elapsed_ms,
                    timestamp: r.at,
                }));
            }
        }
        drop(state);
        RatingTable::new(self.config.questions.iter().cloned(), ratings)
            .map_err(|e| ServiceError::Config(e.to_string()))
    }

    /// The export in the rating file format.
    pub fn export_bytes(
        &self,
        study_id: &str,
        include_partial: bool,
    ) -> Result<Vec<u8>, ServiceError> {
        let table = self.export_ratings(study_id, include_partial)?;
        let mut out = Vec::new();
        domain::write_ratings(&table, &mut out).map_err(|e| ServiceError::Config(e.to_string()))?;
        Ok(out)
    }

    /// Path of the asset behind a token, relative to the asset directory.
    pub fn asset_path(&self, token: &str) -> Result<PathBuf, ServiceError> {
        let state = self.lock();
        let rel = state
            .assets
            .get(token)
            .ok_or_else(|| ServiceError::AssetNotFound(token.into()))?;
        let dir = self
            .config
            .asset_dir
            .as_ref()
            .ok_or_else(|| ServiceError::AssetNotFound(token.into()))?;
        Ok(dir.join(rel))
    }
}

fn image_token(key: &str, session: &str, question_token: &str, role: &str) -> String {
    digest_hex(&[key, "image", session, question_token, role])[..32].to_string()
}

fn acuity_token(key: &str, session: &str, plate: usize) -> String {
    digest_hex(&[key, "acuity", session, &plate.to_string()])[..32].to_string()
}

fn training_token(key: &str, session: &str, item: &str, role: &str) -> String {
    digest_hex(&[key, "training", session, item, role])[..32].to_string()
}

fn question_token(key: &str, session: &str, question: &str) -> String {
    digest_hex(&[key, "question", session, question])[..24].to_string()
}

/// Folds one event into the state. Events reaching here were validated
/// before they were logged, so application never fails.
fn apply(
    (config, questions): (&StudyConfig, &BTreeMap<String, Question>),
    state: &mut State,
    event: &Event,
) {
    match event {
        Event::LogOpened { .. } => {}
        Event::SessionCreated {
            session_id,
            subject_id,
            ordinal,
            client,
            batches,
            orders,
            at,
        } => {
            let key = state.key.clone();
            let mut tokens = Tokens::default();
            for qid in orders.iter().flatten() {
                let token = question_token(&key, session_id, qid);
                if let Some(q) = questions.get(qid) {
                    state.assets.insert(
                        image_token(&key, session_id, &token, "reference"),
                        q.reference.file_name(),
                    );
                    state.assets.insert(
                        image_token(&key, session_id, &token, "test"),
                        q.test.file_name(),
                    );
                }
                tokens.question_by_token.insert(token.clone(), qid.clone());
                tokens.token_by_question.insert(qid.clone(), token);
            }
            for (i, plate) in config.acuity.iter().enumerate() {
                state
                    .assets
                    .insert(acuity_token(&key, session_id, i), plate.image.clone());
            }
            for item in &config.training {
                state.assets.insert(
                    training_token(&key, session_id, &item.item_id, "reference"),
                    item.reference.clone(),
                );
                state.assets.insert(
                    training_token(&key, session_id, &item.item_id, "test"),
                    item.test.clone(),
                );
            }
            for b in batches {
                *state.load.entry(b.clone()).or_insert(0) += 1;
            }
            state.tokens.insert(session_id.clone(), tokens);
            state
                .by_subject
                .insert(subject_id.clone(), session_id.clone());
            state.next_ordinal = state.next_ordinal.max(ordinal + 1);
            state.sessions.insert(
                session_id.clone(),
                Session::new(
                    session_id.clone(),
                    subject_id.clone(),
                    *ordinal,
                    client.clone(),
                    batches.clone(),
                    orders.clone(),
                    *at,
                ),
            );
        }
        Event::Gate {
            session_id,
            gate,
            result,
            ..
        } => {
            if let Some(s) = state.sessions.get_mut(session_id) {
                s.apply_gate(*gate, result);
            }
        }
        Event::Response {
            session_id,
            question_id,
            score,
            toggle_count,
            elapsed_ms,
            at,
        } => {
            if let Some(s) = state.sessions.get_mut(session_id) {
                s.apply_response(AcceptedResponse {
                    question_id: question_id.clone(),
                    score: *score,
                    toggle_count: *toggle_count,
                    elapsed_ms: *elapsed_ms,
                    at: *at,
                });
            }
        }
    }
}
