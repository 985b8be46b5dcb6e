use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Consent,
    Acuity,
    Training,
    #[serde(rename = "BATCH_1")]
    Batch1,
    Break,
    #[serde(rename = "BATCH_2")]
    Batch2,
    Done,
    Rejected,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Consent => "CONSENT",
            Phase::Acuity => "ACUITY",
            Phase::Training => "TRAINING",
            Phase::Batch1 => "BATCH_1",
            Phase::Break => "BREAK",
            Phase::Batch2 => "BATCH_2",
            Phase::Done => "DONE",
            Phase::Rejected => "REJECTED",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    Consent,
    Acuity,
    Training,
    /// Ends the session during the break instead of starting the second batch.
    Decline,
}

impl Gate {
    /// Phase in which the gate may be recorded.
    pub fn phase(self) -> Phase {
        match self {
            Gate::Consent => Phase::Consent,
            Gate::Acuity => Phase::Acuity,
            Gate::Training => Phase::Training,
            Gate::Decline => Phase::Break,
        }
    }
}

impl FromStr for Gate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "consent" => Ok(Gate::Consent),
            "acuity" => Ok(Gate::Acuity),
            "training" => Ok(Gate::Training),
            "decline" => Ok(Gate::Decline),
            other => Err(format!("unknown gate {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum GateResult {
    Passed,
    /// Training answers missed an easy item; the phase does not change.
    Feedback,
    Rejected {
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMetadata {
    /// Screen diagonal in inches as reported by the participant.
    #[serde(default)]
    pub display_diagonal: Option<f64>,
    pub resolution: Resolution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptedResponse {
    pub question_id: String,
    pub score: f64,
    pub toggle_count: u32,
    pub elapsed_ms: u64,
    pub at: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub session_id: String,
    pub subject_id: String,
    pub ordinal: u64,
    pub client: ClientMetadata,
    pub created_at: u64,
    pub phase: Phase,
    pub batches: Vec<String>,
    /// Question order per assigned batch, fixed at creation.
    pub orders: Vec<Vec<String>>,
    /// Accepted responses per assigned batch, in answer order.
    pub responses: Vec<Vec<AcceptedResponse>>,
    pub break_started_at: Option<u64>,
    pub rejection: Option<String>,
}

impl Session {
    pub fn new(
        session_id: String,
        subject_id: String,
        ordinal: u64,
        client: ClientMetadata,
        batches: Vec<String>,
        orders: Vec<Vec<String>>,
        at: u64,
    ) -> Session {
        let responses = vec![Vec::new(); batches.len()];
        Session {
            session_id,
            subject_id,
            ordinal,
            client,
            created_at: at,
            phase: Phase::Consent,
            batches,
            orders,
            responses,
            break_started_at: None,
            rejection: None,
        }
    }

    /// The phase as seen at time `now`: a finished break reads as BATCH_2.
    pub fn phase_at(&self, now: u64, break_ms: u64) -> Phase {
        match (self.phase, self.break_started_at) {
            (Phase::Break, Some(start)) if now >= start.saturating_add(break_ms) => Phase::Batch2,
            (phase, _) => phase,
        }
    }

    /// Milliseconds left in the break at `now` (0 outside a break).
    pub fn break_remaining(&self, now: u64, break_ms: u64) -> u64 {
        match (self.phase, self.break_started_at) {
            (Phase::Break, Some(start)) => start.saturating_add(break_ms).saturating_sub(now),
            _ => 0,
        }
    }

    /// Index of the batch a response would belong to in `phase`.
    pub fn batch_index(phase: Phase) -> Option<usize> {
        match phase {
            Phase::Batch1 => Some(0),
            Phase::Batch2 => Some(1),
            _ => None,
        }
    }

    /// Question expected next in `phase`, if any.
    pub fn current_question(&self, phase: Phase) -> Option<&str> {
        let b = Self::batch_index(phase)?;
        self.orders
            .get(b)?
            .get(self.responses[b].len())
            .map(String::as_str)
    }

    pub fn has_answered(&self, question_id: &str) -> bool {
        self.responses
            .iter()
            .flatten()
            .any(|r| r.question_id == question_id)
    }

    pub fn batch_complete(&self, b: usize) -> bool {
        self.responses[b].len() == self.orders[b].len()
    }

    pub fn apply_gate(&mut self, gate: Gate, result: &GateResult) {
        match result {
            GateResult::Passed => {
                self.phase = match gate {
                    Gate::Consent => Phase::Acuity,
                    Gate::Acuity => Phase::Training,
                    Gate::Training => Phase::Batch1,
                    Gate::Decline => Phase::Done,
                };
            }
            GateResult::Feedback => {}
            GateResult::Rejected { reason } => {
                self.phase = Phase::Rejected;
                self.rejection = Some(reason.clone());
            }
        }
    }

    /// Records an accepted response and advances the phase when a batch ends.
    pub fn apply_response(&mut self, response: AcceptedResponse) {
        if self.phase == Phase::Break {
            self.phase = Phase::Batch2;
        }
        let Some(b) = Self::batch_index(self.phase) else {
            return;
        };
        let at = response.at;
        self.responses[b].push(response);
        if self.batch_complete(b) {
            if b == 0 && self.batches.len() > 1 {
                self.phase = Phase::Break;
                self.break_started_at = Some(at);
            } else {
                self.phase = Phase::Done;
            }
        }
    }
}
