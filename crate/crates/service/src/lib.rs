//! Live rating-session service: batch assignment, session flow gates,
//! durable response capture and rating-table export, plus its HTTP API.

pub mod clock;
pub mod error;
pub mod http;
pub mod log;
pub mod service;
pub mod session;

pub use clock::{Clock, ManualClock, SystemClock};
pub use error::ServiceError;
pub use service::{
    Ack, CreateSession, Directive, GateOutcome, SessionCreated, StudyService, SubmitResponse,
};
pub use session::{ClientMetadata, Gate, Phase, Resolution, Session};
