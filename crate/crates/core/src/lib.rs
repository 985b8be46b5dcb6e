//! Analysis pipeline for in-place double-stimulus quality scale (IDSQS) studies.
//!
//! The crate covers everything downstream of rating collection: study
//! configuration and rating files ([`domain`]), rater screening by trap
//! accuracy and correlation ([`screening`]), soft-rejection MOS/DMOS
//! reconstruction with bootstrap intervals ([`reconstruction`]), Beta models
//! of per-question score distributions ([`distfit`]), alignment to an external
//! JND scale ([`alignment`]), a synthetic rater population used as a
//! verification oracle ([`simulator`]) and the staged driver tying it all
//! together ([`pipeline`]).

pub mod alignment;
pub mod distfit;
pub mod domain;
pub mod numerics;
pub mod pipeline;
pub mod reconstruction;
pub mod screening;
pub mod simulator;

pub use domain::{
    BatchDef, BatchInstance, Codec, Question, QuestionKind, Rating, RatingTable, Stimulus,
    StudyConfig,
};
