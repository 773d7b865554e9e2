//! Engine for trigger-gated, LLM-mediated text adventures used as attitude
//! assessments.
//!
//! The crate is `no_std` (it needs `alloc`) and performs no IO: clocks and
//! chat backends are injected through the [`clock::Clock`] and
//! [`gateway::ChatBackend`] traits. File formats, the HTTP service and the
//! live backend live in the `storyprobe` crate.
//!
//! Modules:
//! - [`corpus`]: world-building fragments and per-level story context selection.
//! - [`narrative`]: campaign definitions, the session state machine and event replay.
//! - [`prompts`]: dialogue and few-shot trigger prompt assembly.
//! - [`gateway`]: chat request/response types and the scripted mock backend.
//! - [`assessment`]: instruments, reverse coding and scoring.
//! - [`stats`]: Spearman correlation, dataset assembly and report tables.
#![no_std]
#![deny(unused_must_use, rust_2018_idioms)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod assessment;
pub mod clock;
pub mod corpus;
pub mod gateway;
pub mod narrative;
pub mod prompts;
pub mod stats;

pub use assessment::{ResponseRecord, SurveyInstrument, Wave};
pub use corpus::{Category, CorpusEntry, WorldCorpus};
pub use gateway::{ChatBackend, ChatRequest, ChatResponse, GatewayError, MockBackend};
pub use narrative::{CampaignSpec, EventRecord, Game, LevelSpec, Phase, SessionState, TriggerSpec};
pub use stats::{spearman, CorrelationReport, CorrelationResult, ParticipantRow};
