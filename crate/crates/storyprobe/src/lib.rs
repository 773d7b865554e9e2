//! Runtime for storyprobe studies: file formats, the event store, the HTTP
//! session service, a chat-completions backend and the command line.
//!
//! The game logic itself lives in [`storyprobe_core`], re-exported as
//! [`core`].

pub use storyprobe_core as core;

pub mod bundled;
pub mod config;
pub mod formats;
pub mod live;
pub mod play;
pub mod service;
pub mod store;

use std::time::{SystemTime, UNIX_EPOCH};

/// Wall clock.
#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl core::clock::Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}
