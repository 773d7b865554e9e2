//! Chat-completion access: request/response types, the backend trait and a
//! deterministic scripted mock.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};
use core::time::Duration;

use serde::{Deserialize, Serialize};

use crate::narrative::TriggerSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Dialogue,
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub kind: RequestKind,
    pub system_text: String,
    pub context_text: String,
    pub user_text: String,
    /// The raw player utterance that caused this request. Mock rules match
    /// against it, never against the rendered prompt.
    pub player_input: String,
    pub model_id: String,
    pub temperature: f64,
    pub max_reply_tokens: u32,
    pub timeout: Duration,
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(alloc::format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_reply_tokens == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_reply_tokens must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub latency: Duration,
    pub backend_id: String,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited (retry after {retry_after:?})")]
    RateLimited { retry_after: Option<Duration> },
    #[error("malformed backend payload: {0}")]
    MalformedPayload(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned status {status}: {message}")]
    Status { status: u16, message: String },
    #[error("backend returned an empty reply")]
    EmptyReply,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl GatewayError {
    /// Failures that happened before any response body was consumed and may
    /// succeed on a later attempt.
    pub fn is_transient(&self) -> bool {
        match self {
            GatewayError::Timeout(_)
            | GatewayError::Transport(_)
            | GatewayError::RateLimited { .. } => true,
            GatewayError::Status { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(request)
    }
}

/// Sampling parameters for the two request kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub model_id: String,
    pub dialogue_temperature: f64,
    pub classifier_temperature: f64,
    pub max_reply_tokens: u32,
    pub classifier_max_tokens: u32,
    pub timeout_ms: u64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            model_id: "gpt-4".into(),
            dialogue_temperature: 0.8,
            classifier_temperature: 0.0,
            max_reply_tokens: 256,
            classifier_max_tokens: 4,
            timeout_ms: 30_000,
        }
    }
}

/// How a mock rule selects requests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    /// Case-insensitive substring of the player input.
    Contains(String),
    /// Case-insensitive equality with the trimmed player input.
    Exact(String),
    /// Zero-based position of the request in the backend's request sequence.
    Index(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    pub when: Matcher,
    /// Restrict the rule to one request kind; `None` matches both.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<RequestKind>,
    pub reply: String,
}

impl MockRule {
    pub fn new(when: Matcher, reply: impl Into<String>) -> Self {
        Self {
            when,
            kind: None,
            reply: reply.into(),
        }
    }

    pub fn for_kind(mut self, kind: RequestKind) -> Self {
        self.kind = Some(kind);
        self
    }

    fn matches(&self, request: &ChatRequest, index: usize) -> bool {
        if self.kind.is_some_and(|k| k != request.kind) {
            return false;
        }
        match &self.when {
            Matcher::Contains(needle) => request
                .player_input
                .to_lowercase()
                .contains(&needle.to_lowercase()),
            Matcher::Exact(text) => request.player_input.trim().eq_ignore_ascii_case(text.trim()),
            Matcher::Index(i) => *i == index,
        }
    }
}

pub const DEFAULT_FALLBACK_REPLY: &str = "Hmm... I'm not sure. My memory is foggy. Tell me more?";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
    #[serde(default = "default_fallback")]
    pub fallback: String,
}

fn default_fallback() -> String {
    DEFAULT_FALLBACK_REPLY.into()
}

impl MockScript {
    pub fn new(rules: Vec<MockRule>) -> Self {
        Self {
            rules,
            fallback: default_fallback(),
        }
    }

    /// Classification rules answering each demonstration question with its
    /// own label, for every trigger given.
    pub fn from_demonstrations<'a>(triggers: impl IntoIterator<Item = &'a TriggerSpec>) -> Self {
        let rules = triggers
            .into_iter()
            .flat_map(|t| t.demonstrations.iter())
            .map(|d| {
                MockRule::new(Matcher::Exact(d.question.clone()), label(d.label))
                    .for_kind(RequestKind::Classification)
            })
            .collect();
        Self::new(rules)
    }

    /// Appends the rules of `other` after this script's rules.
    pub fn extend(mut self, other: MockScript) -> Self {
        self.rules.extend(other.rules);
        self
    }
}

fn label(value: bool) -> &'static str {
    if value {
        "True"
    } else {
        "False"
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MockScriptError {
    #[error("mock script has no rules")]
    Empty,
}

/// Scripted backend. The first matching rule wins; unmatched requests get
/// the script's fallback reply and are logged.
///
/// Replies are a pure function of the script and the request sequence, so the
/// handle must not be shared between runs that should be reproducible.
#[derive(Debug)]
pub struct MockBackend {
    script: MockScript,
    id: String,
    served: AtomicUsize,
    unmatched: AtomicUsize,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Result<Self, MockScriptError> {
        if script.rules.is_empty() {
            return Err(MockScriptError::Empty);
        }
        Ok(Self {
            script,
            id: "mock".into(),
            served: AtomicUsize::new(0),
            unmatched: AtomicUsize::new(0),
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    pub fn requests_served(&self) -> usize {
        self.served.load(Ordering::SeqCst)
    }

    pub fn unmatched_count(&self) -> usize {
        self.unmatched.load(Ordering::SeqCst)
    }

    fn reply_for(&self, request: &ChatRequest, index: usize) -> &str {
        match self.script.rules.iter().find(|r| r.matches(request, index)) {
            Some(rule) => &rule.reply,
            None => {
                self.unmatched.fetch_add(1, Ordering::SeqCst);
                log::warn!(
                    "mock backend: no rule for request #{index} ({:?}): {:?}",
                    request.kind,
                    request.player_input
                );
                &self.script.fallback
            }
        }
    }
}

impl ChatBackend for MockBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let index = self.served.fetch_add(1, Ordering::SeqCst);
        let text = self.reply_for(request, index).to_string();
        if text.is_empty() {
            return Err(GatewayError::EmptyReply);
        }
        Ok(ChatResponse {
            text,
            latency: Duration::ZERO,
            backend_id: self.id.clone(),
            truncated: false,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use alloc::vec;

    pub(crate) fn request(kind: RequestKind, input: &str) -> ChatRequest {
        ChatRequest {
            kind,
            system_text: String::new(),
            context_text: String::new(),
            user_text: input.into(),
            player_input: input.into(),
            model_id: "m".into(),
            temperature: 0.0,
            max_reply_tokens: 16,
            timeout: Duration::from_secs(1),
            seed: None,
        }
    }

    #[test]
    fn substring_rule_returns_reply_verbatim() {
        let mock = MockBackend::new(MockScript::new(vec![MockRule::new(
            Matcher::Contains("origin".into()),
            "I\u{2026} fragments of a red sky",
        )]))
        .unwrap();
        let r = mock
            .complete(&request(RequestKind::Dialogue, "What is your origin?"))
            .unwrap();
        assert_eq!(r.text, "I\u{2026} fragments of a red sky");
        assert_eq!(r.backend_id, "mock");
    }

    #[test]
    fn first_match_wins_and_fallback_logged() {
        let mock = MockBackend::new(MockScript::new(vec![
            MockRule::new(Matcher::Contains("origin".into()), "True"),
            MockRule::new(Matcher::Contains("orig".into()), "never"),
        ]))
        .unwrap();
        assert_eq!(
            mock.complete(&request(RequestKind::Classification, "origin?")).unwrap().text,
            "True"
        );
        assert_eq!(
            mock.complete(&request(RequestKind::Classification, "hello")).unwrap().text,
            DEFAULT_FALLBACK_REPLY
        );
        assert_eq!(mock.unmatched_count(), 1);
        assert_eq!(mock.requests_served(), 2);
    }

    #[test]
    fn index_rules_follow_sequence() {
        let mock = MockBackend::new(MockScript::new(vec![
            MockRule::new(Matcher::Index(1), "second"),
            MockRule::new(Matcher::Index(0), "first"),
        ]))
        .unwrap();
        assert_eq!(mock.complete(&request(RequestKind::Dialogue, "x")).unwrap().text, "first");
        assert_eq!(mock.complete(&request(RequestKind::Dialogue, "x")).unwrap().text, "second");
    }

    #[test]
    fn kind_filter() {
        let mock = MockBackend::new(MockScript::new(vec![MockRule::new(
            Matcher::Contains("x".into()),
            "True",
        )
        .for_kind(RequestKind::Classification)]))
        .unwrap();
        assert_eq!(
            mock.complete(&request(RequestKind::Dialogue, "x")).unwrap().text,
            DEFAULT_FALLBACK_REPLY
        );
    }

    #[test]
    fn empty_script_rejected() {
        assert_eq!(
            MockBackend::new(MockScript::new(vec![])).unwrap_err(),
            MockScriptError::Empty
        );
    }

    #[test]
    fn request_validation() {
        let mut r = request(RequestKind::Dialogue, "x");
        r.temperature = 2.5;
        assert!(matches!(r.validate(), Err(GatewayError::InvalidRequest(_))));
        r.temperature = 1.0;
        r.max_reply_tokens = 0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn transient_classification() {
        assert!(GatewayError::Transport("x".into()).is_transient());
        assert!(GatewayError::Status { status: 503, message: String::new() }.is_transient());
        assert!(!GatewayError::Status { status: 400, message: String::new() }.is_transient());
        assert!(!GatewayError::Auth("no".into()).is_transient());
        assert!(!GatewayError::MalformedPayload("x".into()).is_transient());
    }
}
