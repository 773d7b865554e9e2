//! Chat-completions backend over HTTPS.
//!
//! Speaks the widely used `/chat/completions` wire format. Transient failures
//! that happen before any response body is read are retried with exponential
//! backoff; a rate-limit reply waits for the server's `retry-after` when one
//! is given. Once the body of a successful reply has started to be read the
//! request is never repeated.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use storyprobe_core::gateway::{ChatBackend, ChatRequest, ChatResponse, GatewayError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Attempts after the first one.
    pub max_retries: u32,
    pub base_backoff_ms: u64,
    pub max_backoff_ms: u64,
    /// Upper bound on a server-requested wait.
    pub max_retry_after_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_backoff_ms: 250,
            max_backoff_ms: 8_000,
            max_retry_after_ms: 60_000,
        }
    }
}

impl RetryPolicy {
    /// Wait before retry number `attempt` (0-based): base * 2^attempt, capped.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt.min(32)).unwrap_or(u64::MAX);
        Duration::from_millis(
            self.base_backoff_ms
                .saturating_mul(factor)
                .min(self.max_backoff_ms),
        )
    }
}

#[derive(Debug, Clone)]
pub struct LiveSettings {
    /// Base URL up to and including the API version, e.g.
    /// `https://api.openai.com/v1`.
    pub base_url: String,
    pub api_key: String,
    pub retry: RetryPolicy,
    /// Concurrent requests allowed through this handle.
    pub max_in_flight: usize,
}

/// Counting gate bounding concurrent requests.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn enter(&self) -> GateGuard<'_> {
        let mut free = self.free.lock().expect("gate lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("gate lock");
        }
        *free -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("gate lock") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug)]
pub struct LiveBackend {
    agent: ureq::Agent,
    endpoint: String,
    api_key: String,
    retry: RetryPolicy,
    gate: Gate,
    id: String,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireReply,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireReply {
    #[serde(default)]
    content: Option<String>,
}

/// Outcome of one HTTP attempt that did not produce a reply.
enum Failure {
    /// Nothing of the reply body was read; the request may be repeated.
    /// Carries the server-requested wait, if any.
    Retry(GatewayError, Option<Duration>),
    Final(GatewayError),
}

impl LiveBackend {
    pub fn new(settings: LiveSettings) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        let endpoint = format!("{}/chat/completions", settings.base_url.trim_end_matches('/'));
        Self {
            agent,
            id: format!("live:{endpoint}"),
            endpoint,
            api_key: settings.api_key,
            retry: settings.retry,
            gate: Gate::new(settings.max_in_flight),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn body<'a>(request: &'a ChatRequest) -> WireRequest<'a> {
        let mut messages = Vec::with_capacity(3);
        for (role, content) in [
            ("system", request.system_text.as_str()),
            ("system", request.context_text.as_str()),
            ("user", request.user_text.as_str()),
        ] {
            if !content.trim().is_empty() {
                messages.push(WireMessage { role, content });
            }
        }
        WireRequest {
            model: &request.model_id,
            messages,
            temperature: request.temperature,
            max_tokens: request.max_reply_tokens,
            seed: request.seed,
        }
    }

    fn attempt(&self, request: &ChatRequest, body: &WireRequest<'_>) -> Result<(String, bool), Failure> {
        let sent = self
            .agent
            .post(&self.endpoint)
            .header("authorization", &format!("Bearer {}", self.api_key))
            .config()
            .timeout_global(Some(request.timeout))
            .build()
            .send_json(body);
        let mut response = match sent {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => {
                return Err(Failure::Retry(GatewayError::Timeout(request.timeout), None))
            }
            Err(e @ (ureq::Error::Io(_)
            | ureq::Error::HostNotFound
            | ureq::Error::ConnectionFailed
            | ureq::Error::Protocol(_))) => {
                return Err(Failure::Retry(GatewayError::Transport(e.to_string()), None))
            }
            Err(e) => return Err(Failure::Final(GatewayError::Transport(e.to_string()))),
        };

        let status = response.status().as_u16();
        match status {
            200..=299 => {}
            401 | 403 => {
                let message = response.body_mut().read_to_string().unwrap_or_default();
                return Err(Failure::Final(GatewayError::Auth(format!(
                    "status {status}: {}",
                    message.trim()
                ))));
            }
            429 => {
                let wait = response
                    .headers()
                    .get("retry-after")
                    .and_then(|v| v.to_str().ok())
                    .and_then(parse_retry_after);
                return Err(Failure::Retry(
                    GatewayError::RateLimited { retry_after: wait },
                    wait,
                ));
            }
            500..=599 => {
                return Err(Failure::Retry(
                    GatewayError::Status {
                        status,
                        message: response
                            .status()
                            .canonical_reason()
                            .unwrap_or("server error")
                            .into(),
                    },
                    None,
                ))
            }
            _ => {
                let message = response.body_mut().read_to_string().unwrap_or_default();
                return Err(Failure::Final(GatewayError::Status {
                    status,
                    message: message.trim().into(),
                }));
            }
        }

        // From here on part of the reply may have been consumed: no retries.
        let text = response.body_mut().read_to_string().map_err(|e| match e {
            ureq::Error::Timeout(_) => Failure::Final(GatewayError::Timeout(request.timeout)),
            other => Failure::Final(GatewayError::Transport(other.to_string())),
        })?;
        let parsed: WireResponse = serde_json::from_str(&text)
            .map_err(|e| Failure::Final(GatewayError::MalformedPayload(e.to_string())))?;
        let choice = parsed.choices.into_iter().next().ok_or_else(|| {
            Failure::Final(GatewayError::MalformedPayload("reply has no choices".into()))
        })?;
        let content = choice.message.content.unwrap_or_default();
        if content.trim().is_empty() {
            return Err(Failure::Final(GatewayError::EmptyReply));
        }
        let truncated = choice.finish_reason.as_deref() == Some("length");
        Ok((content, truncated))
    }
}

/// `retry-after` is either delay-seconds or an HTTP date.
pub fn parse_retry_after(value: &str) -> Option<Duration> {
    let value = value.trim();
    if let Ok(secs) = value.parse::<f64>() {
        return (secs.is_finite() && secs >= 0.0).then(|| Duration::from_secs_f64(secs));
    }
    let at = chrono::DateTime::parse_from_rfc2822(value).ok()?;
    let delta = at.with_timezone(&chrono::Utc) - chrono::Utc::now();
    Some(delta.to_std().unwrap_or(Duration::ZERO))
}

impl ChatBackend for LiveBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let body = Self::body(request);
        let _slot = self.gate.enter();
        let started = Instant::now();
        let mut retries = 0;
        loop {
            match self.attempt(request, &body) {
                Ok((text, truncated)) => {
                    return Ok(ChatResponse {
                        text,
                        latency: started.elapsed(),
                        backend_id: self.id.clone(),
                        truncated,
                    })
                }
                Err(Failure::Retry(err, server_wait)) if retries < self.retry.max_retries => {
                    let wait = match server_wait {
                        Some(w) => w.min(Duration::from_millis(self.retry.max_retry_after_ms)),
                        None => self.retry.backoff(retries),
                    };
                    log::warn!(
                        "{}: {err}; retry {} of {} in {wait:?}",
                        self.endpoint,
                        retries + 1,
                        self.retry.max_retries
                    );
                    thread::sleep(wait);
                    retries += 1;
                }
                Err(Failure::Retry(err, _)) | Err(Failure::Final(err)) => return Err(err),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            base_backoff_ms: 100,
            max_backoff_ms: 1_000,
            ..RetryPolicy::default()
        };
        let ms: Vec<u128> = (0..6).map(|a| p.backoff(a).as_millis()).collect();
        assert_eq!(ms, [100, 200, 400, 800, 1000, 1000]);
        assert_eq!(p.backoff(200).as_millis(), 1000);
    }

    #[test]
    fn retry_after_forms() {
        assert_eq!(parse_retry_after("3"), Some(Duration::from_secs(3)));
        assert_eq!(parse_retry_after(" 0.5 "), Some(Duration::from_millis(500)));
        assert_eq!(parse_retry_after("-1"), None);
        assert_eq!(
            parse_retry_after("Wed, 21 Oct 2015 07:28:00 GMT"),
            Some(Duration::ZERO)
        );
        assert_eq!(parse_retry_after("soon"), None);
    }

    #[test]
    fn empty_prompt_parts_are_not_sent() {
        let req = ChatRequest {
            kind: storyprobe_core::gateway::RequestKind::Classification,
            system_text: String::new(),
            context_text: " ".into(),
            user_text: "Question: hi\nAnswer:".into(),
            player_input: "hi".into(),
            model_id: "m".into(),
            temperature: 0.0,
            max_reply_tokens: 4,
            timeout: Duration::from_secs(1),
            seed: None,
        };
        let v = serde_json::to_value(LiveBackend::body(&req)).unwrap();
        assert_eq!(v["messages"].as_array().unwrap().len(), 1);
        assert_eq!(v["messages"][0]["role"], "user");
        assert_eq!(v["max_tokens"], 4);
        assert!(v.get("seed").is_none());
    }
}
