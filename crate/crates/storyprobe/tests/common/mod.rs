#![allow(dead_code)]

use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde_json::Value;
use storyprobe::bundled;
use storyprobe::core::clock::Clock;
use storyprobe::core::gateway::{ChatBackend, ChatRequest, ChatResponse, GatewayError, MockBackend};
use storyprobe::core::narrative::GameSettings;
use storyprobe::service::{run, AppState, ServiceParts};
use storyprobe::store::{FileSink, Sink, Store};
use storyprobe::SystemClock;

/// Clock moved by hand.
#[derive(Debug)]
pub struct ManualClock(pub AtomicU64);

impl ManualClock {
    pub fn new(start: u64) -> Arc<Self> {
        Arc::new(Self(AtomicU64::new(start)))
    }

    pub fn advance(&self, d: Duration) {
        self.0.fetch_add(d.as_millis() as u64, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

/// File sink that can be told to fail.
pub struct FlakySink {
    inner: FileSink,
    pub failing: AtomicBool,
}

impl FlakySink {
    pub fn new(root: &Path) -> Arc<Self> {
        Arc::new(Self {
            inner: FileSink::new(root),
            failing: AtomicBool::new(false),
        })
    }
}

impl Sink for FlakySink {
    fn append(&self, name: &str, data: &[u8]) -> std::io::Result<()> {
        if self.failing.load(Ordering::SeqCst) {
            return Err(std::io::Error::other("disk unavailable"));
        }
        self.inner.append(name, data)
    }
}

/// Wraps a backend and sleeps before each request.
pub struct SlowBackend<B> {
    pub inner: B,
    pub delay: Duration,
}

impl<B: ChatBackend> ChatBackend for SlowBackend<B> {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        std::thread::sleep(self.delay);
        self.inner.complete(request)
    }
}

/// Backend that always fails.
pub struct DownBackend;

impl ChatBackend for DownBackend {
    fn backend_id(&self) -> &str {
        "down"
    }

    fn complete(&self, _: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        Err(GatewayError::Transport("connection refused".into()))
    }
}

pub fn mock() -> Arc<dyn ChatBackend> {
    Arc::new(MockBackend::new(bundled::mock_script()).unwrap())
}

pub fn parts(dir: &Path) -> ServiceParts {
    ServiceParts {
        game: bundled::game(GameSettings::default()),
        instruments: bundled::instruments(),
        backend: mock(),
        store: Store::open(dir).unwrap(),
        clock: Arc::new(SystemClock),
        idle_timeout: Duration::from_secs(1800),
        auth_token: None,
    }
}

pub struct TestServer {
    pub base: String,
    pub state: AppState,
    rt: Option<tokio::runtime::Runtime>,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    agent: ureq::Agent,
    pub token: Option<String>,
}

impl TestServer {
    pub fn start(parts: ServiceParts) -> Self {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(4)
            .enable_all()
            .build()
            .unwrap();
        let state = AppState::new(parts).unwrap();
        let listener = rt
            .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
            .unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        rt.spawn(run(listener, state.clone(), async {
            let _ = rx.await;
        }));
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base,
            state,
            rt: Some(rt),
            stop: Some(tx),
            agent,
            token: None,
        }
    }

    pub fn block_on<F: std::future::Future>(&self, f: F) -> F::Output {
        self.rt.as_ref().unwrap().block_on(f)
    }

    fn finish(&self, resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> (u16, String) {
        let mut resp = resp.expect("request reaches the server");
        let status = resp.status().as_u16();
        (status, resp.body_mut().read_to_string().unwrap())
    }

    pub fn get_text(&self, path: &str) -> (u16, String) {
        let mut req = self.agent.get(format!("{}{path}", self.base));
        if let Some(t) = &self.token {
            req = req.header("authorization", &format!("Bearer {t}"));
        }
        self.finish(req.call())
    }

    pub fn get(&self, path: &str) -> (u16, Value) {
        let (s, body) = self.get_text(path);
        (s, serde_json::from_str(&body).unwrap_or(Value::String(body)))
    }

    pub fn post_raw(&self, path: &str, body: &str) -> (u16, Value) {
        let mut req = self
            .agent
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("authorization", &format!("Bearer {t}"));
        }
        let (s, text) = self.finish(req.send(body));
        (s, serde_json::from_str(&text).unwrap_or(Value::String(text)))
    }

    pub fn post(&self, path: &str, body: Value) -> (u16, Value) {
        self.post_raw(path, &body.to_string())
    }

    /// Creates a session and returns its id.
    pub fn create(&self, participant: &str, seed: u64) -> String {
        let (s, v) = self.post(
            "/sessions",
            serde_json::json!({"participant_id": participant, "seed": seed}),
        );
        assert_eq!(s, 201, "{v}");
        v["session"]["session_id"].as_str().unwrap().to_string()
    }

    pub fn advance(&self, id: &str, from: &str) -> Value {
        let (s, v) = self.post(
            &format!("/sessions/{id}/advance"),
            serde_json::json!({ "from": from }),
        );
        assert_eq!(s, 200, "{v}");
        v
    }

    pub fn say(&self, id: &str, text: &str) -> (u16, Value) {
        self.post(
            &format!("/sessions/{id}/messages"),
            serde_json::json!({ "text": text }),
        )
    }

    /// Plays a whole session through the API, answering every survey item
    /// with `option`.
    pub fn play_through(&self, participant: &str, seed: u64, option: u8) -> String {
        let id = self.create(participant, seed);
        self.advance(&id, "Prologue");
        let lines = [
            "Can you recollect your place of origin?",
            "What caused the climate devastation?",
            "Are you some kind of machine?",
        ];
        for line in lines {
            let (s, v) = self.say(&id, line);
            assert_eq!(s, 200, "{v}");
            assert_eq!(v["classification"], "fired", "{line}");
            self.advance(&id, "Cutscene");
        }
        loop {
            let (s, item) = self.get(&format!("/sessions/{id}/survey/current"));
            assert_eq!(s, 200, "{item}");
            if item["done"].as_bool().unwrap() {
                break;
            }
            let (s, v) = self.post(
                &format!("/sessions/{id}/survey/answers"),
                serde_json::json!({"item_id": item["item_id"], "option": option}),
            );
            assert_eq!(s, 200, "{v}");
        }
        self.advance(&id, "InGameSurvey");
        self.advance(&id, "Finale");
        id
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(rt) = self.rt.take() {
            rt.shutdown_timeout(Duration::from_secs(5));
        }
    }
}

/// Answers for every item of an instrument, all set to `value`.
pub fn answers(instrument_id: &str, value: u8) -> Value {
    let set = bundled::instruments();
    let inst = set.by_id(instrument_id).unwrap();
    let map: serde_json::Map<String, Value> = inst
        .items
        .iter()
        .map(|i| (i.id().to_string(), Value::from(value)))
        .collect();
    Value::Object(map)
}
