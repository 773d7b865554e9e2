mod common;

use std::path::PathBuf;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use common::*;
use serde_json::{json, Value};
use storyprobe::config::Config;
use storyprobe::core::gateway::MockBackend;
use storyprobe::core::narrative::{replay, CloseReason, SessionEvent};
use storyprobe::bundled;
use storyprobe::service::{ServiceParts, StartupError};
use storyprobe::store::Store;

fn kinds(events: &Value) -> Vec<String> {
    events
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["kind"].as_str().unwrap().to_string())
        .collect()
}

#[test]
fn full_playthrough_closes_once_and_persists() {
    let dir = tempfile::tempdir().unwrap();
    let server = TestServer::start(parts(dir.path()));
    let id = server.play_through("alice", 42, 1);

    let (s, session) = server.get(&format!("/sessions/{id}"));
    assert_eq!(s, 200);
    assert_eq!(session["phase"], "Closed");
    assert_eq!(session["survey_answers"].as_array().unwrap().len(), 9);

    let (_, events) = server.get(&format!("/sessions/{id}/events"));
    let k = kinds(&events);
    assert_eq!(k.iter().filter(|k| *k == "SessionClosed").count(), 1);
    assert_eq!(k.iter().filter(|k| *k == "TriggerFired").count(), 3);
    let seqs: Vec<u64> = events
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["seq"].as_u64().unwrap())
        .collect();
    assert_eq!(seqs, (1..=seqs.len() as u64).collect::<Vec<_>>());

    // what the client saw is what was stored
    let stored = Store::open(dir.path()).unwrap().load_events().unwrap();
    let log = &stored[&id];
    assert_eq!(serde_json::to_value(log).unwrap(), events);
    let state = replay(log).unwrap();
    assert_eq!(serde_json::to_value(&state).unwrap()["phase"], "Closed");
}

#[test]
fn replies_match_the_event_log() {
    let dir = tempfile::tempdir().unwrap();
    let server = TestServer::start(parts(dir.path()));
    let id = server.create("bob", 1);
    server.advance(&id, "Prologue");
    let mut seen = Vec::new();
    for line in ["Hello there", "Do you live in a city?", "Where is your origin?"] {
        let (s, v) = server.say(&id, line);
        assert_eq!(s, 200, "{v}");
        seen.push(v["reply"].as_str().unwrap().to_string());
    }
    let (_, events) = server.get(&format!("/sessions/{id}/events"));
    let logged: Vec<String> = events
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["kind"] == "NpcReply")
        .map(|e| e["payload"]["text"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(seen, logged);
}

#[test]
fn concurrent_messages_are_serialized() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = parts(dir.path());
    p.backend = Arc::new(SlowBackend {
        inner: MockBackend::new(bundled::mock_script()).unwrap(),
        delay: Duration::from_millis(40),
    });
    let server = TestServer::start(p);
    let id = server.create("carol", 5);
    server.advance(&id, "Prologue");

    let server = Arc::new(server);
    let handles: Vec<_> = (0..2)
        .map(|i| {
            let server = server.clone();
            let id = id.clone();
            std::thread::spawn(move || server.say(&id, &format!("Do you live in a city? {i}")))
        })
        .collect();
    let mut batches: Vec<Vec<u64>> = handles
        .into_iter()
        .map(|h| {
            let (s, v) = h.join().unwrap();
            assert_eq!(s, 200, "{v}");
            v["events"]
                .as_array()
                .unwrap()
                .iter()
                .map(|e| e["seq"].as_u64().unwrap())
                .collect()
        })
        .collect();
    batches.sort();
    assert_eq!(batches, vec![vec![3, 4], vec![5, 6]]);

    let (_, session) = server.get(&format!("/sessions/{id}"));
    assert_eq!(session["last_seq"], 6);
    let players = session["history"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|h| h["speaker"] == "Player")
        .count();
    assert_eq!(players, 2);
}

#[test]
fn storage_failure_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let sink = FlakySink::new(dir.path());
    let mut p = parts(dir.path());
    p.store = Store::with_sink(dir.path(), sink.clone()).unwrap();
    let server = TestServer::start(p);
    let id = server.create("dave", 9);
    server.advance(&id, "Prologue");
    let (_, before) = server.get(&format!("/sessions/{id}"));

    sink.failing.store(true, Ordering::SeqCst);
    let (s, err) = server.say(&id, "Hello");
    assert_eq!(s, 503, "{err}");
    assert_eq!(err["error"], "storage");
    assert_eq!(err["retryable"], true);
    let (_, after) = server.get(&format!("/sessions/{id}"));
    assert_eq!(before, after);

    sink.failing.store(false, Ordering::SeqCst);
    let (s, v) = server.say(&id, "Hello");
    assert_eq!(s, 200, "{v}");
    assert_eq!(v["events"][0]["seq"], 3);
    let stored = Store::open(dir.path()).unwrap().load_events().unwrap();
    assert_eq!(stored[&id].len(), 4);
}

#[test]
fn backend_failure_is_retryable_and_leaves_no_events() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = parts(dir.path());
    p.backend = Arc::new(DownBackend);
    let server = TestServer::start(p);
    let id = server.create("erin", 2);
    server.advance(&id, "Prologue");
    let (s, err) = server.say(&id, "Hello");
    assert_eq!(s, 502, "{err}");
    assert_eq!(err["retryable"], true);
    let (_, events) = server.get(&format!("/sessions/{id}/events"));
    assert_eq!(events.as_array().unwrap().len(), 2);
}

#[test]
fn client_errors() {
    let dir = tempfile::tempdir().unwrap();
    let server = TestServer::start(parts(dir.path()));
    let id = server.create("frank", 3);

    // still in the prologue
    let (s, err) = server.say(&id, "Hello");
    assert_eq!((s, err["error"].as_str()), (409, Some("wrong_phase")));

    server.advance(&id, "Prologue");
    let (s, err) = server.say(&id, "   ");
    assert_eq!((s, err["retryable"].as_bool()), (400, Some(true)));

    let (s, _) = server.say("nope", "Hello");
    assert_eq!(s, 404);
    let (s, err) = server.post_raw(&format!("/sessions/{id}/messages"), "{not json");
    assert_eq!((s, err["error"].as_str()), (400, Some("bad_request")));
    let (s, _) = server.get(&format!("/sessions/{id}/survey/current"));
    assert_eq!(s, 409);
    let (s, _) = server.post("/sessions", json!({"participant_id": "frank", "seed": 3}));
    assert_eq!(s, 409);
    let (s, _) = server.post("/sessions", json!({"participant_id": " "}));
    assert_eq!(s, 400);
    // the trigger has not fired
    let (s, err) = server.post(&format!("/sessions/{id}/advance"), json!({"from": "Dialogue"}));
    assert_eq!((s, err["error"].as_str()), (409, Some("precondition")));
}

#[test]
fn stale_advance_is_acknowledged_without_effect() {
    let dir = tempfile::tempdir().unwrap();
    let server = TestServer::start(parts(dir.path()));
    let id = server.create("gina", 4);
    let first = server.advance(&id, "Prologue");
    assert_eq!(first["applied"], true);
    assert_eq!(first["events"].as_array().unwrap().len(), 1);
    let again = server.advance(&id, "Prologue");
    assert_eq!(again["applied"], false);
    assert!(again["events"].as_array().unwrap().is_empty());
    assert_eq!(again["session"]["phase"], "Dialogue");
    assert!(again["session"]["goal"].as_str().unwrap().contains("where he comes from"));
}

#[test]
fn survey_hides_scores_and_checks_answers() {
    let dir = tempfile::tempdir().unwrap();
    let server = TestServer::start(parts(dir.path()));
    let id = server.create("hal", 8);
    server.advance(&id, "Prologue");
    for line in [
        "Can you recollect your place of origin?",
        "What caused the climate devastation?",
        "Are you some kind of machine?",
    ] {
        server.say(&id, line);
        server.advance(&id, "Cutscene");
    }
    let (_, item) = server.get(&format!("/sessions/{id}/survey/current"));
    assert_eq!(item["index"], 0);
    assert_eq!(item["total"], 9);
    assert_eq!(item["item_id"], "IngameQ1");
    let options = item["options"].as_array().unwrap();
    assert_eq!(options.len(), 3);
    assert!(options.iter().all(|o| o.get("score").is_none()));

    let url = format!("/sessions/{id}/survey/answers");
    let (s, _) = server.post(&url, json!({"item_id": "IngameQ2", "option": 1}));
    assert_eq!(s, 422);
    let (s, _) = server.post(&url, json!({"item_id": "IngameQ1", "option": 4}));
    assert_eq!(s, 422);
    let (s, _) = server.post(&format!("/sessions/{id}/advance"), json!({"from": "InGameSurvey"}));
    assert_eq!(s, 409);
}

#[test]
fn idle_sessions_expire() {
    let dir = tempfile::tempdir().unwrap();
    let clock = ManualClock::new(1_700_000_000_000);
    let mut p = parts(dir.path());
    p.clock = clock.clone();
    p.idle_timeout = Duration::from_secs(60);
    let server = TestServer::start(p);
    let a = server.create("ivy", 1);
    let b = server.create("jon", 1);
    server.advance(&a, "Prologue");

    clock.advance(Duration::from_secs(61));
    let (s, err) = server.say(&a, "Hello");
    assert_eq!((s, err["error"].as_str()), (410, Some("session_closed")));
    let (s, _) = server.say(&a, "Hello");
    assert_eq!(s, 410);
    let (_, events) = server.get(&format!("/sessions/{a}/events"));
    let closes: Vec<&Value> = events
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["kind"] == "SessionClosed")
        .collect();
    assert_eq!(closes.len(), 1);
    assert_eq!(closes[0]["payload"]["reason"], "expired");

    assert_eq!(server.block_on(server.state.sweep_expired()), 1);
    assert_eq!(server.block_on(server.state.sweep_expired()), 0);
    let state = server.block_on(server.state.session(&b)).unwrap();
    assert!(state.is_closed());
    let stored = Store::open(dir.path()).unwrap().load_events().unwrap();
    assert!(matches!(
        stored[&b].last().unwrap().event,
        SessionEvent::SessionClosed {
            reason: CloseReason::Expired
        }
    ));
}

#[test]
fn sessions_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (id, before) = {
        let server = TestServer::start(parts(dir.path()));
        let id = server.create("kim", 12);
        server.advance(&id, "Prologue");
        server.say(&id, "Can you recollect your place of origin?");
        let (_, before) = server.get(&format!("/sessions/{id}"));
        (id, before)
    };
    let server = TestServer::start(parts(dir.path()));
    let (s, after) = server.get(&format!("/sessions/{id}"));
    assert_eq!(s, 200);
    assert_eq!(before, after);
    server.advance(&id, "Cutscene");
    let (s, v) = server.say(&id, "What caused the climate devastation?");
    assert_eq!(s, 200, "{v}");
    assert_eq!(v["classification"], "fired");
    let (_, health) = server.get("/health");
    assert_eq!(health["sessions"], 1);
}

#[test]
fn bearer_token_guards_everything_but_health() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = parts(dir.path());
    p.auth_token = Some("s3cret".into());
    let mut server = TestServer::start(p);
    let (s, health) = server.get("/health");
    assert_eq!(s, 200);
    assert_eq!(health["status"], "ready");
    assert_eq!(health["backend"], "mock");
    let (s, err) = server.post("/sessions", json!({"participant_id": "x"}));
    assert_eq!((s, err["error"].as_str()), (401, Some("unauthorized")));
    server.token = Some("wrong".into());
    assert_eq!(server.get("/export").0, 401);
    server.token = Some("s3cret".into());
    assert_eq!(server.post("/sessions", json!({"participant_id": "x"})).0, 201);
}

fn upload_all(server: &TestServer, pid: &str, pre: u8, post: u8, with_post: bool) {
    let mut uploads = vec![
        ("climate", "pre", pre),
        ("ipip50", "pre", 3),
        ("political", "pre", 2),
    ];
    if with_post {
        uploads.push(("climate", "post", post));
        uploads.push(("political", "post", 4));
    }
    for (inst, wave, v) in uploads {
        let (s, body) = server.post(
            "/responses",
            json!({
                "participant_id": pid,
                "instrument_id": inst,
                "wave": wave,
                "answers": answers(inst, v),
            }),
        );
        assert_eq!(s, 201, "{body}");
    }
}

#[test]
fn export_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let server = TestServer::start(parts(dir.path()));
    for (i, pid) in ["p1", "p2", "p3"].iter().enumerate() {
        upload_all(&server, pid, 1 + i as u8, 3 + i as u8, *pid != "p3");
        server.play_through(pid, 1, 1 + i as u8);
    }

    // p3 has no post wave yet
    let (s, export) = server.get("/export");
    assert_eq!(s, 200, "{export}");
    assert_eq!(export["rows"].as_array().unwrap().len(), 2);
    let ex = export["exclusions"].as_array().unwrap();
    assert_eq!(ex.len(), 1);
    assert_eq!(ex[0]["participant_id"], "p3");
    let reasons: Vec<&str> = ex[0]["reasons"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r.as_str().unwrap())
        .collect();
    assert_eq!(reasons, ["missing post climate", "missing post political"]);
    assert_eq!(server.get("/report").0, 422);

    // exporting again without new data gives the same bytes
    let (_, a) = server.get_text("/export.csv");
    let (_, b) = server.get_text("/export.csv");
    assert_eq!(a, b);
    let (_, j1) = server.get_text("/export");
    let (_, j2) = server.get_text("/export");
    assert_eq!(j1, j2);

    upload_all(&server, "p3", 3, 5, true);
    let (_, export) = server.get("/export");
    assert_eq!(export["rows"].as_array().unwrap().len(), 3);
    assert!(export["exclusions"].as_array().unwrap().is_empty());
    assert_eq!(export["columns"][0], "participant_id");
    assert_eq!(export["rows"][0][0], "p1");
    assert_eq!(export["instruments"]["climate"].as_str().unwrap().len(), 64);
    let (s, report) = server.get("/report");
    assert_eq!(s, 200, "{report}");
    assert_eq!(report["n"], 3);
    let (s, text) = server.get_text("/report.txt");
    assert_eq!(s, 200);
    assert!(text.contains("Openness"));

    // the same data read back from disk
    let (_, csv) = server.get_text("/export.csv");
    assert_eq!(csv.lines().count(), 4);
    let offline = storyprobe::service::dataset_from_store(
        &Store::open(dir.path()).unwrap(),
        &bundled::instruments(),
    )
    .unwrap();
    assert_eq!(storyprobe::formats::dataset_to_csv(&offline).unwrap(), csv);

    // filters
    let (_, none) = server.get("/export?campaign_id=elsewhere");
    assert!(none["rows"].as_array().unwrap().is_empty());
    let (s, _) = server.get("/export?from=yesterday");
    assert_eq!(s, 422);
    let (_, old) = server.get("/export?to=2001-01-01");
    assert!(old["rows"].as_array().unwrap().is_empty());
    let (_, all) = server.get("/export?campaign_id=halvane&from=2001-01-01");
    assert_eq!(all["rows"].as_array().unwrap().len(), 3);
}

#[test]
fn report_needs_three_participants() {
    let dir = tempfile::tempdir().unwrap();
    let server = TestServer::start(parts(dir.path()));
    let (s, err) = server.get("/report");
    assert_eq!(s, 422, "{err}");
}

#[test]
fn response_uploads_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let server = TestServer::start(parts(dir.path()));
    let upload = |body: Value| server.post("/responses", body).0;
    let good = json!({
        "participant_id": "q", "instrument_id": "climate", "wave": "pre",
        "answers": answers("climate", 4)
    });
    assert_eq!(upload(good.clone()), 201);
    let mut missing = good.clone();
    missing["answers"].as_object_mut().unwrap().remove("PreQ3");
    assert_eq!(upload(missing), 422);
    let mut out_of_range = good.clone();
    out_of_range["answers"]["PreQ1"] = json!(6);
    assert_eq!(upload(out_of_range), 422);
    let mut ingame = good.clone();
    ingame["wave"] = json!("ingame");
    assert_eq!(upload(ingame), 422);
    let mut unknown = good.clone();
    unknown["instrument_id"] = json!("mystery");
    assert_eq!(upload(unknown), 422);
    assert_eq!(Store::open(dir.path()).unwrap().load_responses().unwrap().len(), 1);
}

#[test]
fn demographics_use_coded_values() {
    let dir = tempfile::tempdir().unwrap();
    let server = TestServer::start(parts(dir.path()));
    let (s, _) = server.post(
        "/participants/p1/demographics",
        json!({"gender": "female", "age": "25-34", "education": "bachelor's degree"}),
    );
    assert_eq!(s, 201);
    let (s, err) = server.post("/participants/p1/demographics", json!({"age": "29"}));
    assert_eq!(s, 422, "{err}");
    let (s, _) = server.post("/participants/p1/demographics", json!({"shoe_size": "9"}));
    assert_eq!(s, 422);
    let stored = Store::open(dir.path()).unwrap().load_demographics().unwrap();
    assert_eq!(stored["p1"]["gender"], "Female");
    assert_eq!(stored["p1"]["education"], "Bachelor's degree");
}

#[test]
fn missing_campaign_file_is_a_startup_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = Config {
        campaign: Some(PathBuf::from("/nonexistent/campaign.json")),
        data_dir: dir.path().to_path_buf(),
        ..Config::default()
    };
    let err = match ServiceParts::from_config(&config) {
        Err(e) => e,
        Ok(_) => panic!("started without a campaign"),
    };
    assert!(matches!(err, StartupError::Load { .. }));
    assert!(err.to_string().contains("/nonexistent/campaign.json"), "{err}");
}

#[test]
fn graceful_shutdown_stops_serving() {
    let dir = tempfile::tempdir().unwrap();
    let server = TestServer::start(parts(dir.path()));
    let base = server.base.clone();
    assert_eq!(server.get("/health").0, 200);
    drop(server);
    assert!(ureq::get(format!("{base}/health")).call().is_err());
}
