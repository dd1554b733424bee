use std::io::{BufRead, BufReader, Read};
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use timefork_core::branchstore::{BranchId, LlmSettings};
use timefork_core::lab::{InjectRequest, Lab};
use timefork_core::scenario::ScenarioConfig;
use timefork_core::{Tick, TickRecord, WorldEvent};

fn start() -> String {
    let lab = Arc::new(Lab::in_memory(LlmSettings::default()));
    let addr = timefork_server::spawn_background(SocketAddr::from(([127, 0, 0, 1], 0)), lab).unwrap();
    format!("http://{addr}")
}

fn send(method: &str, url: &str, body: Option<&Value>) -> (u16, Value) {
    let req = ureq::request(method, url);
    let result = match body {
        Some(b) => req.send_json(b.clone()),
        None => req.call(),
    };
    match result {
        Ok(r) => (r.status(), r.into_json().unwrap()),
        Err(ureq::Error::Status(code, r)) => (code, r.into_json().unwrap()),
        Err(e) => panic!("{method} {url}: {e}"),
    }
}

fn create(base: &str) -> String {
    let (status, body) = send("POST", &format!("{base}/simulations"), Some(&json!(ScenarioConfig::default14(42))));
    assert_eq!(status, 201, "{body}");
    body["root_branch_id"].as_str().unwrap().to_string()
}

fn oil_event(id: &str, start: u64) -> Value {
    json!({
        "event_id": id, "title": id, "body": "",
        "impacts": {"OIL": "0.5"}, "start_tick": start, "duration_ticks": 20, "half_life_ticks": 10
    })
}

#[test]
fn endpoint_status_codes() {
    let base = start();
    let root = create(&base);
    let (s, b) = send("GET", &format!("{base}/simulations"), None);
    assert_eq!((s, b["simulations"].clone()), (200, json!(["sim1"])));
    assert_eq!(b["format_version"], json!(1));

    let (s, b) = send("POST", &format!("{base}/branches/{root}/advance"), Some(&json!({"n_ticks": 12})));
    assert_eq!(s, 200);
    assert_eq!(b["records"].as_array().unwrap().len(), 12);

    let (s, b) = send("GET", &format!("{base}/branches/{root}"), None);
    assert_eq!((s, b["head_tick"].clone(), b["status"].clone()), (200, json!(12), json!("IDLE")));

    let (s, b) = send("POST", &format!("{base}/branches/{root}/inject"), Some(&json!({"event": oil_event("now", 12)})));
    assert_eq!((s, b["outcome"].clone()), (200, json!("SCHEDULED")));
    let (s, b) = send("POST", &format!("{base}/branches/{root}/inject"), Some(&json!({"event": oil_event("now", 12)})));
    assert_eq!((s, b["code"].clone()), (409, json!("DUPLICATE_EVENT_ID")));

    let (s, b) = send("POST", &format!("{base}/branches/{root}/inject"), Some(&json!({"event": oil_event("late", 5)})));
    assert_eq!((s, b["code"].clone()), (409, json!("RETROACTIVE_REQUIRES_FORK")));
    let (s, b) = send(
        "POST",
        &format!("{base}/branches/{root}/inject"),
        Some(&json!({"event": oil_event("late", 5), "auto_fork": true})),
    );
    assert_eq!((s, b["outcome"].clone(), b["fork_tick"].clone()), (201, json!("FORKED_INTO"), json!(5)));
    let child = b["branch_id"].as_str().unwrap().to_string();

    let (s, b) = send("POST", &format!("{base}/branches/{root}/fork"), Some(&json!({"tick": 99})));
    assert_eq!((s, b["code"].clone()), (400, json!("TICK_BEYOND_HEAD")));
    let (s, b) = send("POST", &format!("{base}/branches/{root}/fork"), Some(&json!({"tick": 10, "label": "ten"})));
    assert_eq!((s, b["label"].clone(), b["parent_id"].clone()), (201, json!("ten"), json!(root)));

    let (s, b) = send("GET", &format!("{base}/branches/{root}/timeline?from=3&to=40"), None);
    assert_eq!((s, b["code"].clone()), (400, json!("RANGE_OUT_OF_BOUNDS")));
    let (s, b) = send("GET", &format!("{base}/branches/{root}/timeline?from=3&to=6"), None);
    assert_eq!((s, b["records"].as_array().unwrap().len()), (200, 4));

    let (s, b) = send("GET", &format!("{base}/simulations/sim1/branches"), None);
    assert_eq!(s, 200);
    assert_eq!(b["nodes"].as_object().unwrap().len(), 3);

    let (s, b) = send("POST", &format!("{base}/branches/{root}/replay"), None);
    assert_eq!(s, 200, "{b}");

    let (s, b) = send("POST", &format!("{base}/sessions"), Some(&json!({"left": root, "right": child})));
    assert_eq!((s, b["common_ancestor_tick"].clone()), (201, json!(5)));
    let session = b["session_id"].as_str().unwrap().to_string();
    let (s, b) = send(
        "POST",
        &format!("{base}/sessions/{session}/control"),
        Some(&json!({"pane": "RIGHT", "action": "RUN", "n_ticks": 10})),
    );
    assert_eq!((s, b["records"].as_array().unwrap().len()), (200, 10));
    assert_eq!(b["session"]["right_state"], json!("PAUSED"));
    let (s, b) = send("GET", &format!("{base}/sessions/{session}/report"), None);
    assert_eq!((s, b["first_divergence_tick"].clone()), (200, json!(6)));
    let (s, _) = send("GET", &format!("{base}/sessions/{session}/series?commodity=OIL"), None);
    assert_eq!(s, 200);
    let (s, b) = send("GET", &format!("{base}/sessions/{session}/series?commodity=COPPER"), None);
    assert_eq!((s, b["code"].clone()), (400, json!("UNKNOWN_COMMODITY")));

    let (s, b) = send("DELETE", &format!("{base}/branches/{root}"), None);
    assert_eq!((s, b["code"].clone()), (400, json!("INVALID_REQUEST")));
    let (s, b) = send("DELETE", &format!("{base}/branches/{child}"), None);
    assert_eq!(s, 200, "{b}");
    let (s, b) = send("GET", &format!("{base}/sessions/{session}"), None);
    assert_eq!((s, b["code"].clone()), (404, json!("UNKNOWN_SESSION")));
}

#[test]
fn malformed_requests() {
    let base = start();
    let root = create(&base);
    let url = format!("{base}/branches/{root}/advance");
    let raw = |body: &str| match ureq::post(&url).set("content-type", "application/json").send_string(body) {
        Ok(r) => (r.status(), r.into_json::<Value>().unwrap()),
        Err(ureq::Error::Status(c, r)) => (c, r.into_json().unwrap()),
        Err(e) => panic!("{e}"),
    };
    for body in ["{", "{\"ticks\": 3}", "{\"n_ticks\": -1}", "[]"] {
        let (s, b) = raw(body);
        assert_eq!((s, b["code"].clone()), (400, json!("INVALID_REQUEST")), "{body}");
        assert!(b["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
    let (s, b) = send("POST", &url, Some(&json!({"n_ticks": 0})));
    assert_eq!((s, b["code"].clone()), (400, json!("INVALID_REQUEST")));
    let (s, b) = send("POST", &format!("{base}/simulations"), Some(&json!({"name": "x"})));
    assert_eq!((s, b["code"].clone()), (400, json!("INVALID_REQUEST")));
    let mut bad = json!(ScenarioConfig::default14(1));
    bad["commodities"] = json!({});
    let (s, b) = send("POST", &format!("{base}/simulations"), Some(&bad));
    assert_eq!((s, b["code"].clone()), (400, json!("INVALID_CONFIG")));
    let mut ev = oil_event("x", 1);
    ev["impacts"] = json!({"COPPER": "0.1"});
    let (s, b) = send("POST", &format!("{base}/branches/{root}/inject"), Some(&json!({"event": ev})));
    assert_eq!((s, b["code"].clone()), (400, json!("INVALID_EVENT")));
    let (s, b) = send("GET", &format!("{base}/branches/sim1-b77"), None);
    assert_eq!((s, b["code"].clone(), b["branch_id"].clone()), (404, json!("UNKNOWN_BRANCH"), json!("sim1-b77")));
    let (s, b) = send("GET", &format!("{base}/nowhere"), None);
    assert_eq!((s, b["code"].clone()), (404, json!("NOT_FOUND")));
}

#[test]
fn concurrent_advance_is_rejected() {
    let base = start();
    let root = create(&base);
    let long = {
        let url = format!("{base}/branches/{root}/advance");
        std::thread::spawn(move || send("POST", &url, Some(&json!({"n_ticks": 1_000_000}))))
    };
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        let (_, b) = send("GET", &format!("{base}/branches/{root}"), None);
        if b["status"] == json!("RUNNING") {
            break;
        }
        assert!(Instant::now() < deadline, "advance never started");
        std::thread::sleep(Duration::from_millis(5));
    }
    let (s, b) = send("POST", &format!("{base}/branches/{root}/advance"), Some(&json!({"n_ticks": 1})));
    assert_eq!((s, b["code"].clone(), b["branch_id"].clone()), (409, json!("BRANCH_BUSY"), json!(root)));
    let (s, b) = send("POST", &format!("{base}/branches/{root}/fork"), Some(&json!({"tick": 0})));
    assert_eq!((s, b["code"].clone()), (409, json!("BRANCH_BUSY")));
    let (s, _) = send("POST", &format!("{base}/branches/{root}/pause"), None);
    assert_eq!(s, 200);
    let (s, b) = long.join().unwrap();
    assert_eq!(s, 200);
    let done = b["records"].as_array().unwrap().len();
    assert!(done > 0 && done < 1_000_000);
    let (_, b) = send("GET", &format!("{base}/branches/{root}"), None);
    assert_eq!((b["status"].clone(), b["head_tick"].clone()), (json!("PAUSED"), json!(done)));
}

struct SseReader {
    lines: BufReader<Box<dyn Read + Send + Sync>>,
}

impl SseReader {
    fn open(url: &str, last_event_id: Option<u64>) -> SseReader {
        let agent = ureq::AgentBuilder::new().timeout_read(Duration::from_millis(1500)).build();
        let mut req = agent.get(url);
        if let Some(id) = last_event_id {
            req = req.set("Last-Event-ID", &id.to_string());
        }
        let resp = req.call().unwrap();
        assert!(resp.content_type().starts_with("text/event-stream"));
        SseReader {
            lines: BufReader::new(resp.into_reader()),
        }
    }

    /// Next `(id, event, data)`; `None` on timeout or end of stream.
    fn next(&mut self) -> Option<(u64, String, TickRecord)> {
        let (mut id, mut event, mut data) = (None, String::new(), String::new());
        loop {
            let mut line = String::new();
            match self.lines.read_line(&mut line) {
                Ok(0) | Err(_) => return None,
                Ok(_) => {}
            }
            let line = line.trim_end_matches(['\r', '\n']);
            if line.is_empty() {
                if let Some(id) = id {
                    return Some((id, event, serde_json::from_str(&data).unwrap()));
                }
                continue;
            }
            if let Some(v) = line.strip_prefix("id:") {
                id = Some(v.trim().parse().unwrap());
            } else if let Some(v) = line.strip_prefix("event:") {
                event = v.trim().to_string();
            } else if let Some(v) = line.strip_prefix("data:") {
                data.push_str(v.trim_start());
            }
        }
    }
}

#[test]
fn stream_delivers_each_tick_once_in_order() {
    let base = start();
    let root = create(&base);
    let mut sse = SseReader::open(&format!("{base}/branches/{root}/stream"), None);
    let (_, b) = send("POST", &format!("{base}/branches/{root}/advance"), Some(&json!({"n_ticks": 10})));
    let direct: Vec<TickRecord> = serde_json::from_value(b["records"].clone()).unwrap();
    let mut got = Vec::new();
    for _ in 0..10 {
        let (id, event, record) = sse.next().expect("tick event");
        assert_eq!((id, event.as_str()), (record.tick.0, "tick"));
        got.push(record);
    }
    assert_eq!(got, direct);
    assert!(sse.next().is_none(), "no event beyond the tenth");

    // Resume after tick 4: stored 5..=10 first, then live ticks.
    let mut resumed = SseReader::open(&format!("{base}/branches/{root}/stream"), Some(4));
    send("POST", &format!("{base}/branches/{root}/advance"), Some(&json!({"n_ticks": 2})));
    let ticks: Vec<u64> = (0..8).map(|_| resumed.next().unwrap().0).collect();
    assert_eq!(ticks, (5..=12).collect::<Vec<_>>());

    let mut from = SseReader::open(&format!("{base}/branches/{root}/stream?from=11"), None);
    assert_eq!(from.next().unwrap().0, 11);
    assert_eq!(from.next().unwrap().0, 12);
}

/// The same operations through HTTP and directly on a Lab give identical
/// branches and timelines.
#[test]
fn http_matches_direct_calls() {
    let base = start();
    let root = create(&base);
    send("POST", &format!("{base}/branches/{root}/advance"), Some(&json!({"n_ticks": 15})));
    let (_, fork) = send("POST", &format!("{base}/branches/{root}/fork"), Some(&json!({"tick": 8})));
    let child = fork["branch_id"].as_str().unwrap().to_string();
    send("POST", &format!("{base}/branches/{child}/inject"), Some(&json!({"event": oil_event("shock", 8)})));
    send("POST", &format!("{base}/branches/{child}/advance"), Some(&json!({"n_ticks": 12})));

    let lab = Lab::in_memory(LlmSettings::default());
    let created = lab.create_simulation(&ScenarioConfig::default14(42)).unwrap();
    let droot = created.root_branch_id;
    lab.advance(&droot, 15).unwrap();
    let dchild = lab.fork(&droot, Tick(8), None).unwrap().branch_id;
    let event: WorldEvent = serde_json::from_value(oil_event("shock", 8)).unwrap();
    lab.inject(&dchild, InjectRequest { event, auto_fork: false, label: None }).unwrap();
    lab.advance(&dchild, 12).unwrap();

    for (http_id, id) in [(root, droot), (child, dchild)] {
        assert_eq!(http_id, id.as_str());
        let (_, b) = send("GET", &format!("{base}/branches/{http_id}"), None);
        let mut direct = serde_json::to_value(lab.branch(&BranchId::new(http_id.clone())).unwrap()).unwrap();
        direct["format_version"] = json!(1);
        assert_eq!(b, direct);
        let (_, t) = send("GET", &format!("{base}/branches/{http_id}/timeline?from=0"), None);
        let over_http: Vec<TickRecord> = serde_json::from_value(t["records"].clone()).unwrap();
        assert_eq!(over_http, lab.timeline(&id, Tick(0), None).unwrap());
    }
}
