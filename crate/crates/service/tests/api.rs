//! End-to-end checks of the REST API over real HTTP.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use biaslens_core::embedding::{HashProvider, ProviderOutput};
use biaslens_core::generation::MockGenerator;
use biaslens_core::imaging::is_png;
use biaslens_core::session::load_session;
use biaslens_core::synthetic::separable;
use biaslens_core::EmbeddingProvider;
use biaslens_service::mock::generator_router;
use biaslens_service::{router, BackgroundServer, HttpGenerator, HttpProvider, Server, ServerConfig};
use serde_json::{json, Value};

const DIM: usize = 48;

/// Text embedding waits until the gate opens; every call is recorded.
struct Gated {
    inner: HashProvider,
    open: Mutex<bool>,
    cv: Condvar,
    text_calls: AtomicUsize,
    texts: Mutex<Vec<String>>,
}

impl Gated {
    fn new(open: bool) -> Arc<Self> {
        Arc::new(Self {
            inner: HashProvider::new(DIM, 3),
            open: Mutex::new(open),
            cv: Condvar::new(),
            text_calls: AtomicUsize::new(0),
            texts: Mutex::new(Vec::new()),
        })
    }

    fn open(&self) {
        *self.open.lock().unwrap() = true;
        self.cv.notify_all();
    }
}

impl EmbeddingProvider for Gated {
    fn embed_text(&self, texts: &[String]) -> biaslens_core::embedding::Result<ProviderOutput> {
        self.text_calls.fetch_add(1, Ordering::SeqCst);
        self.texts.lock().unwrap().extend(texts.iter().cloned());
        let mut open = self.open.lock().unwrap();
        while !*open {
            open = self.cv.wait(open).unwrap();
        }
        self.inner.embed_text(texts)
    }

    fn embed_image(&self, images: &[Vec<u8>]) -> biaslens_core::embedding::Result<ProviderOutput> {
        self.inner.embed_image(images)
    }
}

struct Client {
    base: String,
    agent: ureq::Agent,
}

impl Client {
    fn new(base: String) -> Self {
        let agent = ureq::Agent::new_with_config(ureq::Agent::config_builder().http_status_as_error(false).build());
        Self { base, agent }
    }

    fn json(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> (u16, Value) {
        let mut r = resp.expect("request");
        let status = r.status().as_u16();
        let body = r.body_mut().read_json().unwrap_or(Value::Null);
        (status, body)
    }

    fn get(&self, path: &str) -> (u16, Value) {
        Self::json(self.agent.get(format!("{}/api/v1{path}", self.base)).call())
    }

    fn post(&self, path: &str, body: Value) -> (u16, Value) {
        Self::json(self.agent.post(format!("{}/api/v1{path}", self.base)).send_json(body))
    }

    fn patch(&self, path: &str, body: Value) -> (u16, Value) {
        Self::json(self.agent.patch(format!("{}/api/v1{path}", self.base)).send_json(body))
    }

    fn bytes(&self, path: &str) -> (u16, Vec<u8>) {
        let mut r = self
            .agent
            .get(format!("{}/api/v1{path}", self.base))
            .call()
            .expect("request");
        (r.status().as_u16(), r.body_mut().read_to_vec().unwrap())
    }
}

struct Harness {
    // Field order is drop order: stop HTTP first, then the workers.
    client: Client,
    _http: BackgroundServer,
    _server: Server,
    dir: tempfile::TempDir,
    session: String,
}

impl Harness {
    fn start(
        n: usize,
        provider: Arc<dyn EmbeddingProvider>,
        generator: Option<Arc<dyn biaslens_core::generation::ImageGenerator>>,
        feed_capacity: usize,
    ) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let session = separable(n, DIM, 7).build_session(&dir.path().join("s1")).unwrap();
        let mut cfg = ServerConfig::new(dir.path());
        cfg.tick = Duration::from_millis(30);
        cfg.feed_capacity = feed_capacity;
        let server = Server::start(cfg, provider, generator).unwrap();
        let http = BackgroundServer::start(router(server.shared())).unwrap();
        Self {
            client: Client::new(http.url()),
            _http: http,
            _server: server,
            dir,
            session: session.id().to_owned(),
        }
    }

    fn path(&self, rest: &str) -> String {
        format!("/sessions/{}{rest}", self.session)
    }

    fn tree_version(&self) -> u64 {
        self.client.get(&self.path("")).1["tree_version"].as_u64().unwrap()
    }

    fn edit(&self, op: Value) -> (u16, Value) {
        let mut body = op;
        body["base_version"] = json!(self.tree_version());
        self.client.patch(&self.path("/tree"), body)
    }

    fn head(&self) -> u64 {
        self.client.get(&self.path("/scores")).1["version"].as_u64().unwrap()
    }

    fn add(&self, parent: u64, label: &str, relation: Option<&str>) -> u64 {
        let (status, ack) =
            self.edit(json!({"op": "add_node", "parent": parent, "label": label, "relation": relation}));
        assert_eq!(status, 200, "{ack}");
        ack["created_node"].as_u64().unwrap()
    }

    /// Polls the feed until `node` has a score, returning (entry version, score).
    fn await_score(&self, since: u64, node: u64) -> (u64, Value) {
        let deadline = Instant::now() + Duration::from_secs(10);
        while Instant::now() < deadline {
            let (status, feed) = self.client.get(&self.path(&format!("/scores?since={since}")));
            assert_eq!(status, 200, "{feed}");
            for e in feed["entries"].as_array().unwrap() {
                for c in e["changed"].as_array().unwrap() {
                    if c["node_id"] == json!(node) && c.get("score").is_some() {
                        return (e["version"].as_u64().unwrap(), c["score"].clone());
                    }
                }
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        panic!("no score for node {node}");
    }
}

#[test]
fn session_crud_and_unknown_ids() {
    let h = Harness::start(4, Gated::new(true), None, 64);
    let (status, list) = h.client.get("/sessions");
    assert_eq!(status, 200);
    assert_eq!(list.as_array().unwrap().len(), 1);
    assert_eq!(list[0]["images"], json!(8));

    let (status, created) = h.client.post(
        "/sessions",
        json!({"name": "fresh", "anchors": [{"prompt": "picture that shows a cat"}, {"prompt": "picture that shows a dog"}], "n": 3}),
    );
    assert_eq!(status, 201, "{created}");
    let id = created["id"].as_str().unwrap();
    assert_eq!(created["config"]["n"], json!(3));
    assert!(h.dir.path().join(id).join("session.json").is_file());
    assert_eq!(h.client.get("/sessions").1.as_array().unwrap().len(), 2);

    assert_eq!(h.client.get("/sessions/nope").0, 404);
    assert_eq!(h.client.get(&h.path("/jobs/nope")).0, 404);
    assert_eq!(h.client.get(&h.path("/nodes/999/score")).0, 404);
    assert_eq!(h.client.bytes(&h.path("/images/nope")).0, 404);
    let (status, body) = h.client.post(
        "/sessions",
        json!({"name": "x", "anchors": [{"prompt": "a"}, {"prompt": "a"}]}),
    );
    assert_eq!(status, 422, "{body}");
}

#[test]
fn mutation_acks_before_score_then_feed_delivers_it() {
    let gate = Gated::new(false);
    let h = Harness::start(6, gate.clone(), None, 64);
    let (_, feed) = h.client.get(&h.path("/scores"));
    let head = feed["version"].as_u64().unwrap();
    assert!(h.client.get(&h.path(&format!("/scores?since={head}"))).1["entries"]
        .as_array()
        .unwrap()
        .is_empty());

    let t0 = Instant::now();
    let person = h.add(0, "person", Some("that shows a"));
    assert!(t0.elapsed() < Duration::from_secs(1));
    let (_, pending) = h.client.get(&h.path(&format!("/nodes/{person}/score")));
    assert_eq!(pending["status"], "pending");
    assert_eq!(pending["test_text"], "picture that shows a person");

    gate.open();
    let (version, score) = h.await_score(head, person);
    assert!(version > head);
    assert_eq!(score["test_text"], "picture that shows a person");
    assert_eq!(score["tree_version"].as_u64().unwrap(), h.tree_version());
    let sum: f64 = score["posteriors"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_f64().unwrap())
        .sum();
    assert!((sum - 1.0).abs() < 1e-9);
    let (_, ready) = h.client.get(&h.path(&format!("/nodes/{person}/score")));
    assert_eq!(ready["status"], "ready");
    let (_, feed) = h.client.get(&h.path(&format!("/scores?since={version}")));
    assert!(feed["entries"].as_array().unwrap().is_empty());
}

#[test]
fn optimistic_concurrency_and_invalid_edits() {
    let h = Harness::start(3, Gated::new(true), None, 64);
    let person = h.add(0, "person", Some("that shows a"));
    let dog = h.add(0, "dog", Some("that shows a"));
    let (status, body) = h.client.patch(
        &h.path("/tree"),
        json!({"base_version": 0, "op": "relabel", "node": person, "label": "human"}),
    );
    assert_eq!(status, 409);
    assert_eq!(body["tree_version"].as_u64().unwrap(), h.tree_version());

    let (status, _) = h.edit(json!({"op": "add_edge", "from": person, "to": dog, "relation": "and"}));
    assert_eq!(status, 200);
    let (status, body) = h.edit(json!({"op": "add_edge", "from": dog, "to": person, "relation": "and"}));
    assert_eq!(status, 422, "{body}");
    assert_eq!(h.edit(json!({"op": "remove_node", "node": 777})).0, 404);
    assert_eq!(h.edit(json!({"op": "remove_node", "node": 0})).0, 422);
    let (_, s) = h.client.get(&h.path(""));
    let anchor_node = s["anchors"][0]["node_id"].as_u64().unwrap();
    assert_eq!(h.edit(json!({"op": "remove_node", "node": anchor_node})).0, 422);
    assert_eq!(h.client.get(&h.path(&format!("/nodes/{anchor_node}/score"))).0, 422);
}

#[test]
fn rapid_edits_coalesce_to_the_final_text() {
    let gate = Gated::new(true);
    let h = Harness::start(4, gate.clone(), None, 64);
    let head0 = h.head();
    let person = h.add(0, "person", Some("that shows a"));
    h.await_score(head0, person);

    *gate.open.lock().unwrap() = false;
    let head = h.client.get(&h.path("/scores")).1["version"].as_u64().unwrap();
    let calls_before = gate.text_calls.load(Ordering::SeqCst);
    for i in 0..10 {
        let (status, _) = h.edit(json!({"op": "relabel", "node": person, "label": format!("person{i}")}));
        assert_eq!(status, 200);
    }
    gate.open();
    let (_, score) = h.await_score(head, person);
    // A text already embedded before the gate shut may race in, so wait for the final one.
    let deadline = Instant::now() + Duration::from_secs(10);
    let mut score = score;
    while score["test_text"] != "picture that shows a person9" && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(20));
        score = h.await_score(head, person).1;
    }
    assert_eq!(score["test_text"], "picture that shows a person9");
    // At most one call in flight when the edits began, plus one for the final text.
    assert!(gate.text_calls.load(Ordering::SeqCst) - calls_before <= 2);
    let (_, feed) = h.client.get(&h.path(&format!("/scores?since={head}")));
    let person_scores: Vec<&Value> = feed["entries"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|e| e["changed"].as_array().unwrap())
        .filter(|c| c["node_id"] == json!(person))
        .collect();
    assert_eq!(person_scores.len(), 1);
}

#[test]
fn compacted_feed_positions_are_gone() {
    let h = Harness::start(3, Gated::new(true), None, 2);
    let (_, feed) = h.client.get(&h.path("/scores"));
    let start = feed["version"].as_u64().unwrap();
    let mut last = 0;
    for label in ["a", "b", "c", "d"] {
        let head = h.head();
        last = h.add(0, label, Some("that shows a"));
        h.await_score(head, last);
    }
    assert_eq!(h.client.get(&h.path(&format!("/scores?since={start}"))).0, 410);
    assert_eq!(h.client.get(&h.path("/scores?since=999999")).0, 410);
    let (status, feed) = h.client.get(&h.path("/scores"));
    assert_eq!(status, 200);
    assert!(!feed["entries"].as_array().unwrap().is_empty());
    assert!(last > 0);
}

#[test]
fn forward_and_intersection_queries() {
    let h = Harness::start(5, Gated::new(true), None, 64);
    let a = h.add(0, "person", Some("that shows a"));
    let b = h.add(0, "dog", Some("that shows a"));
    let (status, fwd) = h
        .client
        .post(&h.path("/queries/forward"), json!({"test_node_ids": [a, b]}));
    assert_eq!(status, 200, "{fwd}");
    let results = fwd["results"].as_array().unwrap();
    assert_eq!(results.len(), 2);
    assert_eq!(results[0]["node_id"], json!(a));
    for per in results[0]["per_anchor"].as_object().unwrap().values() {
        let sims: Vec<f64> = per
            .as_array()
            .unwrap()
            .iter()
            .map(|p| p["similarity"].as_f64().unwrap())
            .collect();
        assert_eq!(sims.len(), 5);
        assert!(sims.windows(2).all(|w| w[0] >= w[1]));
    }
    let (status, inter) = h
        .client
        .post(&h.path("/queries/intersection"), json!({"t1": a, "t2": a}));
    assert_eq!(status, 200);
    let points = inter["points"].as_array().unwrap();
    assert_eq!(points.len(), 10);
    assert!(points.iter().all(|p| p["x"] == p["y"]));
    assert_eq!(
        h.client
            .post(&h.path("/queries/forward"), json!({"test_node_ids": [4242]}))
            .0,
        404
    );
    let (status, body) = h.client.post(&h.path("/queries/inverse"), json!({"node_id": a}));
    assert_eq!(status, 422, "{body}");
}

#[test]
fn degraded_provider_keeps_edits_fast_and_reports_502() {
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let provider = Arc::new(HttpProvider::new(format!("http://127.0.0.1:{port}")));
    let h = Harness::start(3, provider, None, 64);
    let t0 = Instant::now();
    let person = h.add(0, "person", Some("that shows a"));
    assert!(t0.elapsed() < Duration::from_secs(1));
    std::thread::sleep(Duration::from_millis(150));
    assert_eq!(
        h.client.get(&h.path(&format!("/nodes/{person}/score"))).1["status"],
        "pending"
    );
    let (status, body) = h
        .client
        .post(&h.path("/queries/forward"), json!({"test_node_ids": [person]}));
    assert_eq!(status, 502, "{body}");
    assert_eq!(h.client.post(&h.path("/jobs"), json!({"node_id": person})).0, 502);
}

#[test]
fn generation_job_runs_to_completion_without_blocking() {
    let mock = Arc::new(MockGenerator::new(2));
    let gen_server = BackgroundServer::start(generator_router(mock, Duration::from_millis(300))).unwrap();
    let generator = Arc::new(HttpGenerator::new(gen_server.url()));
    let h = Harness::start(4, Gated::new(true), Some(generator), 64);
    let person = h.add(0, "person", Some("that shows a"));
    let smiling = h.add(person, "smiling", None);

    let t0 = Instant::now();
    let (status, job) = h.client.post(&h.path("/jobs"), json!({"node_id": smiling, "m": 3}));
    assert!(t0.elapsed() < Duration::from_secs(1));
    assert_eq!(status, 202, "{job}");
    assert_eq!(job["status"]["state"], "pending");
    assert_eq!(job["prompt"], "picture that shows a smiling person");
    let job_id = job["job_id"].as_str().unwrap().to_owned();

    let (status, body) = h.client.post(&h.path("/queries/inverse"), json!({"node_id": smiling}));
    assert_eq!(status, 202, "{body}");

    let deadline = Instant::now() + Duration::from_secs(20);
    let mut seen = Vec::new();
    let done = loop {
        assert!(Instant::now() < deadline, "job never finished: {seen:?}");
        let (_, j) = h.client.get(&h.path(&format!("/jobs/{job_id}")));
        let state = j["status"]["state"].as_str().unwrap().to_owned();
        if seen.last() != Some(&state) {
            seen.push(state.clone());
        }
        if state == "done" || state == "failed" {
            break j;
        }
        std::thread::sleep(Duration::from_millis(20));
    };
    assert_eq!(done["status"]["state"], "done", "{done}");
    assert_eq!(seen.first().map(String::as_str), Some("pending"));
    let ids = done["image_ids"].as_array().unwrap();
    assert_eq!(ids.len(), 3);
    let (status, png) = h
        .client
        .bytes(&h.path(&format!("/images/{}", ids[0].as_str().unwrap())));
    assert_eq!(status, 200);
    assert!(is_png(&png));

    let (status, inv) = h.client.post(&h.path("/queries/inverse"), json!({"node_id": smiling}));
    assert_eq!(status, 200, "{inv}");
    let points = inv["points"].as_array().unwrap();
    assert_eq!(points.len(), 8 + 3);
    let (_, s) = h.client.get(&h.path(""));
    let node = s["tree"]["nodes"]
        .as_array()
        .map(|a| a.iter().find(|n| n["id"] == json!(smiling)).cloned())
        .unwrap_or_else(|| s["tree"]["nodes"].get(smiling.to_string()).cloned());
    assert_eq!(node.unwrap()["has_generated_images"], json!(true));
}

#[test]
fn state_survives_restart() {
    let dir;
    let session_id;
    let person;
    {
        let h = Harness::start(3, Gated::new(true), None, 64);
        let head = h.head();
        person = h.add(0, "person", Some("that shows a"));
        h.await_score(head, person);
        session_id = h.session.clone();
        let Harness {
            client,
            _http,
            _server,
            dir: d,
            ..
        } = h;
        drop(client);
        drop(_http);
        drop(_server);
        dir = d;
    }
    let loaded = load_session(&dir.path().join("s1")).unwrap();
    assert_eq!(loaded.id(), session_id);
    assert_eq!(
        loaded.serialize_node(biaslens_core::NodeId(person)).unwrap(),
        "picture that shows a person"
    );
    assert!(!loaded.cache().is_empty());

    // Scores are rebuilt from the persisted cache, without embedding calls.
    let gate = Gated::new(false);
    let server = Server::start(ServerConfig::new(dir.path()), gate.clone(), None).unwrap();
    let http = BackgroundServer::start(router(server.shared())).unwrap();
    let c = Client::new(http.url());
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        let (status, s) = c.get(&format!("/sessions/{session_id}/nodes/{person}/score"));
        assert_eq!(status, 200);
        if s["status"] == "ready" {
            break;
        }
        assert!(Instant::now() < deadline, "score never rebuilt");
        std::thread::sleep(Duration::from_millis(10));
    }
    assert_eq!(gate.text_calls.load(Ordering::SeqCst), 0);
    let (_, s) = c.get(&format!("/sessions/{session_id}"));
    assert!(s["version"].as_u64().unwrap() > loaded.version());
    gate.open();
}
