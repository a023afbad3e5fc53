//! Server state: loaded sessions, the recompute worker pool and the
//! maintenance thread that polls generation jobs and persists sessions.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, RwLock};
use std::thread::JoinHandle;
use std::time::Duration;

use biaslens_core::engine::{recompute_node_scores, BiasError, BiasScore, ScoringSnapshot};
use biaslens_core::generation::{
    finish_job, poll_remote, prepare_job_images, GenerationJob, ImageGenerator, JobStatus, PollOutcome,
};
use biaslens_core::session::{load_session, save_session, SESSION_FILE};
use biaslens_core::tree::NodeKind;
use biaslens_core::{EmbeddingProvider, NodeId, Session, SessionError};

use crate::feed::{Change, ChangeFeed, ChangeFeedEntry};

pub fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Holds one subdirectory per session, or a single session itself.
    pub session_root: PathBuf,
    pub workers: usize,
    /// Period of job polling, retrying failed recomputes and saving.
    pub tick: Duration,
    /// Feed entries kept per session before the oldest are compacted away.
    pub feed_capacity: usize,
}

impl ServerConfig {
    pub fn new(session_root: impl Into<PathBuf>) -> Self {
        Self {
            session_root: session_root.into(),
            workers: 2,
            tick: Duration::from_millis(250),
            feed_capacity: 4096,
        }
    }
}

/// Mutable per-session server state, guarded by the slot's mutex. Holding
/// that mutex is what serializes writers to one session.
#[derive(Debug)]
pub struct SessionState {
    pub session: Session,
    pub feed: ChangeFeed,
    /// Test nodes whose score must be recomputed.
    pub dirty: BTreeSet<NodeId>,
    /// Latest published score per node.
    pub scores: BTreeMap<NodeId, BiasScore>,
    pub jobs: BTreeMap<String, GenerationJob>,
    pub needs_save: bool,
    /// A worker is scoring this session; others leave it alone.
    busy: bool,
}

impl SessionState {
    fn new(session: Session, feed_capacity: usize) -> Self {
        let dirty = session.test_texts().into_keys().collect();
        Self {
            feed: ChangeFeed::new(session.version(), feed_capacity),
            session,
            dirty,
            scores: BTreeMap::new(),
            jobs: BTreeMap::new(),
            needs_save: false,
            busy: false,
        }
    }

    /// Records `changed` under a fresh session version.
    pub fn publish(&mut self, changed: Vec<Change>) -> u64 {
        let version = self.session.advance_version();
        self.feed.publish(ChangeFeedEntry { version, changed });
        self.needs_save = true;
        version
    }

    /// The published score for `node` if it matches the node's current text.
    pub fn current_score(&self, node: NodeId) -> Option<&BiasScore> {
        let text = self.session.serialize_node(node).ok()?;
        self.scores.get(&node).filter(|s| s.test_text == text)
    }

    pub fn is_test_node(&self, node: NodeId) -> bool {
        self.session.tree().node(node).is_ok_and(|n| n.kind == NodeKind::Test)
    }
}

#[derive(Debug)]
pub struct SessionSlot {
    pub dir: PathBuf,
    pub state: Mutex<SessionState>,
}

/// Sessions waiting for a recompute; each appears at most once.
#[derive(Default)]
struct Queue {
    inner: Mutex<(VecDeque<String>, HashSet<String>)>,
    ready: Condvar,
}

impl Queue {
    fn push(&self, id: &str) {
        let mut q = lock(&self.inner);
        if q.1.insert(id.to_owned()) {
            q.0.push_back(id.to_owned());
            self.ready.notify_one();
        }
    }

    fn pop(&self, stop: &AtomicBool) -> Option<String> {
        let mut q = lock(&self.inner);
        loop {
            if stop.load(Ordering::SeqCst) {
                return None;
            }
            if let Some(id) = q.0.pop_front() {
                q.1.remove(&id);
                return Some(id);
            }
            q = self
                .ready
                .wait_timeout(q, Duration::from_millis(200))
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }
}

pub struct Shared {
    pub config: ServerConfig,
    pub provider: Arc<dyn EmbeddingProvider>,
    pub generator: Option<Arc<dyn ImageGenerator>>,
    sessions: RwLock<BTreeMap<String, Arc<SessionSlot>>>,
    queue: Queue,
    stop: AtomicBool,
}

impl Shared {
    pub fn slot(&self, id: &str) -> Option<Arc<SessionSlot>> {
        self.sessions.read().unwrap_or_else(|e| e.into_inner()).get(id).cloned()
    }

    pub fn slots(&self) -> Vec<(String, Arc<SessionSlot>)> {
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Registers a new session and writes it to disk.
    pub fn add_session(&self, session: Session) -> Result<Arc<SessionSlot>, SessionError> {
        let id = session.id().to_owned();
        let dir = self.config.session_root.join(&id);
        save_session(&session, &dir)?;
        let slot = Arc::new(SessionSlot {
            dir,
            state: Mutex::new(SessionState::new(session, self.config.feed_capacity)),
        });
        self.sessions
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id, slot.clone());
        Ok(slot)
    }

    /// Asks the worker pool to rescore the session's dirty nodes.
    pub fn schedule(&self, session_id: &str) {
        self.queue.push(session_id);
    }

    /// Scores the dirty nodes of one session, one worker per session at a
    /// time. Edits made meanwhile are picked up by a follow-up run.
    fn recompute(&self, session_id: &str) {
        let Some(slot) = self.slot(session_id) else {
            return;
        };
        {
            let mut st = lock(&slot.state);
            if st.busy {
                return;
            }
            st.busy = true;
        }
        let retry_now = self.score_dirty(session_id, &slot);
        let again = {
            let mut st = lock(&slot.state);
            st.busy = false;
            retry_now && !st.dirty.is_empty()
        };
        if again {
            self.schedule(session_id);
        }
    }

    /// The session lock is released while embeddings are computed; results
    /// are published only for nodes whose text is still the one scored.
    /// Returns false when the provider failed and retrying should wait.
    fn score_dirty(&self, session_id: &str, slot: &SessionSlot) -> bool {
        let (snap, work) = {
            let mut st = lock(&slot.state);
            let dirty = std::mem::take(&mut st.dirty);
            let work: Vec<(NodeId, String)> = dirty
                .into_iter()
                .filter(|n| st.is_test_node(*n))
                .filter_map(|n| st.session.serialize_node(n).ok().map(|t| (n, t)))
                .collect();
            if work.is_empty() {
                return true;
            }
            let texts: Vec<&str> = work.iter().map(|(_, t)| t.as_str()).collect();
            match ScoringSnapshot::capture(&st.session, &texts) {
                Ok(snap) => (snap, work),
                Err(e) => {
                    log::debug!("session {session_id}: nothing to score yet ({e})");
                    return true;
                }
            }
        };
        let result = recompute_node_scores(&snap, &work, self.provider.as_ref(), None);
        let mut st = lock(&slot.state);
        let (scores, effects) = match result {
            Ok(r) => r,
            Err(e @ (BiasError::ProviderUnavailable(_) | BiasError::Provider(_))) => {
                log::warn!("session {session_id}: scoring deferred: {e}");
                st.dirty.extend(work.iter().map(|(n, _)| *n));
                return false;
            }
            Err(e) => {
                log::warn!("session {session_id}: scoring failed: {e}");
                return true;
            }
        };
        if let Err(e) = effects.apply(&mut st.session) {
            log::warn!("session {session_id}: cache update rejected: {e}");
        }
        let tree_version = st.session.tree().version();
        let mut changed = Vec::new();
        for (node, mut score) in scores {
            let current = st.session.serialize_node(node).ok();
            if current.as_deref() != Some(score.test_text.as_str()) {
                continue;
            }
            score.tree_version = tree_version;
            st.scores.insert(node, score.clone());
            changed.push(Change::Score { node_id: node, score });
        }
        if !changed.is_empty() {
            st.publish(changed);
        }
        true
    }

    /// Polls every unfinished job once and ingests finished images.
    fn poll_jobs(&self, generator: &dyn ImageGenerator) {
        for (id, slot) in self.slots() {
            let pending: Vec<GenerationJob> = lock(&slot.state)
                .jobs
                .values()
                .filter(|j| !j.status.is_terminal())
                .cloned()
                .collect();
            for mut job in pending {
                let before = job.status.clone();
                let ready = match poll_remote(&mut job, generator) {
                    Ok(PollOutcome::Ready(images)) => Some(images),
                    Ok(PollOutcome::Unchanged) => None,
                    Err(e) => {
                        log::warn!("session {id}: job {} not polled: {e}", job.job_id);
                        None
                    }
                };
                let prepared = ready.map(|images| {
                    let dim = lock(&slot.state).session.config().dim;
                    prepare_job_images(&job, images, self.provider.as_ref(), dim)
                });
                let mut st = lock(&slot.state);
                match prepared {
                    Some(Ok(prepared)) => {
                        let dir = slot.dir.clone();
                        if let Err(e) = finish_job(&mut st.session, &dir, &mut job, &prepared) {
                            job.advance(JobStatus::Failed {
                                reason: format!("could not store images: {e}"),
                            });
                        }
                    }
                    // Embedding failed; the remote result is fetched again next tick.
                    Some(Err(e)) => log::warn!("session {id}: job {} images not embedded: {e}", job.job_id),
                    None => {}
                }
                if job.status != before {
                    let change = Change::Job {
                        job_id: job.job_id.clone(),
                        node_id: job.node_id,
                        status: job.status.clone(),
                    };
                    st.jobs.insert(job.job_id.clone(), job);
                    st.publish(vec![change]);
                } else {
                    st.jobs.insert(job.job_id.clone(), job);
                }
            }
        }
    }

    /// Writes every session with unsaved changes.
    pub fn flush(&self) {
        for (id, slot) in self.slots() {
            let snapshot = {
                let mut st = lock(&slot.state);
                if !st.needs_save {
                    continue;
                }
                st.needs_save = false;
                st.session.clone()
            };
            if let Err(e) = save_session(&snapshot, &slot.dir) {
                log::error!("session {id}: save failed: {e}");
                lock(&slot.state).needs_save = true;
            }
        }
    }

    fn maintain(&self) {
        if let Some(g) = &self.generator {
            self.poll_jobs(g.as_ref());
        }
        for (id, slot) in self.slots() {
            if !lock(&slot.state).dirty.is_empty() {
                self.schedule(&id);
            }
        }
        self.flush();
    }
}

fn find_sessions(root: &Path) -> std::io::Result<Vec<PathBuf>> {
    if root.join(SESSION_FILE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SESSION_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// A running server core: sessions plus background threads. Dropping it
/// stops the threads and saves pending changes.
pub struct Server {
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl Server {
    /// Loads every session under the root and starts the background threads.
    pub fn start(
        config: ServerConfig,
        provider: Arc<dyn EmbeddingProvider>,
        generator: Option<Arc<dyn ImageGenerator>>,
    ) -> Result<Self, SessionError> {
        std::fs::create_dir_all(&config.session_root)?;
        let mut sessions = BTreeMap::new();
        for dir in find_sessions(&config.session_root)? {
            let session = load_session(&dir)?;
            let id = session.id().to_owned();
            log::info!("loaded session {id} ({}) from {}", session.name(), dir.display());
            let slot = Arc::new(SessionSlot {
                dir: dir.clone(),
                state: Mutex::new(SessionState::new(session, config.feed_capacity)),
            });
            if sessions.insert(id.clone(), slot).is_some() {
                return Err(SessionError::Format(format!("session id {id} appears twice")));
            }
        }
        let shared = Arc::new(Shared {
            config,
            provider,
            generator,
            sessions: RwLock::new(sessions),
            queue: Queue::default(),
            stop: AtomicBool::new(false),
        });
        let mut threads = Vec::new();
        for i in 0..shared.config.workers.max(1) {
            let s = shared.clone();
            threads.push(
                std::thread::Builder::new()
                    .name(format!("recompute-{i}"))
                    .spawn(move || {
                        while let Some(id) = s.queue.pop(&s.stop) {
                            s.recompute(&id);
                        }
                    })?,
            );
        }
        let s = shared.clone();
        threads.push(std::thread::Builder::new().name("maintenance".into()).spawn(move || {
            while !s.stop.load(Ordering::SeqCst) {
                s.maintain();
                std::thread::sleep(s.config.tick);
            }
        })?);
        for (id, _) in shared.slots() {
            shared.schedule(&id);
        }
        Ok(Self { shared, threads })
    }

    pub fn shared(&self) -> Arc<Shared> {
        self.shared.clone()
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        self.shared.queue.ready.notify_all();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        self.shared.flush();
    }
}
