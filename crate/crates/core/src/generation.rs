//! Generation jobs for test-concept images.
//!
//! A job moves forward only: pending, running, then done or failed. Finished
//! remote images are embedded and stored before the job reports done.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::EmbeddingProvider;
use crate::ids::ImageId;
use crate::imaging::{is_png, noise_png};
use crate::session::{add_test_images, prepare_images, PreparedImage, Session, SessionError};
use crate::tree::{NodeId, TreeError};

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("generator unavailable: {0}")]
    GeneratorUnavailable(String),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("generator protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Session(#[from] SessionError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum JobStatus {
    Pending,
    Running { completed: usize },
    Done,
    Failed { reason: String },
}

impl JobStatus {
    fn rank(&self) -> (u8, usize) {
        match self {
            JobStatus::Pending => (0, 0),
            JobStatus::Running { completed } => (1, *completed),
            JobStatus::Done | JobStatus::Failed { .. } => (2, 0),
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed { .. })
    }
}

/// What the remote service reports for a job.
#[derive(Debug, Clone, PartialEq)]
pub enum RemoteStatus {
    Pending,
    Running { completed: usize },
    Done { images: Vec<Vec<u8>> },
    Failed { reason: String },
}

pub trait ImageGenerator: Send + Sync {
    /// Starts generating `count` images; returns the remote job id.
    fn submit(&self, prompt: &str, count: usize) -> Result<String, GenerationError>;

    fn status(&self, remote_id: &str) -> Result<RemoteStatus, GenerationError>;
}

impl<G: ImageGenerator + ?Sized> ImageGenerator for std::sync::Arc<G> {
    fn submit(&self, prompt: &str, count: usize) -> Result<String, GenerationError> {
        (**self).submit(prompt, count)
    }

    fn status(&self, remote_id: &str) -> Result<RemoteStatus, GenerationError> {
        (**self).status(remote_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationJob {
    pub job_id: String,
    pub remote_id: String,
    pub prompt: String,
    pub requested: usize,
    pub status: JobStatus,
    pub image_ids: Vec<ImageId>,
    pub node_id: NodeId,
    /// Set when the last poll could not reach the generator.
    pub stale: bool,
}

impl GenerationJob {
    /// Moves to `next` if that is a forward step. Returns whether it moved.
    pub fn advance(&mut self, next: JobStatus) -> bool {
        if self.status.is_terminal() || next.rank() <= self.status.rank() {
            return false;
        }
        if let JobStatus::Running { completed } = next {
            if completed > self.requested {
                return false;
            }
        }
        self.status = next;
        true
    }
}

impl GenerationJob {
    /// A freshly submitted job, still pending.
    pub fn new(node: NodeId, prompt: String, requested: usize, remote_id: String) -> Self {
        Self {
            job_id: uuid::Uuid::new_v4().simple().to_string(),
            remote_id,
            prompt,
            requested,
            status: JobStatus::Pending,
            image_ids: Vec::new(),
            node_id: node,
            stale: false,
        }
    }
}

/// Registers a job for `node`. Never waits for images.
pub fn submit(
    session: &Session,
    node: NodeId,
    m: Option<usize>,
    generator: &dyn ImageGenerator,
) -> Result<GenerationJob, GenerationError> {
    let prompt = session.tree().serialize_node(node)?;
    let requested = m.unwrap_or(session.config().m).max(1);
    let remote_id = generator.submit(&prompt, requested)?;
    Ok(GenerationJob::new(node, prompt, requested, remote_id))
}

/// Outcome of asking the generator about a job.
#[derive(Debug, Clone, PartialEq)]
pub enum PollOutcome {
    /// Nothing to ingest; the job's status may have advanced.
    Unchanged,
    /// The remote job finished; these images still need to be ingested.
    Ready(Vec<Vec<u8>>),
}

/// Refreshes `job` from the generator. Finished images are handed back
/// rather than reported as done, so the caller can ingest them first.
pub fn poll_remote(job: &mut GenerationJob, generator: &dyn ImageGenerator) -> Result<PollOutcome, GenerationError> {
    if job.status.is_terminal() {
        return Ok(PollOutcome::Unchanged);
    }
    let remote = match generator.status(&job.remote_id) {
        Ok(r) => {
            job.stale = false;
            r
        }
        Err(e) => {
            job.stale = true;
            return Err(e);
        }
    };
    match remote {
        RemoteStatus::Pending => Ok(PollOutcome::Unchanged),
        RemoteStatus::Running { completed } => {
            job.advance(JobStatus::Running {
                completed: completed.min(job.requested),
            });
            Ok(PollOutcome::Unchanged)
        }
        RemoteStatus::Failed { reason } => {
            job.advance(JobStatus::Failed { reason });
            Ok(PollOutcome::Unchanged)
        }
        RemoteStatus::Done { images } => {
            if images.len() != job.requested {
                job.advance(JobStatus::Failed {
                    reason: format!("generator returned {} of {} images", images.len(), job.requested),
                });
                return Ok(PollOutcome::Unchanged);
            }
            if let Some(i) = images.iter().position(|b| !is_png(b)) {
                job.advance(JobStatus::Failed {
                    reason: format!("image {i} is not a PNG"),
                });
                return Ok(PollOutcome::Unchanged);
            }
            job.advance(JobStatus::Running {
                completed: job.requested,
            });
            Ok(PollOutcome::Ready(images))
        }
    }
}

/// Names and embeds finished images. Needs no session, so it can run while
/// other work proceeds; `dim` is the session's fixed dimension, if any.
pub fn prepare_job_images(
    job: &GenerationJob,
    images: Vec<Vec<u8>>,
    provider: &dyn EmbeddingProvider,
    dim: Option<usize>,
) -> Result<Vec<PreparedImage>, GenerationError> {
    let named: Vec<(ImageId, Vec<u8>)> = images
        .into_iter()
        .enumerate()
        .map(|(k, b)| (ImageId::new(format!("{}_{k}", job.job_id)), b))
        .collect();
    Ok(prepare_images(named, None, Some(provider), dim)?.0)
}

/// Stores prepared images for the job's node, then marks the job done. A job
/// whose node has been removed fails instead.
pub fn finish_job(
    session: &mut Session,
    dir: &Path,
    job: &mut GenerationJob,
    prepared: &[PreparedImage],
) -> Result<(), GenerationError> {
    if job.status.is_terminal() {
        return Ok(());
    }
    if !session.tree().contains(job.node_id) {
        job.advance(JobStatus::Failed {
            reason: format!("node {} was removed", job.node_id),
        });
        return Ok(());
    }
    job.image_ids = add_test_images(session, dir, job.node_id, &job.prompt, prepared)?;
    job.advance(JobStatus::Done);
    Ok(())
}

/// Embeds and stores finished images, then marks the job done. On error the
/// job keeps its status so a later poll can retry.
pub fn complete_job(
    session: &mut Session,
    dir: &Path,
    job: &mut GenerationJob,
    images: Vec<Vec<u8>>,
    provider: &dyn EmbeddingProvider,
) -> Result<(), GenerationError> {
    if job.status.is_terminal() || !session.tree().contains(job.node_id) {
        return finish_job(session, dir, job, &[]);
    }
    let prepared = prepare_job_images(job, images, provider, session.config().dim)?;
    finish_job(session, dir, job, &prepared)
}

/// Polls once and ingests if the remote job has finished.
pub fn poll(
    session: &mut Session,
    dir: &Path,
    job: &mut GenerationJob,
    generator: &dyn ImageGenerator,
    provider: &dyn EmbeddingProvider,
) -> Result<(), GenerationError> {
    if let PollOutcome::Ready(images) = poll_remote(job, generator)? {
        complete_job(session, dir, job, images, provider)?;
    }
    Ok(())
}

#[derive(Debug)]
struct MockJob {
    prompt: String,
    count: usize,
    polls: usize,
}

/// Deterministic in-process generator. Each status query advances a job by
/// `step` images; prompts containing `fail_marker` fail once they start.
#[derive(Debug)]
pub struct MockGenerator {
    step: usize,
    fail_marker: Option<String>,
    size: u32,
    jobs: Mutex<HashMap<String, MockJob>>,
    next: Mutex<u64>,
}

impl Default for MockGenerator {
    fn default() -> Self {
        Self::new(1)
    }
}

impl MockGenerator {
    pub fn new(step: usize) -> Self {
        Self {
            step: step.max(1),
            fail_marker: None,
            size: 16,
            jobs: Mutex::new(HashMap::new()),
            next: Mutex::new(0),
        }
    }

    pub fn failing_on(mut self, marker: impl Into<String>) -> Self {
        self.fail_marker = Some(marker.into());
        self
    }

    /// The `k`-th image for `prompt`; identical across runs.
    pub fn image(&self, prompt: &str, k: usize) -> Vec<u8> {
        let digest = Sha256::digest(prompt.as_bytes());
        let mut seed = [0u8; 8];
        seed.copy_from_slice(&digest[..8]);
        noise_png(u64::from_le_bytes(seed) ^ k as u64, self.size, self.size)
    }
}

impl ImageGenerator for MockGenerator {
    fn submit(&self, prompt: &str, count: usize) -> Result<String, GenerationError> {
        let mut next = self.next.lock().expect("mock counter");
        *next += 1;
        let id = format!("mock-{next}");
        self.jobs.lock().expect("mock jobs").insert(
            id.clone(),
            MockJob {
                prompt: prompt.to_owned(),
                count,
                polls: 0,
            },
        );
        Ok(id)
    }

    fn status(&self, remote_id: &str) -> Result<RemoteStatus, GenerationError> {
        let mut jobs = self.jobs.lock().expect("mock jobs");
        let job = jobs
            .get_mut(remote_id)
            .ok_or_else(|| GenerationError::UnknownJob(remote_id.to_owned()))?;
        let reported = job.polls;
        job.polls += 1;
        if reported == 0 {
            return Ok(RemoteStatus::Pending);
        }
        if let Some(marker) = &self.fail_marker {
            if job.prompt.contains(marker.as_str()) {
                return Ok(RemoteStatus::Failed {
                    reason: "mock failure".into(),
                });
            }
        }
        let completed = (reported * self.step).min(job.count);
        if completed < job.count {
            return Ok(RemoteStatus::Running { completed });
        }
        Ok(RemoteStatus::Done {
            images: (0..job.count).map(|k| self.image(&job.prompt, k)).collect(),
        })
    }
}
