//! Persistent job records and the FIFO work queue.
//!
//! Layout under the storage root:
//!
//! ```text
//! jobs/<id>/record.json   current JobRecord
//! jobs/<id>/work/         artifacts of a running job
//! jobs/<id>/artifacts/    artifacts of a finished job (renamed from work/)
//! ```

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::jobs::{list_artifacts, JobKind, JobRequest};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    fn rank(self) -> u8 {
        match self {
            JobStatus::Queued => 0,
            JobStatus::Running => 1,
            JobStatus::Done | JobStatus::Failed => 2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobTimings {
    pub submitted_unix: f64,
    pub started_unix: Option<f64>,
    pub finished_unix: Option<f64>,
    pub run_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub request: JobRequest,
    pub idempotency_key: Option<String>,
    /// Artifact names, listed only once the job is done.
    pub artifact_paths: Vec<String>,
    pub timings: JobTimings,
    pub error: Option<String>,
    pub summary: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SubmitError {
    QueueFull { capacity: usize },
    /// The idempotency key already names a job with a different request.
    KeyConflict { existing: String },
    Storage(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArtifactError {
    UnknownJob,
    NotDone(JobStatus),
    UnknownArtifact,
}

#[derive(Debug, Default)]
struct State {
    records: BTreeMap<String, JobRecord>,
    by_key: HashMap<String, String>,
    queue: VecDeque<String>,
    next_seq: u64,
    closed: bool,
}

/// Job records plus the queue that workers drain.
#[derive(Debug)]
pub struct JobService {
    state: Mutex<State>,
    ready: Condvar,
    root: PathBuf,
    capacity: usize,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn seq_of(id: &str) -> Option<u64> {
    id.strip_prefix("job-")?.parse().ok()
}

impl JobService {
    /// Opens the store at `storage_root`. Jobs left running by a previous
    /// process are marked failed; queued jobs are queued again in id order.
    pub fn open(storage_root: &Path, capacity: usize) -> Result<Arc<Self>> {
        let root = storage_root.join("jobs");
        std::fs::create_dir_all(&root)?;
        let mut state = State::default();
        for entry in std::fs::read_dir(&root)? {
            let path = entry?.path().join("record.json");
            if !path.exists() {
                continue;
            }
            let mut record: JobRecord = serde_json::from_slice(&std::fs::read(&path)?)?;
            if record.status == JobStatus::Running {
                record.status = JobStatus::Failed;
                record.error = Some("worker stopped before the job finished".into());
                record.timings.finished_unix = Some(now());
                record.artifact_paths.clear();
                write_record(&root, &record)?;
            }
            if let Some(seq) = seq_of(&record.id) {
                state.next_seq = state.next_seq.max(seq);
            }
            if let Some(k) = &record.idempotency_key {
                state.by_key.insert(k.clone(), record.id.clone());
            }
            state.records.insert(record.id.clone(), record);
        }
        let queued: Vec<String> = state
            .records
            .values()
            .filter(|r| r.status == JobStatus::Queued)
            .map(|r| r.id.clone())
            .collect();
        state.queue.extend(queued);
        Ok(Arc::new(Self {
            state: Mutex::new(state),
            ready: Condvar::new(),
            root,
            capacity,
        }))
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn job_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    /// Queues a job, or returns the existing job for a repeated idempotency
    /// key. The flag is true when the job already existed.
    pub fn submit(&self, request: JobRequest, idempotency_key: Option<String>) -> Result<(String, bool), SubmitError> {
        let mut st = self.lock();
        if let Some(key) = &idempotency_key {
            if let Some(id) = st.by_key.get(key) {
                let existing = &st.records[id];
                return if existing.request == request {
                    Ok((id.clone(), true))
                } else {
                    Err(SubmitError::KeyConflict { existing: id.clone() })
                };
            }
        }
        if st.queue.len() >= self.capacity {
            return Err(SubmitError::QueueFull {
                capacity: self.capacity,
            });
        }
        st.next_seq += 1;
        let id = format!("job-{:06}", st.next_seq);
        let record = JobRecord {
            id: id.clone(),
            kind: request.kind(),
            status: JobStatus::Queued,
            request,
            idempotency_key: idempotency_key.clone(),
            artifact_paths: Vec::new(),
            timings: JobTimings {
                submitted_unix: now(),
                ..Default::default()
            },
            error: None,
            summary: None,
        };
        write_record(&self.root, &record).map_err(|e| SubmitError::Storage(e.to_string()))?;
        if let Some(k) = idempotency_key {
            st.by_key.insert(k, id.clone());
        }
        st.records.insert(id.clone(), record);
        st.queue.push_back(id.clone());
        self.ready.notify_one();
        Ok((id, false))
    }

    pub fn get(&self, id: &str) -> Option<JobRecord> {
        self.lock().records.get(id).cloned()
    }

    pub fn queued(&self) -> usize {
        self.lock().queue.len()
    }

    /// Path of a finished job's artifact.
    pub fn artifact_path(&self, id: &str, name: &str) -> Result<PathBuf, ArtifactError> {
        let st = self.lock();
        let record = st.records.get(id).ok_or(ArtifactError::UnknownJob)?;
        if record.status != JobStatus::Done {
            return Err(ArtifactError::NotDone(record.status));
        }
        if !record.artifact_paths.iter().any(|a| a == name) {
            return Err(ArtifactError::UnknownArtifact);
        }
        Ok(self.root.join(id).join("artifacts").join(name))
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut JobRecord)) -> Result<JobRecord> {
        let mut st = self.lock();
        let record = st
            .records
            .get_mut(id)
            .ok_or_else(|| Error::validation(format!("unknown job {id}")))?;
        let before = record.status;
        f(record);
        assert!(
            record.status.rank() >= before.rank(),
            "job {id} moved backwards from {before:?} to {:?}",
            record.status
        );
        write_record(&self.root, record)?;
        Ok(record.clone())
    }

    /// Blocks until a job is queued, marks it running and returns it.
    /// Returns `None` once the service is closed.
    pub fn next_job(&self) -> Option<(String, JobRequest)> {
        let mut st = self.lock();
        loop {
            if st.closed {
                return None;
            }
            if let Some(id) = st.queue.pop_front() {
                drop(st);
                let record = self
                    .update(&id, |r| {
                        r.status = JobStatus::Running;
                        r.timings.started_unix = Some(now());
                    })
                    .ok()?;
                return Some((id, record.request));
            }
            st = self.ready.wait(st).unwrap_or_else(|p| p.into_inner());
        }
    }

    /// Records a job's outcome. On success the work directory becomes the
    /// artifact directory before the record turns done.
    pub fn finish(&self, id: &str, outcome: Result<serde_json::Value>) -> Result<JobRecord> {
        let dir = self.job_dir(id);
        let result = outcome.and_then(|summary| {
            let artifacts = dir.join("artifacts");
            if artifacts.exists() {
                std::fs::remove_dir_all(&artifacts)?;
            }
            std::fs::rename(dir.join("work"), &artifacts)?;
            Ok((summary, list_artifacts(&artifacts)?))
        });
        self.update(id, |r| {
            let finished = now();
            r.timings.finished_unix = Some(finished);
            r.timings.run_seconds = r.timings.started_unix.map(|s| finished - s);
            match result {
                Ok((summary, names)) => {
                    r.status = JobStatus::Done;
                    r.summary = Some(summary);
                    r.artifact_paths = names;
                }
                Err(e) => {
                    r.status = JobStatus::Failed;
                    r.error = Some(e.to_string());
                }
            }
        })
    }

    /// Wakes workers and makes them exit.
    pub fn close(&self) {
        self.lock().closed = true;
        self.ready.notify_all();
    }
}

fn write_record(root: &Path, record: &JobRecord) -> Result<()> {
    let dir = root.join(&record.id);
    std::fs::create_dir_all(&dir)?;
    let tmp = dir.join("record.json.partial");
    std::fs::write(&tmp, serde_json::to_vec_pretty(record)?)?;
    std::fs::rename(tmp, dir.join("record.json"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::service::jobs::{ProbeMode, ProbeRequest};

    fn req(seed: u64) -> JobRequest {
        JobRequest::Probe(ProbeRequest {
            mode: ProbeMode::Sanity,
            split: crate::probing::probe::SplitSpec {
                seed,
                ..Default::default()
            },
            ..Default::default()
        })
    }

    #[test]
    fn fifo_and_idempotency() {
        let dir = tempfile::tempdir().unwrap();
        let svc = JobService::open(dir.path(), 2).unwrap();
        let (a, _) = svc.submit(req(1), Some("k".into())).unwrap();
        let (again, existed) = svc.submit(req(1), Some("k".into())).unwrap();
        assert_eq!((a.as_str(), existed), (again.as_str(), true));
        assert!(matches!(svc.submit(req(2), Some("k".into())), Err(SubmitError::KeyConflict { .. })));
        let (b, _) = svc.submit(req(3), None).unwrap();
        assert_eq!(svc.submit(req(4), None), Err(SubmitError::QueueFull { capacity: 2 }));
        assert_eq!(svc.next_job().unwrap().0, a);
        assert_eq!(svc.next_job().unwrap().0, b);
    }

    #[test]
    fn artifacts_only_after_done() {
        let dir = tempfile::tempdir().unwrap();
        let svc = JobService::open(dir.path(), 4).unwrap();
        let (id, _) = svc.submit(req(1), None).unwrap();
        assert_eq!(svc.artifact_path(&id, "x"), Err(ArtifactError::NotDone(JobStatus::Queued)));
        svc.next_job().unwrap();
        let work = svc.job_dir(&id).join("work");
        std::fs::create_dir_all(&work).unwrap();
        std::fs::write(work.join("x"), b"1").unwrap();
        let rec = svc.finish(&id, Ok(serde_json::json!({}))).unwrap();
        assert_eq!(rec.status, JobStatus::Done);
        assert_eq!(rec.artifact_paths, vec!["x".to_string()]);
        assert!(svc.artifact_path(&id, "x").unwrap().exists());
        assert_eq!(svc.artifact_path("job-999999", "x"), Err(ArtifactError::UnknownJob));
    }

    #[test]
    fn restart_fails_interrupted_jobs_and_requeues_waiting_ones() {
        let dir = tempfile::tempdir().unwrap();
        let (running, waiting) = {
            let svc = JobService::open(dir.path(), 4).unwrap();
            let (a, _) = svc.submit(req(1), None).unwrap();
            let (b, _) = svc.submit(req(2), None).unwrap();
            svc.next_job().unwrap();
            std::fs::create_dir_all(svc.job_dir(&a).join("work")).unwrap();
            (a, b)
        };
        let svc = JobService::open(dir.path(), 4).unwrap();
        let rec = svc.get(&running).unwrap();
        assert_eq!(rec.status, JobStatus::Failed);
        assert!(rec.artifact_paths.is_empty());
        assert_eq!(svc.next_job().unwrap().0, waiting);
        let (c, _) = svc.submit(req(3), None).unwrap();
        assert_eq!(c, "job-000003");
    }
}
