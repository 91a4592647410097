//! Job execution shared by the CLI and the HTTP service.

pub mod config;
pub mod jobs;
pub mod server;
pub mod store;

pub use config::ToolkitConfig;
pub use jobs::{execute, JobKind, JobRequest, RunContext, SchemaViolation};
pub use server::{router, serve, spawn_workers, AppState};
pub use store::{JobRecord, JobService, JobStatus};
