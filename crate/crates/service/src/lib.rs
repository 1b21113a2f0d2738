//! HTTP service, job worker and command-line front end over the `ssed`
//! library: an asset store, scene specs replayed into mask sets, and
//! asynchronous generation jobs.

pub mod api;
pub mod cli;
pub mod jobs;
pub mod spec;
pub mod store;

pub use api::{router, AppState, ServiceError};
pub use jobs::{JobQueue, JobRecord, JobState, ModelGenerator, QueueConfig, SceneGenerator, Timings};
pub use spec::{MaskEdit, Placement, Pose, SceneSpec};
pub use store::Store;
