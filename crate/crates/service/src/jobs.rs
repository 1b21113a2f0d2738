//! Generation jobs: a bounded FIFO queue drained by worker threads, with every
//! state change persisted before it becomes visible.

use std::collections::{HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use ssed::autoencoder::TriplaneAutoencoder;
use ssed::diffusion::{generate_scene, DiffusionModel, SamplerConfig};
use ssed::trimask::SceneMaskSet;
use ssed::voxel::VoxelGrid;

use crate::spec::SceneSpec;
use crate::store::{Store, StoreError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

/// Wall-clock seconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    /// One entry per reverse step.
    pub steps: Vec<f64>,
    pub decode: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    /// Submission order.
    pub seq: u64,
    pub state: JobState,
    pub sampler: SamplerConfig,
    pub seed: u64,
    pub maskset: String,
    #[serde(default)]
    pub spec: Option<SceneSpec>,
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub timings: Option<Timings>,
    #[serde(default)]
    pub error: Option<String>,
}

/// Turns a mask set into a scene; `on_step` is called after each reverse step.
pub trait SceneGenerator: Send + Sync {
    fn generate(&self, set: &SceneMaskSet, sampler: &SamplerConfig, on_step: &mut dyn FnMut(usize)) -> Result<VoxelGrid, String>;
}

/// Autoencoder plus diffusion checkpoint.
pub struct ModelGenerator {
    pub ae: TriplaneAutoencoder<f32>,
    pub diffusion: DiffusionModel,
}

impl ModelGenerator {
    pub fn new(ae: TriplaneAutoencoder<f32>, diffusion: DiffusionModel) -> Result<Self, String> {
        diffusion.check_autoencoder(&ae).map_err(|e| e.to_string())?;
        Ok(Self { ae, diffusion })
    }

    /// Voxel dims of the generated scenes.
    pub fn grid_dims(&self) -> [usize; 3] {
        self.diffusion.check_autoencoder(&self.ae).expect("checked in new")
    }
}

impl SceneGenerator for ModelGenerator {
    fn generate(&self, set: &SceneMaskSet, sampler: &SamplerConfig, on_step: &mut dyn FnMut(usize)) -> Result<VoxelGrid, String> {
        let mut obs = |i: usize, _: &ssed::numerics::Tensor<f32>| on_step(i);
        generate_scene(set, &self.diffusion, &self.ae, sampler, Some(&mut obs)).map_err(|e| e.to_string())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum QueueError {
    #[error("job queue is full ({0} pending)")]
    Full(usize),
    #[error("no generator configured")]
    NoGenerator,
    #[error(transparent)]
    Store(#[from] StoreError),
}

struct State {
    pending: VecDeque<String>,
    records: HashMap<String, JobRecord>,
    next_seq: u64,
    shutdown: bool,
}

struct Shared {
    state: Mutex<State>,
    wake: Condvar,
    store: Arc<Store>,
    generator: Option<Arc<dyn SceneGenerator>>,
    capacity: usize,
}

pub struct JobQueue {
    shared: Arc<Shared>,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

#[derive(Clone, Copy, Debug)]
pub struct QueueConfig {
    pub workers: usize,
    pub capacity: usize,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self { workers: 1, capacity: 64 }
    }
}

impl JobQueue {
    /// Reloads persisted jobs: queued ones run again in submission order,
    /// running ones were interrupted and are marked failed.
    pub fn start(store: Arc<Store>, generator: Option<Arc<dyn SceneGenerator>>, cfg: QueueConfig) -> Result<Self, QueueError> {
        let mut loaded: Vec<JobRecord> = store.load_jobs()?;
        loaded.sort_by_key(|r| r.seq);
        let mut state = State { pending: VecDeque::new(), records: HashMap::new(), next_seq: 0, shutdown: false };
        for mut r in loaded {
            state.next_seq = state.next_seq.max(r.seq + 1);
            match r.state {
                JobState::Queued => state.pending.push_back(r.id.clone()),
                JobState::Running => {
                    r.state = JobState::Failed;
                    r.error = Some("interrupted by service restart".into());
                    store.put_job(&r.id, &r)?;
                }
                _ => {}
            }
            state.records.insert(r.id.clone(), r);
        }
        let shared = Arc::new(Shared {
            state: Mutex::new(state),
            wake: Condvar::new(),
            store,
            generator,
            capacity: cfg.capacity.max(1),
        });
        let workers = if shared.generator.is_some() {
            (0..cfg.workers.max(1))
                .map(|i| {
                    let s = shared.clone();
                    std::thread::Builder::new().name(format!("job-worker-{i}")).spawn(move || worker(s)).expect("spawn worker")
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self { shared, workers: Mutex::new(workers) })
    }

    pub fn has_generator(&self) -> bool {
        self.shared.generator.is_some()
    }

    pub fn submit(&self, maskset: String, spec: Option<SceneSpec>, mut sampler: SamplerConfig, seed: Option<u64>) -> Result<JobRecord, QueueError> {
        if self.shared.generator.is_none() {
            return Err(QueueError::NoGenerator);
        }
        if let Some(s) = seed {
            sampler.seed = s;
        }
        let mut st = self.shared.state.lock().unwrap();
        if st.pending.len() >= self.shared.capacity {
            return Err(QueueError::Full(st.pending.len()));
        }
        let seq = st.next_seq;
        let record = JobRecord {
            id: format!("job-{seq:06}"),
            seq,
            state: JobState::Queued,
            sampler,
            seed: sampler.seed,
            maskset,
            spec,
            output: None,
            timings: None,
            error: None,
        };
        self.shared.store.put_job(&record.id, &record)?;
        st.next_seq += 1;
        st.pending.push_back(record.id.clone());
        st.records.insert(record.id.clone(), record.clone());
        self.shared.wake.notify_all();
        Ok(record)
    }

    pub fn get(&self, id: &str) -> Option<JobRecord> {
        self.shared.state.lock().unwrap().records.get(id).cloned()
    }

    /// All jobs in submission order.
    pub fn list(&self) -> Vec<JobRecord> {
        let mut v: Vec<_> = self.shared.state.lock().unwrap().records.values().cloned().collect();
        v.sort_by_key(|r| r.seq);
        v
    }

    pub fn pending(&self) -> usize {
        self.shared.state.lock().unwrap().pending.len()
    }

    /// Blocks until `id` is done or failed.
    pub fn wait(&self, id: &str) -> Option<JobRecord> {
        let mut st = self.shared.state.lock().unwrap();
        loop {
            let r = st.records.get(id)?;
            if matches!(r.state, JobState::Done | JobState::Failed) {
                return Some(r.clone());
            }
            st = self.shared.wake.wait(st).unwrap();
        }
    }

    /// Lets workers finish their current job, then joins them. Jobs still
    /// queued stay persisted for the next start.
    pub fn shutdown(&self) {
        self.shared.state.lock().unwrap().shutdown = true;
        self.shared.wake.notify_all();
        for h in self.workers.lock().unwrap().drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for JobQueue {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn update(shared: &Shared, id: &str, f: impl FnOnce(&mut JobRecord)) {
    let mut st = shared.state.lock().unwrap();
    if let Some(r) = st.records.get_mut(id) {
        f(r);
        if let Err(e) = shared.store.put_job(id, r) {
            tracing::error!(job = id, error = %e, "persisting job record failed");
        }
    }
    drop(st);
    shared.wake.notify_all();
}

fn worker(shared: Arc<Shared>) {
    let generator = shared.generator.clone().expect("workers only run with a generator");
    loop {
        let (id, maskset, sampler) = {
            let mut st = shared.state.lock().unwrap();
            loop {
                if st.shutdown {
                    return;
                }
                if let Some(id) = st.pending.pop_front() {
                    let r = &st.records[&id];
                    let job = (id.clone(), r.maskset.clone(), r.sampler);
                    break job;
                }
                st = shared.wake.wait(st).unwrap();
            }
        };
        update(&shared, &id, |r| r.state = JobState::Running);
        tracing::info!(job = %id, "running");
        let start = Instant::now();
        let mut steps = Vec::with_capacity(sampler.steps);
        let mut last = start;
        let result = catch_unwind(AssertUnwindSafe(|| -> Result<String, String> {
            let set = shared.store.get_maskset(&maskset).map_err(|e| e.to_string())?;
            let grid = generator.generate(&set, &sampler, &mut |_| {
                let now = Instant::now();
                steps.push((now - last).as_secs_f64());
                last = now;
            })?;
            shared.store.put_scene(&grid).map_err(|e| e.to_string())
        }))
        .unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("worker panicked: {}", msg.unwrap_or_default()))
        });
        let total = start.elapsed().as_secs_f64();
        let decode = (total - steps.iter().sum::<f64>()).max(0.0);
        match result {
            Ok(scene) => {
                tracing::info!(job = %id, total, "done");
                update(&shared, &id, |r| {
                    r.state = JobState::Done;
                    r.output = Some(scene);
                    r.timings = Some(Timings { steps, decode, total });
                })
            }
            Err(e) => {
                tracing::warn!(job = %id, error = %e, "failed");
                update(&shared, &id, |r| {
                    r.state = JobState::Failed;
                    r.error = Some(e);
                })
            }
        }
    }
}
