//! Discrete-event simulation of buffered asynchronous training.
//!
//! Training jobs arrive at exactly constant spacing `1/λ`. Each job takes a
//! client identity, synchronizes that client's hidden-state replica, trains from
//! it and uploads after a half-normal duration. At most `M` jobs train at once;
//! arrivals beyond the cap wait in a FIFO queue until a slot frees. The server
//! buffers uploads and steps every `K` of them.
//!
//! Job `j` draws its duration, local gradients, client quantizer noise and (in
//! uniform assignment mode) its client identity from streams indexed by `j`;
//! server step `t` draws from the server-quantizer stream indexed by `t`.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{
    client_compress, ClientState, ClientUpdate, HyperParams, ProtocolError, ServerState, SyncMode,
};
use crate::quantizers::{QuantizedMessage, QuantizerSpec};
use crate::seed::{index_from_u64, SeedStreams, Stream};
use crate::tasks::Task;
use crate::vector::ParameterVector;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("run diverged at step {step} (sim time {sim_time}): {source}")]
    Diverged {
        step: u64,
        sim_time: f64,
        source: ProtocolError,
    },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Client arrival and training-time model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayModel {
    /// Half-normal scale of the training duration.
    pub sigma: f64,
    /// Arrivals per unit of simulated time.
    pub arrival_rate: f64,
    /// Maximum number of jobs training at once.
    pub concurrency: usize,
}

impl DelayModel {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(SimError::InvalidConfig(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.arrival_rate.is_finite() && self.arrival_rate > 0.0) {
            return Err(SimError::InvalidConfig(format!(
                "arrival rate must be positive, got {}",
                self.arrival_rate
            )));
        }
        if self.concurrency == 0 {
            return Err(SimError::InvalidConfig(
                "concurrency must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn mean_duration(&self) -> f64 {
        self.sigma * (2.0 / std::f64::consts::PI).sqrt()
    }
}

/// `|z|·σ` for a standard normal `z`.
pub fn sample_duration<R: Rng + ?Sized>(model: &DelayModel, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    z.abs() * model.sigma
}

/// How a job picks the task client whose data it trains on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientAssignment {
    #[default]
    RoundRobin,
    Uniform,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordOptions {
    /// Keep `x^t` and `x̂^t` for every step.
    pub models: bool,
    /// Keep the piecewise-constant in-flight job count.
    pub inflight: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub hp: HyperParams,
    pub q_client: QuantizerSpec,
    pub q_server: QuantizerSpec,
    pub delay: DelayModel,
    pub t_max: u64,
    pub target_loss: Option<f64>,
    pub assignment: ClientAssignment,
    pub record: RecordOptions,
}

impl SimConfig {
    pub fn validate(&self, task: &Task) -> Result<(), SimError> {
        self.hp.validate()?;
        self.delay.validate()?;
        if self.t_max == 0 {
            return Err(SimError::InvalidConfig("T_max must be at least 1".into()));
        }
        if !self.q_client.unbiased() {
            return Err(ProtocolError::BiasedClientQuantizer(self.q_client).into());
        }
        for q in [&self.q_client, &self.q_server] {
            q.validate(task.dim()).map_err(ProtocolError::from)?;
        }
        if let SyncMode::NonBroadcast { c_max: 0 } = self.hp.mode {
            return Err(SimError::InvalidConfig("c_max must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum EventKind {
    Arrival { job: u64 },
    UploadComplete { job: u64 },
}

/// A scheduled event; processed in `(time, seq)` order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEvent {
    pub time: f64,
    pub seq: u64,
    kind: EventKind,
}

impl Eq for SimEvent {}

impl Ord for SimEvent {
    // Reversed so that `BinaryHeap` pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// One row per server step, plus the initial row `t = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub t: u64,
    pub sim_time: f64,
    pub uploads: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub grad_norm_sq: f64,
    pub loss: f64,
    /// Staleness statistics of the `K` updates applied in this step.
    pub mean_staleness: f64,
    pub max_staleness: u64,
    /// Mean of `grad_norm_sq` over rows `0..=t`.
    pub running_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub job: u64,
    pub client: usize,
    pub start_version: u64,
    /// Server step at the time the update was received.
    pub received_at: u64,
    pub staleness: u64,
    pub arrival_time: f64,
    pub start_time: f64,
    pub completion_time: f64,
    pub upload_bits: u64,
}

/// Hidden state a job started training from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenRecord {
    pub job: u64,
    pub client: usize,
    pub version: u64,
    pub fingerprint: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceEvent {
    Start(u64),
    Complete(u64),
}

/// Order in which jobs started and completed. It does not depend on `K`, so
/// one trace can be replayed under different buffer sizes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionTrace {
    pub events: Vec<TraceEvent>,
}

/// Per-update staleness for the updates of `trace`, in completion order, as a
/// server with buffer size `k` would observe it.
pub fn replay_staleness(trace: &CompletionTrace, k: usize) -> Vec<u64> {
    assert!(k >= 1, "buffer size must be at least 1");
    let k = k as u64;
    let mut completed = 0u64;
    let mut start_version = HashMap::new();
    let mut out = Vec::new();
    for ev in &trace.events {
        match *ev {
            TraceEvent::Start(job) => {
                start_version.insert(job, completed / k);
            }
            TraceEvent::Complete(job) => {
                let v = start_version
                    .remove(&job)
                    .expect("job completed before it started");
                out.push(completed / k - v);
                completed += 1;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    TargetLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
    pub updates: Vec<UpdateRecord>,
    pub hidden: Vec<HiddenRecord>,
    /// Training starts whose replica differed from the server's `x̂`.
    pub coherence_violations: u64,
    pub trace: CompletionTrace,
    /// Server steps, each producing one correction `q^t`.
    pub broadcasts: u64,
    pub broadcast_bits: u64,
    /// Downlink traffic actually sent: every `q^t` once in broadcast mode, the
    /// catch-up payloads in non-broadcast mode.
    pub down_bits: u64,
    pub down_messages: u64,
    /// Uploads when the loss first reached the target, if it did.
    pub uploads_to_target: Option<u64>,
    pub stop: StopReason,
    /// Server model when the run stopped.
    pub final_model: ParameterVector,
    pub models: Vec<ParameterVector>,
    pub hidden_states: Vec<ParameterVector>,
    /// `(time, jobs in flight)` after every change.
    pub inflight: Vec<(f64, usize)>,
}

impl MetricsLog {
    pub fn steps(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.t)
    }

    /// Time-averaged number of jobs in flight over `[from, to]`.
    pub fn mean_inflight(&self, from: f64, to: f64) -> Option<f64> {
        if self.inflight.is_empty() || to <= from {
            return None;
        }
        let mut area = 0.0;
        for (i, &(t, n)) in self.inflight.iter().enumerate() {
            let end = self.inflight.get(i + 1).map_or(to, |e| e.0);
            let (a, b) = (t.max(from), end.min(to));
            if b > a {
                area += (b - a) * n as f64;
            }
        }
        Some(area / (to - from))
    }
}

/// Exact staleness of every applied update, in order of application.
pub fn staleness_trace(log: &MetricsLog) -> Vec<u64> {
    log.updates.iter().map(|u| u.staleness).collect()
}

struct Job {
    client: usize,
    arrival_time: f64,
    start_time: f64,
    update: ClientUpdate,
}

struct Engine<'a> {
    task: &'a Task,
    cfg: &'a SimConfig,
    seeds: SeedStreams,
    server: ServerState,
    clients: Vec<ClientState>,
    /// Every `q^t` in broadcast mode; replicas catch up from it lazily.
    broadcast_log: Vec<QuantizedMessage>,
    events: BinaryHeap<SimEvent>,
    seq: u64,
    deferred: VecDeque<(u64, f64)>,
    in_flight: HashMap<u64, Job>,
    active: usize,
    now: f64,
    uploads: u64,
    bytes_up: u64,
    bytes_down: u64,
    step_staleness: Vec<u64>,
    grad_sum: f64,
    log: MetricsLog,
}

impl<'a> Engine<'a> {
    fn push(&mut self, time: f64, kind: EventKind) {
        self.events.push(SimEvent {
            time,
            seq: self.seq,
            kind,
        });
        self.seq += 1;
    }

    fn arrival_time(&self, job: u64) -> f64 {
        job as f64 / self.cfg.delay.arrival_rate
    }

    fn record_inflight(&mut self) {
        if self.cfg.record.inflight {
            self.log.inflight.push((self.now, self.active));
        }
    }

    fn record_row(&mut self) -> Result<f64, SimError> {
        let x = &self.server.x;
        let grad = self.task.full_gradient(x).map_err(ProtocolError::from)?;
        let grad_norm_sq = grad.norm_sq();
        let loss = self.task.loss(x);
        self.grad_sum += grad_norm_sq;
        let n = self.log.rows.len() as f64 + 1.0;
        let (mean_st, max_st) = if self.step_staleness.is_empty() {
            (0.0, 0)
        } else {
            let sum: u64 = self.step_staleness.iter().sum();
            (
                sum as f64 / self.step_staleness.len() as f64,
                *self.step_staleness.iter().max().unwrap(),
            )
        };
        self.step_staleness.clear();
        self.log.rows.push(MetricsRow {
            t: self.server.step,
            sim_time: self.now,
            uploads: self.uploads,
            bytes_up: self.bytes_up,
            bytes_down: self.bytes_down,
            grad_norm_sq,
            loss,
            mean_staleness: mean_st,
            max_staleness: max_st,
            running_r: self.grad_sum / n,
        });
        if self.cfg.record.models {
            self.log.models.push(self.server.x.clone());
            self.log.hidden_states.push(self.server.x_hat.clone());
        }
        Ok(loss)
    }

    fn diverged(&self, source: ProtocolError) -> SimError {
        SimError::Diverged {
            step: self.server.step,
            sim_time: self.now,
            source,
        }
    }

    fn start_job(&mut self, job: u64, arrival_time: f64) -> Result<(), SimError> {
        let n = self.task.n_clients();
        let client = match self.cfg.assignment {
            ClientAssignment::RoundRobin => (job % n as u64) as usize,
            ClientAssignment::Uniform => {
                index_from_u64(self.seeds.rng(Stream::Arrivals, job).next_u64(), n)
            }
        };
        // bring the replica up to the server's current version
        match self.cfg.hp.mode {
            SyncMode::Broadcast => {
                let c = &mut self.clients[client];
                for v in c.hidden_version..self.server.step {
                    c.apply_broadcast(&self.broadcast_log[v as usize], v + 1)?;
                }
            }
            SyncMode::NonBroadcast { .. } => {
                let c = &mut self.clients[client];
                let payload = self.server.sync(c.hidden_version)?;
                self.bytes_down += payload.bytes();
                self.log.down_bits += payload.bits();
                self.log.down_messages += payload.messages().len() as u64;
                c.apply_sync(&payload)?;
            }
        }
        let (version, fingerprint, coherent) = {
            let c = &self.clients[client];
            (
                c.hidden_version,
                c.hidden_copy.fingerprint(),
                c.hidden_version == self.server.step && c.hidden_copy.bit_eq(&self.server.x_hat),
            )
        };
        if !coherent {
            self.log.coherence_violations += 1;
        }
        self.log.hidden.push(HiddenRecord {
            job,
            client,
            version,
            fingerprint,
        });
        let c = &self.clients[client];

        let mut grad_rng = self.seeds.rng(Stream::Gradients, job);
        let delta = c
            .local_train(self.task, &self.cfg.hp, &mut grad_rng)
            .map_err(|e| self.diverged(e))?;
        let mut q_rng = self.seeds.rng(Stream::ClientQuantizer, job);
        let update = client_compress(
            client,
            c.hidden_version,
            &delta,
            &self.cfg.q_client,
            &mut q_rng,
        )?;
        let duration =
            sample_duration(&self.cfg.delay, &mut self.seeds.rng(Stream::Durations, job));

        self.active += 1;
        self.record_inflight();
        self.log.trace.events.push(TraceEvent::Start(job));
        self.in_flight.insert(
            job,
            Job {
                client,
                arrival_time,
                start_time: self.now,
                update,
            },
        );
        self.push(self.now + duration, EventKind::UploadComplete { job });
        Ok(())
    }

    /// Returns `Some` once the run should stop.
    fn complete_job(&mut self, job: u64) -> Result<Option<StopReason>, SimError> {
        let Job {
            client,
            arrival_time,
            start_time,
            update,
        } = self
            .in_flight
            .remove(&job)
            .expect("completion for a job that is not in flight");
        self.active -= 1;
        self.record_inflight();
        self.log.trace.events.push(TraceEvent::Complete(job));

        let tau = self.server.receive(&update, &self.cfg.hp)?;
        let bits = update.message.bit_size();
        self.uploads += 1;
        self.bytes_up += update.message.byte_size();
        self.step_staleness.push(tau);
        self.log.updates.push(UpdateRecord {
            job,
            client,
            start_version: update.start_version,
            received_at: self.server.step,
            staleness: tau,
            arrival_time,
            start_time,
            completion_time: self.now,
            upload_bits: bits,
        });

        let mut stop = None;
        if self.server.buffer_count == self.cfg.hp.buffer_size {
            let mut rng = self.seeds.rng(Stream::ServerQuantizer, self.server.step);
            let q = self
                .server
                .flush(&self.cfg.q_server, &self.cfg.hp, &mut rng)
                .map_err(|e| self.diverged(e))?;
            self.log.broadcasts += 1;
            self.log.broadcast_bits += q.bit_size();
            if self.cfg.hp.mode == SyncMode::Broadcast {
                self.bytes_down += q.byte_size();
                self.log.down_bits += q.bit_size();
                self.log.down_messages += 1;
                self.broadcast_log.push(q);
            }
            let loss = self.record_row()?;
            if !loss.is_finite() {
                return Err(self.diverged(ProtocolError::NonFinite("loss")));
            }
            if let Some(target) = self.cfg.target_loss {
                if loss <= target && self.log.uploads_to_target.is_none() {
                    self.log.uploads_to_target = Some(self.uploads);
                    stop = Some(StopReason::TargetLoss);
                }
            }
            if stop.is_none() && self.server.step >= self.cfg.t_max {
                stop = Some(StopReason::MaxSteps);
            }
        }
        if stop.is_none() {
            if let Some((next, arrived)) = self.deferred.pop_front() {
                self.start_job(next, arrived)?;
            }
        }
        Ok(stop)
    }
}

/// Runs one simulation from `x⁰ = 0`.
pub fn run_simulation(task: &Task, config: &SimConfig, seed: u64) -> Result<MetricsLog, SimError> {
    run_simulation_from(task, config, ParameterVector::zeros(task.dim()), seed)
}

/// Runs one simulation from the given initial model.
pub fn run_simulation_from(
    task: &Task,
    config: &SimConfig,
    x0: ParameterVector,
    seed: u64,
) -> Result<MetricsLog, SimError> {
    config.validate(task)?;
    if x0.len() != task.dim() {
        return Err(ProtocolError::DimensionMismatch {
            expected: task.dim(),
            got: x0.len(),
        }
        .into());
    }
    let clients = (0..task.n_clients())
        .map(|n| ClientState::new(n, x0.clone()))
        .collect();
    let mut engine = Engine {
        task,
        cfg: config,
        seeds: SeedStreams::new(seed),
        server: ServerState::new(x0, config.hp.mode),
        clients,
        broadcast_log: Vec::new(),
        events: BinaryHeap::new(),
        seq: 0,
        deferred: VecDeque::new(),
        in_flight: HashMap::new(),
        active: 0,
        now: 0.0,
        uploads: 0,
        bytes_up: 0,
        bytes_down: 0,
        step_staleness: Vec::new(),
        grad_sum: 0.0,
        log: MetricsLog {
            rows: Vec::new(),
            updates: Vec::new(),
            hidden: Vec::new(),
            coherence_violations: 0,
            trace: CompletionTrace::default(),
            broadcasts: 0,
            broadcast_bits: 0,
            down_bits: 0,
            down_messages: 0,
            uploads_to_target: None,
            stop: StopReason::MaxSteps,
            final_model: ParameterVector::zeros(0),
            models: Vec::new(),
            hidden_states: Vec::new(),
            inflight: Vec::new(),
        },
    };
    engine.record_inflight();
    let initial_loss = engine.record_row()?;
    if let Some(target) = config.target_loss {
        if initial_loss <= target {
            engine.log.uploads_to_target = Some(0);
            engine.log.stop = StopReason::TargetLoss;
            engine.log.final_model = engine.server.x;
            return Ok(engine.log);
        }
    }
    engine.push(0.0, EventKind::Arrival { job: 0 });
    while let Some(ev) = engine.events.pop() {
        engine.now = ev.time;
        match ev.kind {
            EventKind::Arrival { job } => {
                engine.push(
                    engine.arrival_time(job + 1),
                    EventKind::Arrival { job: job + 1 },
                );
                if engine.active < config.delay.concurrency {
                    engine.start_job(job, ev.time)?;
                } else {
                    engine.deferred.push_back((job, ev.time));
                }
            }
            EventKind::UploadComplete { job } => {
                if let Some(reason) = engine.complete_job(job)? {
                    engine.log.stop = reason;
                    break;
                }
            }
        }
    }
    engine.log.final_model = engine.server.x;
    Ok(engine.log)
}
