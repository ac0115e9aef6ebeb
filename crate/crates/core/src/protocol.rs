//! Server, client and client-background state machines.
//!
//! The server keeps its model `x`, the shared hidden state `x̂`, a buffer of
//! received client deltas and a momentum accumulator. Once `K` deltas are
//! buffered it steps
//!
//! ```text
//! d̄ = Σ w_k Δ_k / K;  u ← βu + d̄;  x ← x + η_g u
//! q = Q_s(x − x̂);  x̂ ← x̂ + q
//! ```
//!
//! and hands `q` to the clients, which apply it to their own replica of `x̂`.
//! Clients always start local training from their replica, so with identity
//! quantizers the protocol is exactly FedBuff.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantizers::{quantize, QuantizedMessage, QuantizerError, QuantizerSpec};
use crate::tasks::{Task, TaskError};
use crate::vector::ParameterVector;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("broadcast for version {got} delivered to a client at version {current}")]
    OutOfOrderBroadcast { current: u64, got: u64 },
    #[error("client requested version {requested} but the server is at step {step}")]
    VersionAhead { requested: u64, step: u64 },
    #[error("update dimension {got} does not match model dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("buffer already holds {0} updates")]
    BufferFull(usize),
    #[error("flush with {count} of {k} buffered updates")]
    PartialFlush { count: usize, k: usize },
    #[error("client quantizer {0} is biased")]
    BiasedClientQuantizer(QuantizerSpec),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("operation requires non-broadcast mode")]
    NotNonBroadcast,
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperParams(String),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

/// How clients keep their hidden-state replica in sync.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncMode {
    /// Every correction `q^t` is broadcast to all clients.
    Broadcast,
    /// Clients catch up when sampled; the server keeps the last `c_max`
    /// corrections and falls back to sending `x̂` in full.
    NonBroadcast { c_max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub eta_g: f64,
    /// Local learning rate per step; its length is the number of local steps `P`.
    pub eta_l: Vec<f64>,
    pub buffer_size: usize,
    pub momentum: f64,
    pub staleness_scaling: bool,
    pub mode: SyncMode,
}

impl HyperParams {
    pub fn local_steps(&self) -> usize {
        self.eta_l.len()
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::InvalidHyperParams(m));
        if !(self.eta_g.is_finite() && self.eta_g > 0.0) {
            return bad(format!("eta_g must be positive, got {}", self.eta_g));
        }
        if self.eta_l.is_empty() {
            return bad("at least one local step is required".into());
        }
        if let Some(e) = self.eta_l.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
            return bad(format!("local rates must be positive, got {e}"));
        }
        if self.buffer_size == 0 {
            return bad("buffer size K must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        Ok(())
    }
}

/// Weight applied to an update of staleness `tau`.
pub fn staleness_weight(tau: u64, scaling: bool) -> f64 {
    if scaling {
        1.0 / (1.0 + tau as f64).sqrt()
    } else {
        1.0
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub x: ParameterVector,
    pub x_hat: ParameterVector,
    pub buffer_sum: ParameterVector,
    pub buffer_count: usize,
    pub step: u64,
    pub momentum: ParameterVector,
    /// `(version, q)` pairs; `q` advanced `x̂` from `version − 1` to `version`.
    stored: VecDeque<(u64, QuantizedMessage)>,
    c_max: usize,
}

impl ServerState {
    pub fn new(x0: ParameterVector, mode: SyncMode) -> Self {
        let dim = x0.len();
        Self {
            x_hat: x0.clone(),
            x: x0,
            buffer_sum: ParameterVector::zeros(dim),
            buffer_count: 0,
            step: 0,
            momentum: ParameterVector::zeros(dim),
            stored: VecDeque::new(),
            c_max: match mode {
                SyncMode::Broadcast => 0,
                SyncMode::NonBroadcast { c_max } => c_max,
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn stored_updates(&self) -> usize {
        self.stored.len()
    }

    /// Adds a client update to the buffer; returns the staleness `τ` of the update.
    pub fn receive(
        &mut self,
        update: &ClientUpdate,
        hp: &HyperParams,
    ) -> Result<u64, ProtocolError> {
        if self.buffer_count >= hp.buffer_size {
            return Err(ProtocolError::BufferFull(self.buffer_count));
        }
        if update.message.dim() != self.dim() {
            return Err(ProtocolError::DimensionMismatch {
                expected: self.dim(),
                got: update.message.dim(),
            });
        }
        if update.start_version > self.step {
            return Err(ProtocolError::VersionAhead {
                requested: update.start_version,
                step: self.step,
            });
        }
        let tau = self.step - update.start_version;
        let delta = update.message.dequantize();
        let w = staleness_weight(tau, hp.staleness_scaling);
        if w == 1.0 {
            self.buffer_sum.add_assign(&delta);
        } else {
            self.buffer_sum.add_scaled(w as f32, &delta);
        }
        self.buffer_count += 1;
        Ok(tau)
    }

    /// Applies the buffered server step and produces the hidden-state correction.
    pub fn flush<R: Rng + ?Sized>(
        &mut self,
        q_server: &QuantizerSpec,
        hp: &HyperParams,
        rng: &mut R,
    ) -> Result<QuantizedMessage, ProtocolError> {
        if self.buffer_count != hp.buffer_size {
            return Err(ProtocolError::PartialFlush {
                count: self.buffer_count,
                k: hp.buffer_size,
            });
        }
        let k = hp.buffer_size as f32;
        let beta = hp.momentum as f32;
        let eta_g = hp.eta_g as f32;
        for ((u, s), x) in self
            .momentum
            .as_mut_slice()
            .iter_mut()
            .zip(self.buffer_sum.as_slice())
            .zip(self.x.as_mut_slice())
        {
            let avg = *s / k;
            *u = beta * *u + avg;
            *x += eta_g * *u;
        }
        if !self.x.is_finite() {
            return Err(ProtocolError::NonFinite("server model"));
        }
        let correction = self.x.sub(&self.x_hat);
        let q = quantize(q_server, &correction, rng)?;
        self.x_hat.add_assign(&q.dequantize());
        self.buffer_sum = ParameterVector::zeros(self.dim());
        self.buffer_count = 0;
        self.step += 1;
        if self.c_max > 0 {
            self.stored.push_back((self.step, q.clone()));
            while self.stored.len() > self.c_max {
                self.stored.pop_front();
            }
        }
        Ok(q)
    }

    /// Catch-up payload for a client whose replica is at `client_version`.
    pub fn sync(&self, client_version: u64) -> Result<SyncPayload, ProtocolError> {
        if self.c_max == 0 {
            return Err(ProtocolError::NotNonBroadcast);
        }
        if client_version > self.step {
            return Err(ProtocolError::VersionAhead {
                requested: client_version,
                step: self.step,
            });
        }
        let lag = self.step - client_version;
        if lag == 0 {
            return Ok(SyncPayload::UpToDate);
        }
        if lag <= self.c_max as u64 {
            let messages: Vec<_> = self
                .stored
                .iter()
                .filter(|(v, _)| *v > client_version)
                .map(|(_, q)| q.clone())
                .collect();
            debug_assert_eq!(messages.len() as u64, lag);
            return Ok(SyncPayload::Corrections {
                first_version: client_version + 1,
                messages,
            });
        }
        Ok(SyncPayload::Snapshot {
            version: self.step,
            state: QuantizedMessage::dense(&self.x_hat),
        })
    }
}

/// What the server sends a lagging client in non-broadcast mode.
#[derive(Debug, Clone, PartialEq)]
pub enum SyncPayload {
    UpToDate,
    /// Stored corrections for versions `first_version..=step`, in order.
    Corrections {
        first_version: u64,
        messages: Vec<QuantizedMessage>,
    },
    /// Full `x̂` as 32-bit floats.
    Snapshot {
        version: u64,
        state: QuantizedMessage,
    },
}

impl SyncPayload {
    /// Exact number of bits on the wire.
    pub fn bits(&self) -> u64 {
        match self {
            SyncPayload::UpToDate => 0,
            SyncPayload::Corrections { messages, .. } => {
                messages.iter().map(QuantizedMessage::bit_size).sum()
            }
            SyncPayload::Snapshot { state, .. } => state.bit_size(),
        }
    }

    /// Bytes on the wire, each message padded to a whole byte.
    pub fn bytes(&self) -> u64 {
        match self {
            SyncPayload::UpToDate => 0,
            SyncPayload::Corrections { messages, .. } => {
                messages.iter().map(QuantizedMessage::byte_size).sum()
            }
            SyncPayload::Snapshot { state, .. } => state.byte_size(),
        }
    }

    pub fn messages(&self) -> Vec<&QuantizedMessage> {
        match self {
            SyncPayload::UpToDate => Vec::new(),
            SyncPayload::Corrections { messages, .. } => messages.iter().collect(),
            SyncPayload::Snapshot { state, .. } => vec![state],
        }
    }
}

/// Server-side non-broadcast catch-up: the payload and its exact bit count.
pub fn nonbroadcast_sync(
    state: &ServerState,
    client_version: u64,
) -> Result<(SyncPayload, u64), ProtocolError> {
    let payload = state.sync(client_version)?;
    let bits = payload.bits();
    Ok((payload, bits))
}

/// A client's replica of the hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub hidden_copy: ParameterVector,
    pub hidden_version: u64,
}

impl ClientState {
    pub fn new(client_id: usize, x0: ParameterVector) -> Self {
        Self {
            client_id,
            hidden_copy: x0,
            hidden_version: 0,
        }
    }

    /// Background process: `x̂ ← x̂ + q` for the next version in sequence.
    pub fn apply_broadcast(
        &mut self,
        q: &QuantizedMessage,
        version: u64,
    ) -> Result<(), ProtocolError> {
        if version != self.hidden_version + 1 {
            return Err(ProtocolError::OutOfOrderBroadcast {
                current: self.hidden_version,
                got: version,
            });
        }
        if q.dim() != self.hidden_copy.len() {
            return Err(ProtocolError::DimensionMismatch {
                expected: self.hidden_copy.len(),
                got: q.dim(),
            });
        }
        self.hidden_copy.add_assign(&q.dequantize());
        self.hidden_version = version;
        Ok(())
    }

    /// Applies a non-broadcast catch-up payload.
    pub fn apply_sync(&mut self, payload: &SyncPayload) -> Result<(), ProtocolError> {
        match payload {
            SyncPayload::UpToDate => Ok(()),
            SyncPayload::Corrections {
                first_version,
                messages,
            } => {
                for (i, q) in messages.iter().enumerate() {
                    self.apply_broadcast(q, first_version + i as u64)?;
                }
                Ok(())
            }
            SyncPayload::Snapshot { version, state } => {
                if *version < self.hidden_version {
                    return Err(ProtocolError::OutOfOrderBroadcast {
                        current: self.hidden_version,
                        got: *version,
                    });
                }
                self.hidden_copy = state.dequantize();
                self.hidden_version = *version;
                Ok(())
            }
        }
    }

    /// Runs `P` local SGD steps from the replica and returns `Δ = y_P − y_0`.
    pub fn local_train<R: Rng + ?Sized>(
        &self,
        task: &Task,
        hp: &HyperParams,
        rng: &mut R,
    ) -> Result<ParameterVector, ProtocolError> {
        client_local_train(&self.hidden_copy, self.client_id, task, &hp.eta_l, rng)
    }
}

/// `P` SGD steps from `y0` on `client`'s stochastic gradients; returns `y_P − y_0`.
pub fn client_local_train<R: Rng + ?Sized>(
    y0: &ParameterVector,
    client: usize,
    task: &Task,
    eta_l: &[f64],
    rng: &mut R,
) -> Result<ParameterVector, ProtocolError> {
    let mut y = y0.clone();
    for &eta in eta_l {
        let g = task.stochastic_gradient(client, &y, rng)?;
        if !g.is_finite() {
            return Err(ProtocolError::NonFinite("stochastic gradient"));
        }
        y.add_scaled(-(eta as f32), &g);
    }
    if !y.is_finite() {
        return Err(ProtocolError::NonFinite("local iterate"));
    }
    Ok(y.sub(y0))
}

/// A compressed client delta with the hidden-state version it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub start_version: u64,
    pub message: QuantizedMessage,
    pub raw_norm: f64,
}

/// Compresses a local delta with an unbiased client quantizer.
pub fn client_compress<R: Rng + ?Sized>(
    client_id: usize,
    start_version: u64,
    delta: &ParameterVector,
    q_client: &QuantizerSpec,
    rng: &mut R,
) -> Result<ClientUpdate, ProtocolError> {
    if !q_client.unbiased() {
        return Err(ProtocolError::BiasedClientQuantizer(*q_client));
    }
    Ok(ClientUpdate {
        client_id,
        start_version,
        message: quantize(q_client, delta, rng)?,
        raw_norm: delta.norm(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn hp(k: usize, beta: f64, eta_g: f64) -> HyperParams {
        HyperParams {
            eta_g,
            eta_l: vec![0.1],
            buffer_size: k,
            momentum: beta,
            staleness_scaling: true,
            mode: SyncMode::Broadcast,
        }
    }

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(0)
    }

    fn update(start_version: u64, v: &[f32]) -> ClientUpdate {
        ClientUpdate {
            client_id: 0,
            start_version,
            message: QuantizedMessage::dense(&ParameterVector::from(v.to_vec())),
            raw_norm: 0.0,
        }
    }

    #[test]
    fn single_local_step() {
        let task = Task::quadratic(vec![(vec![vec![1.0, 0.0]], vec![-1.0])]).unwrap();
        // gradient at (0, 0) is (0 + 1)·(1, 0) = (1, 0)
        let delta =
            client_local_train(&ParameterVector::zeros(2), 0, &task, &[0.1], &mut rng()).unwrap();
        assert_eq!(delta.as_slice(), &[-0.1, 0.0]);
    }

    #[test]
    fn two_step_schedule() {
        let task = Task::quadratic(vec![(vec![vec![1.0]], vec![0.0])]).unwrap();
        let delta = client_local_train(
            &ParameterVector::from(vec![1.0]),
            0,
            &task,
            &[0.1, 0.2],
            &mut rng(),
        )
        .unwrap();
        // y1 = 0.9, y2 = 0.72
        let expected = (1.0f32 - 0.1 * 1.0) - 0.2 * (1.0f32 - 0.1);
        assert_eq!(delta[0], expected - 1.0);
        assert!((f64::from(delta[0]) + 0.28).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_gives_zero_delta() {
        let task = Task::quadratic(vec![(vec![vec![1.0, 2.0]], vec![0.0])]).unwrap();
        let delta = client_local_train(
            &ParameterVector::zeros(2),
            0,
            &task,
            &[0.5, 0.5],
            &mut rng(),
        )
        .unwrap();
        assert!(delta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compress_rejects_biased_quantizer() {
        let delta = ParameterVector::from(vec![1.0, 2.0]);
        assert_eq!(
            client_compress(0, 0, &delta, &QuantizerSpec::TopK { k: 1 }, &mut rng()),
            Err(ProtocolError::BiasedClientQuantizer(QuantizerSpec::TopK {
                k: 1
            }))
        );
        let u = client_compress(0, 0, &delta, &QuantizerSpec::Identity, &mut rng()).unwrap();
        assert!(u.message.dequantize().bit_eq(&delta));
        let zero = ParameterVector::zeros(3);
        let u = client_compress(0, 0, &zero, &QuantizerSpec::Qsgd { bits: 4 }, &mut rng()).unwrap();
        assert!(u.message.dequantize().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn staleness_weights() {
        assert_eq!(staleness_weight(0, true), 1.0);
        assert_eq!(staleness_weight(3, true), 0.5);
        assert_eq!(staleness_weight(3, false), 1.0);
    }

    #[test]
    fn receive_scales_by_staleness() {
        let params = hp(4, 0.0, 1.0);
        let mut s = ServerState::new(ParameterVector::zeros(1), SyncMode::Broadcast);
        s.step = 3;
        assert_eq!(s.receive(&update(0, &[2.0]), &params).unwrap(), 3);
        assert_eq!(s.buffer_sum.as_slice(), &[1.0]);
        assert_eq!(s.receive(&update(3, &[2.0]), &params).unwrap(), 0);
        assert_eq!(s.buffer_sum.as_slice(), &[3.0]);
        assert_eq!(s.buffer_count, 2);
        assert!(matches!(
            s.receive(&update(0, &[1.0, 2.0]), &params),
            Err(ProtocolError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn flush_degenerate_sizes() {
        let params = hp(1, 0.0, 0.5);
        let mut s = ServerState::new(ParameterVector::zeros(1), SyncMode::Broadcast);
        s.receive(&update(0, &[1.0]), &params).unwrap();
        let q = s
            .flush(&QuantizerSpec::Identity, &params, &mut rng())
            .unwrap();
        assert_eq!(s.x.as_slice(), &[0.5]);
        assert_eq!(s.x_hat.as_slice(), &[0.5]);
        assert_eq!(q.dequantize().as_slice(), &[0.5]);
        assert_eq!(s.step, 1);
        assert_eq!(s.buffer_count, 0);
        assert!(matches!(
            s.receive(&update(0, &[1.0]), &params)
                .and_then(|_| s.receive(&update(0, &[1.0]), &params)),
            Err(ProtocolError::BufferFull(1))
        ));
    }

    #[test]
    fn flush_requires_full_buffer() {
        let params = hp(2, 0.0, 1.0);
        let mut s = ServerState::new(ParameterVector::zeros(1), SyncMode::Broadcast);
        s.receive(&update(0, &[1.0]), &params).unwrap();
        assert_eq!(
            s.flush(&QuantizerSpec::Identity, &params, &mut rng())
                .unwrap_err(),
            ProtocolError::PartialFlush { count: 1, k: 2 }
        );
    }

    #[test]
    fn momentum_unrolls() {
        let params = hp(1, 0.3, 2.0);
        let mut s = ServerState::new(ParameterVector::zeros(1), SyncMode::Broadcast);
        s.receive(&update(0, &[1.0]), &params).unwrap();
        s.flush(&QuantizerSpec::Identity, &params, &mut rng())
            .unwrap();
        let after_first = s.x[0];
        s.receive(&update(1, &[0.0]), &params).unwrap();
        s.flush(&QuantizerSpec::Identity, &params, &mut rng())
            .unwrap();
        assert_eq!(after_first, 2.0);
        assert_eq!(s.momentum[0], 0.3);
        assert!((s.x[0] - after_first - 0.6).abs() < 1e-6);
    }

    #[test]
    fn identity_server_keeps_hidden_state_equal() {
        let params = hp(1, 0.3, 0.7);
        let mut s = ServerState::new(
            ParameterVector::from(vec![0.1, -3.0, 1e-7]),
            SyncMode::Broadcast,
        );
        let mut r = rng();
        for i in 0..50 {
            let v = [(i as f32).sin(), 1e3 * (i as f32).cos(), -1e-9];
            s.receive(&update(s.step, &v), &params).unwrap();
            s.flush(&QuantizerSpec::Identity, &params, &mut r).unwrap();
            assert!(s.x_hat.bit_eq(&s.x), "step {i}");
        }
    }

    #[test]
    fn broadcast_replay_matches_server() {
        let params = hp(1, 0.0, 1.0);
        let x0 = ParameterVector::from(vec![0.5, -0.25, 2.0]);
        let mut s = ServerState::new(x0.clone(), SyncMode::Broadcast);
        let mut c = ClientState::new(0, x0);
        let mut r = rng();
        for i in 0..30 {
            let v = [0.3 * i as f32, -0.1, 0.05];
            s.receive(&update(s.step, &v), &params).unwrap();
            let q = s
                .flush(&QuantizerSpec::Qsgd { bits: 3 }, &params, &mut r)
                .unwrap();
            c.apply_broadcast(&q, s.step).unwrap();
            assert!(c.hidden_copy.bit_eq(&s.x_hat));
        }
    }

    #[test]
    fn broadcast_order_is_enforced() {
        let mut c = ClientState::new(0, ParameterVector::zeros(1));
        let q = QuantizedMessage::dense(&ParameterVector::zeros(1));
        c.apply_broadcast(&q, 1).unwrap();
        assert_eq!(c.hidden_version, 1);
        assert_eq!(c.hidden_copy.as_slice(), &[0.0]);
        assert_eq!(
            c.apply_broadcast(&q, 3),
            Err(ProtocolError::OutOfOrderBroadcast { current: 1, got: 3 })
        );
    }

    #[test]
    fn nonbroadcast_sync_paths() {
        let params = hp(1, 0.0, 1.0);
        let x0 = ParameterVector::from(vec![1.0, 2.0]);
        let mut s = ServerState::new(x0.clone(), SyncMode::NonBroadcast { c_max: 2 });
        let mut r = rng();
        let (p, bits) = nonbroadcast_sync(&s, 0).unwrap();
        assert_eq!((p, bits), (SyncPayload::UpToDate, 0));
        let mut sent = Vec::new();
        for i in 0..3 {
            s.receive(&update(s.step, &[i as f32, 1.0]), &params)
                .unwrap();
            sent.push(
                s.flush(&QuantizerSpec::Qsgd { bits: 4 }, &params, &mut r)
                    .unwrap(),
            );
        }
        assert_eq!(s.stored_updates(), 2);
        // lag 2 <= c_max: the two most recent corrections
        let (p, bits) = nonbroadcast_sync(&s, 1).unwrap();
        assert_eq!(p.messages(), vec![&sent[1], &sent[2]]);
        assert_eq!(bits, sent[1].bit_size() + sent[2].bit_size());
        let mut c = ClientState::new(0, x0.clone());
        c.apply_broadcast(&sent[0], 1).unwrap();
        c.apply_sync(&p).unwrap();
        assert!(c.hidden_copy.bit_eq(&s.x_hat));
        // lag 3 > c_max: dense snapshot
        let (p, bits) = nonbroadcast_sync(&s, 0).unwrap();
        assert!(matches!(p, SyncPayload::Snapshot { version: 3, .. }));
        assert_eq!(bits, 64 + 2 * 32);
        let mut c = ClientState::new(1, x0);
        c.apply_sync(&p).unwrap();
        assert!(c.hidden_copy.bit_eq(&s.x_hat));
        assert_eq!(c.hidden_version, 3);
        assert_eq!(
            nonbroadcast_sync(&s, 4).unwrap_err(),
            ProtocolError::VersionAhead {
                requested: 4,
                step: 3
            }
        );
        let b = ServerState::new(ParameterVector::zeros(1), SyncMode::Broadcast);
        assert_eq!(
            nonbroadcast_sync(&b, 0).unwrap_err(),
            ProtocolError::NotNonBroadcast
        );
    }

    #[test]
    fn hyperparameter_validation() {
        assert!(hp(1, 0.0, 1.0).validate().is_ok());
        assert!(hp(0, 0.0, 1.0).validate().is_err());
        assert!(hp(1, 1.0, 1.0).validate().is_err());
        assert!(hp(1, 0.0, -1.0).validate().is_err());
        let mut p = hp(1, 0.0, 1.0);
        p.eta_l.clear();
        assert!(p.validate().is_err());
    }
}
