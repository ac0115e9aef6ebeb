use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use qafel::protocol::{
    client_compress, ClientState, ClientUpdate, HyperParams, ServerState, SyncMode, SyncPayload,
};
use qafel::{compression_parameter, quantize, ParameterVector, QuantizerSpec};

fn gaussian(rng: &mut ChaCha20Rng, d: usize, scale: f64) -> ParameterVector {
    (0..d)
        .map(|_| (scale * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect::<Vec<_>>()
        .into()
}

fn hp(k: usize, mode: SyncMode) -> HyperParams {
    HyperParams {
        eta_g: 0.7,
        eta_l: vec![0.1],
        buffer_size: k,
        momentum: 0.4,
        staleness_scaling: true,
        mode,
    }
}

fn dense_update(delta: &ParameterVector, start_version: u64) -> ClientUpdate {
    client_compress(0, start_version, delta, &QuantizerSpec::Identity, &mut ChaCha20Rng::seed_from_u64(0)).unwrap()
}

/// Runs `steps` server steps with random dense updates; returns the server and
/// every correction it produced.
fn drive(
    q_server: &QuantizerSpec,
    mode: SyncMode,
    d: usize,
    k: usize,
    steps: usize,
    seed: u64,
) -> (ServerState, Vec<qafel::QuantizedMessage>) {
    let hp = hp(k, mode);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut server = ServerState::new(gaussian(&mut rng, d, 1.0), mode);
    let mut log = Vec::new();
    for _ in 0..steps {
        for _ in 0..k {
            let v = rng.gen_range(0..=server.step);
            let delta = gaussian(&mut rng, d, 0.3);
            server.receive(&dense_update(&delta, v), &hp).unwrap();
        }
        log.push(server.flush(q_server, &hp, &mut rng).unwrap());
    }
    (server, log)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_server_tracks_x_to_rounding(d in 1usize..40, k in 1usize..5, steps in 1usize..30, seed in any::<u64>()) {
        let mode = SyncMode::Broadcast;
        let hp = hp(k, mode);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut server = ServerState::new(gaussian(&mut rng, d, 1.0), mode);
        for _ in 0..steps {
            for _ in 0..k {
                let delta = gaussian(&mut rng, d, 0.3);
                server.receive(&dense_update(&delta, server.step), &hp).unwrap();
            }
            let before = server.x_hat.clone();
            server.flush(&QuantizerSpec::Identity, &hp, &mut rng).unwrap();
            for i in 0..d {
                let (x, h, b) = (server.x[i], server.x_hat[i], before[i]);
                // x̂ + fl(x − x̂) is exact under Sterbenz, otherwise one rounding away
                let tol = 2.0 * f32::EPSILON * x.abs().max(b.abs()).max((x - b).abs());
                prop_assert!((x - h).abs() <= tol, "coord {}: x {} x̂ {}", i, x, h);
                if b != 0.0 && x.signum() == b.signum() && x.abs() <= 2.0 * b.abs() && b.abs() <= 2.0 * x.abs() {
                    prop_assert_eq!(x.to_bits(), h.to_bits());
                }
            }
        }
    }

    #[test]
    fn catch_up_matches_broadcast_replay(
        steps in 1usize..25,
        c_max in 1usize..10,
        lag_frac in 0.0f64..=1.0,
        bits in 2u32..9,
        seed in any::<u64>(),
    ) {
        let d = 12;
        let q = QuantizerSpec::Qsgd { bits };
        let (bserver, corrections) = drive(&q, SyncMode::Broadcast, d, 2, steps, seed);
        let (nserver, _) = drive(&q, SyncMode::NonBroadcast { c_max }, d, 2, steps, seed);
        prop_assert!(bserver.x_hat.bit_eq(&nserver.x_hat));
        prop_assert!(nserver.stored_updates() <= c_max);

        // a replica that stopped listening at `version`, brought up to date both ways
        let version = (lag_frac * steps as f64) as u64;
        let x0 = {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            gaussian(&mut rng, d, 1.0)
        };
        let mut replica = ClientState::new(0, x0);
        for (i, q) in corrections.iter().take(version as usize).enumerate() {
            replica.apply_broadcast(q, i as u64 + 1).unwrap();
        }
        let mut by_broadcast = replica.clone();
        for (i, q) in corrections.iter().enumerate().skip(version as usize) {
            by_broadcast.apply_broadcast(q, i as u64 + 1).unwrap();
        }
        let payload = nserver.sync(version).unwrap();
        let lag = steps as u64 - version;
        match &payload {
            SyncPayload::UpToDate => prop_assert_eq!(lag, 0),
            SyncPayload::Corrections { messages, .. } => {
                prop_assert!(lag <= c_max as u64);
                prop_assert_eq!(messages.len() as u64, lag);
            }
            SyncPayload::Snapshot { .. } => prop_assert!(lag > c_max as u64),
        }
        let mut by_sync = replica;
        by_sync.apply_sync(&payload).unwrap();
        prop_assert!(by_sync.hidden_copy.bit_eq(&by_broadcast.hidden_copy));
        prop_assert!(by_sync.hidden_copy.bit_eq(&bserver.x_hat));
        prop_assert_eq!(by_sync.hidden_version, steps as u64);
    }
}

#[test]
fn hidden_state_residual_contracts() {
    // residual left by one correction x̂ ← x̂ + Q(x − x̂)
    let d = 16;
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    for spec in ["qsgd:8", "qsgd:4", "topk:4", "randk:4"] {
        let spec: QuantizerSpec = spec.parse().unwrap();
        let residual = gaussian(&mut rng, d, 1.0);
        let ratios: Vec<f64> = (0..4000)
            .map(|_| {
                let q = quantize(&spec, &residual, &mut rng).unwrap();
                let moved = match spec {
                    QuantizerSpec::RandK { .. } => q.dequantize_unscaled(),
                    _ => q.dequantize(),
                };
                residual.sub(&moved).norm_sq() / residual.norm_sq()
            })
            .collect();
        let n = ratios.len() as f64;
        let mean = ratios.iter().sum::<f64>() / n;
        let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let bound = 1.0 - compression_parameter(&spec, d);
        assert!(mean <= bound + 3.0 * (var / n).sqrt(), "{spec}: {mean} > {bound}");
    }
}

#[test]
fn server_residual_shrinks_when_x_stops() {
    let d = 16;
    let mode = SyncMode::Broadcast;
    let hp = hp(1, mode);
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let mut server = ServerState::new(ParameterVector::zeros(d), mode);
    server.receive(&dense_update(&gaussian(&mut rng, d, 1.0), 0), &hp).unwrap();
    let q = QuantizerSpec::Qsgd { bits: 6 };
    server.flush(&q, &hp, &mut rng).unwrap();
    let mut hp_still = hp.clone();
    hp_still.momentum = 0.0;
    let start = server.x.sub(&server.x_hat).norm_sq();
    for _ in 0..40 {
        server.receive(&dense_update(&ParameterVector::zeros(d), server.step), &hp_still).unwrap();
        server.flush(&q, &hp_still, &mut rng).unwrap();
    }
    let end = server.x.sub(&server.x_hat).norm_sq();
    assert!(end < 1e-6 * start.max(1e-30), "residual {start} -> {end}");
}

#[test]
fn qsgd4_client_updates_are_unbiased() {
    let d = 8;
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let delta = gaussian(&mut rng, d, 1.0);
    let draws = 10_000;
    let mut sum = vec![0.0f64; d];
    let mut sum_sq = vec![0.0f64; d];
    for _ in 0..draws {
        let up = client_compress(3, 0, &delta, &QuantizerSpec::Qsgd { bits: 4 }, &mut rng).unwrap();
        for (i, v) in up.message.dequantize().iter().enumerate() {
            sum[i] += f64::from(*v);
            sum_sq[i] += f64::from(*v).powi(2);
        }
    }
    let n = draws as f64;
    for i in 0..d {
        let mean = sum[i] / n;
        let se = ((sum_sq[i] / n - mean * mean).max(0.0) / (n - 1.0)).sqrt();
        assert!((mean - f64::from(delta[i])).abs() <= 4.0 * se + 1e-7, "coord {i}");
    }
}

#[test]
fn biased_client_quantizer_is_refused() {
    let delta = ParameterVector::from(vec![1.0f32, 2.0]);
    let err = client_compress(0, 0, &delta, &QuantizerSpec::TopK { k: 1 }, &mut ChaCha20Rng::seed_from_u64(0));
    assert!(err.is_err());
}
