//! Theory-side quantities: learning-rate conditions, the ergodic convergence
//! bound, and the empirical rate `R = (1/T) Σ_{t<T} ‖∇f(x^t)‖²`.

use serde::{Deserialize, Serialize};

use crate::simulator::MetricsLog;

/// Inputs of the convergence bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    /// Smoothness `L`.
    pub l: f64,
    /// Local gradient variance bound `σ_ℓ²`.
    pub sigma2: f64,
    /// Gradient dissimilarity bound `G`.
    pub g: f64,
    pub delta_c: f64,
    pub delta_s: f64,
    pub k: usize,
    pub t: u64,
    /// Maximum staleness `τ_max,K` under buffer size `K`.
    pub tau_max: u64,
    pub eta_g: f64,
    pub eta_l: Vec<f64>,
    /// `f(x⁰) − f*`, or a surrogate when `f*` is unknown.
    pub f_star_gap: f64,
    pub server_biased: bool,
}

impl TheoryParams {
    pub fn p(&self) -> usize {
        self.eta_l.len()
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut errs = Vec::new();
        for (name, v) in [("delta_c", self.delta_c), ("delta_s", self.delta_s)] {
            if !(v > 0.0 && v <= 1.0) {
                errs.push(format!("{name} = {v} outside (0, 1]"));
            }
        }
        for (name, v) in [
            ("L", self.l),
            ("sigma2", self.sigma2),
            ("G", self.g),
            ("eta_g", self.eta_g),
            ("F* gap", self.f_star_gap),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if self.k == 0 || self.t == 0 || self.eta_l.is_empty() {
            errs.push("K, T and P must be at least 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs.join("; "))
        }
    }
}

/// `(α_P, β_P) = (Σ η_ℓ^(p), Σ (η_ℓ^(p))²)`.
pub fn alpha_beta(eta_l: &[f64]) -> (f64, f64) {
    eta_l
        .iter()
        .fold((0.0, 0.0), |(a, b), &e| (a + e, b + e * e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phi {
    /// The finite geometric sum.
    pub exact: f64,
    /// Its closed-form bound: `1/δ_s` (unbiased) or `4/δ_s²` (biased).
    pub cap: f64,
}

/// Accumulated hidden-state lag factor `φ(T)`.
///
/// Unbiased server quantizer: `Σ_{t=1}^{T−1} (1−δ_s)^t`.
/// Biased: `(2/δ_s) Σ_{t=0}^{T−1} (1−δ_s/2)^t`.
pub fn phi(t: u64, delta_s: f64, biased: bool) -> Phi {
    let geometric = |r: f64, from: u64, to: u64| -> f64 {
        // Σ_{i=from}^{to-1} r^i
        if to <= from {
            return 0.0;
        }
        if r == 0.0 {
            return if from == 0 { 1.0 } else { 0.0 };
        }
        if (1.0 - r).abs() < 1e-12 {
            return (to - from) as f64;
        }
        let n = (to - from) as f64;
        r.powf(from as f64) * (1.0 - r.powf(n)) / (1.0 - r)
    };
    if biased {
        Phi {
            exact: 2.0 / delta_s * geometric(1.0 - delta_s / 2.0, 0, t),
            cap: 4.0 / (delta_s * delta_s),
        }
    } else {
        Phi {
            exact: geometric(1.0 - delta_s, 1, t),
            cap: 1.0 / delta_s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrVerdict {
    pub satisfied: bool,
    /// `1 − max_p LHS_p`.
    pub margin: f64,
}

/// Learning-rate condition
/// `(α_P·3L²η_g²·φ + Lη_g)(1 + (1−δ_c)/K)·P·η_ℓ^(p) ≤ 1` for every `p`, with
/// `φ` at its cap.
pub fn lr_condition(params: &TheoryParams) -> LrVerdict {
    let (alpha, _) = alpha_beta(&params.eta_l);
    let cap = phi(params.t, params.delta_s, params.server_biased).cap;
    let l = params.l;
    let front = alpha * 3.0 * l * l * params.eta_g * params.eta_g * cap + l * params.eta_g;
    let buffer = 1.0 + (1.0 - params.delta_c) / params.k as f64;
    let p = params.p() as f64;
    let max_lhs = params
        .eta_l
        .iter()
        .map(|&e| front * buffer * p * e)
        .fold(f64::NEG_INFINITY, f64::max);
    LrVerdict {
        satisfied: max_lhs <= 1.0,
        margin: 1.0 - max_lhs,
    }
}

/// Simple rule that implies [`lr_condition`]: `η_g ≤ 1/L` and every
/// `η_ℓ ≤ min(K/(2P(K+1−δ_c)), 1/(3φP))` with `φ` at its cap.
pub fn sufficient_rule(params: &TheoryParams) -> bool {
    let p = params.p() as f64;
    let k = params.k as f64;
    let cap = phi(params.t, params.delta_s, params.server_biased).cap;
    let bound = (k / (2.0 * p * (k + 1.0 - params.delta_c))).min(1.0 / (3.0 * cap * p));
    params.eta_g * params.l <= 1.0 && params.eta_l.iter().all(|&e| e <= bound)
}

/// Whether the bound uses the exact `φ(T)` or its cap.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiMode {
    #[default]
    Exact,
    Cap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    /// `2F*/(η_g T α_P)`.
    pub optimization: f64,
    /// Staleness and client drift.
    pub staleness: f64,
    /// Quantization and buffer-averaging noise.
    pub quantization: f64,
    pub total: f64,
    pub lr: LrVerdict,
}

/// Upper bound on `(1/T) Σ_{t<T} E‖∇f(x^t)‖²`, with the exact `φ(T)`.
pub fn theoretical_bound(params: &TheoryParams) -> Bound {
    theoretical_bound_with(params, PhiMode::Exact)
}

pub fn theoretical_bound_with(params: &TheoryParams, mode: PhiMode) -> Bound {
    let (alpha, beta) = alpha_beta(&params.eta_l);
    let l = params.l;
    let eg = params.eta_g;
    let k = params.k as f64;
    let p = params.p() as f64;
    let tau = params.tau_max as f64;
    let ph = phi(params.t, params.delta_s, params.server_biased);
    let phi_value = match mode {
        PhiMode::Exact => ph.exact,
        PhiMode::Cap => ph.cap,
    };

    let optimization = 2.0 * params.f_star_gap / (eg * params.t as f64 * alpha);
    // τ²((1−δ_c)/(Kτ) + 1), written so that τ = 0 is well defined
    let stale = tau * (1.0 - params.delta_c) / k + tau * tau;
    let staleness = 3.0 * l * l * beta * (eg * eg * stale + 1.0) * (params.sigma2 + p * params.g);
    let quantization = (3.0 * l * l * eg * eg * phi_value + l * eg / alpha)
        * ((2.0 - params.delta_c) / k)
        * beta
        * (params.sigma2 + 4.0 * params.g);
    Bound {
        optimization,
        staleness,
        quantization,
        total: optimization + staleness + quantization,
        lr: lr_condition(params),
    }
}

/// `R` over the first `t` rows of a log, or `None` if the log is shorter.
pub fn convergence_rate(log: &MetricsLog, t: usize) -> Option<f64> {
    if t == 0 || log.rows.len() < t {
        return None;
    }
    Some(log.rows[..t].iter().map(|r| r.grad_norm_sq).sum::<f64>() / t as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub mean: f64,
    /// Standard error of the mean across runs; 0 for a single run.
    pub std_err: f64,
    pub runs: usize,
}

/// `R` averaged over independent runs, each truncated to `t` rows.
pub fn convergence_rate_multi(logs: &[MetricsLog], t: usize) -> Option<RateEstimate> {
    let rates: Option<Vec<f64>> = logs.iter().map(|l| convergence_rate(l, t)).collect();
    let rates = rates?;
    if rates.is_empty() {
        return None;
    }
    let (mean, std) = mean_std(&rates);
    Some(RateEstimate {
        mean,
        std_err: std / (rates.len() as f64).sqrt(),
        runs: rates.len(),
    })
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CommSummary {
    pub uploads: u64,
    pub mb_uploaded: f64,
    pub mb_broadcast: f64,
    pub kb_per_upload: f64,
    pub kb_per_broadcast: f64,
}

/// Traffic totals from exact bit counts (`MB = bits / 8·10⁶`).
pub fn comm_summary(log: &MetricsLog) -> CommSummary {
    let uploads = log.updates.len() as u64;
    let up_bits: u64 = log.updates.iter().map(|u| u.upload_bits).sum();
    let per = |bits: u64, n: u64| {
        if n == 0 {
            0.0
        } else {
            bits as f64 / 8e3 / n as f64
        }
    };
    CommSummary {
        uploads,
        mb_uploaded: up_bits as f64 / 8e6,
        mb_broadcast: log.down_bits as f64 / 8e6,
        kb_per_upload: per(up_bits, uploads),
        kb_per_broadcast: per(log.down_bits, log.down_messages),
    }
}
