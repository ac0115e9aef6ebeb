//! Compression operators and their wire format.
//!
//! A quantizer `Q` maps a vector `x` to a (possibly random) approximation with
//! `E‖Q(x) − x‖² ≤ (1 − δ)‖x‖²` for some compression parameter `δ ∈ (0, 1]`.
//! Four codecs are provided:
//!
//! * [`QuantizerSpec::Identity`]: lossless 32-bit floats, `δ = 1`.
//! * [`QuantizerSpec::Qsgd`]: stochastic rounding of `|x_i|·s/‖x‖` to an integer
//!   level in `0..=s`, with `n` bits per coordinate (one sign bit, `n − 1`
//!   magnitude bits, so `s = 2^(n−1) − 1`). Unbiased.
//! * [`QuantizerSpec::TopK`]: keeps the `k` largest-magnitude coordinates. Biased.
//! * [`QuantizerSpec::RandK`]: keeps `k` uniformly chosen coordinates scaled by
//!   `d/k`. Unbiased.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::index_from_u64;
use crate::vector::ParameterVector;

pub mod wire;

pub use wire::encoded_bits;

/// Floor applied to `δ` when the QSGD formula is not positive.
pub const DELTA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantizerError {
    #[error("sparsifier keeps {k} coordinates but the vector has dimension {dim}")]
    DimensionMismatch { k: usize, dim: usize },
    #[error("sparsifier budget k must be at least 1")]
    ZeroBudget,
    #[error("qsgd bit width {0} outside 2..=32")]
    InvalidBits(u32),
    #[error("dimension {0} does not fit the 28-bit header field")]
    DimensionTooLarge(usize),
    #[error("input vector has a non-finite coordinate at index {0}")]
    NonFinite(usize),
    #[error("corrupted message: {0}")]
    Corrupt(String),
    #[error("cannot parse quantizer {0:?}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum QuantizerSpec {
    Identity,
    Qsgd { bits: u32 },
    TopK { k: usize },
    RandK { k: usize },
}

impl QuantizerSpec {
    /// Whether `E[Q(x)] = x`.
    pub fn unbiased(&self) -> bool {
        !matches!(self, QuantizerSpec::TopK { .. })
    }

    /// Number of QSGD magnitude levels `s` for an `n`-bit code.
    pub fn qsgd_levels(bits: u32) -> u32 {
        (1u32 << (bits - 1)) - 1
    }

    /// Checks that this quantizer can be applied to a vector of dimension `dim`.
    pub fn validate(&self, dim: usize) -> Result<(), QuantizerError> {
        if dim > wire::MAX_DIM {
            return Err(QuantizerError::DimensionTooLarge(dim));
        }
        self.validate_params()?;
        match *self {
            QuantizerSpec::TopK { k } | QuantizerSpec::RandK { k } if k > dim => {
                Err(QuantizerError::DimensionMismatch { k, dim })
            }
            _ => Ok(()),
        }
    }

    /// Dimension-independent checks.
    pub fn validate_params(&self) -> Result<(), QuantizerError> {
        match *self {
            QuantizerSpec::Identity => Ok(()),
            QuantizerSpec::Qsgd { bits } if !(2..=32).contains(&bits) => {
                Err(QuantizerError::InvalidBits(bits))
            }
            QuantizerSpec::Qsgd { .. } => Ok(()),
            QuantizerSpec::TopK { k: 0 } | QuantizerSpec::RandK { k: 0 } => {
                Err(QuantizerError::ZeroBudget)
            }
            QuantizerSpec::TopK { .. } | QuantizerSpec::RandK { .. } => Ok(()),
        }
    }
}

impl fmt::Display for QuantizerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuantizerSpec::Identity => write!(f, "identity"),
            QuantizerSpec::Qsgd { bits } => write!(f, "qsgd:{bits}"),
            QuantizerSpec::TopK { k } => write!(f, "topk:{k}"),
            QuantizerSpec::RandK { k } => write!(f, "randk:{k}"),
        }
    }
}

impl FromStr for QuantizerSpec {
    type Err = QuantizerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || QuantizerError::Parse(s.to_string());
        let spec = match s.split_once(':') {
            None if s.eq_ignore_ascii_case("identity") => QuantizerSpec::Identity,
            None => return Err(bad()),
            Some((kind, arg)) => {
                let n: usize = arg.trim().parse().map_err(|_| bad())?;
                match kind.trim().to_ascii_lowercase().as_str() {
                    "qsgd" => QuantizerSpec::Qsgd {
                        bits: u32::try_from(n).map_err(|_| bad())?,
                    },
                    "topk" => QuantizerSpec::TopK { k: n },
                    "randk" => QuantizerSpec::RandK { k: n },
                    _ => return Err(bad()),
                }
            }
        };
        spec.validate_params()?;
        Ok(spec)
    }
}

impl TryFrom<String> for QuantizerSpec {
    type Error = QuantizerError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<QuantizerSpec> for String {
    fn from(spec: QuantizerSpec) -> String {
        spec.to_string()
    }
}

/// Decoded content of a message.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Dense(Vec<f32>),
    /// Signed levels `sign(x_i)·ξ_i` with `|ξ_i| ≤ s`.
    Qsgd {
        bits: u32,
        norm: f32,
        levels: Vec<i32>,
    },
    /// Kept coordinates in ascending index order.
    Sparse {
        indices: Vec<u32>,
        values: Vec<f32>,
        rescale: f32,
    },
}

/// A compressed vector together with its exact wire size.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMessage {
    pub(crate) dim: usize,
    pub(crate) payload: Payload,
}

impl QuantizedMessage {
    /// Lossless message carrying `x` as 32-bit floats.
    pub fn dense(x: &ParameterVector) -> Self {
        Self {
            dim: x.len(),
            payload: Payload::Dense(x.as_slice().to_vec()),
        }
    }

    /// Builds a message from parts, checking structural consistency.
    pub fn from_parts(dim: usize, payload: Payload) -> Result<Self, QuantizerError> {
        if dim > wire::MAX_DIM {
            return Err(QuantizerError::DimensionTooLarge(dim));
        }
        let ok = match &payload {
            Payload::Dense(v) => v.len() == dim,
            Payload::Qsgd { bits, levels, .. } => {
                (2..=32).contains(bits) && levels.len() == dim && {
                    let s = i64::from(QuantizerSpec::qsgd_levels(*bits));
                    levels.iter().all(|&l| i64::from(l).abs() <= s)
                }
            }
            Payload::Sparse {
                indices, values, ..
            } => {
                indices.len() == values.len()
                    && indices.len() <= dim
                    && indices.windows(2).all(|w| w[0] < w[1])
                    && indices.iter().all(|&i| (i as usize) < dim)
            }
        };
        if ok {
            Ok(Self { dim, payload })
        } else {
            Err(QuantizerError::Corrupt("inconsistent message parts".into()))
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    /// Exact serialized length in bits (header included, padding excluded).
    pub fn bit_size(&self) -> u64 {
        wire::encoded_bits(self)
    }

    /// Serialized length in whole bytes.
    pub fn byte_size(&self) -> u64 {
        self.bit_size().div_ceil(8)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        wire::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, QuantizerError> {
        wire::decode(bytes)
    }

    /// Reconstructs the dense vector the message represents.
    pub fn dequantize(&self) -> ParameterVector {
        match &self.payload {
            Payload::Sparse {
                indices,
                values,
                rescale,
            } => {
                let mut out = vec![0.0f32; self.dim];
                for (&i, &v) in indices.iter().zip(values) {
                    out[i as usize] = if *rescale == 1.0 {
                        v
                    } else {
                        (f64::from(v) * f64::from(*rescale)) as f32
                    };
                }
                out.into()
            }
            _ => self.dequantize_unscaled(),
        }
    }

    /// Like [`dequantize`](Self::dequantize) but ignores the sparse rescale factor,
    /// i.e. the plain projection onto the kept coordinates.
    pub fn dequantize_unscaled(&self) -> ParameterVector {
        match &self.payload {
            Payload::Dense(v) => v.clone().into(),
            Payload::Qsgd { bits, norm, levels } => {
                let s = f64::from(QuantizerSpec::qsgd_levels(*bits));
                let norm = f64::from(*norm);
                levels
                    .iter()
                    .map(|&l| {
                        if l == 0 {
                            0.0
                        } else {
                            (norm * f64::from(l) / s) as f32
                        }
                    })
                    .collect::<Vec<_>>()
                    .into()
            }
            Payload::Sparse {
                indices, values, ..
            } => {
                let mut out = vec![0.0f32; self.dim];
                for (&i, &v) in indices.iter().zip(values) {
                    out[i as usize] = v;
                }
                out.into()
            }
        }
    }
}

/// Compresses `x` according to `spec`.
///
/// Random draws per call are fixed by `(spec, dim)`: QSGD consumes `d` uniform
/// doubles, RandK consumes `k` 64-bit words, the others consume nothing.
pub fn quantize<R: Rng + ?Sized>(
    spec: &QuantizerSpec,
    x: &ParameterVector,
    rng: &mut R,
) -> Result<QuantizedMessage, QuantizerError> {
    let dim = x.len();
    spec.validate(dim)?;
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(QuantizerError::NonFinite(i));
    }
    let payload = match *spec {
        QuantizerSpec::Identity => Payload::Dense(x.as_slice().to_vec()),
        QuantizerSpec::Qsgd { bits } => qsgd(bits, x, rng),
        QuantizerSpec::TopK { k } => top_k(k, x),
        QuantizerSpec::RandK { k } => rand_k(k, x, rng),
    };
    Ok(QuantizedMessage { dim, payload })
}

/// Decodes a message into a dense vector.
pub fn dequantize(msg: &QuantizedMessage) -> ParameterVector {
    msg.dequantize()
}

fn qsgd<R: Rng + ?Sized>(bits: u32, x: &ParameterVector, rng: &mut R) -> Payload {
    let s = QuantizerSpec::qsgd_levels(bits);
    let norm64 = x.norm();
    // Round the stored norm up so every level target stays within [0, s].
    let mut norm = norm64 as f32;
    if f64::from(norm) < norm64 {
        norm = norm.next_up();
    }
    let scale = if norm > 0.0 {
        f64::from(s) / f64::from(norm)
    } else {
        0.0
    };
    let levels = x
        .iter()
        .map(|&xi| {
            let u: f64 = rng.gen();
            let target = f64::from(xi).abs() * scale;
            let floor = target.floor();
            let level = if u < target - floor {
                floor + 1.0
            } else {
                floor
            };
            let level = level.min(f64::from(s)) as i32;
            if xi < 0.0 {
                -level
            } else {
                level
            }
        })
        .collect();
    Payload::Qsgd { bits, norm, levels }
}

fn top_k(k: usize, x: &ParameterVector) -> Payload {
    let mut order: Vec<usize> = (0..x.len()).collect();
    // Largest magnitude first, ties to the lowest index.
    order.sort_by(|&a, &b| x[b].abs().total_cmp(&x[a].abs()).then_with(|| a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(k).collect();
    kept.sort_unstable();
    Payload::Sparse {
        indices: kept.iter().map(|&i| i as u32).collect(),
        values: kept.iter().map(|&i| x[i]).collect(),
        rescale: 1.0,
    }
}

fn rand_k<R: Rng + ?Sized>(k: usize, x: &ParameterVector, rng: &mut R) -> Payload {
    let d = x.len();
    // Partial Fisher-Yates: exactly k draws.
    let mut pool: Vec<usize> = (0..d).collect();
    for i in 0..k {
        let j = i + index_from_u64(rng.next_u64(), d - i);
        pool.swap(i, j);
    }
    let mut kept = pool[..k].to_vec();
    kept.sort_unstable();
    Payload::Sparse {
        indices: kept.iter().map(|&i| i as u32).collect(),
        values: kept.iter().map(|&i| x[i]).collect(),
        rescale: (d as f64 / k as f64) as f32,
    }
}

/// `δ = 1 − min(2d/s², √(2d)/s)` for QSGD with `s` levels, floored at [`DELTA_FLOOR`].
pub fn qsgd_delta(levels: u32, dim: usize) -> f64 {
    let s = f64::from(levels);
    let d = dim as f64;
    let delta = 1.0 - f64::min(2.0 * d / (s * s), (2.0 * d).sqrt() / s);
    delta.max(DELTA_FLOOR)
}

/// Compression parameter `δ` of `spec` applied in dimension `dim`.
pub fn compression_parameter(spec: &QuantizerSpec, dim: usize) -> f64 {
    match *spec {
        QuantizerSpec::Identity => 1.0,
        QuantizerSpec::Qsgd { bits } => qsgd_delta(QuantizerSpec::qsgd_levels(bits), dim),
        QuantizerSpec::TopK { k } | QuantizerSpec::RandK { k } => (k as f64 / dim as f64).min(1.0),
    }
}
