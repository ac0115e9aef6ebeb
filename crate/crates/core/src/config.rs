//! Experiment configuration files (TOML).
//!
//! ```toml
//! preset = "paper-appendix-d"   # optional, explicit keys override it
//!
//! [task]
//! kind = "quadratic"            # or "logistic"
//! clients = 8
//! dim = 16
//!
//! [hp]
//! eta_g = 1.0
//! eta_l = 0.01                  # scalar repeated P times, or a list of P rates
//! P = 2
//! K = 4
//!
//! [run]
//! T_max = 200
//! seeds = [1, 2, 3]
//! ```
//!
//! Parsing reports every problem it finds rather than stopping at the first.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{HyperParams, SyncMode};
use crate::quantizers::QuantizerSpec;
use crate::simulator::{ClientAssignment, DelayModel, RecordOptions, SimConfig};
use crate::tasks::{
    make_logistic, make_quadratic, LogisticConfig, PartitionConfig, QuadraticConfig, Task,
    TaskError, TaskKind,
};

pub const PRESETS: &[&str] = &["paper-appendix-d"];

/// One problem found while parsing or validating a config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfigIssue {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("config is not valid TOML: {0}")]
    Syntax(String),
    #[error("invalid config:\n{}", format_issues(.0))]
    Invalid(Vec<ConfigIssue>),
}

impl ConfigError {
    pub fn issues(&self) -> Vec<ConfigIssue> {
        match self {
            ConfigError::Syntax(m) => vec![ConfigIssue {
                key: String::new(),
                message: m.clone(),
            }],
            ConfigError::Invalid(v) => v.clone(),
        }
    }
}

fn format_issues(issues: &[ConfigIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  - {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub clients: usize,
    pub dim: usize,
    #[serde(default)]
    pub seed: u64,
    /// Quadratic: spread of the per-client targets.
    #[serde(default)]
    pub heterogeneity: f64,
    /// Quadratic: rows per client, `4·dim` when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows_per_client: Option<usize>,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Logistic: label skew in `[0, 1]`.
    #[serde(default)]
    pub skew: f64,
    #[serde(default = "default_samples_min")]
    pub samples_min: usize,
    #[serde(default = "default_samples_max")]
    pub samples_max: usize,
    #[serde(default = "default_reg")]
    pub reg: f64,
    #[serde(default = "default_separation")]
    pub separation: f64,
}

fn default_noise() -> f64 {
    0.1
}
fn default_samples_min() -> usize {
    PartitionConfig::default().samples_min
}
fn default_samples_max() -> usize {
    PartitionConfig::default().samples_max
}
fn default_reg() -> f64 {
    1e-2
}
fn default_separation() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Rates {
    Constant(f64),
    Schedule(Vec<f64>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHp {
    eta_g: f64,
    eta_l: Rates,
    #[serde(rename = "P")]
    p: Option<usize>,
    #[serde(rename = "K")]
    k: usize,
    #[serde(default)]
    beta: f64,
    #[serde(default)]
    staleness_scaling: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpConfig {
    pub eta_g: f64,
    /// One rate per local step.
    pub eta_l: Vec<f64>,
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub beta: f64,
    pub staleness_scaling: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    #[serde(default = "identity")]
    pub client: QuantizerSpec,
    #[serde(default = "identity")]
    pub server: QuantizerSpec,
}

fn identity() -> QuantizerSpec {
    QuantizerSpec::Identity
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayConfig {
    #[serde(default = "one")]
    pub sigma: f64,
    pub rate: f64,
    pub concurrency: usize,
    #[serde(default)]
    pub assignment: ClientAssignment,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(rename = "T_max")]
    pub t_max: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_loss: Option<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeConfig {
    #[serde(default = "yes")]
    pub broadcast: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_max: Option<usize>,
}

fn yes() -> bool {
    true
}

impl Default for ModeConfig {
    fn default() -> Self {
        Self {
            broadcast: true,
            c_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub hp: HpConfig,
    pub quant: QuantConfig,
    pub delay: DelayConfig,
    pub run: RunConfig,
    pub mode: ModeConfig,
}

fn preset_table(name: &str) -> Option<toml::Table> {
    let text = match name {
        "paper-appendix-d" => {
            r#"
            [hp]
            eta_g = 1000.0
            eta_l = 4.7e-6
            K = 10
            beta = 0.3
            staleness_scaling = true
            [quant]
            client = "qsgd:4"
            server = "qsgd:4"
            [delay]
            sigma = 1.0
            rate = 125.0
            concurrency = 100
            "#
        }
        _ => return None,
    };
    Some(text.parse().expect("preset tables are valid TOML"))
}

/// Parses and validates a config file.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
    parse_table(table)
}

/// Sets a dotted key such as `hp.K` in a parsed config table.
pub fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty());
    let Some(last) = last else {
        return Err(ConfigError::Invalid(vec![issue(key, "empty key")]));
    };
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            ConfigError::Invalid(vec![issue(key, "path crosses a non-table value")])
        })?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Reads a command-line value as TOML (`4`, `true`, `[0.1, 0.2]`), falling back
/// to a plain string (`qsgd:4`).
pub fn parse_value(text: &str) -> toml::Value {
    let wrapped = format!("v = {text}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

fn issue(key: impl Into<String>, message: impl Into<String>) -> ConfigIssue {
    ConfigIssue {
        key: key.into(),
        message: message.into(),
    }
}

const SECTIONS: &[&str] = &["task", "hp", "quant", "delay", "run", "mode"];

pub fn parse_table(mut table: toml::Table) -> Result<ExperimentConfig, ConfigError> {
    let mut issues = Vec::new();

    let mut merged = toml::Table::new();
    if let Some(preset) = table.remove("preset") {
        match preset.as_str().and_then(preset_table) {
            Some(t) => merged = t,
            None => issues.push(issue(
                "preset",
                format!("unknown preset {preset}, expected one of {PRESETS:?}"),
            )),
        }
    }
    for (key, value) in table {
        if !SECTIONS.contains(&key.as_str()) {
            issues.push(issue(key, "unknown key"));
            continue;
        }
        let toml::Value::Table(section) = value else {
            issues.push(issue(key, "expected a table"));
            continue;
        };
        let target = merged
            .entry(key)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .expect("sections are tables");
        target.extend(section);
    }

    fn section<T: serde::de::DeserializeOwned>(
        merged: &toml::Table,
        name: &str,
        issues: &mut Vec<ConfigIssue>,
    ) -> Option<T> {
        let value = merged
            .get(name)
            .cloned()
            .unwrap_or_else(|| toml::Value::Table(toml::Table::new()));
        match value.try_into::<T>() {
            Ok(v) => Some(v),
            Err(e) => {
                issues.push(issue(name, e.to_string().trim().replace('\n', " ")));
                None
            }
        }
    }

    let task: Option<TaskConfig> = section(&merged, "task", &mut issues);
    let hp: Option<RawHp> = section(&merged, "hp", &mut issues);
    let quant: Option<QuantConfig> = section(&merged, "quant", &mut issues);
    let delay: Option<DelayConfig> = section(&merged, "delay", &mut issues);
    let run: Option<RunConfig> = section(&merged, "run", &mut issues);
    let mode: Option<ModeConfig> = section(&merged, "mode", &mut issues);

    let hp = hp.and_then(|raw| normalize_hp(raw, &mut issues));

    match (task, hp, quant, delay, run, mode) {
        (Some(task), Some(hp), Some(quant), Some(delay), Some(run), Some(mode)) => {
            let cfg = ExperimentConfig {
                task,
                hp,
                quant,
                delay,
                run,
                mode,
            };
            issues.extend(cfg.validate());
            if issues.is_empty() {
                Ok(cfg)
            } else {
                Err(ConfigError::Invalid(issues))
            }
        }
        _ => Err(ConfigError::Invalid(issues)),
    }
}

fn normalize_hp(raw: RawHp, issues: &mut Vec<ConfigIssue>) -> Option<HpConfig> {
    let eta_l = match (raw.eta_l, raw.p) {
        (Rates::Constant(e), p) => vec![e; p.unwrap_or(1)],
        (Rates::Schedule(v), None) => v,
        (Rates::Schedule(v), Some(p)) if v.len() == p => v,
        (Rates::Schedule(v), Some(p)) => {
            issues.push(issue(
                "hp.eta_l",
                format!("schedule has {} rates but P = {p}", v.len()),
            ));
            return None;
        }
    };
    Some(HpConfig {
        p: eta_l.len(),
        eta_l,
        eta_g: raw.eta_g,
        k: raw.k,
        beta: raw.beta,
        staleness_scaling: raw.staleness_scaling,
    })
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

impl ExperimentConfig {
    /// Every semantic problem with the config.
    pub fn validate(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let t = &self.task;
        if t.clients == 0 {
            out.push(issue("task.clients", "must be at least 1"));
        }
        if t.dim == 0 {
            out.push(issue("task.dim", "must be at least 1"));
        }
        match t.kind {
            TaskKind::Quadratic => {
                if !(t.heterogeneity.is_finite() && t.heterogeneity >= 0.0) {
                    out.push(issue(
                        "task.heterogeneity",
                        "must be finite and non-negative",
                    ));
                }
                if !(t.noise.is_finite() && t.noise >= 0.0) {
                    out.push(issue("task.noise", "must be finite and non-negative"));
                }
                if t.rows_per_client == Some(0) {
                    out.push(issue("task.rows_per_client", "must be at least 1"));
                }
            }
            TaskKind::Logistic => {
                if let Err(e) = self.partition().validate() {
                    out.push(issue("task", e.to_string()));
                }
                if !(t.reg.is_finite() && t.reg >= 0.0) {
                    out.push(issue("task.reg", "must be finite and non-negative"));
                }
                if !t.separation.is_finite() {
                    out.push(issue("task.separation", "must be finite"));
                }
            }
        }

        let hp = &self.hp;
        if !positive(hp.eta_g) {
            out.push(issue("hp.eta_g", "must be positive"));
        }
        if hp.p == 0 {
            out.push(issue("hp.P", "must be at least 1"));
        }
        if hp.eta_l.iter().any(|&e| !positive(e)) {
            out.push(issue("hp.eta_l", "rates must be positive"));
        }
        if hp.k == 0 {
            out.push(issue("hp.K", "buffer size must be at least 1"));
        }
        if !(0.0..1.0).contains(&hp.beta) {
            out.push(issue("hp.beta", "must lie in [0, 1)"));
        }

        for (key, q) in [
            ("quant.client", &self.quant.client),
            ("quant.server", &self.quant.server),
        ] {
            if let Err(e) = q.validate_params() {
                out.push(issue(key, e.to_string()));
            } else if t.dim > 0 {
                if let Err(e) = q.validate(t.dim) {
                    out.push(issue(key, e.to_string()));
                }
            }
        }
        if !self.quant.client.unbiased() {
            out.push(issue("quant.client", "client quantizer must be unbiased"));
        }

        if !positive(self.delay.sigma) {
            out.push(issue("delay.sigma", "must be positive"));
        }
        if !positive(self.delay.rate) {
            out.push(issue("delay.rate", "must be positive"));
        }
        if self.delay.concurrency == 0 {
            out.push(issue("delay.concurrency", "must be at least 1"));
        }

        if self.run.t_max == 0 {
            out.push(issue("run.T_max", "must be at least 1"));
        }
        if let Some(target) = self.run.target_loss {
            if !target.is_finite() {
                out.push(issue("run.target_loss", "must be finite"));
            }
        }
        if self.run.seeds.is_empty() {
            out.push(issue("run.seeds", "at least one seed is required"));
        }
        let distinct: BTreeSet<_> = self.run.seeds.iter().collect();
        if distinct.len() != self.run.seeds.len() {
            out.push(issue("run.seeds", "seeds must be distinct"));
        }

        match (self.mode.broadcast, self.mode.c_max) {
            (false, None) => out.push(issue("mode.c_max", "required when broadcast = false")),
            (false, Some(0)) => out.push(issue("mode.c_max", "must be at least 1")),
            _ => {}
        }
        out
    }

    /// Canonical TOML form; parsing it gives back an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn partition(&self) -> PartitionConfig {
        PartitionConfig {
            skew: self.task.skew,
            samples_min: self.task.samples_min,
            samples_max: self.task.samples_max,
            seed: self.task.seed.wrapping_add(1),
        }
    }

    pub fn build_task(&self) -> Result<Task, TaskError> {
        let t = &self.task;
        match t.kind {
            TaskKind::Quadratic => make_quadratic(&QuadraticConfig {
                clients: t.clients,
                dim: t.dim,
                rows_per_client: t.rows_per_client.unwrap_or(4 * t.dim),
                heterogeneity: t.heterogeneity,
                noise: t.noise,
                seed: t.seed,
            }),
            TaskKind::Logistic => make_logistic(&LogisticConfig {
                clients: t.clients,
                dim: t.dim,
                partition: self.partition(),
                reg: t.reg,
                separation: t.separation,
                seed: t.seed,
            }),
        }
    }

    pub fn sync_mode(&self) -> SyncMode {
        if self.mode.broadcast {
            SyncMode::Broadcast
        } else {
            SyncMode::NonBroadcast {
                c_max: self.mode.c_max.unwrap_or(1),
            }
        }
    }

    pub fn hyper_params(&self) -> HyperParams {
        HyperParams {
            eta_g: self.hp.eta_g,
            eta_l: self.hp.eta_l.clone(),
            buffer_size: self.hp.k,
            momentum: self.hp.beta,
            staleness_scaling: self.hp.staleness_scaling,
            mode: self.sync_mode(),
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            hp: self.hyper_params(),
            q_client: self.quant.client,
            q_server: self.quant.server,
            delay: DelayModel {
                sigma: self.delay.sigma,
                arrival_rate: self.delay.rate,
                concurrency: self.delay.concurrency,
            },
            t_max: self.run.t_max,
            target_loss: self.run.target_loss,
            assignment: self.delay.assignment,
            record: RecordOptions::default(),
        }
    }
}
