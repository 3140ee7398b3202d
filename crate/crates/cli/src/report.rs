use std::path::Path;

use erw_core::analysis::{classify_phase, PhaseReport};
use erw_core::env::StackChainSpec;
use serde::Serialize;
use serde_json::Value;

use crate::config::{config_hash, ConfigError};

/// One checked statement and the claim it targets.
#[derive(Clone, Debug, Serialize)]
pub struct Assertion {
    pub name: String,
    pub claim: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Assertion {
    pub fn at_most(name: &str, claim: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            claim: claim.into(),
            value,
            threshold,
            passed: value <= threshold,
        }
    }

    pub fn exact(name: &str, claim: &str, failures: usize) -> Self {
        Self::at_most(name, claim, failures as f64, 0.0)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SpecSummary {
    pub name: Option<String>,
    pub delta: f64,
    pub state_drifts: Vec<f64>,
    pub stationary: Vec<f64>,
    pub anchor: usize,
}

impl SpecSummary {
    pub fn of(spec: &StackChainSpec) -> Self {
        Self {
            name: spec.name().map(str::to_owned),
            delta: spec.delta(),
            state_drifts: spec.state_drifts().to_vec(),
            stationary: spec.stationary().to_vec(),
            anchor: spec.anchor(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub command: String,
    pub config_hash: String,
    pub options: Value,
    pub spec: Option<SpecSummary>,
    pub phase: Option<PhaseReport>,
    pub estimates: serde_json::Map<String, Value>,
    pub assertions: Vec<Assertion>,
    pub truncated_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

impl Report {
    /// Empty report for `command`; `options` is the serialized argument set.
    pub fn new(command: &str, options: Value, spec: Option<&StackChainSpec>, timestamp: bool) -> Self {
        let mut hashed = options.clone();
        if let Some(map) = hashed.as_object_mut() {
            map.remove("out");
            map.remove("timestamp");
        }
        Self {
            command: command.into(),
            config_hash: config_hash(command, &hashed, spec),
            options,
            spec: spec.map(SpecSummary::of),
            phase: spec.map(|s| classify_phase(s.delta())),
            estimates: serde_json::Map::new(),
            assertions: Vec::new(),
            truncated_fraction: 0.0,
            timestamp: timestamp.then(|| {
                std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0)
            }),
        }
    }

    pub fn estimate(&mut self, key: &str, value: impl Serialize) {
        self.estimates
            .insert(key.into(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    pub fn all_passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn write(&self, dir: &Path) -> Result<(), ConfigError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| ConfigError::Output(e.to_string()))?;
        std::fs::write(dir.join("report.json"), text + "\n").map_err(|e| ConfigError::Output(e.to_string()))
    }
}

/// Writes `rows` under `header` to `dir/name`.
pub fn write_csv<R>(dir: &Path, name: &str, header: &[&str], rows: R) -> Result<(), ConfigError>
where
    R: IntoIterator,
    R::Item: IntoIterator,
    <R::Item as IntoIterator>::Item: AsRef<[u8]>,
{
    let out = |e: csv::Error| ConfigError::Output(e.to_string());
    let mut writer = csv::Writer::from_path(dir.join(name)).map_err(out)?;
    writer.write_record(header).map_err(out)?;
    for row in rows {
        writer.write_record(row).map_err(out)?;
    }
    writer.flush().map_err(|e| ConfigError::Output(e.to_string()))
}

/// `x,ccdf` rows of an empirical survival curve.
pub fn write_ccdf(dir: &Path, name: &str, curve: &[(f64, f64)]) -> Result<(), ConfigError> {
    write_csv(
        dir,
        name,
        &["x", "ccdf"],
        curve.iter().map(|(x, p)| [x.to_string(), format!("{p:.17e}")]),
    )
}
