//! Experiment configuration: a TOML document with the sections
//! `[scenario]`, `[schemes]`, `[sweep]`, `[optimizer]` and `[seeds]`.
//!
//! Missing keys fall back to the defaults of the experiment selected by
//! `sweep.parameter`; unknown keys are rejected with their full path.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Scenario, StopRule};
use crate::optimization::OptimizerParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SchemeId {
    #[serde(rename = "MIMO_DIGITAL")]
    MimoDigital,
    #[serde(rename = "SIM_1L")]
    Sim1L,
    #[serde(rename = "SIM_4L")]
    Sim4L,
    #[serde(rename = "SIM_7L")]
    Sim7L,
    #[serde(rename = "MFSIM_2L")]
    MfSim2L,
    #[serde(rename = "FILM_2L")]
    Film2L,
}

impl SchemeId {
    pub const ALL: [SchemeId; 6] = [
        SchemeId::MimoDigital,
        SchemeId::Sim1L,
        SchemeId::Sim4L,
        SchemeId::Sim7L,
        SchemeId::MfSim2L,
        SchemeId::Film2L,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeId::MimoDigital => "MIMO_DIGITAL",
            SchemeId::Sim1L => "SIM_1L",
            SchemeId::Sim4L => "SIM_4L",
            SchemeId::Sim7L => "SIM_7L",
            SchemeId::MfSim2L => "MFSIM_2L",
            SchemeId::Film2L => "FILM_2L",
        }
    }

    /// Metasurface traversals (0 for the fully digital baseline).
    pub fn traversals(self) -> usize {
        match self {
            SchemeId::MimoDigital => 0,
            SchemeId::Sim1L => 1,
            SchemeId::Sim4L => 4,
            SchemeId::Sim7L => 7,
            SchemeId::MfSim2L | SchemeId::Film2L => 2,
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }

    pub(crate) fn seed_tag(self) -> u64 {
        self.tag()
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    /// Capacity versus per-layer attenuation.
    AttenuationRatio,
    /// BER versus transmit power.
    TxPowerDbm,
}

impl SweepParameter {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParameter::AttenuationRatio => "attenuation_ratio",
            SweepParameter::TxPowerDbm => "tx_power_dbm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub carrier_hz: f64,
    pub tx_power_dbm: f64,
    pub noise_dbm: f64,
    pub pathloss_exponent: f64,
    pub link_distance_m: f64,
    pub num_streams_or_users: usize,
    /// Per-layer power attenuation; the swept quantity in the capacity study.
    pub attenuation_ratio: f64,
    pub rx_antennas: usize,
    pub feed_rows: usize,
    pub feed_cols: usize,
    pub atom_rows: usize,
    pub atom_cols: usize,
    pub layer_gap_m: f64,
    pub feed_gap_m: f64,
    pub morph_bound_m: f64,
    pub user_azimuth_deg: Vec<f64>,
    pub user_elevation_deg: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemesConfig {
    pub enabled: Vec<SchemeId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub parameter: SweepParameter,
    pub start: f64,
    pub stop: f64,
    pub step: f64,
    pub realizations: usize,
    /// Warm-started iterations spent at every attenuation after the first.
    pub refine_iters: usize,
    pub min_errors: u64,
    pub max_symbols: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub max_iters: usize,
    pub tolerance: f64,
    pub restarts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsConfig {
    pub master_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub schemes: SchemesConfig,
    pub sweep: SweepConfig,
    pub optimizer: OptimizerConfig,
    pub seeds: SeedsConfig,
}

impl ExperimentConfig {
    /// Channel capacity versus per-layer attenuation.
    pub fn default_capacity() -> Self {
        Self {
            scenario: ScenarioConfig {
                carrier_hz: 28e9,
                tx_power_dbm: 20.0,
                noise_dbm: -110.0,
                pathloss_exponent: 2.5,
                link_distance_m: 150.0,
                num_streams_or_users: 4,
                attenuation_ratio: 0.0,
                rx_antennas: 16,
                feed_rows: 2,
                feed_cols: 2,
                atom_rows: 10,
                atom_cols: 10,
                layer_gap_m: 5e-3,
                feed_gap_m: 5e-3,
                morph_bound_m: 2.4e-3,
                user_azimuth_deg: vec![-40.0, -15.0, 15.0, 40.0],
                user_elevation_deg: vec![0.0; 4],
            },
            schemes: SchemesConfig { enabled: SchemeId::ALL.to_vec() },
            sweep: SweepConfig {
                parameter: SweepParameter::AttenuationRatio,
                start: 0.0,
                stop: 0.4,
                step: 0.02,
                realizations: 100,
                refine_iters: 10,
                min_errors: StopRule::default().min_errors,
                max_symbols: StopRule::default().max_symbols,
            },
            optimizer: OptimizerConfig::from(&OptimizerParams::default()),
            seeds: SeedsConfig { master_seed: 20_240_601 },
        }
    }

    /// Multi-user BER versus transmit power.
    pub fn default_ber() -> Self {
        let mut c = Self::default_capacity();
        c.scenario.tx_power_dbm = 30.0;
        c.scenario.noise_dbm = -125.0;
        c.scenario.attenuation_ratio = 0.2;
        c.scenario.feed_rows = 1;
        c.scenario.feed_cols = 4;
        c.sweep = SweepConfig {
            parameter: SweepParameter::TxPowerDbm,
            start: 0.0,
            stop: 40.0,
            step: 2.0,
            realizations: 20,
            ..c.sweep
        };
        c
    }

    pub fn default_for(parameter: SweepParameter) -> Self {
        match parameter {
            SweepParameter::AttenuationRatio => Self::default_capacity(),
            SweepParameter::TxPowerDbm => Self::default_ber(),
        }
    }

    /// Parses a TOML document, filling gaps from the defaults of the
    /// experiment named by `sweep.parameter` (capacity when absent).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| {
            let path = e.span().map(|s| format!("byte {}", s.start)).unwrap_or_else(|| "<document>".into());
            Error::config(path, e.message().to_string())
        })?;
        let parameter = match user.get("sweep").and_then(|s| s.get("parameter")) {
            None => SweepParameter::AttenuationRatio,
            Some(v) => v
                .clone()
                .try_into::<SweepParameter>()
                .map_err(|e| Error::config("sweep.parameter", e.message().to_string()))?,
        };
        let mut merged = toml::Table::try_from(Self::default_for(parameter))
            .map_err(|e| Error::config("<defaults>", e.to_string()))?;
        merge(&mut merged, user);
        let config: Self = serde_path_to_error::deserialize(toml::Value::Table(merged)).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().message().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Canonical serialization; the digest is computed over these bytes.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scenario;
        for (path, v) in [("scenario.tx_power_dbm", s.tx_power_dbm), ("scenario.noise_dbm", s.noise_dbm)] {
            if !v.is_finite() {
                return Err(Error::config(path, format!("must be finite, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&s.attenuation_ratio) {
            return Err(Error::config("scenario.attenuation_ratio", format!("must lie in [0, 1), got {}", s.attenuation_ratio)));
        }
        if s.num_streams_or_users == 0 {
            return Err(Error::config("scenario.num_streams_or_users", "must be at least 1"));
        }
        let positive = [
            ("scenario.carrier_hz", s.carrier_hz),
            ("scenario.pathloss_exponent", s.pathloss_exponent),
            ("scenario.link_distance_m", s.link_distance_m),
            ("scenario.layer_gap_m", s.layer_gap_m),
            ("scenario.feed_gap_m", s.feed_gap_m),
        ];
        for (path, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(path, format!("must be positive, got {v}")));
            }
        }
        if !(s.morph_bound_m >= 0.0 && 2.0 * s.morph_bound_m < s.layer_gap_m) {
            return Err(Error::config("scenario.morph_bound_m", "must be non-negative and below half the layer gap"));
        }
        for (path, v) in [
            ("scenario.rx_antennas", s.rx_antennas),
            ("scenario.feed_rows", s.feed_rows),
            ("scenario.feed_cols", s.feed_cols),
            ("scenario.atom_rows", s.atom_rows),
            ("scenario.atom_cols", s.atom_cols),
        ] {
            if v == 0 {
                return Err(Error::config(path, "must be at least 1"));
            }
        }
        let feeds = s.feed_rows * s.feed_cols;
        match self.sweep.parameter {
            SweepParameter::AttenuationRatio => {
                if s.num_streams_or_users > feeds.min(s.rx_antennas) {
                    return Err(Error::config(
                        "scenario.num_streams_or_users",
                        format!("{} streams exceed min(feeds = {feeds}, rx = {})", s.num_streams_or_users, s.rx_antennas),
                    ));
                }
            }
            SweepParameter::TxPowerDbm => {
                if s.num_streams_or_users != feeds {
                    return Err(Error::config(
                        "scenario.num_streams_or_users",
                        format!("each of the {feeds} feeds carries one user stream; got {} users", s.num_streams_or_users),
                    ));
                }
                for (path, list) in [("scenario.user_azimuth_deg", &s.user_azimuth_deg), ("scenario.user_elevation_deg", &s.user_elevation_deg)] {
                    if list.len() != s.num_streams_or_users {
                        return Err(Error::config(path, format!("needs {} entries, got {}", s.num_streams_or_users, list.len())));
                    }
                }
            }
        }
        if self.schemes.enabled.is_empty() {
            return Err(Error::config("schemes.enabled", "at least one scheme is required"));
        }
        for (i, a) in self.schemes.enabled.iter().enumerate() {
            if self.schemes.enabled[..i].contains(a) {
                return Err(Error::config(format!("schemes.enabled[{i}]"), format!("{a} listed twice")));
            }
        }
        let w = &self.sweep;
        if !(w.step > 0.0 && w.step.is_finite()) || !(w.stop >= w.start) {
            return Err(Error::config("sweep.step", "need step > 0 and stop >= start"));
        }
        if self.sweep.parameter == SweepParameter::AttenuationRatio && !(w.start >= 0.0 && w.stop <= 0.4) {
            return Err(Error::config("sweep.stop", "attenuation grid must lie within [0, 0.4]"));
        }
        if w.realizations == 0 {
            return Err(Error::config("sweep.realizations", "must be at least 1"));
        }
        if w.max_symbols == 0 {
            return Err(Error::config("sweep.max_symbols", "must be at least 1"));
        }
        let o = &self.optimizer;
        if !(o.step_size > 0.0 && o.step_size.is_finite()) {
            return Err(Error::config("optimizer.step_size", format!("must be positive, got {}", o.step_size)));
        }
        if o.max_iters == 0 {
            return Err(Error::config("optimizer.max_iters", "must be at least 1"));
        }
        if !(o.tolerance >= 0.0) {
            return Err(Error::config("optimizer.tolerance", format!("must be non-negative, got {}", o.tolerance)));
        }
        if o.restarts == 0 {
            return Err(Error::config("optimizer.restarts", "must be at least 1"));
        }
        Ok(())
    }

    /// Sweep grid `start, start + step, ..., <= stop`, rounded to 12
    /// decimals so that printed values stay tidy.
    pub fn sweep_values(&self) -> Vec<f64> {
        let w = &self.sweep;
        let n = ((w.stop - w.start) / w.step + 1e-9).floor() as usize + 1;
        (0..n).map(|k| ((w.start + k as f64 * w.step) * 1e12).round() / 1e12).collect()
    }

    pub fn scenario_at(&self, tx_power_dbm: f64, attenuation_ratio: f64) -> Scenario {
        let s = &self.scenario;
        Scenario {
            carrier_hz: s.carrier_hz,
            tx_power_dbm,
            noise_dbm: s.noise_dbm,
            pathloss_exponent: s.pathloss_exponent,
            link_distance_m: s.link_distance_m,
            num_streams_or_users: s.num_streams_or_users,
            attenuation_ratio,
        }
    }

    pub fn optimizer_params(&self) -> OptimizerParams {
        let o = &self.optimizer;
        OptimizerParams {
            step_size: o.step_size,
            max_iters: o.max_iters,
            tolerance: o.tolerance,
            restarts: o.restarts,
            seed: self.seeds.master_seed,
        }
    }

    pub fn stop_rule(&self) -> StopRule {
        StopRule { min_errors: self.sweep.min_errors, max_symbols: self.sweep.max_symbols }
    }
}

impl From<&OptimizerParams> for OptimizerConfig {
    fn from(p: &OptimizerParams) -> Self {
        Self { step_size: p.step_size, max_iters: p.max_iters, tolerance: p.tolerance, restarts: p.restarts }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
