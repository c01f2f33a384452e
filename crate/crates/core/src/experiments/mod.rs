//! Seeded sweep runners for the two case studies and their CSV/JSON
//! artifacts.
//!
//! Tasks are `(scheme, realization)` or `(scheme, sweep point)` pairs run on
//! a rayon pool and gathered in index order, so the worker count only
//! changes wall-clock time.

mod config;

pub use config::{
    ExperimentConfig, OptimizerConfig, ScenarioConfig, SchemeId, SchemesConfig, SeedsConfig, SweepConfig, SweepParameter,
};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::architecture::{ArchitectureSpec, Configuration, SimModel};
use crate::em::{self, CMatrix, ChannelRealization, LayerGeometry};
use crate::error::{Error, Result};
use crate::metrics::{self, ber_qpsk_pooled};
use crate::optimization::{self, OptimizerParams};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub sweep_name: String,
    pub sweep_values: Vec<f64>,
    /// Averaged metric per scheme, in config order.
    pub per_scheme_series: Vec<(SchemeId, Vec<f64>)>,
    /// Per-realization capacity series (empty for BER sweeps).
    pub per_realization: Vec<(SchemeId, Vec<Vec<f64>>)>,
    /// Monte Carlo symbol slots per BER point (empty for capacity sweeps).
    pub symbols_simulated: Vec<(SchemeId, Vec<u64>)>,
    pub metric: String,
    pub realizations: usize,
    pub master_seed: u64,
    pub config_digest: String,
}

impl ExperimentResult {
    pub fn series(&self, scheme: SchemeId) -> Option<&[f64]> {
        self.per_scheme_series.iter().find(|(s, _)| *s == scheme).map(|(_, v)| v.as_slice())
    }

    /// BER curve of one scheme from a power sweep.
    pub fn ber_curve(&self, scheme: SchemeId, users: usize) -> Option<BerCurve> {
        let ber = self.series(scheme)?.to_vec();
        let symbols = self.symbols_simulated.iter().find(|(s, _)| *s == scheme)?.1.clone();
        Some(BerCurve {
            power_dbm_points: self.sweep_values.clone(),
            ber_values: ber,
            symbols_simulated: symbols,
            bits_per_symbol: 2 * users as u64,
            seed: self.master_seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BerCurve {
    pub power_dbm_points: Vec<f64>,
    pub ber_values: Vec<f64>,
    /// Symbol slots behind every point.
    pub symbols_simulated: Vec<u64>,
    /// Bits carried by one slot (2 per user for QPSK).
    pub bits_per_symbol: u64,
    pub seed: u64,
}

/// Lowest power reaching `target`, interpolating linearly in
/// (power, log10 BER) between the first bracketing pair. A zero estimate is
/// read as one error in the bits simulated at that point.
pub fn required_power_at_ber(curve: &BerCurve, target: f64) -> Result<f64> {
    let p = &curve.power_dbm_points;
    let b = &curve.ber_values;
    if p.len() != b.len() || p.is_empty() {
        return Err(Error::shape("BER curve needs matching, non-empty power and BER vectors"));
    }
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::domain(format!("target BER must lie in (0, 1), got {target}")));
    }
    let floor = |i: usize| -> f64 {
        if b[i] > 0.0 {
            return b[i];
        }
        let bits = curve.symbols_simulated.get(i).copied().unwrap_or(0) * curve.bits_per_symbol;
        if bits == 0 {
            f64::MIN_POSITIVE
        } else {
            1.0 / bits as f64
        }
    };
    if b[0] <= target {
        return Ok(p[0]);
    }
    for i in 1..p.len() {
        if b[i] <= target {
            let (lo, hi) = (floor(i - 1).log10(), floor(i).log10().min(target.log10()));
            if hi >= lo {
                return Ok(p[i]);
            }
            let frac = (target.log10() - lo) / (hi - lo);
            return Ok(p[i - 1] + frac * (p[i] - p[i - 1]));
        }
    }
    Err(Error::UnreachableTarget { target })
}

const TAG_CHANNEL: &str = "channel";
const TAG_OPTIMIZE: &str = "optimize";
const TAG_BER: &str = "ber";

struct Geometry {
    lambda: f64,
    feeds: LayerGeometry,
}

fn geometry(config: &ExperimentConfig) -> Result<Geometry> {
    let s = &config.scenario;
    let lambda = em::wavelength(s.carrier_hz)?;
    let feeds = LayerGeometry::half_wavelength(s.feed_rows, s.feed_cols, lambda, 0.0)?;
    Ok(Geometry { lambda, feeds })
}

/// SIM model of `scheme` at attenuation `alpha`; `None` for the digital
/// baseline.
pub fn scheme_model(config: &ExperimentConfig, scheme: SchemeId, alpha: f64) -> Result<Option<SimModel>> {
    let s = &config.scenario;
    let g = geometry(config)?;
    let first_z = s.feed_gap_m;
    let spec = match scheme {
        SchemeId::MimoDigital => return Ok(None),
        SchemeId::Sim1L | SchemeId::Sim4L | SchemeId::Sim7L => ArchitectureSpec::conventional(
            scheme.traversals(),
            s.atom_rows,
            s.atom_cols,
            g.lambda,
            first_z,
            s.layer_gap_m,
            alpha,
        )?,
        SchemeId::MfSim2L => ArchitectureSpec::mfsim(s.atom_rows, s.atom_cols, g.lambda, first_z, s.layer_gap_m, alpha)?,
        SchemeId::Film2L => ArchitectureSpec::film(
            s.atom_rows,
            s.atom_cols,
            g.lambda,
            first_z,
            s.layer_gap_m,
            s.morph_bound_m,
            alpha,
        )?,
    };
    Ok(Some(SimModel::new(spec, &g.feeds, g.lambda)?))
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        if n == 0 {
            return Err(Error::config("--workers", "must be at least 1"));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Numerical(format!("cannot start worker pool: {e}")))
}

pub fn config_digest(config: &ExperimentConfig) -> String {
    let bytes = config.to_toml_string();
    Sha256::digest(bytes.as_bytes()).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Runs the experiment selected by `sweep.parameter` over its full grid.
pub fn run_sweep(config: &ExperimentConfig, workers: Option<usize>) -> Result<ExperimentResult> {
    match config.sweep.parameter {
        SweepParameter::AttenuationRatio => run_capacity_vs_attenuation(config, workers),
        SweepParameter::TxPowerDbm => run_ber_vs_power(config, workers),
    }
}

/// The config restricted to the scenario's own operating point (a
/// one-point sweep).
pub fn point_config(config: &ExperimentConfig) -> Result<ExperimentConfig> {
    let mut single = config.clone();
    let v = match config.sweep.parameter {
        SweepParameter::AttenuationRatio => config.scenario.attenuation_ratio,
        SweepParameter::TxPowerDbm => config.scenario.tx_power_dbm,
    };
    single.sweep.start = v;
    single.sweep.stop = v;
    single.validate()?;
    Ok(single)
}

fn channel_for(config: &ExperimentConfig, realization: usize) -> Result<ChannelRealization> {
    let s = &config.scenario;
    let pl = config.scenario_at(s.tx_power_dbm, 0.0).path_loss()?;
    let seed = rng::derive_seed(config.seeds.master_seed, &[rng::label_tag(TAG_CHANNEL), realization as u64]);
    em::rayleigh_channel(s.rx_antennas, s.atom_rows * s.atom_cols, pl, seed)
}

/// Average equal-power capacity per scheme and attenuation over Rayleigh
/// realizations.
///
/// For every (scheme, realization) the configuration is fully optimized
/// (with restarts) at the first attenuation, then refined with a few warm
/// started iterations at each following one. The reported capacity at each
/// attenuation is the best over every configuration found along the sweep,
/// which makes every per-realization series non-increasing.
pub fn run_capacity_vs_attenuation(config: &ExperimentConfig, workers: Option<usize>) -> Result<ExperimentResult> {
    config.validate()?;
    if config.sweep.parameter != SweepParameter::AttenuationRatio {
        return Err(Error::config("sweep.parameter", "capacity runs sweep attenuation_ratio"));
    }
    let alphas = config.sweep_values();
    let realizations = config.sweep.realizations;
    let schemes = config.schemes.enabled.clone();
    let tasks: Vec<(usize, usize)> = (0..schemes.len()).flat_map(|s| (0..realizations).map(move |r| (s, r))).collect();
    let pool = pool(workers)?;
    let series: Vec<Vec<f64>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(s, r)| capacity_series(config, schemes[s], r, &alphas))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut per_scheme_series = Vec::new();
    let mut per_realization = Vec::new();
    for (s, scheme) in schemes.iter().enumerate() {
        let runs: Vec<Vec<f64>> = series[s * realizations..(s + 1) * realizations].to_vec();
        let mean = (0..alphas.len())
            .map(|k| runs.iter().map(|v| v[k]).sum::<f64>() / realizations as f64)
            .collect();
        per_scheme_series.push((*scheme, mean));
        per_realization.push((*scheme, runs));
    }
    Ok(ExperimentResult {
        sweep_name: SweepParameter::AttenuationRatio.as_str().into(),
        sweep_values: alphas,
        per_scheme_series,
        per_realization,
        symbols_simulated: Vec::new(),
        metric: "capacity_bps_hz".into(),
        realizations,
        master_seed: config.seeds.master_seed,
        config_digest: config_digest(config),
    })
}

fn capacity_series(config: &ExperimentConfig, scheme: SchemeId, realization: usize, alphas: &[f64]) -> Result<Vec<f64>> {
    let s = &config.scenario;
    let channel = channel_for(config, realization)?;
    let scenario = |alpha: f64| config.scenario_at(s.tx_power_dbm, alpha);
    let Some(model) = scheme_model(config, scheme, alphas[0])? else {
        // fully digital: the first `feeds` antennas of the same aperture
        let feeds = s.feed_rows * s.feed_cols;
        let h = channel.matrix.columns(0, feeds).into_owned();
        let sc = scenario(0.0);
        let c = metrics::capacity(&h, sc.tx_power_w(), sc.noise_w(), s.num_streams_or_users)?;
        return Ok(vec![c; alphas.len()]);
    };
    let base = config.optimizer_params();
    let mut found: Vec<Configuration> = Vec::with_capacity(alphas.len());
    for (k, &alpha) in alphas.iter().enumerate() {
        let seed = rng::derive_seed(
            base.seed,
            &[rng::label_tag(TAG_OPTIMIZE), scheme.seed_tag(), k as u64, realization as u64],
        );
        let report = match found.last() {
            None => optimization::optimize_capacity(&model, &channel, &scenario(alpha), &OptimizerParams { seed, ..base.clone() })?,
            Some(prev) if config.sweep.refine_iters > 0 => {
                let params = OptimizerParams { seed, restarts: 1, max_iters: config.sweep.refine_iters, ..base.clone() };
                optimization::optimize_capacity_from(&model, &channel, &scenario(alpha), &params, Some(prev))?
            }
            Some(prev) => {
                found.push(prev.clone());
                continue;
            }
        };
        found.push(report.final_config);
    }
    alphas
        .iter()
        .map(|&alpha| {
            let m = model.with_attenuation(alpha)?;
            found
                .iter()
                .map(|c| pooled_capacity(&m, c, &channel, &scenario(alpha)))
                .try_fold(f64::NEG_INFINITY, |best, c| c.map(|c| best.max(c)))
        })
        .collect()
}

fn pooled_capacity(model: &SimModel, config: &Configuration, channel: &ChannelRealization, scenario: &metrics::Scenario) -> Result<f64> {
    let g = model.response(config)?;
    let m = em_effective(&channel.matrix, &g)?;
    metrics::capacity(&m, scenario.tx_power_w(), scenario.noise_w(), scenario.num_streams_or_users)
}

fn em_effective(channel: &CMatrix, g: &CMatrix) -> Result<CMatrix> {
    crate::architecture::effective_downlink(channel, g)
}

/// Users' line-of-sight steering rows for a set of radiating positions.
pub fn user_steering(config: &ExperimentConfig, positions: &[em::Point]) -> Result<CMatrix> {
    let s = &config.scenario;
    let lambda = em::wavelength(s.carrier_hz)?;
    let rows: Vec<_> = s
        .user_azimuth_deg
        .iter()
        .zip(&s.user_elevation_deg)
        .map(|(az, el)| em::steering_at(positions, az.to_radians(), el.to_radians(), lambda).transpose())
        .collect();
    Ok(CMatrix::from_rows(&rows))
}

/// Effective users x streams matrix (path loss included) of one scheme and
/// realization: zero-forcing digital precoding for the baseline, a fitted
/// SIM response otherwise.
pub fn ber_effective(config: &ExperimentConfig, scheme: SchemeId, realization: usize) -> Result<CMatrix> {
    let s = &config.scenario;
    let amplitude = config.scenario_at(s.tx_power_dbm, 0.0).path_loss()?.sqrt();
    let g = geometry(config)?;
    let Some(model) = scheme_model(config, scheme, s.attenuation_ratio)? else {
        let steer = user_steering(config, &g.feeds.positions())?;
        let p = optimization::zf_targets(&steer)?;
        return Ok((steer * p) * Complex64::from(amplitude));
    };
    // radiating phase reference is the nominal aperture grid
    let steer = user_steering(config, &model.spec().aperture().positions())?;
    let target = match scheme {
        SchemeId::MfSim2L => optimization::mfsim_zf_target(&model, &steer)?,
        _ => optimization::zf_targets(&steer)?,
    };
    let params = OptimizerParams {
        seed: rng::derive_seed(
            config.seeds.master_seed,
            &[rng::label_tag(TAG_OPTIMIZE), scheme.seed_tag(), realization as u64],
        ),
        ..config.optimizer_params()
    };
    let report = optimization::fit_precoder(&model, &target, &params)?;
    let response = model.response(&report.final_config)?;
    Ok((steer * response) * Complex64::from(amplitude))
}

/// Average QPSK BER per scheme and transmit power. Each realization is a
/// separately seeded precoder fit; Monte Carlo batches at a power point
/// cycle over the realizations under one shared stop rule.
pub fn run_ber_vs_power(config: &ExperimentConfig, workers: Option<usize>) -> Result<ExperimentResult> {
    config.validate()?;
    if config.sweep.parameter != SweepParameter::TxPowerDbm {
        return Err(Error::config("sweep.parameter", "BER runs sweep tx_power_dbm"));
    }
    let powers = config.sweep_values();
    let realizations = config.sweep.realizations;
    let schemes = config.schemes.enabled.clone();
    let pool = pool(workers)?;
    let noise = metrics::dbm_to_watts(config.scenario.noise_dbm);
    let stop = config.stop_rule();
    let (effectives, estimates) = pool.install(|| -> Result<_> {
        let fit_tasks: Vec<(usize, usize)> =
            (0..schemes.len()).flat_map(|s| (0..realizations).map(move |r| (s, r))).collect();
        let effectives: Vec<CMatrix> = fit_tasks
            .par_iter()
            .map(|&(s, r)| ber_effective(config, schemes[s], r))
            .collect::<Result<_>>()?;
        let point_tasks: Vec<(usize, usize)> =
            (0..schemes.len()).flat_map(|s| (0..powers.len()).map(move |k| (s, k))).collect();
        let estimates: Vec<metrics::BerEstimate> = point_tasks
            .par_iter()
            .map(|&(s, k)| {
                let seed = rng::derive_seed(
                    config.seeds.master_seed,
                    &[rng::label_tag(TAG_BER), schemes[s].seed_tag(), k as u64],
                );
                let group = &effectives[s * realizations..(s + 1) * realizations];
                ber_qpsk_pooled(group, metrics::dbm_to_watts(powers[k]), noise, seed, stop)
            })
            .collect::<Result<_>>()?;
        Ok((effectives, estimates))
    })?;
    drop(effectives);
    let mut per_scheme_series = Vec::new();
    let mut symbols_simulated = Vec::new();
    for (s, scheme) in schemes.iter().enumerate() {
        let row = &estimates[s * powers.len()..(s + 1) * powers.len()];
        per_scheme_series.push((*scheme, row.iter().map(|e| e.average).collect()));
        symbols_simulated.push((*scheme, row.iter().map(|e| e.symbols).collect()));
    }
    Ok(ExperimentResult {
        sweep_name: SweepParameter::TxPowerDbm.as_str().into(),
        sweep_values: powers,
        per_scheme_series,
        per_realization: Vec::new(),
        symbols_simulated,
        metric: "ber".into(),
        realizations,
        master_seed: config.seeds.master_seed,
        config_digest: config_digest(config),
    })
}

/// CSV body: `sweep_value,scheme,metric,value,realizations,seed`, one row
/// per (sweep point, scheme), shortest round-trip float formatting.
pub fn to_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("sweep_value,scheme,metric,value,realizations,seed\n");
    for (k, v) in result.sweep_values.iter().enumerate() {
        for (scheme, series) in &result.per_scheme_series {
            let _ = writeln!(
                out,
                "{v:?},{scheme},{},{:?},{},{}",
                result.metric, series[k], result.realizations, result.master_seed
            );
        }
    }
    out
}

#[derive(Serialize)]
struct Metadata<'a> {
    tool: &'static str,
    version: &'static str,
    config_digest: &'a str,
    master_seed: u64,
    seed_overridden: bool,
    sweep: &'a str,
    metric: &'a str,
    schemes: Vec<&'static str>,
    realizations: usize,
    defaults: Defaults,
    config: &'a ExperimentConfig,
}

#[derive(Serialize)]
struct Defaults {
    power_allocation: &'static str,
    capacity_sweep: &'static str,
    ber_receiver: &'static str,
    ber_averaging: &'static str,
    precoder_objective: &'static str,
    optimizer: &'static str,
    attenuation_model: &'static str,
    mfsim_topology: &'static str,
    film_coupling: &'static str,
    feed_coupling: &'static str,
}

fn defaults() -> Defaults {
    Defaults {
        power_allocation: "equal power per stream, no water-filling",
        capacity_sweep: "full optimization at the first attenuation, warm-started refinement after; best configuration found along the sweep",
        ber_receiver: "per-user scalar coherent detection, residual interference treated as noise",
        ber_averaging: "arithmetic mean of per-user BER; Monte Carlo batches cycle over realizations under one stop rule",
        precoder_objective: "scale-free residual |G - cT|^2/|G|^2 against the zero-forcing target; MF-SIM uses exact per-atom zero forcing",
        optimizer: "projected gradient ascent, Barzilai-Borwein trial step, Armijo backtracking",
        attenuation_model: "amplitude sqrt(1 - alpha) per metasurface traversal",
        mfsim_topology: "adjacent first-layer pairs (2n, 2n+1), lossless fibers, 1/2 combiner",
        film_coupling: "inter-layer coupling at displaced positions; feed coupling and radiating phase reference nominal",
        feed_coupling: "Rayleigh-Sommerfeld from a centered half-wavelength feed array, feed_gap_m behind layer 1",
    }
}

pub fn metadata_json(result: &ExperimentResult, config: &ExperimentConfig, seed_overridden: bool) -> String {
    let meta = Metadata {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config_digest: &result.config_digest,
        master_seed: result.master_seed,
        seed_overridden,
        sweep: &result.sweep_name,
        metric: &result.metric,
        schemes: result.per_scheme_series.iter().map(|(s, _)| s.as_str()).collect(),
        realizations: result.realizations,
        defaults: defaults(),
        config,
    };
    let mut s = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    s.push('\n');
    s
}

/// Writes `<stem>.csv` and `<stem>.meta.json` into `out_dir`.
pub fn write_artifacts(
    out_dir: &Path,
    stem: &str,
    result: &ExperimentResult,
    config: &ExperimentConfig,
    seed_overridden: bool,
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir)?;
    let csv = out_dir.join(format!("{stem}.csv"));
    let meta = out_dir.join(format!("{stem}.meta.json"));
    std::fs::write(&csv, to_csv(result))?;
    std::fs::write(&meta, metadata_json(result, config, seed_overridden))?;
    Ok((csv, meta))
}
