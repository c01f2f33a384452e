//! Configuration solvers: capacity ascent, precoder fitting and the
//! zero-forcing targets they chase.
//!
//! Every problem runs the same projected gradient ascent: a Barzilai-Borwein
//! trial step, Armijo backtracking, phases wrapped onto the circle and FILM
//! displacements clipped to their box. FILM alternates a phase block and a
//! displacement block.

use nalgebra::DVector;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::architecture::{
    mfsim_synthesize, random_configuration, ArchitectureKind, ConfigGradient, Configuration,
    DisplacementProfile, PhaseProfile, SimModel,
};
use crate::em::{self, CMatrix, ChannelRealization, Point};
use crate::error::{Error, Result};
use crate::metrics::Scenario;
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerParams {
    /// Largest per-variable move of the very first trial step, in radians
    /// (phases) or fractions of the morphing bound (displacements).
    pub step_size: f64,
    pub max_iters: usize,
    /// Relative objective change below which a block counts as stalled.
    pub tolerance: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        Self { step_size: 0.1, max_iters: 500, tolerance: 1e-6, restarts: 4, seed: 0 }
    }
}

impl OptimizerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::domain("step_size must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::domain("max_iters must be at least 1"));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::domain("tolerance must be non-negative"));
        }
        if self.restarts == 0 {
            return Err(Error::domain("restarts must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizationReport {
    pub best_objective: f64,
    /// Objective after every accepted iterate, starting point first.
    pub objective_trace: Vec<f64>,
    pub final_config: Configuration,
    pub converged: bool,
    /// Index of the winning restart.
    pub restart: usize,
}

/// A real function of the SIM response to be maximized.
trait Objective: Sync {
    fn model(&self) -> &SimModel;
    /// Value and Wirtinger derivative `dF/d(conj G)`.
    fn on_response(&self, g: &CMatrix) -> Result<(f64, CMatrix)>;

    fn value(&self, config: &Configuration) -> Result<f64> {
        let g = self.model().response(config)?;
        Ok(self.on_response(&g)?.0)
    }

    fn value_and_gradient(&self, config: &Configuration) -> Result<(f64, ConfigGradient)> {
        self.model().value_and_gradient(config, |g| self.on_response(g))
    }
}

struct CapacityObjective<'a> {
    model: SimModel,
    channel: &'a CMatrix,
    channel_adj: CMatrix,
    snr: f64,
    streams: usize,
}

impl Objective for CapacityObjective<'_> {
    fn model(&self) -> &SimModel {
        &self.model
    }

    fn on_response(&self, g: &CMatrix) -> Result<(f64, CMatrix)> {
        let m = em::cmul(self.channel, g);
        let (value, d_m) = capacity_with_derivative(&m, self.snr, self.streams)?;
        Ok((value, em::cmul(&self.channel_adj, &d_m)))
    }
}

/// Equal-power capacity `sum_s log2(1 + snr lambda_s)` over the top
/// `streams` eigenvalues of `M^H M`, plus its derivative
/// `(snr / ln 2) sum_s M v_s v_s^H / (1 + snr lambda_s)`.
fn capacity_with_derivative(m: &CMatrix, snr: f64, streams: usize) -> Result<(f64, CMatrix)> {
    let gram = m.adjoint() * m;
    let n = gram.nrows();
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut value = 0.0;
    let mut weighted = CMatrix::zeros(n, n);
    for &s in order.iter().take(streams) {
        let lam = eig.eigenvalues[s].max(0.0);
        value += (snr * lam).ln_1p();
        let v = eig.eigenvectors.column(s);
        weighted += (&v * v.adjoint()) * Complex64::from(snr / (1.0 + snr * lam));
    }
    if !value.is_finite() {
        return Err(Error::Numerical("capacity objective is not finite".into()));
    }
    let ln2 = std::f64::consts::LN_2;
    Ok((value / ln2, (m * weighted) / Complex64::from(ln2)))
}

/// Negated scale-free fitting residual `|G - cT|^2 / |G|^2` with the best
/// complex `c`, i.e. `1 - |<T, G>|^2 / (|T|^2 |G|^2)`.
struct FitObjective<'a> {
    model: &'a SimModel,
    target: &'a CMatrix,
    target_norm2: f64,
}

impl Objective for FitObjective<'_> {
    fn model(&self) -> &SimModel {
        self.model
    }

    fn on_response(&self, g: &CMatrix) -> Result<(f64, CMatrix)> {
        let a = self.target.dotc(g);
        let n = g.norm_squared();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Numerical("response vanished or diverged while fitting".into()));
        }
        let t = self.target_norm2;
        let residual = (1.0 - a.norm_sqr() / (t * n)).max(0.0);
        // d(-residual)/d(conj G)
        let d = self.target * (a / (t * n)) - g * Complex64::from(a.norm_sqr() / (t * n * n));
        Ok((-residual, d))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Block {
    Phases,
    Displacements,
}

struct BlockState {
    block: Block,
    /// Next trial step; `None` until the first accepted move.
    bb_step: Option<f64>,
    first_step: f64,
    stalled: bool,
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 50;

struct Trajectory {
    config: Configuration,
    trace: Vec<f64>,
    converged: bool,
}

fn flat_phase_grad(g: &ConfigGradient) -> Vec<f64> {
    g.phases.iter().flatten().copied().collect()
}

fn flat_displacement_grad(g: &ConfigGradient) -> Vec<f64> {
    g.displacements.iter().flatten().flat_map(|p| p.iter().copied().collect::<Vec<_>>()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn step_phases(config: &Configuration, dir: &[f64], t: f64) -> Result<Configuration> {
    let mut out = config.clone();
    let mut k = 0;
    for p in &mut out.phases {
        let moved: Vec<f64> = p.as_slice().iter().map(|&th| {
            let v = th + t * dir[k];
            k += 1;
            v
        })
        .collect();
        *p = PhaseProfile::new(moved)?;
    }
    Ok(out)
}

fn step_displacements(config: &Configuration, dir: &[f64], t: f64) -> Configuration {
    let mut out = config.clone();
    let mut k = 0;
    for d in &mut out.displacements {
        let moved: Vec<Point> = d
            .offsets()
            .iter()
            .map(|o| {
                let p = Point::new(o.x + t * dir[k], o.y + t * dir[k + 1], o.z + t * dir[k + 2]);
                k += 3;
                p
            })
            .collect();
        *d = DisplacementProfile::projected(moved, d.bound());
    }
    out
}

fn flat_offsets(config: &Configuration) -> Vec<f64> {
    config.displacements.iter().flat_map(|d| d.offsets().iter().flat_map(|o| [o.x, o.y, o.z])).collect()
}

/// Single projected-ascent trajectory from `start`.
fn ascend(objective: &dyn Objective, start: Configuration, params: &OptimizerParams) -> Result<Trajectory> {
    let spec = objective.model().spec();
    let mut blocks = vec![BlockState { block: Block::Phases, bb_step: None, first_step: params.step_size, stalled: false }];
    if let ArchitectureKind::Film { bound, .. } = spec.kind {
        blocks.push(BlockState {
            block: Block::Displacements,
            bb_step: None,
            first_step: params.step_size * bound,
            stalled: false,
        });
    }
    let mut x = start;
    let (mut f, mut grad) = objective.value_and_gradient(&x)?;
    if !f.is_finite() {
        return Err(Error::Numerical("objective is not finite at the starting point".into()));
    }
    let mut trace = vec![f];
    let mut converged = false;
    for iter in 0..params.max_iters {
        let b = iter % blocks.len();
        let state = &mut blocks[b];
        let dir = match state.block {
            Block::Phases => flat_phase_grad(&grad),
            Block::Displacements => flat_displacement_grad(&grad),
        };
        let gnorm = inf_norm(&dir);
        let mut accepted = None;
        if gnorm > 0.0 && gnorm.is_finite() {
            let mut t = state.bb_step.unwrap_or(state.first_step / gnorm);
            let x_flat = match state.block {
                Block::Displacements => flat_offsets(&x),
                Block::Phases => Vec::new(),
            };
            for _ in 0..MAX_BACKTRACKS {
                let (cand, predicted) = match state.block {
                    Block::Phases => (step_phases(&x, &dir, t)?, t * dot(&dir, &dir)),
                    Block::Displacements => {
                        let c = step_displacements(&x, &dir, t);
                        let moved: Vec<f64> = flat_offsets(&c).iter().zip(&x_flat).map(|(a, b)| a - b).collect();
                        let pred = dot(&dir, &moved);
                        (c, pred)
                    }
                };
                let fc = objective.value(&cand);
                if let Ok(fc) = fc {
                    if fc.is_finite() && fc >= f + ARMIJO * predicted && predicted > 0.0 {
                        accepted = Some((cand, t));
                        break;
                    }
                }
                t *= 0.5;
            }
        }
        let Some((cand, t)) = accepted else {
            state.stalled = true;
            if blocks.iter().all(|s| s.stalled) {
                converged = true;
                break;
            }
            continue;
        };
        let (fc, gc) = objective.value_and_gradient(&cand)?;
        // Barzilai-Borwein: s = moved distance, y = gradient change
        let (s, y): (Vec<f64>, Vec<f64>) = match state.block {
            Block::Phases => (dir.iter().map(|d| t * d).collect(), flat_phase_grad(&gc)
                .iter()
                .zip(&dir)
                .map(|(a, b)| a - b)
                .collect()),
            Block::Displacements => (
                flat_offsets(&cand).iter().zip(flat_offsets(&x)).map(|(a, b)| a - b).collect(),
                flat_displacement_grad(&gc).iter().zip(&dir).map(|(a, b)| a - b).collect(),
            ),
        };
        let sy = dot(&s, &y);
        let ss = dot(&s, &s);
        let bb = (ss / sy).abs();
        let cap = 1e6 * state.first_step / gnorm.max(f64::MIN_POSITIVE);
        state.bb_step = Some(if bb.is_finite() && bb > 0.0 { bb.min(cap) } else { 2.0 * t });

        let rel = (fc - f) / f.abs().max(1e-300);
        x = cand;
        f = fc;
        grad = gc;
        trace.push(f);
        if rel < params.tolerance {
            state.stalled = true;
            if blocks.iter().all(|s| s.stalled) {
                converged = true;
                break;
            }
        } else {
            blocks.iter_mut().for_each(|s| s.stalled = false);
        }
    }
    Ok(Trajectory { config: x, trace, converged })
}

/// Runs `params.restarts` trajectories (the first from `warm_start` when
/// given) and keeps the best; ties go to the lowest restart index.
fn multi_start(objective: &dyn Objective, params: &OptimizerParams, warm_start: Option<&Configuration>) -> Result<(usize, Trajectory)> {
    params.validate()?;
    let spec = objective.model().spec();
    let runs: Vec<Result<Trajectory>> = (0..params.restarts)
        .into_par_iter()
        .map(|r| {
            let start = match (r, warm_start) {
                (0, Some(c)) => c.clone(),
                _ => random_configuration(spec, &mut rng::substream(params.seed, &[r as u64])),
            };
            ascend(objective, start, params)
        })
        .collect();
    let mut best: Option<(usize, Trajectory)> = None;
    for (r, run) in runs.into_iter().enumerate() {
        let run = run?;
        let better = match &best {
            None => true,
            Some((_, b)) => run.trace.last() > b.trace.last(),
        };
        if better {
            best = Some((r, run));
        }
    }
    Ok(best.expect("at least one restart"))
}

fn capacity_objective<'a>(
    model: &SimModel,
    channel: &'a ChannelRealization,
    scenario: &Scenario,
) -> Result<CapacityObjective<'a>> {
    scenario.validate()?;
    let model = if model.spec().attenuation_ratio == scenario.attenuation_ratio {
        model.clone()
    } else {
        model.with_attenuation(scenario.attenuation_ratio)?
    };
    if channel.matrix.ncols() != model.aperture_len() {
        return Err(Error::shape(format!(
            "channel has {} columns, SIM aperture has {} atoms",
            channel.matrix.ncols(),
            model.aperture_len()
        )));
    }
    let streams = scenario.num_streams_or_users;
    let dim = channel.matrix.nrows().min(model.num_feeds());
    if streams > dim {
        return Err(Error::shape(format!("{streams} streams exceed the effective channel rank bound {dim}")));
    }
    Ok(CapacityObjective {
        model,
        channel: &channel.matrix,
        channel_adj: channel.matrix.adjoint(),
        snr: scenario.tx_power_w() / streams as f64 / scenario.noise_w(),
        streams,
    })
}

/// Maximizes equal-power capacity of `channel * G` over phases (and FILM
/// displacements). The scenario's attenuation ratio overrides the model's.
pub fn optimize_capacity(
    model: &SimModel,
    channel: &ChannelRealization,
    scenario: &Scenario,
    params: &OptimizerParams,
) -> Result<OptimizationReport> {
    optimize_capacity_from(model, channel, scenario, params, None)
}

/// [`optimize_capacity`] with restart 0 seeded from `warm_start`.
pub fn optimize_capacity_from(
    model: &SimModel,
    channel: &ChannelRealization,
    scenario: &Scenario,
    params: &OptimizerParams,
    warm_start: Option<&Configuration>,
) -> Result<OptimizationReport> {
    let objective = capacity_objective(model, channel, scenario)?;
    if let Some(c) = warm_start {
        objective.model.check_config(c)?;
    }
    let (restart, run) = multi_start(&objective, params, warm_start)?;
    Ok(OptimizationReport {
        best_objective: *run.trace.last().expect("non-empty trace"),
        objective_trace: run.trace,
        final_config: run.config,
        converged: run.converged,
        restart,
    })
}

/// Capacity (bits/s/Hz) of a given configuration, same conventions as the
/// optimizer.
pub fn capacity_at(model: &SimModel, config: &Configuration, channel: &ChannelRealization, scenario: &Scenario) -> Result<f64> {
    capacity_objective(model, channel, scenario)?.value(config)
}

/// Analytic capacity gradient with respect to every phase, layer by layer.
pub fn gradient_capacity_phases(
    model: &SimModel,
    config: &Configuration,
    channel: &ChannelRealization,
    scenario: &Scenario,
) -> Result<Vec<f64>> {
    let objective = capacity_objective(model, channel, scenario)?;
    Ok(objective.value_and_gradient(config)?.1.flat_phases())
}

/// Full capacity gradient, displacements included.
pub fn gradient_capacity(
    model: &SimModel,
    config: &Configuration,
    channel: &ChannelRealization,
    scenario: &Scenario,
) -> Result<ConfigGradient> {
    Ok(capacity_objective(model, channel, scenario)?.value_and_gradient(config)?.1)
}

/// Zero-forcing precoder `H^H (H H^H)^-1` (feeds x users) with unit-norm
/// columns.
pub fn zf_targets(user_channels: &CMatrix) -> Result<CMatrix> {
    let (users, feeds) = user_channels.shape();
    if users == 0 || users > feeds {
        return Err(Error::SingularChannel(format!("{users} users cannot be separated with {feeds} inputs")));
    }
    let sv = user_channels.singular_values();
    let (lo, hi) = sv.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    if !(lo > 1e-12 * hi) {
        return Err(Error::SingularChannel(format!("user channels are rank deficient (sigma_min/sigma_max = {:e})", lo / hi)));
    }
    let gram = user_channels * user_channels.adjoint();
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::SingularChannel("user Gram matrix is not positive definite".into()))?;
    let mut p = user_channels.adjoint() * chol.inverse();
    for mut col in p.column_iter_mut() {
        let n = col.norm();
        col /= Complex64::from(n);
    }
    Ok(p)
}

/// Per-atom gains `t` with `target = diag(t) W_in`, if such exist.
fn diagonal_gains(input: &CMatrix, target: &CMatrix) -> Option<Vec<Complex64>> {
    let gains: Vec<Complex64> = (0..input.nrows())
        .map(|n| {
            let w = input.row(n);
            let n2 = w.norm_squared();
            if n2 == 0.0 {
                Complex64::default()
            } else {
                w.dotc(&target.row(n)) / n2
            }
        })
        .collect();
    let mut fitted = input.clone();
    for (n, g) in gains.iter().enumerate() {
        fitted.row_mut(n).iter_mut().for_each(|z| *z *= g);
    }
    ((fitted - target).norm() <= 1e-9 * target.norm()).then_some(gains)
}

/// Fits `G(config)` to `c * target` (best complex `c` per iterate); the
/// objective is the scale-free residual `|G - cT|^2 / |G|^2`, so the trace
/// is non-increasing. MF-SIM targets of the form `diag(t) W_in` are
/// synthesized in closed form.
pub fn fit_precoder(model: &SimModel, target: &CMatrix, params: &OptimizerParams) -> Result<OptimizationReport> {
    fit_precoder_from(model, target, params, None)
}

pub fn fit_precoder_from(
    model: &SimModel,
    target: &CMatrix,
    params: &OptimizerParams,
    warm_start: Option<&Configuration>,
) -> Result<OptimizationReport> {
    params.validate()?;
    let expect = (model.aperture_len(), model.num_feeds());
    if target.shape() != expect {
        return Err(Error::shape(format!("target is {:?}, SIM response is {expect:?}", target.shape())));
    }
    let target_norm2 = target.norm_squared();
    if !(target_norm2 > 0.0) {
        return Err(Error::domain("target must be non-zero"));
    }
    let objective = FitObjective { model, target, target_norm2 };
    if let ArchitectureKind::MfSim { topology, .. } = &model.spec().kind {
        if let Some(gains) = diagonal_gains(model.input_coupling(), target) {
            let peak = gains.iter().fold(0.0f64, |m, g| m.max(g.norm()));
            let scaled: Vec<Complex64> = gains
                .iter()
                .map(|g| {
                    let t = g / peak;
                    if t.norm() > 1.0 {
                        t / t.norm()
                    } else {
                        t
                    }
                })
                .collect();
            let (theta, phi) = mfsim_synthesize(&scaled, topology)?;
            let config = Configuration { phases: vec![theta, phi], displacements: Vec::new() };
            let residual = -objective.value(&config)?;
            return Ok(OptimizationReport {
                best_objective: residual,
                objective_trace: vec![residual],
                final_config: config,
                converged: true,
                restart: 0,
            });
        }
    }
    let (restart, run) = multi_start(&objective, params, warm_start)?;
    let trace: Vec<f64> = run.trace.iter().map(|v| -v).collect();
    Ok(OptimizationReport {
        best_objective: *trace.last().expect("non-empty trace"),
        objective_trace: trace,
        final_config: run.config,
        converged: run.converged,
        restart,
    })
}

/// Normalized fitting residual of a configuration.
pub fn fit_residual(model: &SimModel, config: &Configuration, target: &CMatrix) -> Result<f64> {
    let objective = FitObjective { model, target, target_norm2: target.norm_squared() };
    Ok(-objective.value(config)?)
}

/// Per-atom MF-SIM gains `t` realizing exact zero forcing,
/// `steering * diag(t) * input = I`, with (nearly) the smallest peak
/// `max |t|`, rescaled so that `max |t| = 1`. Returns the gains and the
/// unscaled peak.
///
/// The peak is approached through `min sum |t_n|^p` for p doubling up to
/// 4096, each stage solved by equality-constrained Newton steps; the gap to
/// the true minimax is at most a factor `atoms^(1/4096)`.
pub fn mfsim_zf_gains(steering: &CMatrix, input: &CMatrix) -> Result<(Vec<Complex64>, f64)> {
    let (users, atoms) = steering.shape();
    let feeds = input.ncols();
    if input.nrows() != atoms {
        return Err(Error::shape(format!("steering has {atoms} atoms, input coupling has {}", input.nrows())));
    }
    // rows indexed by (user k, feed j): sum_n S[k, n] W[n, j] t_n = delta_kj
    let a = CMatrix::from_fn(users * feeds, atoms, |r, n| steering[(r / feeds, n)] * input[(n, r % feeds)]);
    let b = DVector::from_fn(users * feeds, |r, _| Complex64::from(if r / feeds == r % feeds { 1.0 } else { 0.0 }));
    let rows = a.nrows();
    let sv = a.singular_values();
    let (lo, hi) = sv.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    if rows > atoms || !(lo > 1e-10 * hi) {
        return Err(Error::SingularChannel("per-atom zero forcing has no exact solution".into()));
    }
    // minimum-norm start
    let gram = (&a * a.adjoint()).lu();
    let y = gram
        .solve(&b)
        .ok_or_else(|| Error::SingularChannel("zero-forcing normal equations are singular".into()))?;
    let t0 = a.adjoint() * y;

    // real embedding x = [Re t; Im t], constraints [[Ar, -Ai], [Ai, Ar]] x = 0 for steps
    let (n, m) = (atoms, rows);
    let dim = 2 * n + 2 * m;
    let mut kkt_a = nalgebra::DMatrix::<f64>::zeros(2 * m, 2 * n);
    for r in 0..m {
        for c in 0..n {
            let z = a[(r, c)];
            kkt_a[(r, c)] = z.re;
            kkt_a[(r, n + c)] = -z.im;
            kkt_a[(m + r, c)] = z.im;
            kkt_a[(m + r, n + c)] = z.re;
        }
    }
    let mut x: Vec<f64> = t0.iter().map(|z| z.re).chain(t0.iter().map(|z| z.im)).collect();
    let objective = |x: &[f64], s: f64, scale: f64| -> f64 {
        (0..n).map(|k| ((x[k] * x[k] + x[n + k] * x[n + k]) / scale).powf(s)).sum()
    };
    let mut p = 4.0;
    while p <= 4096.0 {
        let s = p / 2.0;
        for _ in 0..60 {
            let q: Vec<f64> = (0..n).map(|k| x[k] * x[k] + x[n + k] * x[n + k]).collect();
            let scale = q.iter().fold(0.0f64, |acc, v| acc.max(*v));
            let mut kkt = nalgebra::DMatrix::<f64>::zeros(dim, dim);
            let mut rhs = DVector::<f64>::zeros(dim);
            let mut diag_max = 0.0f64;
            for k in 0..n {
                let qq = q[k] / scale;
                let d1 = s * qq.powf(s - 1.0) / scale;
                let d2 = s * (s - 1.0) * qq.powf(s - 2.0) / (scale * scale);
                let (re, im) = (x[k], x[n + k]);
                rhs[k] = -2.0 * d1 * re;
                rhs[n + k] = -2.0 * d1 * im;
                kkt[(k, k)] = 4.0 * d2 * re * re + 2.0 * d1;
                kkt[(n + k, n + k)] = 4.0 * d2 * im * im + 2.0 * d1;
                kkt[(k, n + k)] = 4.0 * d2 * re * im;
                kkt[(n + k, k)] = 4.0 * d2 * re * im;
                diag_max = diag_max.max(kkt[(k, k)]).max(kkt[(n + k, n + k)]);
            }
            for k in 0..2 * n {
                kkt[(k, k)] += 1e-12 * diag_max;
            }
            kkt.view_mut((2 * n, 0), (2 * m, 2 * n)).copy_from(&kkt_a);
            kkt.view_mut((0, 2 * n), (2 * n, 2 * m)).copy_from(&kkt_a.transpose());
            let Some(sol) = kkt.lu().solve(&rhs) else { break };
            let dx: Vec<f64> = sol.iter().take(2 * n).copied().collect();
            let f0 = objective(&x, s, scale);
            let decrease: f64 = -(0..2 * n).map(|k| rhs[k] * dx[k]).sum::<f64>();
            if !(decrease < -1e-14 * f0) {
                break;
            }
            let mut step = 1.0;
            let mut moved = false;
            for _ in 0..60 {
                let cand: Vec<f64> = x.iter().zip(&dx).map(|(v, d)| v + step * d).collect();
                if objective(&cand, s, scale) <= f0 + 1e-4 * step * decrease {
                    x = cand;
                    moved = true;
                    break;
                }
                step *= 0.5;
            }
            if !moved {
                break;
            }
        }
        p *= 2.0;
    }
    let mut t = DVector::from_fn(n, |k, _| Complex64::new(x[k], x[n + k]));
    // polish feasibility lost to round-off
    if let Some(fix) = gram.solve(&(&b - &a * &t)) {
        t += a.adjoint() * fix;
    }
    let peak = t.iter().fold(0.0f64, |acc, z| acc.max(z.norm()));
    Ok((t.iter().map(|z| z / peak).collect(), peak))
}

/// MF-SIM target `diag(t) W_in` from [`mfsim_zf_gains`].
pub fn mfsim_zf_target(model: &SimModel, steering: &CMatrix) -> Result<CMatrix> {
    let (gains, _) = mfsim_zf_gains(steering, model.input_coupling())?;
    let mut target = model.input_coupling().clone();
    for (n, g) in gains.iter().enumerate() {
        target.row_mut(n).iter_mut().for_each(|z| *z *= g);
    }
    Ok(target)
}
