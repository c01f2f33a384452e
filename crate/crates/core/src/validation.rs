//! Built-in invariant suite behind `metastack validate`.

use std::time::Instant;

use num_complex::Complex64;
use rand::RngExt;

use crate::architecture::{
    conventional_response, mfsim_response, mfsim_synthesize, phase_matrix, random_configuration, ArchitectureKind,
    ArchitectureSpec, PhaseProfile, SimModel, WiredTopology,
};
use crate::em::{self, CMatrix, ComplexCoupling, LayerGeometry};
use crate::experiments::{self, ExperimentConfig, SchemeId};
use crate::metrics::{self, Scenario, StopRule};
use crate::optimization;
use crate::rng;

/// Deliberate defects for exercising the harness itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales the analytic gradient by 1.01.
    Gradient,
}

impl std::str::FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gradient" => Ok(Fault::Gradient),
            other => Err(format!("unknown fault `{other}`")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn(Option<Fault>) -> Result<String, String>;

const CHECKS: [(&str, Check); 7] = [
    ("phase_unitarity", unitarity),
    ("mfsim_round_trip", mfsim_round_trip),
    ("cascade_brute_force", cascade_brute_force),
    ("capacity_gradient", capacity_gradient),
    ("attenuation_scaling", attenuation_scaling),
    ("awgn_oracle", awgn_oracle),
    ("worker_determinism", worker_determinism),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

pub fn run_all(fault: Option<Fault>) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|(name, check)| {
            let t = Instant::now();
            let r = check(fault);
            CheckOutcome {
                name,
                passed: r.is_ok(),
                detail: r.unwrap_or_else(|e| e),
                seconds: t.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

fn lambda() -> f64 {
    em::SPEED_OF_LIGHT / 28e9
}

fn err(e: crate::Error) -> String {
    e.to_string()
}

fn unitarity(_: Option<Fault>) -> Result<String, String> {
    let mut r = rng::substream(1, &[]);
    let mut worst = 0.0f64;
    for k in 0..1000 {
        let n = 1 + k % 64;
        let p = PhaseProfile::new((0..n).map(|_| r.random::<f64>() * 40.0 - 20.0).collect()).map_err(err)?;
        let m = phase_matrix(&p);
        let d = &m * m.adjoint() - CMatrix::identity(n, n);
        worst = worst.max(d.iter().fold(0.0f64, |a, z| a.max(z.norm())));
    }
    if worst < 1e-12 {
        Ok(format!("max |PP* - I| = {worst:.1e} over 1000 profiles"))
    } else {
        Err(format!("max |PP* - I| = {worst:.1e}"))
    }
}

fn mfsim_round_trip(_: Option<Fault>) -> Result<String, String> {
    let mut r = rng::substream(2, &[]);
    let mut targets: Vec<Complex64> = (0..1000)
        .map(|_| Complex64::from_polar(r.random::<f64>().sqrt(), r.random::<f64>() * std::f64::consts::TAU))
        .collect();
    targets.extend([Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0), Complex64::new(0.0, -1.0), Complex64::from_polar(1.0, 2.0)]);
    let topo = WiredTopology::adjacent(targets.len());
    let (theta, phi) = mfsim_synthesize(&targets, &topo).map_err(err)?;
    let g = mfsim_response(&theta, &phi, &topo, 0.0).map_err(err)?;
    let worst = g.iter().zip(&targets).fold(0.0f64, |a, (x, t)| a.max((x - t).norm()));
    if worst < 1e-12 {
        Ok(format!("max residual {worst:.1e} over {} targets", targets.len()))
    } else {
        Err(format!("max residual {worst:.1e}"))
    }
}

/// Naive sum over every propagation path of a small stack.
pub fn path_sum(couplings: &[CMatrix], phases: &[PhaseProfile], amplitude: f64) -> CMatrix {
    let last = couplings.last().expect("at least one layer");
    let feeds = couplings[0].ncols();
    let mut g = CMatrix::zeros(last.nrows(), feeds);
    fn walk(l: usize, atom: usize, acc: Complex64, couplings: &[CMatrix], phases: &[PhaseProfile], feed: usize) -> Complex64 {
        // acc is the product from the output back to layer l's atom
        let th = Complex64::from_polar(1.0, phases[l].as_slice()[atom]);
        let acc = acc * th;
        if l == 0 {
            return acc * couplings[0][(atom, feed)];
        }
        (0..couplings[l].ncols())
            .map(|prev| walk(l - 1, prev, acc * couplings[l][(atom, prev)], couplings, phases, feed))
            .sum()
    }
    for m in 0..g.nrows() {
        for f in 0..feeds {
            g[(m, f)] = walk(couplings.len() - 1, m, Complex64::from(amplitude), couplings, phases, f);
        }
    }
    g
}

fn cascade_brute_force(_: Option<Fault>) -> Result<String, String> {
    let l = lambda();
    let mut worst = 0.0f64;
    let mut cases = 0;
    for layers in 1..=3 {
        for atoms in 1..=3 {
            let spec = ArchitectureSpec::conventional(layers, 1, atoms, l, 5e-3, 5e-3, 0.1).map_err(err)?;
            let feeds = LayerGeometry::half_wavelength(1, 2, l, 0.0).map_err(err)?;
            let ArchitectureKind::Conventional { geometries, .. } = &spec.kind else { unreachable!() };
            let mut couplings = vec![em::build_coupling(&feeds, &geometries[0], l).map_err(err)?.into_matrix()];
            for w in geometries.windows(2) {
                couplings.push(em::build_coupling(&w[0], &w[1], l).map_err(err)?.into_matrix());
            }
            let cfg = random_configuration(&spec, &mut rng::substream(3, &[layers as u64, atoms as u64]));
            let fast = conventional_response(&spec, &cfg.phases, &ComplexCoupling(couplings[0].clone()), l).map_err(err)?;
            let slow = path_sum(&couplings, &cfg.phases, spec.amplitude_scale());
            worst = worst.max((fast - &slow).iter().fold(0.0f64, |a, z| a.max(z.norm())) / slow.norm().max(1e-300));
            cases += 1;
        }
    }
    if worst < 1e-12 {
        Ok(format!("{cases} stacks, max relative deviation {worst:.1e}"))
    } else {
        Err(format!("max relative deviation {worst:.1e}"))
    }
}

fn small_scenario() -> Scenario {
    Scenario {
        carrier_hz: 28e9,
        tx_power_dbm: 20.0,
        noise_dbm: -110.0,
        pathloss_exponent: 2.5,
        link_distance_m: 150.0,
        num_streams_or_users: 2,
        attenuation_ratio: 0.1,
    }
}

/// Worst relative error (inf-norm) between the analytic capacity gradient
/// and central differences at `points` random configurations.
pub fn gradient_check(spec: &ArchitectureSpec, points: usize, seed: u64, fault: Option<Fault>) -> crate::Result<f64> {
    let l = lambda();
    let feeds = LayerGeometry::half_wavelength(1, 2, l, 0.0)?;
    let model = SimModel::new(spec.clone(), &feeds, l)?;
    let sc = Scenario { attenuation_ratio: spec.attenuation_ratio, ..small_scenario() };
    let mut worst = 0.0f64;
    for p in 0..points {
        let channel = em::rayleigh_channel(4, model.aperture_len(), sc.path_loss()?, rng::derive_seed(seed, &[p as u64]))?;
        let cfg = random_configuration(spec, &mut rng::substream(seed, &[p as u64, 1]));
        let mut analytic = optimization::gradient_capacity_phases(&model, &cfg, &channel, &sc)?;
        if fault == Some(Fault::Gradient) {
            analytic.iter_mut().for_each(|g| *g *= 1.01);
        }
        let h = 1e-6;
        let mut k = 0;
        let mut err = 0.0f64;
        for layer in 0..cfg.phases.len() {
            for n in 0..cfg.phases[layer].len() {
                let at = |d: f64| -> crate::Result<f64> {
                    let mut c = cfg.clone();
                    let mut v = c.phases[layer].as_slice().to_vec();
                    v[n] += d;
                    c.phases[layer] = PhaseProfile::new(v)?;
                    optimization::capacity_at(&model, &c, &channel, &sc)
                };
                let fd = (at(h)? - at(-h)?) / (2.0 * h);
                err = err.max((fd - analytic[k]).abs());
                k += 1;
            }
        }
        let scale = analytic.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        worst = worst.max(err / scale.max(1e-300));
    }
    Ok(worst)
}

fn capacity_gradient(fault: Option<Fault>) -> Result<String, String> {
    let l = lambda();
    let specs = [
        ("SIM_1L", ArchitectureSpec::conventional(1, 2, 2, l, 5e-3, 5e-3, 0.1)),
        ("SIM_4L", ArchitectureSpec::conventional(4, 2, 2, l, 5e-3, 5e-3, 0.1)),
        ("SIM_7L", ArchitectureSpec::conventional(7, 2, 2, l, 5e-3, 5e-3, 0.1)),
        ("MFSIM_2L", ArchitectureSpec::mfsim(2, 2, l, 5e-3, 5e-3, 0.1)),
        ("FILM_2L", ArchitectureSpec::film(2, 2, l, 5e-3, 5e-3, 2.4e-3, 0.1)),
    ];
    let mut parts = Vec::new();
    for (i, (name, spec)) in specs.into_iter().enumerate() {
        let worst = gradient_check(&spec.map_err(err)?, 10, 100 + i as u64, fault).map_err(err)?;
        if !(worst < 1e-5) {
            return Err(format!("{name}: relative error {worst:.1e} exceeds 1e-5"));
        }
        parts.push(format!("{name} {worst:.0e}"));
    }
    Ok(parts.join(", "))
}

fn attenuation_scaling(_: Option<Fault>) -> Result<String, String> {
    let l = lambda();
    let spec = ArchitectureSpec::conventional(7, 3, 3, l, 5e-3, 5e-3, 0.0).map_err(err)?;
    let feeds = LayerGeometry::half_wavelength(1, 2, l, 0.0).map_err(err)?;
    let m0 = SimModel::new(spec.clone(), &feeds, l).map_err(err)?;
    let m1 = m0.with_attenuation(0.19).map_err(err)?;
    let cfg = random_configuration(&spec, &mut rng::substream(4, &[]));
    let ratio = m1.response(&cfg).map_err(err)?.norm() / m0.response(&cfg).map_err(err)?.norm();
    let dev = (ratio / 0.81f64.powf(3.5) - 1.0).abs();
    if dev < 1e-12 {
        Ok(format!("norm ratio off by {dev:.1e}"))
    } else {
        Err(format!("norm ratio off by {dev:.1e}"))
    }
}

fn awgn_oracle(_: Option<Fault>) -> Result<String, String> {
    let mut parts = Vec::new();
    for (i, db) in [2.0f64, 4.0, 6.0, 8.0, 9.6].into_iter().enumerate() {
        let (est, oracle, se) = awgn_point(db, 50 + i as u64, StopRule::default()).map_err(err)?;
        if (est - oracle).abs() > 3.0 * se {
            return Err(format!("{db} dB: {est:.3e} vs {oracle:.3e} (3 se = {:.1e})", 3.0 * se));
        }
        parts.push(format!("{db} dB ok"));
    }
    Ok(parts.join(", "))
}

/// Monte Carlo BER, analytic BER and its standard error for four
/// interference-free users at per-bit SNR `db`.
pub fn awgn_point(db: f64, seed: u64, stop: StopRule) -> crate::Result<(f64, f64, f64)> {
    let gamma_b = 10f64.powf(db / 10.0);
    let users = 4;
    // per-user symbol energy P/users = 2 gamma_b N0 with unit noise
    let tx = 2.0 * gamma_b * users as f64;
    let e = CMatrix::identity(users, users);
    let est = metrics::ber_qpsk(&e, tx, 1.0, seed, stop)?;
    let oracle = metrics::qpsk_awgn_oracle(gamma_b);
    let bits = (2 * users as u64 * est.symbols) as f64;
    Ok((est.average, oracle, (oracle * (1.0 - oracle) / bits).sqrt()))
}

fn worker_determinism(_: Option<Fault>) -> Result<String, String> {
    let mut c = ExperimentConfig::default_capacity();
    c.scenario.atom_rows = 2;
    c.scenario.atom_cols = 4;
    c.scenario.rx_antennas = 4;
    c.sweep.stop = 0.04;
    c.sweep.realizations = 2;
    c.optimizer.max_iters = 15;
    c.optimizer.restarts = 2;
    let a = experiments::to_csv(&experiments::run_sweep(&c, Some(1)).map_err(err)?);
    let b = experiments::to_csv(&experiments::run_sweep(&c, Some(3)).map_err(err)?);
    let mut ber = ExperimentConfig::default_ber();
    ber.schemes.enabled = vec![SchemeId::MimoDigital, SchemeId::Sim1L, SchemeId::MfSim2L];
    ber.sweep.stop = 4.0;
    ber.sweep.realizations = 2;
    ber.sweep.max_symbols = 200_000;
    ber.optimizer.max_iters = 15;
    ber.optimizer.restarts = 1;
    let x = experiments::to_csv(&experiments::run_sweep(&ber, Some(1)).map_err(err)?);
    let y = experiments::to_csv(&experiments::run_sweep(&ber, Some(3)).map_err(err)?);
    if a == b && x == y {
        Ok("capacity and BER CSVs identical for 1 and 3 workers".into())
    } else {
        Err("outputs differ between worker counts".into())
    }
}
