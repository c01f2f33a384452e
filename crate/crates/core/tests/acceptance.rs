//! Acceptance criteria 1-11, one PASS/FAIL line each. Runs without the
//! libtest harness so the lines always reach the output.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use metastack::architecture::{
    conventional_response, mfsim_response, mfsim_synthesize, phase_matrix, random_configuration, ArchitectureKind,
    ArchitectureSpec, PhaseProfile, WiredTopology,
};
use metastack::em::{self, CMatrix, ComplexCoupling, LayerGeometry};
use metastack::experiments::{self, required_power_at_ber, ExperimentConfig, ExperimentResult, SchemeId};
use metastack::metrics::StopRule;
use metastack::validation::{awgn_point, gradient_check, path_sum};
use metastack::{rng, Error};
use num_complex::Complex64;
use rand::RngExt;

type Outcome = Result<String, String>;

fn lambda() -> f64 {
    em::SPEED_OF_LIGHT / 28e9
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn e(err: Error) -> String {
    err.to_string()
}

fn unitarity() -> Outcome {
    let mut r = rng::substream(11, &[]);
    let mut worst = 0.0f64;
    for k in 0..1000 {
        let n = 1 + k % 100;
        let p = PhaseProfile::new((0..n).map(|_| r.random::<f64>() * 100.0 - 50.0).collect()).map_err(e)?;
        let m = phase_matrix(&p);
        let d = &m * m.adjoint() - CMatrix::identity(n, n);
        worst = worst.max(d.iter().fold(0.0f64, |a, z| a.max(z.norm())));
    }
    check(worst < 1e-12, format!("max |PP* - I| = {worst:.2e} over 1000 profiles (< 1e-12)"))
}

fn mfsim_round_trip() -> Outcome {
    let mut r = rng::substream(12, &[]);
    let mut targets: Vec<Complex64> = (0..1000)
        .map(|_| Complex64::from_polar(r.random::<f64>(), r.random::<f64>() * std::f64::consts::TAU))
        .collect();
    for k in 0..8 {
        let arg = k as f64 * std::f64::consts::FRAC_PI_4;
        targets.push(Complex64::from_polar(1.0, arg));
        targets.push(Complex64::from_polar(0.0, arg));
    }
    let topo = WiredTopology::adjacent(targets.len());
    let (theta, phi) = mfsim_synthesize(&targets, &topo).map_err(e)?;
    let g = mfsim_response(&theta, &phi, &topo, 0.0).map_err(e)?;
    let worst = g.iter().zip(&targets).fold(0.0f64, |a, (x, t)| a.max((x - t).norm()));
    check(worst < 1e-12, format!("max residual {worst:.2e} over {} targets incl. |t| in {{0, 1}} (< 1e-12)", targets.len()))
}

fn gradient_oracle() -> Outcome {
    let l = lambda();
    let cases = [
        ("SIM_1L", ArchitectureSpec::conventional(1, 3, 3, l, 5e-3, 5e-3, 0.1)),
        ("SIM_4L", ArchitectureSpec::conventional(4, 3, 3, l, 5e-3, 5e-3, 0.1)),
        ("SIM_7L", ArchitectureSpec::conventional(7, 3, 3, l, 5e-3, 5e-3, 0.1)),
        ("MFSIM_2L", ArchitectureSpec::mfsim(3, 3, l, 5e-3, 5e-3, 0.1)),
        ("FILM_2L", ArchitectureSpec::film(3, 3, l, 5e-3, 5e-3, 2.4e-3, 0.1)),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (i, (name, spec)) in cases.into_iter().enumerate() {
        let worst = gradient_check(&spec.map_err(e)?, 100, 1000 + i as u64, None).map_err(e)?;
        ok &= worst < 1e-5;
        parts.push(format!("{name} {worst:.1e}"));
    }
    check(ok, format!("max relative error over 100 points each: {} (< 1e-5)", parts.join(", ")))
}

fn brute_force() -> Outcome {
    let l = lambda();
    let mut worst = 0.0f64;
    for layers in 1..=3 {
        for atoms in 1..=3 {
            for feeds in 1..=3 {
                let spec = ArchitectureSpec::conventional(layers, 1, atoms, l, 5e-3, 5e-3, 0.2).map_err(e)?;
                let feed_grid = LayerGeometry::half_wavelength(1, feeds, l, 0.0).map_err(e)?;
                let ArchitectureKind::Conventional { geometries, .. } = &spec.kind else { unreachable!() };
                let mut w = vec![em::build_coupling(&feed_grid, &geometries[0], l).map_err(e)?.into_matrix()];
                for pair in geometries.windows(2) {
                    w.push(em::build_coupling(&pair[0], &pair[1], l).map_err(e)?.into_matrix());
                }
                let cfg = random_configuration(&spec, &mut rng::substream(13, &[layers as u64, atoms as u64, feeds as u64]));
                let fast = conventional_response(&spec, &cfg.phases, &ComplexCoupling(w[0].clone()), l).map_err(e)?;
                let slow = path_sum(&w, &cfg.phases, spec.amplitude_scale());
                let dev = (fast - &slow).iter().fold(0.0f64, |a, z| a.max(z.norm())) / slow.norm();
                worst = worst.max(dev);
            }
        }
    }
    check(worst < 1e-12, format!("27 stacks (L, atoms, feeds <= 3), max relative deviation {worst:.2e} (< 1e-12)"))
}

fn awgn() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (i, db) in [2.0, 4.0, 6.0, 8.0, 9.6].into_iter().enumerate() {
        let (est, oracle, se) = awgn_point(db, 500 + i as u64, StopRule::default()).map_err(e)?;
        let z = (est - oracle) / se;
        ok &= z.abs() <= 3.0;
        parts.push(format!("{db} dB z={z:+.2}"));
    }
    check(ok, format!("{} (|z| <= 3)", parts.join(", ")))
}

fn determinism() -> Outcome {
    let mut cap = ExperimentConfig::default_capacity();
    cap.scenario.atom_rows = 3;
    cap.scenario.atom_cols = 4;
    cap.sweep.stop = 0.06;
    cap.sweep.realizations = 3;
    cap.optimizer.max_iters = 20;
    cap.optimizer.restarts = 3;
    let mut ber = ExperimentConfig::default_ber();
    ber.sweep.stop = 6.0;
    ber.sweep.realizations = 2;
    ber.sweep.max_symbols = 300_000;
    ber.optimizer.max_iters = 20;
    ber.optimizer.restarts = 2;
    let mut runs = 0;
    for config in [&cap, &ber] {
        let bytes = |workers| -> Result<(String, String), String> {
            let r = experiments::run_sweep(config, Some(workers)).map_err(e)?;
            Ok((experiments::to_csv(&r), experiments::metadata_json(&r, config, false)))
        };
        let reference = bytes(1)?;
        for workers in [1, 2, 5] {
            runs += 1;
            if bytes(workers)? != reference {
                return Err(format!("{} output differs with {workers} workers", config.sweep.parameter.as_str()));
            }
        }
    }
    Ok(format!("capacity and BER CSV + metadata byte-identical over {runs} re-runs with 1, 2, 5 workers"))
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run_default(name: &str) -> Result<(ExperimentConfig, ExperimentResult, f64), String> {
    let config = ExperimentConfig::from_path(&config_path(name)).map_err(e)?;
    let t = Instant::now();
    let result = experiments::run_sweep(&config, None).map_err(e)?;
    Ok((config, result, t.elapsed().as_secs_f64()))
}

fn series<'a>(r: &'a ExperimentResult, s: SchemeId) -> Result<&'a [f64], String> {
    r.series(s).ok_or_else(|| format!("{s} missing from the run"))
}

fn slope(values: &[f64], alphas: &[f64]) -> f64 {
    (values[0] - values[values.len() - 1]) / (alphas[alphas.len() - 1] - alphas[0])
}

fn capacity_shape(r: &ExperimentResult) -> Outcome {
    let a = &r.sweep_values;
    let mimo = series(r, SchemeId::MimoDigital)?;
    let spread = mimo.iter().fold(0.0f64, |m, v| m.max((v - mimo[0]).abs()));
    let mut ok = spread <= 1e-12 * mimo[0].abs();
    let mut rising = Vec::new();
    let sims = [SchemeId::Sim1L, SchemeId::Sim4L, SchemeId::Sim7L, SchemeId::MfSim2L, SchemeId::Film2L];
    for s in sims {
        if series(r, s)?.windows(2).any(|w| w[1] > w[0]) {
            rising.push(s.as_str());
        }
    }
    ok &= rising.is_empty();
    let k = |s| series(r, s).map(|v| slope(v, a));
    let (s1, s4, s7, mf, film) = (k(SchemeId::Sim1L)?, k(SchemeId::Sim4L)?, k(SchemeId::Sim7L)?, k(SchemeId::MfSim2L)?, k(SchemeId::Film2L)?);
    ok &= s7 > s4 && s4 > mf.max(film) && mf.min(film) > s1;
    check(
        ok,
        format!(
            "MIMO spread {spread:.1e}; non-monotone: {rising:?}; slopes (bit/s/Hz per unit alpha) SIM_7L {s7:.2} > SIM_4L {s4:.2} > MFSIM_2L {mf:.2} / FILM_2L {film:.2} > SIM_1L {s1:.2}"
        ),
    )
}

/// First alpha where `a - b` turns negative, linearly interpolated.
fn crossing(alphas: &[f64], a: &[f64], b: &[f64]) -> Option<f64> {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d[0] < 0.0 {
        return Some(alphas[0]);
    }
    (1..d.len()).find(|&i| d[i] < 0.0).map(|i| alphas[i - 1] + (alphas[i] - alphas[i - 1]) * d[i - 1] / (d[i - 1] - d[i]))
}

fn crossovers(r: &ExperimentResult) -> Outcome {
    let a = &r.sweep_values;
    let s7 = series(r, SchemeId::Sim7L)?;
    let windows = [(SchemeId::Sim4L, 0.10, 0.25), (SchemeId::MimoDigital, 0.18, 0.34), (SchemeId::Sim1L, 0.20, 0.36)];
    let mut ok = true;
    let mut parts = Vec::new();
    for (other, lo, hi) in windows {
        let x = crossing(a, s7, series(r, other)?);
        ok &= x.is_some_and(|x| (lo..=hi).contains(&x));
        parts.push(match x {
            Some(x) => format!("{other} at {x:.3} in [{lo}, {hi}]"),
            None => format!("{other} never in [{lo}, {hi}]"),
        });
    }
    check(ok, format!("SIM_7L drops below {}", parts.join("; ")))
}

fn ber_order(r: &ExperimentResult) -> Outcome {
    let last = r.sweep_values.len() - 1;
    let at = |s| series(r, s).map(|v| v[last]);
    let (b1, b4, b7, mimo) = (at(SchemeId::Sim1L)?, at(SchemeId::Sim4L)?, at(SchemeId::Sim7L)?, at(SchemeId::MimoDigital)?);
    check(
        b7 < b4 && b4 < b1 && b1 > mimo,
        format!(
            "at {} dBm: SIM_7L {b7:.3e} < SIM_4L {b4:.3e} < SIM_1L {b1:.3e}, SIM_1L > MIMO {mimo:.3e}",
            r.sweep_values[last]
        ),
    )
}

fn power_savings(r: &ExperimentResult, users: usize) -> Outcome {
    let curve = |s| r.ber_curve(s, users).ok_or_else(|| format!("{s} missing from the run"));
    let schemes = [SchemeId::Sim7L, SchemeId::MfSim2L, SchemeId::Film2L];
    let at = |target| -> Result<Vec<f64>, String> {
        schemes.iter().map(|&s| required_power_at_ber(&curve(s)?, target).map_err(e)).collect()
    };
    let (target, p) = match at(1e-5) {
        Ok(p) => (1e-5, p),
        Err(_) => (1e-4, at(1e-4)?),
    };
    let (p7, pmf, pfilm) = (p[0], p[1], p[2]);
    check(
        pmf <= p7 - 8.0 && pfilm <= p7 - 4.0,
        format!(
            "required power at BER {target:.0e}: SIM_7L {p7:.2} dBm, MFSIM_2L {pmf:.2} dBm (saving {:.2} dB, need >= 8), FILM_2L {pfilm:.2} dBm (saving {:.2} dB, need >= 4)",
            p7 - pmf,
            p7 - pfilm
        ),
    )
}

fn report(n: usize, name: &str, outcome: &Outcome) -> bool {
    let (tag, detail) = match outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n:>2} {tag} {name}: {detail}");
    outcome.is_ok()
}

fn main() -> ExitCode {
    let mut passed = 0;
    let quick: [(&str, fn() -> Outcome); 6] = [
        ("unitarity", unitarity),
        ("mfsim round trip", mfsim_round_trip),
        ("gradient oracle", gradient_oracle),
        ("small-instance brute force", brute_force),
        ("AWGN oracle", awgn),
        ("determinism", determinism),
    ];
    for (i, (name, f)) in quick.into_iter().enumerate() {
        passed += usize::from(report(i + 1, name, &f()));
    }

    let capacity = run_default("capacity.toml");
    let ber = run_default("ber.toml");
    let from = |run: &Result<(ExperimentConfig, ExperimentResult, f64), String>, f: &dyn Fn(&ExperimentConfig, &ExperimentResult) -> Outcome| {
        match run {
            Ok((c, r, _)) => f(c, r),
            Err(msg) => Err(format!("experiment failed: {msg}")),
        }
    };
    passed += usize::from(report(7, "capacity curve shape", &from(&capacity, &|_, r| capacity_shape(r))));
    passed += usize::from(report(8, "capacity crossovers", &from(&capacity, &|_, r| crossovers(r))));
    passed += usize::from(report(9, "BER ordering", &from(&ber, &|_, r| ber_order(r))));
    passed += usize::from(report(
        10,
        "BER power savings",
        &from(&ber, &|c, r| power_savings(r, c.scenario.num_streams_or_users)),
    ));
    let runtime = match (&capacity, &ber) {
        (Ok((_, _, tc)), Ok((_, _, tb))) => check(
            tc + tb < 1800.0,
            format!(
                "capacity {tc:.0} s + BER {tb:.0} s = {:.0} s on {} thread(s) (< 1800 s)",
                tc + tb,
                rayon::current_num_threads()
            ),
        ),
        _ => Err("an experiment failed".into()),
    };
    passed += usize::from(report(11, "runtime budget", &runtime));

    println!("{passed} of 11 criteria passed");
    if passed == 11 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
