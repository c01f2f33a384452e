use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64;

use metastack::architecture::{mfsim_response, mfsim_synthesize, WiredTopology};
use metastack::experiments::{self, ExperimentConfig, ExperimentResult, SweepParameter};
use metastack::validation::{self, Fault};
use metastack::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "metastack", version, about = "Stacked intelligent metasurface simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate every scheme at the config's own operating point.
    Run(ExperimentArgs),
    /// Evaluate every scheme over the full sweep grid.
    Sweep(ExperimentArgs),
    /// Closed-form MF-SIM phases for a list of complex targets.
    Synthesize(SynthesizeArgs),
    /// Run the built-in invariant checks.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Capacity,
    Ber,
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML config; omitted keys take the experiment's defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults to use when no config is given.
    #[arg(long, value_enum, default_value = "capacity", conflicts_with = "config")]
    experiment: Experiment,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Overrides seeds.master_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct SynthesizeArgs {
    /// One target per line, `re im`; blank lines and `#` comments ignored.
    #[arg(long)]
    targets: PathBuf,
    /// Phases CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, hide = true)]
    inject_fault: Option<Fault>,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::InfeasibleAmplitude { .. } => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => experiment(&args, true),
        Command::Sweep(args) => experiment(&args, false),
        Command::Synthesize(args) => synthesize(&args),
        Command::Validate(args) => return validate(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn load_config(args: &ExperimentArgs) -> Result<ExperimentConfig, Failure> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::from_path(path).map_err(|e| match e {
            Error::Io(io) => Failure::Config(format!("cannot read {}: {io}", path.display())),
            other => other.into(),
        })?,
        None => match args.experiment {
            Experiment::Capacity => ExperimentConfig::default_capacity(),
            Experiment::Ber => ExperimentConfig::default_ber(),
        },
    };
    if let Some(seed) = args.seed {
        config.seeds.master_seed = seed;
    }
    if args.workers == Some(0) {
        return Err(Failure::Config("--workers must be at least 1".into()));
    }
    Ok(config)
}

fn experiment(args: &ExperimentArgs, single_point: bool) -> Result<(), Failure> {
    let mut config = load_config(args)?;
    if single_point {
        config = experiments::point_config(&config)?;
    }
    let stem = match (config.sweep.parameter, single_point) {
        (SweepParameter::AttenuationRatio, false) => "capacity_vs_attenuation",
        (SweepParameter::AttenuationRatio, true) => "capacity_point",
        (SweepParameter::TxPowerDbm, false) => "ber_vs_power",
        (SweepParameter::TxPowerDbm, true) => "ber_point",
    };
    let started = std::time::Instant::now();
    let result = experiments::run_sweep(&config, args.workers)?;
    print_summary(&result);
    let (csv, meta) = experiments::write_artifacts(&args.out, stem, &result, &config, args.seed.is_some())?;
    eprintln!(
        "wrote {} and {} in {:.1} s",
        csv.display(),
        meta.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn print_summary(result: &ExperimentResult) {
    print!("{:>18}", result.sweep_name);
    for (s, _) in &result.per_scheme_series {
        print!(" {:>13}", s.as_str());
    }
    println!();
    for (i, x) in result.sweep_values.iter().enumerate() {
        print!("{x:>18.4}");
        for (_, series) in &result.per_scheme_series {
            print!(" {:>13.5e}", series[i]);
        }
        println!();
    }
}

fn parse_targets(path: &Path) -> Result<Vec<Complex64>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed = match fields.as_slice() {
            [re, im] => re.parse::<f64>().ok().zip(im.parse::<f64>().ok()),
            _ => None,
        };
        match parsed {
            Some((re, im)) if re.is_finite() && im.is_finite() => out.push(Complex64::new(re, im)),
            _ => {
                return Err(Failure::Config(format!(
                    "{}:{}: expected two finite numbers `re im`",
                    path.display(),
                    no + 1
                )))
            }
        }
    }
    if out.is_empty() {
        return Err(Failure::Config(format!("{}: no targets", path.display())));
    }
    Ok(out)
}

fn synthesize(args: &SynthesizeArgs) -> Result<(), Failure> {
    let targets = parse_targets(&args.targets)?;
    let topology = WiredTopology::adjacent(targets.len());
    let (theta, phi) = mfsim_synthesize(&targets, &topology)?;
    let achieved = mfsim_response(&theta, &phi, &topology, 0.0)?;
    let mut csv = String::from("atom,theta_a,theta_b,phi,target_re,target_im,achieved_re,achieved_im\n");
    let mut residual = 0.0f64;
    for (n, &(a, b)) in topology.pairs().iter().enumerate() {
        let (t, g) = (targets[n], achieved[n]);
        residual = residual.max((t - g).norm());
        csv.push_str(&format!(
            "{n},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            theta.as_slice()[a],
            theta.as_slice()[b],
            phi.as_slice()[n],
            t.re,
            t.im,
            g.re,
            g.im
        ));
    }
    match &args.out {
        Some(path) => std::fs::write(path, csv).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?,
        None => print!("{csv}"),
    }
    eprintln!("{} atoms, max round-trip residual {residual:.3e}", targets.len());
    Ok(())
}

fn validate(args: &ValidateArgs) -> ExitCode {
    let outcomes = validation::run_all(args.inject_fault);
    for o in &outcomes {
        println!(
            "{} {:<22} {:>7.2}s  {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.seconds,
            o.detail
        );
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} of {} checks passed", outcomes.len() - failed, outcomes.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_VALIDATION)
    }
}
