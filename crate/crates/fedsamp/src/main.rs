//! Command-line harness for the federated sampling simulator.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedsamp::harness::{run_experiment, ExperimentConfig};
use fedsamp::optim::{step_size_caps, CapConstants, TheoremTag};
use fedsamp::protocol::SamplerKind;
use fedsamp::sampling::{
    aocs_probabilities, estimator_variance, improvement_factors, ocs_probabilities,
    uniform_probabilities, ProbabilityVector, WeightedNormVector,
};
use fedsamp::Error;

#[derive(Parser)]
#[command(name = "fedsamp", about = "Federated optimization with optimal client sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a key=value config file and write CSV metrics.
    Run {
        /// Path to the config file.
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's seed list (comma-separated).
        #[arg(long)]
        seeds: Option<String>,
        /// Worker threads for seed-level parallelism (0 = all cores).
        #[arg(long, default_value_t = 0)]
        parallel: usize,
    },
    /// Compute sampling probabilities for a whitespace-separated norms file.
    Probs {
        /// File of weighted update norms, whitespace separated.
        norms_file: PathBuf,
        /// Expected number of sampled clients.
        #[arg(long)]
        m: usize,
        /// Which sampler: full, uniform, ocs, or aocs.
        #[arg(long, default_value = "ocs")]
        method: String,
        /// Iteration cap for aocs.
        #[arg(long, default_value_t = 32)]
        j_max: usize,
    },
    /// Compute estimator variance and improvement factors for given probabilities.
    Variance {
        norms_file: PathBuf,
        probs_file: PathBuf,
        /// Expected number of sampled clients for the uniform baseline.
        #[arg(long)]
        m: usize,
    },
    /// Print the theoretical step-size cap for a convergence regime.
    Caps {
        /// Regime: dsgd_cvx, dsgd_ncvx, fedavg_cvx, or fedavg_ncvx.
        theorem: String,
        #[arg(long)]
        l_smooth: f64,
        #[arg(long, default_value_t = 1.0)]
        w_max: f64,
        #[arg(long, default_value_t = 0.0)]
        noise_m: f64,
        #[arg(long, default_value_t = 1)]
        local_steps: usize,
        #[arg(long, default_value_t = 1.0)]
        sum_w_sq: f64,
        #[arg(long)]
        gamma: f64,
    },
}

fn read_floats(path: &PathBuf) -> Result<Vec<f64>, Error> {
    let text = fs::read_to_string(path)?;
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("bad float '{tok}'")))
        })
        .collect()
}

/// Print a float the way `%g` would at six significant digits: trailing
/// zeros trimmed, so `1.000000` prints as `1`.
fn fmt_g(v: f64) -> String {
    let s = format!("{v:.6}");
    let trimmed = s.trim_end_matches('0').trim_end_matches('.');
    if trimmed.is_empty() || trimmed == "-" {
        "0".to_string()
    } else {
        trimmed.to_string()
    }
}

/// Round to `digits` significant digits, absorbing last-ulp noise from
/// text-parsed probabilities before display.
fn round_sig(v: f64, digits: i32) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    let scale = 10f64.powi(digits - 1 - v.abs().log10().floor() as i32);
    (v * scale).round() / scale
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, out, seeds, parallel } => {
            let text = fs::read_to_string(&config)?;
            let mut cfg = ExperimentConfig::parse(&text)?;
            if let Some(list) = seeds {
                cfg.seeds = list
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<u64>()
                            .map_err(|_| Error::Config(format!("bad seed '{s}'")))
                    })
                    .collect::<Result<_, _>>()?;
                cfg.validate()?;
            }
            if parallel > 0 {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(parallel)
                    .build_global()
                    .map_err(|e| Error::Config(e.to_string()))?;
            }
            let output = run_experiment(&cfg)?;
            for w in &output.warnings {
                eprintln!("warning: {w}");
            }
            let csv = output.to_csv();
            match out {
                Some(path) => fs::write(path, csv)?,
                None => print!("{csv}"),
            }
            if !output.diverged_seeds.is_empty() {
                let first = output.diverged_seeds[0];
                return Err(Error::Diverged { seed: first, round: 0 });
            }
            Ok(())
        }
        Command::Probs { norms_file, m, method, j_max } => {
            let norms = WeightedNormVector::new(read_floats(&norms_file)?)?;
            let kind = SamplerKind::parse(&method)?;
            let probs = match kind {
                SamplerKind::Ocs => ocs_probabilities(&norms, m)?,
                SamplerKind::Aocs => aocs_probabilities(&norms, m, j_max)?.0,
                SamplerKind::Uniform => uniform_probabilities(norms.len(), m)?,
                SamplerKind::Full => ProbabilityVector::new(vec![1.0; norms.len()], norms.len())?,
            };
            let line: Vec<String> = probs.probs().iter().map(|&p| fmt_g(p)).collect();
            println!("{}", line.join(" "));
            Ok(())
        }
        Command::Variance { norms_file, probs_file, m } => {
            let norms = WeightedNormVector::new(read_floats(&norms_file)?)?;
            let raw = read_floats(&probs_file)?;
            // The budget only bounds the probability mass; allow anything up
            // to full participation so externally produced vectors load.
            let n = raw.len();
            let probs = ProbabilityVector::new(raw, n)?;
            let var = round_sig(estimator_variance(&norms, &probs)?, 12);
            let (alpha, gamma) = improvement_factors(&norms, m)?;
            println!("{var:?} alpha={alpha:.6} gamma={gamma:.6}");
            Ok(())
        }
        Command::Caps { theorem, l_smooth, w_max, noise_m, local_steps, sum_w_sq, gamma } => {
            let tag = TheoremTag::parse(&theorem)?;
            let constants = CapConstants {
                l_smooth,
                w_max,
                relative_noise: noise_m,
                local_steps,
                sum_w_sq,
            };
            let caps = step_size_caps(tag, &constants, gamma)?;
            match caps.eta_g_floor {
                Some(floor) => println!("{:?} eta_g_floor={:?}", caps.eta_cap, floor),
                None => println!("{:?}", caps.eta_cap),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Diverged { seed, .. }) => {
            eprintln!("error: trajectory diverged for seed {seed}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
