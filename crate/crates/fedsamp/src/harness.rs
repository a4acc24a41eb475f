//! Experiment configuration, orchestration, and CSV metrics emission.
//!
//! Configs are flat `key=value` text; unknown keys are errors. A run is
//! deterministic end to end: identical config and seed list produce
//! byte-identical CSV. Seeds execute in a worker pool and rows are merged in
//! seed order.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::optim::{dsgd_round, fedavg_round, GradientOracleContract, ModelState};
use crate::protocol::{BitLedger, SamplerKind};
use crate::tasks::{make_logistic_federation, make_quadratic_federation, Federation, WeightScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Dsgd,
    Fedavg,
}

impl Algorithm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dsgd" => Ok(Self::Dsgd),
            "fedavg" => Ok(Self::Fedavg),
            other => Err(Error::Config(format!("unknown algorithm '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Quadratic,
    Logistic,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "quadratic" => Ok(Self::Quadratic),
            "logistic" => Ok(Self::Logistic),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub sampler: SamplerKind,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub local_steps: usize,
    pub rounds: usize,
    pub eta: f64,
    pub eta_l: f64,
    pub eta_g: f64,
    pub noise_m: f64,
    pub sigma_sq: f64,
    pub j_max: usize,
    pub float_width: u64,
    pub count_downlink: bool,
    pub task: TaskKind,
    pub heterogeneity: f64,
    pub weight_scheme: WeightScheme,
    pub lambda: f64,
    /// Logistic only; quadratic ignores it.
    pub samples_per_client: Vec<usize>,
    /// When set, every seed shares one federation; seeds then only vary the
    /// gradient noise and selection coins (paired-comparison design).
    pub task_seed: Option<u64>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Dsgd,
            sampler: SamplerKind::Ocs,
            n: 8,
            m: 2,
            d: 4,
            local_steps: 1,
            rounds: 50,
            eta: 0.05,
            eta_l: 0.05,
            eta_g: 1.0,
            noise_m: 0.0,
            sigma_sq: 0.0,
            j_max: 8,
            float_width: 32,
            count_downlink: false,
            task: TaskKind::Quadratic,
            heterogeneity: 1.0,
            weight_scheme: WeightScheme::Uniform,
            lambda: 0.1,
            samples_per_client: vec![],
            task_seed: None,
            seeds: vec![0],
        }
    }
}

impl ExperimentConfig {
    /// Parse the flat `key=value` format. Lines starting with `#` and blank
    /// lines are skipped; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| Error::Config(format!("line {}: bad {what} '{value}'", lineno + 1));
            match key {
                "algorithm" => cfg.algorithm = Algorithm::parse(value)?,
                "sampler" => cfg.sampler = SamplerKind::parse(value)?,
                "n" => cfg.n = value.parse().map_err(|_| bad("n"))?,
                "m" => cfg.m = value.parse().map_err(|_| bad("m"))?,
                "d" => cfg.d = value.parse().map_err(|_| bad("d"))?,
                "local_steps" => cfg.local_steps = value.parse().map_err(|_| bad("local_steps"))?,
                "rounds" => cfg.rounds = value.parse().map_err(|_| bad("rounds"))?,
                "eta" => cfg.eta = value.parse().map_err(|_| bad("eta"))?,
                "eta_l" => cfg.eta_l = value.parse().map_err(|_| bad("eta_l"))?,
                "eta_g" => cfg.eta_g = value.parse().map_err(|_| bad("eta_g"))?,
                "noise_m" => cfg.noise_m = value.parse().map_err(|_| bad("noise_m"))?,
                "sigma_sq" => cfg.sigma_sq = value.parse().map_err(|_| bad("sigma_sq"))?,
                "j_max" => cfg.j_max = value.parse().map_err(|_| bad("j_max"))?,
                "float_width" => cfg.float_width = value.parse().map_err(|_| bad("float_width"))?,
                "count_downlink" => {
                    cfg.count_downlink = value.parse().map_err(|_| bad("count_downlink"))?
                }
                "task" => cfg.task = TaskKind::parse(value)?,
                "heterogeneity" => {
                    cfg.heterogeneity = value.parse().map_err(|_| bad("heterogeneity"))?
                }
                "weight_scheme" => cfg.weight_scheme = WeightScheme::parse(value)?,
                "lambda" => cfg.lambda = value.parse().map_err(|_| bad("lambda"))?,
                "samples_per_client" => {
                    cfg.samples_per_client = value
                        .split_whitespace()
                        .map(|v| v.parse().map_err(|_| bad("samples_per_client")))
                        .collect::<Result<_>>()?
                }
                "task_seed" => {
                    cfg.task_seed = Some(value.parse().map_err(|_| bad("task_seed"))?)
                }
                "seeds" => {
                    cfg.seeds = value
                        .split(|c: char| c == ',' || c.is_whitespace())
                        .filter(|s| !s.is_empty())
                        .map(|v| v.parse().map_err(|_| bad("seeds")))
                        .collect::<Result<_>>()?
                }
                other => return Err(Error::Config(format!("unknown key '{other}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::Config("rounds K must be >= 1".into()));
        }
        if self.m < 1 || self.m > self.n {
            return Err(Error::Config(format!("m = {} must satisfy 1 <= m <= n = {}", self.m, self.n)));
        }
        if self.eta <= 0.0 || self.eta_l <= 0.0 || self.eta_g <= 0.0 {
            return Err(Error::Config("step sizes must be positive".into()));
        }
        if self.local_steps < 1 || self.j_max < 1 {
            return Err(Error::Config("local_steps and j_max must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list must be non-empty".into()));
        }
        if self.task == TaskKind::Logistic
            && !self.samples_per_client.is_empty()
            && self.samples_per_client.len() != self.n
        {
            return Err(Error::Config("samples_per_client length must equal n".into()));
        }
        Ok(())
    }

    fn federation(&self, seed: u64) -> Result<Federation> {
        let seed = self.task_seed.unwrap_or(seed);
        match self.task {
            TaskKind::Quadratic => make_quadratic_federation(
                self.n,
                self.d,
                self.heterogeneity,
                self.weight_scheme,
                seed,
            ),
            TaskKind::Logistic => {
                let counts = if self.samples_per_client.is_empty() {
                    vec![20; self.n]
                } else {
                    self.samples_per_client.clone()
                };
                make_logistic_federation(self.n, self.d, &counts, self.lambda, seed)
            }
        }
    }
}

/// One CSV row. Bits are cumulative within a seed and non-decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub seed: u64,
    pub round: u64,
    pub suboptimality: f64,
    pub dist_sq: f64,
    pub sampled_count: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub cumulative_uplink_bits: u64,
}

pub const CSV_HEADER: &str =
    "seed,round,subopt,dist_sq,sampled_count,alpha,gamma,cum_uplink_bits";

/// 17 significant digits, enough to reconstruct the exact f64.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.seed,
            self.round,
            format_float(self.suboptimality),
            format_float(self.dist_sq),
            self.sampled_count,
            format_float(self.alpha),
            format_float(self.gamma),
            self.cumulative_uplink_bits
        )
    }
}

/// Result of a full experiment: per-round rows in seed order plus the seeds
/// that diverged (their rows stop at the diverging round).
#[derive(Debug)]
pub struct ExperimentOutput {
    pub rows: Vec<MetricsRow>,
    pub diverged_seeds: Vec<u64>,
    /// Advisory notes (e.g. a global step below the proven floor); the run
    /// still executes.
    pub warnings: Vec<String>,
}

impl ExperimentOutput {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            let _ = writeln!(out, "{}", row.to_csv());
        }
        out
    }
}

/// Run one seed. The same seed feeds federation construction, gradient
/// noise, and selection coins, so two samplers at the same seed share a
/// federation and noise realization.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<Vec<MetricsRow>> {
    let federation = config.federation(seed)?;
    let contract = GradientOracleContract::new(config.noise_m, config.sigma_sq)?;
    let mut ledger = BitLedger::new(config.float_width, config.count_downlink);
    let mut state = ModelState::zeros(federation.dim());
    let mut rows = Vec::with_capacity(config.rounds);

    for _ in 0..config.rounds {
        let outcome = match config.algorithm {
            Algorithm::Dsgd => dsgd_round(
                &state,
                &federation,
                config.sampler,
                config.m,
                config.eta,
                &contract,
                config.j_max,
                seed,
            )?,
            Algorithm::Fedavg => fedavg_round(
                &state,
                &federation,
                config.sampler,
                config.m,
                config.local_steps,
                config.eta_l,
                config.eta_g,
                &contract,
                config.j_max,
                seed,
            )?,
        };
        ledger.charge(&outcome.transcript);
        state = outcome.state;
        let metrics = federation.exact_metrics(&state.x);
        if !metrics.suboptimality.is_finite() {
            return Err(Error::Diverged { seed, round: state.round });
        }
        rows.push(MetricsRow {
            seed,
            round: state.round,
            suboptimality: metrics.suboptimality,
            dist_sq: metrics.dist_sq,
            sampled_count: outcome.metrics.sampled,
            alpha: outcome.metrics.alpha,
            gamma: outcome.metrics.gamma,
            cumulative_uplink_bits: ledger.uplink_bits(),
        });
    }
    Ok(rows)
}

/// Run every seed (parallel worker pool), merging rows in seed order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let mut warnings = Vec::new();
    if config.algorithm == Algorithm::Fedavg {
        // The convergence results want a large global step; check against the
        // most permissive floor (worst-case participation factor m/n).
        let fed = config.federation(config.seeds[0])?;
        let sum_w_sq: f64 = fed.weights().iter().map(|w| w * w).sum();
        let floor = (config.m as f64 / config.n as f64 / sum_w_sq).sqrt();
        if config.eta_g < floor {
            warnings.push(format!(
                "eta_g = {} is below the proven global-step floor {floor:.6}",
                config.eta_g
            ));
        }
    }
    let per_seed: Vec<(u64, Result<Vec<MetricsRow>>)> = config
        .seeds
        .par_iter()
        .map(|&seed| (seed, run_seed(config, seed)))
        .collect();

    let mut rows = Vec::new();
    let mut diverged = Vec::new();
    for (seed, result) in per_seed {
        match result {
            Ok(mut seed_rows) => rows.append(&mut seed_rows),
            Err(Error::Diverged { .. }) => diverged.push(seed),
            Err(e) => return Err(e),
        }
    }
    Ok(ExperimentOutput { rows, diverged_seeds: diverged, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "\
algorithm = dsgd
sampler = ocs
task = quadratic
n = 6
m = 2
d = 3
rounds = 5
eta = 0.02
heterogeneity = 1.0
seeds = 1, 2
";

    #[test]
    fn parse_and_validate() {
        let cfg = ExperimentConfig::parse(BASE).unwrap();
        assert_eq!(cfg.n, 6);
        assert_eq!(cfg.seeds, vec![1, 2]);

        assert!(ExperimentConfig::parse("bogus_key = 1").is_err());
        assert!(ExperimentConfig::parse("rounds = 0").is_err());
        assert!(ExperimentConfig::parse("n = 4\nm = 5").is_err());
    }

    #[test]
    fn csv_is_deterministic() {
        let cfg = ExperimentConfig::parse(BASE).unwrap();
        let a = run_experiment(&cfg).unwrap().to_csv();
        let b = run_experiment(&cfg).unwrap().to_csv();
        assert_eq!(a, b);
        assert!(a.starts_with(CSV_HEADER));
    }

    #[test]
    fn full_sampler_reports_everyone() {
        let mut cfg = ExperimentConfig::parse(BASE).unwrap();
        cfg.sampler = SamplerKind::Full;
        let out = run_experiment(&cfg).unwrap();
        for row in &out.rows {
            assert_eq!(row.sampled_count, 6);
            assert_eq!(row.alpha, 1.0);
        }
    }

    #[test]
    fn bits_non_decreasing_per_seed() {
        let cfg = ExperimentConfig::parse(BASE).unwrap();
        let out = run_experiment(&cfg).unwrap();
        for seed in [1u64, 2] {
            let mut prev = 0;
            for row in out.rows.iter().filter(|r| r.seed == seed) {
                assert!(row.cumulative_uplink_bits >= prev);
                prev = row.cumulative_uplink_bits;
            }
        }
    }

    #[test]
    fn ocs_and_aocs_share_loss_trajectory() {
        let mut cfg = ExperimentConfig::parse(BASE).unwrap();
        cfg.j_max = cfg.n;
        let ocs = run_experiment(&cfg).unwrap();
        cfg.sampler = SamplerKind::Aocs;
        let aocs = run_experiment(&cfg).unwrap();
        for (a, b) in ocs.rows.iter().zip(&aocs.rows) {
            assert!((a.suboptimality - b.suboptimality).abs() <= 1e-10 * a.suboptimality.abs().max(1.0));
        }
    }

    #[test]
    fn float_formatting_roundtrips() {
        for v in [0.1, 22.0, 1e-17, -3.5e12, std::f64::consts::PI] {
            let s = format_float(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back, v);
        }
    }
}
