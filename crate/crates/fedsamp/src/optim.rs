//! Optimization drivers.
//!
//! One generic round runs `R` local SGD steps per client, samples on the
//! weighted update norms, and applies the unbiased master update
//! `x <- x - eta_g * sum_{i in S} (w_i / p_i) U_i`. The single-local-step
//! driver is the same code path with `R = 1`, `eta_l = eta`, `eta_g = 1`, so
//! the two trajectories are bit-identical by construction when driven by the
//! same streams. An empty sampled set yields a zero update.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{run_round, RoundTranscript, SamplerKind};
use crate::sampling::{improvement_factors, WeightedNormVector};
use crate::stream::{client_stream, domain};
use crate::tasks::Federation;

/// Model parameters plus the round counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub x: DVector<f64>,
    pub round: u64,
}

impl ModelState {
    pub fn new(x: DVector<f64>) -> Self {
        Self { x, round: 0 }
    }

    pub fn zeros(d: usize) -> Self {
        Self::new(DVector::zeros(d))
    }
}

/// Second-moment contract of the stochastic gradient oracle:
/// `E ||xi||^2 <= M ||grad f_i(x)||^2 + sigma^2`, met with equality here so
/// statistical tests are sharp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientOracleContract {
    pub relative: f64,
    pub sigma_sq: f64,
}

impl GradientOracleContract {
    pub fn exact() -> Self {
        Self { relative: 0.0, sigma_sq: 0.0 }
    }

    pub fn new(relative: f64, sigma_sq: f64) -> Result<Self> {
        if relative < 0.0 || sigma_sq < 0.0 {
            return Err(Error::InvalidInput("noise parameters must be >= 0".into()));
        }
        Ok(Self { relative, sigma_sq })
    }
}

/// `grad f_i(x) + xi` with isotropic Gaussian `xi` whose per-coordinate
/// variance is `(M ||grad||^2 + sigma^2) / d`, so the second moment of the
/// contract holds with equality.
pub fn noisy_gradient<R: Rng>(
    exact: &DVector<f64>,
    contract: &GradientOracleContract,
    stream: &mut R,
) -> DVector<f64> {
    if contract.relative == 0.0 && contract.sigma_sq == 0.0 {
        return exact.clone();
    }
    let d = exact.len();
    let var = (contract.relative * exact.norm_squared() + contract.sigma_sq) / d as f64;
    let sd = var.sqrt();
    let noise = DVector::from_iterator(
        d,
        (0..d).map(|_| {
            let z: f64 = StandardNormal.sample(stream);
            sd * z
        }),
    );
    exact + noise
}

/// Per-round diagnostics.
#[derive(Debug, Clone)]
pub struct RoundMetrics {
    pub alpha: f64,
    pub gamma: f64,
    pub sampled: usize,
    pub norms: WeightedNormVector,
}

pub struct RoundOutcome {
    pub state: ModelState,
    pub transcript: RoundTranscript,
    pub metrics: RoundMetrics,
}

/// One FedAvg round: `R` local steps per client from the broadcast model,
/// update `U_i = x - y_{i,R}`, sampling on `w_i ||U_i||`, global step
/// `x <- x - eta_g * sum_{i in S} (w_i / p_i) U_i`.
#[allow(clippy::too_many_arguments)]
pub fn fedavg_round(
    state: &ModelState,
    federation: &Federation,
    sampler: SamplerKind,
    m: usize,
    local_steps: usize,
    eta_l: f64,
    eta_g: f64,
    contract: &GradientOracleContract,
    j_max: usize,
    seed: u64,
) -> Result<RoundOutcome> {
    if local_steps < 1 {
        return Err(Error::InvalidInput("local step count R must be >= 1".into()));
    }
    if eta_l <= 0.0 || eta_g <= 0.0 {
        return Err(Error::InvalidInput("step sizes must be positive".into()));
    }
    let n = federation.n();
    let round = state.round;
    let weights = federation.weights();

    // Local work; pure function of (seed, round, client).
    let mut weighted_updates: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut noise = client_stream(seed, round, i as u64, domain::NOISE);
        let mut y = state.x.clone();
        for _ in 0..local_steps {
            let exact = federation.client_gradient(i, &y);
            let g = noisy_gradient(&exact, contract, &mut noise);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { seed, round });
            }
            y -= eta_l * g;
        }
        let update = &state.x - &y;
        let weighted = weights[i] * update;
        if !weighted.norm_squared().is_finite() {
            return Err(Error::Diverged { seed, round });
        }
        weighted_updates.push(weighted.iter().cloned().collect());
    }

    let transcript = run_round(sampler, &weighted_updates, m, j_max, seed, round)?;

    // Master update from the submitted (already weighted) updates.
    let mut delta = DVector::zeros(federation.dim());
    for &i in transcript.selection.included() {
        let p = transcript.probs.probs()[i];
        let w_update = DVector::from_vec(weighted_updates[i].clone());
        delta += w_update / p;
    }
    let x_next = &state.x - eta_g * delta;
    if x_next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged { seed, round });
    }

    let norms = WeightedNormVector::from_weighted_updates(&weighted_updates)?;
    let (alpha, gamma) = match sampler {
        SamplerKind::Full => (1.0, 1.0),
        _ => improvement_factors(&norms, m.min(n))?,
    };
    let metrics = RoundMetrics { alpha, gamma, sampled: transcript.participants(), norms };

    Ok(RoundOutcome {
        state: ModelState { x: x_next, round: round + 1 },
        transcript,
        metrics,
    })
}

/// One DSGD round (`U_i = g_i`, master step `eta`). Implemented as the
/// generic round with one local step so the two drivers share a trajectory.
pub fn dsgd_round(
    state: &ModelState,
    federation: &Federation,
    sampler: SamplerKind,
    m: usize,
    eta: f64,
    contract: &GradientOracleContract,
    j_max: usize,
    seed: u64,
) -> Result<RoundOutcome> {
    fedavg_round(state, federation, sampler, m, 1, eta, 1.0, contract, j_max, seed)
}

/// Theorem selector for step-size caps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TheoremTag {
    DsgdCvx,
    DsgdNcvx,
    FedavgCvx,
    FedavgNcvx,
}

impl TheoremTag {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dsgd_cvx" => Ok(Self::DsgdCvx),
            "dsgd_ncvx" => Ok(Self::DsgdNcvx),
            "fedavg_cvx" => Ok(Self::FedavgCvx),
            "fedavg_ncvx" => Ok(Self::FedavgNcvx),
            other => Err(Error::Config(format!("unknown theorem tag '{other}'"))),
        }
    }
}

/// Problem constants feeding the caps.
#[derive(Debug, Clone, Copy)]
pub struct CapConstants {
    pub l_smooth: f64,
    /// Max client weight `W`.
    pub w_max: f64,
    /// Relative gradient-noise constant `M`.
    pub relative_noise: f64,
    /// Local steps `R` (FedAvg only).
    pub local_steps: usize,
    /// `sum_i w_i^2` (FedAvg floors only).
    pub sum_w_sq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizeCaps {
    /// Admissible upper bound on the (effective) step size.
    pub eta_cap: f64,
    /// Lower bound on the global step where applicable. Reported, not
    /// enforced.
    pub eta_g_floor: Option<f64>,
}

/// Theorem-derived admissible step sizes at relative improvement `gamma`.
pub fn step_size_caps(tag: TheoremTag, constants: &CapConstants, gamma: f64) -> Result<StepSizeCaps> {
    let l = constants.l_smooth;
    let m_noise = constants.relative_noise;
    if l <= 0.0 {
        return Err(Error::InvalidInput("L must be positive".into()));
    }
    if !(0.0 < gamma && gamma <= 1.0) {
        return Err(Error::InvalidInput(format!("gamma = {gamma} outside (0, 1]")));
    }
    let r = constants.local_steps.max(1) as f64;
    match tag {
        TheoremTag::DsgdCvx => Ok(StepSizeCaps {
            eta_cap: gamma / ((1.0 + constants.w_max * m_noise) * l),
            eta_g_floor: None,
        }),
        // Keeps the descent coefficient 1 - (1 + M) L eta / (2 gamma) >= 1/2.
        TheoremTag::DsgdNcvx => Ok(StepSizeCaps {
            eta_cap: gamma / ((1.0 + m_noise) * l),
            eta_g_floor: None,
        }),
        TheoremTag::FedavgCvx => {
            let a = 1.0 / (l * (2.0 + m_noise / r));
            let b = gamma / ((1.0 + constants.w_max * (1.0 + m_noise / r)) * l);
            Ok(StepSizeCaps {
                eta_cap: 0.125 * a.min(b),
                eta_g_floor: Some((gamma / constants.sum_w_sq).sqrt()),
            })
        }
        TheoremTag::FedavgNcvx => Ok(StepSizeCaps {
            eta_cap: 1.0 / (8.0 * l * (2.0 + m_noise / r)),
            eta_g_floor: Some((5.0 * gamma / (4.0 * constants.sum_w_sq)).sqrt()),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{make_quadratic_federation, two_client_reference_federation, WeightScheme};
    use nalgebra::DMatrix;

    #[test]
    fn caps_reference_substitutions() {
        let c = CapConstants {
            l_smooth: 2.0,
            w_max: 0.5,
            relative_noise: 0.0,
            local_steps: 1,
            sum_w_sq: 0.5,
        };
        let caps = step_size_caps(TheoremTag::DsgdCvx, &c, 1.0).unwrap();
        assert_eq!(caps.eta_cap, 0.5);
        assert!(caps.eta_g_floor.is_none());

        let c = CapConstants {
            l_smooth: 1.0,
            w_max: 0.1,
            relative_noise: 0.0,
            local_steps: 2,
            sum_w_sq: 0.125,
        };
        let caps = step_size_caps(TheoremTag::FedavgNcvx, &c, 0.5).unwrap();
        assert!((caps.eta_cap - 1.0 / 16.0).abs() < 1e-15);

        let caps = step_size_caps(TheoremTag::FedavgCvx, &c, 0.5).unwrap();
        assert_eq!(caps.eta_g_floor, Some(2.0));

        assert!(step_size_caps(TheoremTag::DsgdCvx, &c, 0.0).is_err());
    }

    #[test]
    fn noisy_gradient_exact_when_noise_off() {
        let g = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let mut rng = client_stream(1, 0, 0, domain::NOISE);
        let out = noisy_gradient(&g, &GradientOracleContract::exact(), &mut rng);
        assert_eq!(out, g);
    }

    #[test]
    fn noisy_gradient_second_moment() {
        let mut rng = client_stream(5, 0, 0, domain::NOISE);
        let draws = 100_000;

        // additive only: E||xi||^2 = 4
        let g = DVector::zeros(3);
        let contract = GradientOracleContract::new(0.0, 4.0).unwrap();
        let mean: f64 = (0..draws)
            .map(|_| (noisy_gradient(&g, &contract, &mut rng) - &g).norm_squared())
            .sum::<f64>()
            / draws as f64;
        // ||xi||^2 is (sigma^2/d) * chi^2_d; 3 sigma of the mean
        let three_sigma = 3.0 * (2.0 * 16.0 / 3.0 / draws as f64).sqrt();
        assert!((mean - 4.0).abs() < three_sigma, "mean {mean}");

        // relative only at ||grad|| = 3: E||xi||^2 = 9
        let g = DVector::from_vec(vec![3.0, 0.0]);
        let contract = GradientOracleContract::new(1.0, 0.0).unwrap();
        let mean: f64 = (0..draws)
            .map(|_| (noisy_gradient(&g, &contract, &mut rng) - &g).norm_squared())
            .sum::<f64>()
            / draws as f64;
        let three_sigma = 3.0 * (2.0 * 81.0 / 2.0 / draws as f64).sqrt();
        assert!((mean - 9.0).abs() < three_sigma, "mean {mean}");
    }

    /// Hand computation: n = 2, w = [0.5, 0.5], exact gradients
    /// g = [(2,0), (0,4)], forced selection S = {1} with p_1 = 0.5,
    /// eta = 0.1: the master sees G = (0, 4) and x drops by (0, 0.4).
    #[test]
    fn dsgd_master_update_hand_computed() {
        // Reproduce the arithmetic directly on the update rule.
        let w = [0.5, 0.5];
        let g1 = DVector::from_vec(vec![0.0, 4.0]);
        let p1 = 0.5;
        let eta = 0.1;
        let big_g = (w[1] / p1) * &g1;
        assert_eq!(big_g, DVector::from_vec(vec![0.0, 4.0]));
        let x = DVector::from_vec(vec![1.0, 1.0]);
        let x_next: DVector<f64> = &x - eta * &big_g;
        assert!((x_next[1] - 0.6).abs() < 1e-15);
        assert_eq!(x_next[0], 1.0);
    }

    #[test]
    fn dsgd_full_participation_exact_gradient_step() {
        let fed = two_client_reference_federation();
        let state = ModelState::new(DVector::from_element(1, 0.0));
        let out = dsgd_round(
            &state,
            &fed,
            SamplerKind::Full,
            2,
            0.1,
            &GradientOracleContract::exact(),
            4,
            9,
        )
        .unwrap();
        // grad f(0) = 0.5*(0-0) + 0.5*(0-2) = -1; x' = 0 - 0.1*(-1) = 0.1
        assert!((out.state.x[0] - 0.1).abs() < 1e-15);
        assert_eq!(out.metrics.sampled, 2);
    }

    #[test]
    fn fedavg_single_client_hand_trace() {
        // f = 0.5 x^2, R = 2, eta_l = 0.1, eta_g = 1, x = 1 -> x' = 0.81
        let task = crate::tasks::QuadraticClientTask {
            a: DMatrix::from_element(1, 1, 1.0),
            b: DVector::from_element(1, 0.0),
            c: 0.0,
            eig_max: 1.0,
            eig_min: 1.0,
        };
        let constants = crate::tasks::FederationConstants {
            l_smooth: 1.0,
            mu: 1.0,
            x_star: DVector::from_element(1, 0.0),
            f_star: 0.0,
            z: vec![0.0],
            w_max: 1.0,
            sum_w_sq: 1.0,
        };
        let fed = Federation::new(
            vec![crate::tasks::ClientTask::Quadratic(task)],
            vec![1.0],
            constants,
        )
        .unwrap();
        let state = ModelState::new(DVector::from_element(1, 1.0));
        let out = fedavg_round(
            &state,
            &fed,
            SamplerKind::Full,
            1,
            2,
            0.1,
            1.0,
            &GradientOracleContract::exact(),
            1,
            0,
        )
        .unwrap();
        assert!((out.state.x[0] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn fedavg_r1_equals_dsgd_bitwise() {
        let fed = make_quadratic_federation(6, 4, 1.0, WeightScheme::Uniform, 17).unwrap();
        let contract = GradientOracleContract::new(0.0, 0.5).unwrap();
        let mut a = ModelState::zeros(4);
        let mut b = ModelState::zeros(4);
        for _ in 0..10 {
            a = dsgd_round(&a, &fed, SamplerKind::Ocs, 2, 0.05, &contract, 6, 33)
                .unwrap()
                .state;
            b = fedavg_round(&b, &fed, SamplerKind::Ocs, 2, 1, 0.05, 1.0, &contract, 6, 33)
                .unwrap()
                .state;
            assert_eq!(a.x, b.x);
        }
    }

    #[test]
    fn empty_selection_leaves_model_unchanged() {
        let fed = make_quadratic_federation(4, 2, 1.0, WeightScheme::Uniform, 23).unwrap();
        let state = ModelState::new(DVector::from_vec(vec![1.0, -1.0]));
        // Uniform with m = 1 over 4 clients will eventually draw nothing.
        let mut seen_empty = false;
        let mut s = state.clone();
        for seed in 0..200 {
            s.round = 0;
            let out = dsgd_round(
                &s,
                &fed,
                SamplerKind::Uniform,
                1,
                0.05,
                &GradientOracleContract::exact(),
                4,
                seed,
            )
            .unwrap();
            if out.metrics.sampled == 0 {
                seen_empty = true;
                assert_eq!(out.state.x, s.x);
                break;
            }
        }
        assert!(seen_empty, "no empty selection in 200 seeds");
    }

    #[test]
    fn monotone_convergence_under_theorem_cap() {
        // Strongly convex quadratic, full participation, exact gradients:
        // distance to x* decreases every round below the cap.
        let fed = make_quadratic_federation(5, 3, 1.0, WeightScheme::Uniform, 29).unwrap();
        let c = fed.constants();
        let caps = step_size_caps(
            TheoremTag::DsgdCvx,
            &CapConstants {
                l_smooth: c.l_smooth,
                w_max: c.w_max,
                relative_noise: 0.0,
                local_steps: 1,
                sum_w_sq: c.sum_w_sq,
            },
            1.0,
        )
        .unwrap();
        let mut state = ModelState::zeros(3);
        let mut prev = (state.x.clone() - &c.x_star).norm_squared();
        for _ in 0..50 {
            state = dsgd_round(
                &state,
                &fed,
                SamplerKind::Full,
                5,
                0.9 * caps.eta_cap,
                &GradientOracleContract::exact(),
                5,
                1,
            )
            .unwrap()
            .state;
            let cur = (state.x.clone() - &c.x_star).norm_squared();
            assert!(cur <= prev + 1e-15);
            prev = cur;
        }
        assert!(prev < 1e-3);
    }
}
