//! Synthetic federations with analytically known constants.
//!
//! Quadratic clients `f_i(x) = 1/2 (x - b_i)^T A_i (x - b_i) + c_i` admit
//! closed-form minimizers, smoothness/convexity constants and per-client
//! optimum mismatches; logistic clients get their constants from a
//! high-precision Newton reference solve. Federations are immutable after
//! construction and safe to share across threads.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::{client_stream, domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightScheme {
    Uniform,
    ProportionalLognormal,
}

impl WeightScheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "proportional-lognormal" => Ok(Self::ProportionalLognormal),
            other => Err(Error::Config(format!("unknown weight scheme '{other}'"))),
        }
    }
}

/// `f_i(x) = 1/2 (x - b_i)^T A_i (x - b_i) + c_i` with `A_i` symmetric
/// positive definite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadraticClientTask {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: f64,
    /// Largest and smallest eigenvalues of `A_i`, known from construction.
    pub eig_max: f64,
    pub eig_min: f64,
}

impl QuadraticClientTask {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let r = x - &self.b;
        0.5 * r.dot(&(&self.a * &r)) + self.c
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * (x - &self.b)
    }

    /// Minimum value, attained at `b`.
    pub fn min_value(&self) -> f64 {
        self.c
    }
}

/// Regularized binary logistic regression over a client's local samples.
/// Labels are in `{-1, +1}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogisticClientTask {
    pub features: DMatrix<f64>,
    pub labels: Vec<f64>,
    pub lambda: f64,
}

impl LogisticClientTask {
    pub fn samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let s = self.samples() as f64;
        let z = &self.features * x;
        let mut loss = 0.0;
        for (zi, &yi) in z.iter().zip(&self.labels) {
            let margin = -yi * zi;
            // log(1 + exp(margin)) computed stably
            loss += if margin > 0.0 {
                margin + (-margin).exp().ln_1p()
            } else {
                margin.exp().ln_1p()
            };
        }
        loss / s + 0.5 * self.lambda * x.dot(x)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let s = self.samples() as f64;
        let z = &self.features * x;
        let mut g = DVector::zeros(x.len());
        for (row, (zi, &yi)) in z.iter().zip(&self.labels).enumerate() {
            let sigma = 1.0 / (1.0 + (yi * zi).exp()); // sigma(-y z)
            let coeff = -yi * sigma / s;
            g += coeff * self.features.row(row).transpose();
        }
        g + self.lambda * x
    }

    pub fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let s = self.samples() as f64;
        let d = x.len();
        let z = &self.features * x;
        let mut h = DMatrix::zeros(d, d);
        for (row, zi) in z.iter().enumerate() {
            let p = 1.0 / (1.0 + (-zi).exp());
            let w = p * (1.0 - p) / s;
            let phi = self.features.row(row).transpose();
            h += w * &phi * phi.transpose();
        }
        h + DMatrix::identity(d, d) * self.lambda
    }

    /// Standard smoothness bound `lambda_max(X^T X) / (4 s) + lambda`.
    pub fn smoothness_bound(&self) -> f64 {
        let xtx = self.features.transpose() * &self.features;
        let eig = xtx.symmetric_eigen();
        let lmax = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        lmax / (4.0 * self.samples() as f64) + self.lambda
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ClientTask {
    Quadratic(QuadraticClientTask),
    Logistic(LogisticClientTask),
}

impl ClientTask {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match self {
            ClientTask::Quadratic(t) => t.value(x),
            ClientTask::Logistic(t) => t.value(x),
        }
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            ClientTask::Quadratic(t) => t.gradient(x),
            ClientTask::Logistic(t) => t.gradient(x),
        }
    }
}

/// Exact constants attached to a federation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FederationConstants {
    /// Max smoothness constant over clients.
    pub l_smooth: f64,
    /// Strong convexity of the global objective.
    pub mu: f64,
    pub x_star: DVector<f64>,
    pub f_star: f64,
    /// Per-client optimum mismatch `f_i(x*) - f_i*`.
    pub z: Vec<f64>,
    /// Max client weight.
    pub w_max: f64,
    pub sum_w_sq: f64,
}

/// Metric bundle used by the per-round recursion checks.
#[derive(Debug, Clone)]
pub struct ExactMetrics {
    pub suboptimality: f64,
    pub dist_sq: f64,
    pub client_gradients: Vec<DVector<f64>>,
    /// Weighted gradient dispersion `sum_i w_i ||grad f_i - grad f||^2`.
    pub dispersion: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Federation {
    tasks: Vec<ClientTask>,
    weights: Vec<f64>,
    constants: FederationConstants,
}

impl Federation {
    pub fn new(tasks: Vec<ClientTask>, weights: Vec<f64>, constants: FederationConstants) -> Result<Self> {
        if tasks.len() != weights.len() || tasks.is_empty() {
            return Err(Error::InvalidInput("tasks/weights mismatch or empty".into()));
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "weights must be non-negative and sum to 1 (sum = {sum})"
            )));
        }
        Ok(Self { tasks, weights, constants })
    }

    pub fn n(&self) -> usize {
        self.tasks.len()
    }

    pub fn dim(&self) -> usize {
        self.constants.x_star.len()
    }

    pub fn tasks(&self) -> &[ClientTask] {
        &self.tasks
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn constants(&self) -> &FederationConstants {
        &self.constants
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.tasks
            .iter()
            .zip(&self.weights)
            .map(|(t, &w)| w * t.value(x))
            .sum()
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim());
        for (t, &w) in self.tasks.iter().zip(&self.weights) {
            g += w * t.gradient(x);
        }
        g
    }

    pub fn client_gradient(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
        self.tasks[i].gradient(x)
    }

    /// Exact metric bundle at `x`.
    pub fn exact_metrics(&self, x: &DVector<f64>) -> ExactMetrics {
        let client_gradients: Vec<DVector<f64>> =
            self.tasks.iter().map(|t| t.gradient(x)).collect();
        let mut global = DVector::zeros(self.dim());
        for (g, &w) in client_gradients.iter().zip(&self.weights) {
            global += w * g;
        }
        let dispersion = client_gradients
            .iter()
            .zip(&self.weights)
            .map(|(g, &w)| w * (g - &global).norm_squared())
            .sum();
        ExactMetrics {
            suboptimality: self.value(x) - self.constants.f_star,
            dist_sq: (x - &self.constants.x_star).norm_squared(),
            client_gradients,
            dispersion,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Default eigenvalue range for quadratic clients: condition number 100.
pub const DEFAULT_MU0: f64 = 0.1;
pub const DEFAULT_L0: f64 = 10.0;

fn standard_normal_vector<R: Rng>(d: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(rng)))
}

/// Random orthogonal matrix from the QR factorization of a Gaussian matrix.
fn random_orthogonal<R: Rng>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_iterator(d, d, (0..d * d).map(|_| StandardNormal.sample(rng)));
    g.qr().q()
}

fn draw_weights<R: Rng>(n: usize, scheme: WeightScheme, rng: &mut R) -> Vec<f64> {
    match scheme {
        WeightScheme::Uniform => vec![1.0 / n as f64; n],
        WeightScheme::ProportionalLognormal => {
            // Heavy-tailed raw masses concentrate weight on a few clients.
            let raw: Vec<f64> = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    (3.0 * z).exp()
                })
                .collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|r| r / total).collect()
        }
    }
}

/// Build `n` quadratic clients in dimension `d`. Client curvatures have
/// eigenvalues log-uniform in `[DEFAULT_MU0, DEFAULT_L0]`; client optima are
/// `b_i = b_bar + heterogeneity * delta_i` with standard normal `delta_i`, so
/// `heterogeneity = 0` makes every `Z_i = 0` and the dispersion vanish at the
/// shared optimum.
pub fn make_quadratic_federation(
    n: usize,
    d: usize,
    heterogeneity: f64,
    weight_scheme: WeightScheme,
    seed: u64,
) -> Result<Federation> {
    if n < 1 || d < 1 {
        return Err(Error::InvalidInput("n and d must be >= 1".into()));
    }
    if !(heterogeneity >= 0.0) {
        return Err(Error::InvalidInput("heterogeneity must be >= 0".into()));
    }
    let mut rng = client_stream(seed, 0, 0, domain::TASK);

    let weights = draw_weights(n, weight_scheme, &mut rng);
    let b_bar = standard_normal_vector(d, &mut rng);

    let mut tasks = Vec::with_capacity(n);
    let log_lo = DEFAULT_MU0.ln();
    let log_hi = DEFAULT_L0.ln();
    for _ in 0..n {
        let q = random_orthogonal(d, &mut rng);
        let eigs: Vec<f64> = (0..d)
            .map(|_| (log_lo + (log_hi - log_lo) * rng.gen::<f64>()).exp())
            .collect();
        let lambda = DMatrix::from_diagonal(&DVector::from_vec(eigs.clone()));
        let mut a = &q * lambda * q.transpose();
        // symmetrize away factorization round-off
        a = 0.5 * (&a + a.transpose());
        let delta = standard_normal_vector(d, &mut rng);
        let b = &b_bar + heterogeneity * delta;
        let eig_max = eigs.iter().cloned().fold(f64::MIN, f64::max);
        let eig_min = eigs.iter().cloned().fold(f64::MAX, f64::min);
        tasks.push(QuadraticClientTask { a, b, c: 0.0, eig_max, eig_min });
    }

    // Global quadratic: H = sum w_i A_i, x* solves H x* = sum w_i A_i b_i.
    let mut h = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    for (t, &w) in tasks.iter().zip(&weights) {
        h += w * &t.a;
        rhs += w * (&t.a * &t.b);
    }
    let chol = h
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidInput("global Hessian not positive definite".into()))?;
    let x_star = chol.solve(&rhs);

    let l_smooth = tasks.iter().map(|t| t.eig_max).fold(f64::MIN, f64::max);
    let mu = h
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::MAX, f64::min);

    let z: Vec<f64> = tasks
        .iter()
        .map(|t| t.value(&x_star) - t.min_value())
        .collect();
    let f_star: f64 = tasks
        .iter()
        .zip(&weights)
        .map(|(t, &w)| w * t.value(&x_star))
        .sum();
    let w_max = weights.iter().cloned().fold(0.0_f64, f64::max);
    let sum_w_sq = weights.iter().map(|&w| w * w).sum();

    let constants = FederationConstants { l_smooth, mu, x_star, f_star, z, w_max, sum_w_sq };
    let tasks = tasks.into_iter().map(ClientTask::Quadratic).collect();
    Federation::new(tasks, weights, constants)
}

/// Build `n` logistic clients with the given per-client sample counts.
/// Weights are proportional to sample counts; `x*` and `f*` come from a
/// Newton reference solve driven to gradient norm below 1e-10.
pub fn make_logistic_federation(
    n: usize,
    d: usize,
    samples_per_client: &[usize],
    lambda: f64,
    seed: u64,
) -> Result<Federation> {
    if n < 1 || d < 1 {
        return Err(Error::InvalidInput("n and d must be >= 1".into()));
    }
    if samples_per_client.len() != n || samples_per_client.iter().any(|&s| s < 1) {
        return Err(Error::InvalidInput(
            "samples_per_client must have length n with all counts >= 1".into(),
        ));
    }
    if lambda < 0.0 {
        return Err(Error::InvalidInput("lambda must be >= 0".into()));
    }
    let mut rng = client_stream(seed, 0, 1, domain::TASK);

    let total: usize = samples_per_client.iter().sum();
    let weights: Vec<f64> = samples_per_client
        .iter()
        .map(|&s| s as f64 / total as f64)
        .collect();

    let x_true = standard_normal_vector(d, &mut rng);
    let mut tasks = Vec::with_capacity(n);
    for &s in samples_per_client {
        let features =
            DMatrix::from_iterator(s, d, (0..s * d).map(|_| StandardNormal.sample(&mut rng)));
        let labels: Vec<f64> = (0..s)
            .map(|row| {
                let z: f64 = features.row(row).transpose().dot(&x_true);
                let p = 1.0 / (1.0 + (-z).exp());
                if rng.gen::<f64>() < p {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect();
        tasks.push(LogisticClientTask { features, labels, lambda });
    }

    // Reference solve on the weighted objective.
    let value = |x: &DVector<f64>| -> f64 {
        tasks.iter().zip(&weights).map(|(t, &w)| w * t.value(x)).sum()
    };
    let grad = |x: &DVector<f64>| -> DVector<f64> {
        let mut g = DVector::zeros(d);
        for (t, &w) in tasks.iter().zip(&weights) {
            g += w * t.gradient(x);
        }
        g
    };
    let hess = |x: &DVector<f64>| -> DMatrix<f64> {
        let mut h = DMatrix::zeros(d, d);
        for (t, &w) in tasks.iter().zip(&weights) {
            h += w * t.hessian(x);
        }
        h
    };

    let mut x = DVector::zeros(d);
    let mut grad_norm = f64::MAX;
    for _ in 0..200 {
        let g = grad(&x);
        grad_norm = g.norm();
        if grad_norm < 1e-12 {
            break;
        }
        let h = hess(&x);
        let step = h
            .cholesky()
            .ok_or_else(|| Error::ReferenceSolve { grad_norm })?
            .solve(&g);
        // Damped Newton: halve until the value decreases.
        let f0 = value(&x);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &x - t * &step;
            if value(&cand) <= f0 {
                x = cand;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if grad_norm >= 1e-10 {
        return Err(Error::ReferenceSolve { grad_norm });
    }

    let x_star = x;
    let f_star = value(&x_star);
    let l_smooth = tasks
        .iter()
        .map(LogisticClientTask::smoothness_bound)
        .fold(f64::MIN, f64::max);
    let mu = lambda;

    // Per-client minima need their own solves; reuse damped Newton per task.
    let mut z = Vec::with_capacity(n);
    for t in &tasks {
        let mut xi = DVector::zeros(d);
        for _ in 0..200 {
            let g = t.gradient(&xi);
            if g.norm() < 1e-12 {
                break;
            }
            let h = t.hessian(&xi);
            let step = match h.cholesky() {
                Some(c) => c.solve(&g),
                None => break,
            };
            let f0 = t.value(&xi);
            let mut s = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let cand = &xi - s * &step;
                if t.value(&cand) <= f0 {
                    xi = cand;
                    accepted = true;
                    break;
                }
                s *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        z.push(t.value(&x_star) - t.value(&xi));
    }

    let w_max = weights.iter().cloned().fold(0.0_f64, f64::max);
    let sum_w_sq = weights.iter().map(|&w| w * w).sum();
    let constants = FederationConstants { l_smooth, mu, x_star, f_star, z, w_max, sum_w_sq };
    let tasks = tasks.into_iter().map(ClientTask::Logistic).collect();
    Federation::new(tasks, weights, constants)
}

/// Hand-built two-client 1-d quadratic federation used by reference tests:
/// `A = [1], [1]`, `b = [0], [2]`, equal weights.
pub fn two_client_reference_federation() -> Federation {
    let mk = |b: f64| QuadraticClientTask {
        a: DMatrix::from_element(1, 1, 1.0),
        b: DVector::from_element(1, b),
        c: 0.0,
        eig_max: 1.0,
        eig_min: 1.0,
    };
    let tasks = vec![ClientTask::Quadratic(mk(0.0)), ClientTask::Quadratic(mk(2.0))];
    let weights = vec![0.5, 0.5];
    let x_star = DVector::from_element(1, 1.0);
    let constants = FederationConstants {
        l_smooth: 1.0,
        mu: 1.0,
        x_star,
        f_star: 0.5,
        z: vec![0.5, 0.5],
        w_max: 0.5,
        sum_w_sq: 0.5,
    };
    Federation::new(tasks, weights, constants).unwrap()
}
