//! Pure sampling mathematics.
//!
//! Per-client "norm mass" `u_i = w_i * ||U_i||` drives every decision here.
//! The closed-form optimal probabilities minimize the independent-sampling
//! variance `sum_i (1 - p_i)/p_i * u_i^2` subject to `0 <= p_i <= 1` and
//! `sum_i p_i <= m`. The iterative rescaling variant reaches the same fixed
//! point using only aggregates, and the brute-force projected-gradient
//! minimizer acts as an independent oracle for both.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clipped to `[0, 1]` with this slack after arithmetic.
pub const PROB_CLIP_EPS: f64 = 1e-12;
/// Budget equality `|sum p_i - m|` is checked to this tolerance.
pub const BUDGET_TOL: f64 = 1e-9;

/// Per-client weighted update norms `u_i = w_i * ||U_i||`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedNormVector {
    values: Vec<f64>,
}

impl WeightedNormVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("norm vector must be non-empty".into()));
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "norm {i} is {v}; norms must be finite and non-negative"
                )));
            }
        }
        Ok(Self { values })
    }

    /// Norms of already-weighted update vectors `||w_i U_i||`.
    pub fn from_weighted_updates(updates: &[Vec<f64>]) -> Result<Self> {
        let norms = updates
            .iter()
            .map(|u| u.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        Self::new(norms)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn positive_count(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }
}

/// Per-client inclusion probabilities under an expected-participation budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityVector {
    probs: Vec<f64>,
    budget: usize,
    degenerate: bool,
}

impl ProbabilityVector {
    /// Validates entries and the budget constraint, clipping tiny numeric
    /// excursions outside `[0, 1]`.
    pub fn new(mut probs: Vec<f64>, budget: usize) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("probability vector must be non-empty".into()));
        }
        if budget < 1 {
            return Err(Error::InvalidInput("budget m must be >= 1".into()));
        }
        for (i, p) in probs.iter_mut().enumerate() {
            if !p.is_finite() || *p < -PROB_CLIP_EPS || *p > 1.0 + PROB_CLIP_EPS {
                return Err(Error::InvalidInput(format!(
                    "probability {i} is {p}; must lie in [0, 1]"
                )));
            }
            *p = p.clamp(0.0, 1.0);
        }
        let sum: f64 = probs.iter().sum();
        if sum > budget as f64 + BUDGET_TOL {
            return Err(Error::InvalidInput(format!(
                "sum of probabilities {sum} exceeds budget {budget}"
            )));
        }
        Ok(Self { probs, budget, degenerate: false })
    }

    /// All-zero probabilities flagged degenerate (the all-zero-norms case).
    pub fn degenerate(n: usize, budget: usize) -> Result<Self> {
        let mut pv = Self::new(vec![0.0; n.max(1)], budget)?;
        pv.degenerate = true;
        Ok(pv)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// True when the input norms were all zero and the caller should decide
    /// whether to skip the round.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Expected number of participants `sum_i p_i`.
    pub fn expected_participants(&self) -> f64 {
        self.probs.iter().sum()
    }
}

/// Set of clients drawn by independent coin flips. Indices are 0-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientSelection {
    included: Vec<usize>,
}

impl ClientSelection {
    pub fn new(mut included: Vec<usize>) -> Self {
        included.sort_unstable();
        included.dedup();
        Self { included }
    }

    pub fn included(&self) -> &[usize] {
        &self.included
    }

    pub fn contains(&self, client: usize) -> bool {
        self.included.binary_search(&client).is_ok()
    }

    pub fn len(&self) -> usize {
        self.included.len()
    }

    pub fn is_empty(&self) -> bool {
        self.included.is_empty()
    }
}

/// Pairwise inclusion probabilities `P_ij = Prob({i, j} in S)` together with
/// a certificate vector `v` for the diagonal bound.
#[derive(Debug, Clone)]
pub struct ProbabilityMatrix {
    n: usize,
    entries: Vec<f64>,
    v: Vec<f64>,
}

impl ProbabilityMatrix {
    /// Build from a row-major `n x n` matrix and a certificate vector.
    pub fn new(n: usize, entries: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::DimensionMismatch(format!(
                "expected {} entries, got {}",
                n * n,
                entries.len()
            )));
        }
        if v.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "expected certificate of length {n}, got {}",
                v.len()
            )));
        }
        for i in 0..n {
            for j in 0..n {
                let e = entries[i * n + j];
                if !(0.0 - PROB_CLIP_EPS..=1.0 + PROB_CLIP_EPS).contains(&e) {
                    return Err(Error::InvalidInput(format!(
                        "matrix entry ({i},{j}) = {e} outside [0, 1]"
                    )));
                }
                let d = (e - entries[j * n + i]).abs();
                if d > PROB_CLIP_EPS {
                    return Err(Error::InvalidInput(format!(
                        "matrix not symmetric at ({i},{j}): asymmetry {d}"
                    )));
                }
            }
        }
        Ok(Self { n, entries, v })
    }

    /// Matrix of an independent sampling: `P_ij = p_i p_j` off the diagonal,
    /// `P_ii = p_i`, with the optimal certificate `v_i = 1 - p_i`.
    pub fn independent(p: &ProbabilityVector) -> Self {
        let n = p.len();
        let probs = p.probs();
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                entries[i * n + j] = if i == j { probs[i] } else { probs[i] * probs[j] };
            }
        }
        let v = probs.iter().map(|&pi| 1.0 - pi).collect();
        Self { n, entries, v }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    /// Diagonal, i.e. the marginal probability vector.
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.entry(i, i)).collect()
    }

    pub fn certificate(&self) -> &[f64] {
        &self.v
    }
}

fn validate_budget(m: usize) -> Result<()> {
    if m < 1 {
        return Err(Error::InvalidInput("budget m must be >= 1".into()));
    }
    Ok(())
}

/// Closed-form variance-optimal inclusion probabilities.
///
/// Sort norms ascending (ties broken by client index); take the largest `l`
/// with `0 < m + l - n <= prefix(l) / u_(l)` (treated as satisfied when
/// `u_(l) = 0`); the `n - l` largest-norm clients get `p = 1`, the rest get
/// `(m + l - n) * u_i / prefix(l)` with `0/0 := 0`.
pub fn ocs_probabilities(norms: &WeightedNormVector, m: usize) -> Result<ProbabilityVector> {
    validate_budget(m)?;
    let n = norms.len();
    if norms.is_all_zero() {
        return ProbabilityVector::degenerate(n, m);
    }
    if m >= n {
        return ProbabilityVector::new(vec![1.0; n], m);
    }

    let u = norms.values();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| u[a].partial_cmp(&u[b]).unwrap().then(a.cmp(&b)));

    let mut prefix = vec![0.0; n + 1];
    for (pos, &idx) in order.iter().enumerate() {
        prefix[pos + 1] = prefix[pos] + u[idx];
    }

    // Largest l in [n-m+1, n] satisfying the ratio condition; l = n-m+1
    // always qualifies (the count m + l - n is then 1 and either u_(l) = 0 or
    // prefix(l) >= u_(l)).
    let mut chosen = None;
    for l in (n - m + 1..=n).rev() {
        let u_l = u[order[l - 1]];
        let count = (m + l - n) as f64;
        if u_l == 0.0 || count * u_l <= prefix[l] {
            chosen = Some(l);
            break;
        }
    }
    let l = chosen.expect("l = n - m + 1 always satisfies the condition");

    let scale = (m + l - n) as f64;
    let denom = prefix[l];
    let mut probs = vec![0.0; n];
    for (pos, &idx) in order.iter().enumerate() {
        probs[idx] = if pos >= l {
            1.0
        } else if denom > 0.0 {
            (scale * u[idx] / denom).clamp(0.0, 1.0)
        } else {
            0.0 // 0/0 := 0 for zero-norm clients
        };
    }
    ProbabilityVector::new(probs, m)
}

/// Iterative-rescaling approximation compatible with sum-only aggregation.
///
/// Starts from `p_i = min(m u_i / sum u, 1)` and repeatedly rescales the
/// unsaturated probabilities by `C = (m - n + I) / P` until `C <= 1` or
/// `j_max` iterations. `P = 0` breaks the loop without recalibration.
/// Returns the probabilities and the number of iterations actually used.
pub fn aocs_probabilities(
    norms: &WeightedNormVector,
    m: usize,
    j_max: usize,
) -> Result<(ProbabilityVector, usize)> {
    validate_budget(m)?;
    if j_max < 1 {
        return Err(Error::InvalidInput("j_max must be >= 1".into()));
    }
    let n = norms.len();
    if norms.is_all_zero() {
        return Ok((ProbabilityVector::degenerate(n, m)?, 0));
    }

    let u = norms.values();
    let total: f64 = u.iter().sum();
    let mut p: Vec<f64> = u
        .iter()
        .map(|&ui| (m as f64 * ui / total).min(1.0))
        .collect();

    let mut iterations = 0;
    for _ in 0..j_max {
        iterations += 1;
        let unsat: Vec<usize> = (0..n).filter(|&i| p[i] < 1.0).collect();
        let p_sum: f64 = unsat.iter().map(|&i| p[i]).sum();
        if p_sum == 0.0 {
            break;
        }
        let c = (m as f64 - n as f64 + unsat.len() as f64) / p_sum;
        for &i in &unsat {
            p[i] = (c * p[i]).min(1.0);
        }
        if c <= 1.0 {
            break;
        }
    }

    Ok((ProbabilityVector::new(p, m)?, iterations))
}

/// Uniform inclusion probabilities `p_i = m / n`.
pub fn uniform_probabilities(n: usize, m: usize) -> Result<ProbabilityVector> {
    validate_budget(m)?;
    if n < 1 {
        return Err(Error::InvalidInput("n must be >= 1".into()));
    }
    if m > n {
        return Err(Error::InvalidInput(format!("m = {m} exceeds n = {n}")));
    }
    ProbabilityVector::new(vec![m as f64 / n as f64; n], m)
}

/// Independent sampling: include each client with its own coin flip.
/// Deterministic given the stream state.
pub fn sample_independent<R: Rng>(p: &ProbabilityVector, stream: &mut R) -> ClientSelection {
    let included = p
        .probs()
        .iter()
        .enumerate()
        .filter(|(_, &pi)| stream.gen::<f64>() < pi)
        .map(|(i, _)| i)
        .collect();
    ClientSelection::new(included)
}

/// Independent-sampling estimator variance `sum_i (1 - p_i)/p_i * u_i^2`.
/// Zero-norm terms contribute 0 regardless of their probability.
pub fn estimator_variance(norms: &WeightedNormVector, p: &ProbabilityVector) -> Result<f64> {
    if norms.len() != p.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} norms vs {} probabilities",
            norms.len(),
            p.len()
        )));
    }
    let mut total = 0.0;
    for (i, (&ui, &pi)) in norms.values().iter().zip(p.probs()).enumerate() {
        if ui == 0.0 {
            continue;
        }
        if pi <= 0.0 {
            return Err(Error::ZeroProbability { client: i });
        }
        total += (1.0 - pi).max(0.0) / pi * ui * ui;
    }
    Ok(total)
}

/// Exact variance of `sum_{i in S} w_i zeta_i / p_i` for an arbitrary
/// sampling encoded by its probability matrix:
/// `e^T ((P - p p^T) o A^T A) e` with columns `a_i = w_i zeta_i / p_i`.
///
/// `weighted_vectors[i]` is the already-weighted vector `w_i zeta_i`.
pub fn general_sampling_variance(
    matrix: &ProbabilityMatrix,
    weighted_vectors: &[Vec<f64>],
) -> Result<f64> {
    let n = matrix.n();
    if weighted_vectors.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} vectors vs matrix of size {n}",
            weighted_vectors.len()
        )));
    }
    let d = weighted_vectors[0].len();
    if weighted_vectors.iter().any(|v| v.len() != d) {
        return Err(Error::DimensionMismatch("vectors have unequal dimensions".into()));
    }
    let p = matrix.diagonal();

    // Columns a_i = (w_i zeta_i) / p_i; a zero-probability client must carry
    // a zero vector or the estimator is undefined.
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (i, v) in weighted_vectors.iter().enumerate() {
        if p[i] <= 0.0 {
            if v.iter().any(|&x| x != 0.0) {
                return Err(Error::ZeroProbability { client: i });
            }
            cols.push(vec![0.0; d]);
        } else {
            cols.push(v.iter().map(|&x| x / p[i]).collect());
        }
    }

    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let coeff = matrix.entry(i, j) - p[i] * p[j];
            if coeff == 0.0 {
                continue;
            }
            let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
            total += coeff * dot;
        }
    }
    Ok(total.max(0.0))
}

/// Improvement factor `alpha` (optimal variance over uniform variance) and
/// relative improvement factor `gamma = m / (alpha (n - m) + m)`.
pub fn improvement_factors(norms: &WeightedNormVector, m: usize) -> Result<(f64, f64)> {
    let n = norms.len();
    validate_budget(m)?;
    if m > n {
        return Err(Error::InvalidInput(format!("m = {m} exceeds n = {n}")));
    }
    if norms.is_all_zero() {
        return Ok((0.0, 1.0));
    }
    let ocs = ocs_probabilities(norms, m)?;
    let unif = uniform_probabilities(n, m)?;
    let var_ocs = estimator_variance(norms, &ocs)?;
    let var_unif = estimator_variance(norms, &unif)?;
    let alpha = if var_unif == 0.0 {
        0.0 // only with m = n; both variances vanish
    } else {
        (var_ocs / var_unif).clamp(0.0, 1.0)
    };
    let gamma = m as f64 / (alpha * (n - m) as f64 + m as f64);
    Ok((alpha, gamma))
}

// ---------------------------------------------------------------------------
// Brute-force oracle
// ---------------------------------------------------------------------------

/// Objective minimized by the oracle: `sum_{u_i > 0} u_i^2 / p_i`. Differs
/// from the estimator variance by the constant `sum u_i^2`, so both have the
/// same minimizer.
fn oracle_objective(u: &[f64], p: &[f64]) -> f64 {
    u.iter()
        .zip(p)
        .filter(|(&ui, _)| ui > 0.0)
        .map(|(&ui, &pi)| ui * ui / pi)
        .sum()
}

/// Euclidean projection onto `{p : lo_i <= p_i <= 1, sum p_i <= m}` by
/// bisection on the shift.
fn project_capped_simplex(y: &[f64], lo: &[f64], m: f64) -> Vec<f64> {
    let clip = |theta: f64| -> Vec<f64> {
        y.iter()
            .zip(lo)
            .map(|(&yi, &li)| (yi - theta).clamp(li, 1.0))
            .collect()
    };
    let p0 = clip(0.0);
    if p0.iter().sum::<f64>() <= m {
        return p0;
    }
    let mut hi = y.iter().cloned().fold(0.0_f64, f64::max) + 1.0;
    let mut lo_t = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo_t + hi);
        if clip(mid).iter().sum::<f64>() > m {
            lo_t = mid;
        } else {
            hi = mid;
        }
    }
    clip(hi)
}

/// Numeric minimizer of the independent-sampling variance over the feasible
/// set, used as an oracle for the closed form. Projected gradient descent
/// with backtracking and multiple random restarts; intended for small `n`
/// (<= 8 recommended).
pub fn brute_force_probabilities(norms: &WeightedNormVector, m: usize) -> Result<ProbabilityVector> {
    validate_budget(m)?;
    let n = norms.len();
    if norms.is_all_zero() {
        return ProbabilityVector::degenerate(n, m);
    }
    let u = norms.values();
    let active: Vec<usize> = (0..n).filter(|&i| u[i] > 0.0).collect();

    // Variance is unaffected by any allocation to zero-norm clients; give
    // them p = 0 and spend the whole budget on the active set.
    if active.len() <= m {
        let mut probs = vec![0.0; n];
        for &i in &active {
            probs[i] = 1.0;
        }
        return ProbabilityVector::new(probs, m);
    }

    let ua: Vec<f64> = active.iter().map(|&i| u[i]).collect();
    let lo: Vec<f64> = vec![1e-9; ua.len()];
    let budget = m as f64;
    let max_iters = 50_000;

    let mut rng = crate::stream::run_stream(0xB00F, crate::stream::domain::ORACLE);
    let total: f64 = ua.iter().sum();

    let mut best: Option<(f64, Vec<f64>, bool)> = None;
    for restart in 0..20 {
        let mut converged = false;
        // First start is the proportional allocation; the rest are random.
        let mut p: Vec<f64> = if restart == 0 {
            ua.iter().map(|&ui| (budget * ui / total).min(1.0)).collect()
        } else {
            ua.iter().map(|_| rng.gen_range(0.05..1.0)).collect()
        };
        p = project_capped_simplex(&p, &lo, budget);
        let mut obj = oracle_objective(&ua, &p);

        for _ in 0..max_iters {
            let grad: Vec<f64> = ua
                .iter()
                .zip(&p)
                .map(|(&ui, &pi)| -ui * ui / (pi * pi))
                .collect();
            // Local curvature estimate gives the initial step; backtrack from
            // there until the projected step decreases the objective.
            let l_est = ua
                .iter()
                .zip(&p)
                .map(|(&ui, &pi)| 2.0 * ui * ui / (pi * pi * pi))
                .fold(0.0_f64, f64::max);
            let mut step = 1.0 / l_est.max(1e-300);
            let mut improved = false;
            for _ in 0..60 {
                let y: Vec<f64> = p.iter().zip(&grad).map(|(&pi, &gi)| pi - step * gi).collect();
                let cand = project_capped_simplex(&y, &lo, budget);
                let cand_obj = oracle_objective(&ua, &cand);
                if cand_obj < obj {
                    let delta = obj - cand_obj;
                    p = cand;
                    obj = cand_obj;
                    improved = true;
                    if delta < 1e-12 * obj.max(1.0) {
                        converged = true;
                    }
                    break;
                }
                step *= 0.5;
            }
            if !improved {
                converged = true;
                break;
            }
            if converged {
                break;
            }
        }

        match &best {
            Some((b, _, _)) if *b <= obj => {}
            _ => best = Some((obj, p.clone(), converged)),
        }
    }

    let (best_obj, best_p, best_converged) = best.expect("at least one restart ran");
    if !best_converged {
        return Err(Error::OracleNonConvergence { best: best_obj });
    }
    let mut probs = vec![0.0; n];
    for (k, &i) in active.iter().enumerate() {
        probs[i] = best_p[k].clamp(0.0, 1.0);
    }
    ProbabilityVector::new(probs, m)
}

/// Oracle objective value of a probability vector (same objective the
/// brute-force minimizer optimizes). Exposed so callers can compare
/// closed-form and oracle allocations on equal footing.
pub fn oracle_objective_of(norms: &WeightedNormVector, p: &ProbabilityVector) -> Result<f64> {
    if norms.len() != p.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} norms vs {} probabilities",
            norms.len(),
            p.len()
        )));
    }
    for (i, (&ui, &pi)) in norms.values().iter().zip(p.probs()).enumerate() {
        if ui > 0.0 && pi <= 0.0 {
            return Err(Error::ZeroProbability { client: i });
        }
    }
    Ok(oracle_objective(norms.values(), p.probs()))
}
