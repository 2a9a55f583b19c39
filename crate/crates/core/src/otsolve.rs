//! Entropic optimal transport, the iterated warp-and-transport scheme, and
//! exhaustive small-instance oracles.

use nalgebra::{DMatrix, Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoise::{matching_logits, squared_distances, DEFAULT_LAMBDA_GEO};
use crate::error::{invalid, Error, Result};
use crate::geometry::{apply_transform, soft_procrustes, PointCloud, RigidTransform};
use crate::matmath::{log_sum_exp, MatchingMatrix};

/// Marginal violation below which a plan counts as converged.
pub const OT_TOLERANCE: f64 = 1e-6;
/// Frobenius change below which the iterated scheme stops.
pub const DEFAULT_TOL_FIX: f64 = 1e-6;
pub const MAX_ASSIGNMENT_SIZE: usize = 8;
pub const MAX_VERIFY_SIZE: usize = 6;

// Iterations stop early once marginals are this tight.
const OT_EARLY_STOP: f64 = 1e-12;
const MARGINAL_SUM_TOL: f64 = 1e-9;
// Spread of the random perturbations added to the sampled warp set.
const PERTURB_ANGLE: f64 = 0.2;
const PERTURB_SHIFT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct TransportProblem {
    pub cost: DMatrix<f64>,
    pub row_marginals: Vec<f64>,
    pub col_marginals: Vec<f64>,
    pub epsilon: f64,
}

impl TransportProblem {
    /// Uniform marginals `1/N`, `1/M`.
    pub fn uniform(cost: DMatrix<f64>, epsilon: f64) -> Self {
        let (n, m) = cost.shape();
        Self {
            cost,
            row_marginals: vec![1.0 / n as f64; n],
            col_marginals: vec![1.0 / m as f64; m],
            epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = self.cost.shape();
        if n == 0 || m == 0 {
            return Err(invalid("empty cost matrix"));
        }
        if self.row_marginals.len() != n || self.col_marginals.len() != m {
            return Err(invalid("marginal lengths do not match the cost matrix"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.cost.iter().any(|x| !x.is_finite()) {
            return Err(invalid("cost has non-finite entries"));
        }
        for marg in [&self.row_marginals, &self.col_marginals] {
            if marg.iter().any(|&x| x.is_nan() || x < 0.0) {
                return Err(invalid("marginals must be nonnegative"));
            }
            if (marg.iter().sum::<f64>() - 1.0).abs() > MARGINAL_SUM_TOL {
                return Err(invalid("marginals must sum to 1"));
            }
        }
        Ok(())
    }

    /// `<C, E> + eps * sum E (ln E - 1)`, with `0 ln 0 = 0`.
    pub fn objective(&self, plan: &DMatrix<f64>) -> f64 {
        self.cost.dot(plan) + self.epsilon * entropy(plan)
    }

    /// Dual value `sum a f + sum b g - eps sum exp((f_i + g_j - C_ij) / eps)`.
    fn dual(&self, f: &[f64], g: &[f64]) -> f64 {
        let eps = self.epsilon;
        let mut mass = 0.0;
        for (j, col) in self.cost.column_iter().enumerate() {
            for (i, &c) in col.iter().enumerate() {
                mass += ((f[i] + g[j] - c) / eps).exp();
            }
        }
        dot(&self.row_marginals, f) + dot(&self.col_marginals, g) - eps * mass
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| if *x == 0.0 { 0.0 } else { x * y }).sum()
}

/// `sum E (ln E - 1)` with `0 ln 0 = 0`.
pub fn entropy(plan: &DMatrix<f64>) -> f64 {
    plan.iter()
        .map(|&x| if x > 0.0 { x * (x.ln() - 1.0) } else { 0.0 })
        .sum()
}

#[derive(Clone, Debug)]
pub struct OtSolution {
    /// The transport plan; total mass 1.
    pub plan: MatchingMatrix,
    /// L-infinity marginal violation of `plan`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Negated dual value after every full sweep. Each sweep is an exact
    /// block-coordinate step on the concave dual, so this never increases.
    pub objective_trace: Vec<f64>,
}

fn log_marginal(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Log-domain Sinkhorn scaling for the entropic problem. Stops after
/// `iters` sweeps or once both marginals hold to ~1e-12; the plan of the
/// last sweep is returned either way, flagged by `converged`.
pub fn entropic_ot(prob: &TransportProblem, iters: usize) -> Result<OtSolution> {
    prob.validate()?;
    if iters == 0 {
        return Err(invalid("entropic_ot needs at least one iteration"));
    }
    let (n, m) = prob.cost.shape();
    let eps = prob.epsilon;
    let log_a: Vec<f64> = prob.row_marginals.iter().map(|&x| log_marginal(x)).collect();
    let log_b: Vec<f64> = prob.col_marginals.iter().map(|&x| log_marginal(x)).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut residual = f64::INFINITY;

    let plan_of = |f: &[f64], g: &[f64]| DMatrix::from_fn(n, m, |i, j| ((f[i] + g[j] - prob.cost[(i, j)]) / eps).exp());
    while iterations < iters {
        iterations += 1;
        for i in 0..n {
            if log_a[i] == f64::NEG_INFINITY {
                f[i] = f64::NEG_INFINITY;
                continue;
            }
            let lse = log_sum_exp((0..m).map(|j| (g[j] - prob.cost[(i, j)]) / eps));
            f[i] = eps * (log_a[i] - lse);
        }
        for j in 0..m {
            if log_b[j] == f64::NEG_INFINITY {
                g[j] = f64::NEG_INFINITY;
                continue;
            }
            let lse = log_sum_exp((0..n).map(|i| (f[i] - prob.cost[(i, j)]) / eps));
            g[j] = eps * (log_b[j] - lse);
        }
        trace.push(-prob.dual(&f, &g));
        residual = marginal_residual(&plan_of(&f, &g), prob);
        if residual < OT_EARLY_STOP {
            break;
        }
    }
    let plan = plan_of(&f, &g);
    Ok(OtSolution {
        plan: MatchingMatrix::weights(plan)?,
        residual,
        iterations,
        converged: residual < OT_TOLERANCE,
        objective_trace: trace,
    })
}

fn marginal_residual(plan: &DMatrix<f64>, prob: &TransportProblem) -> f64 {
    let rows = plan
        .row_iter()
        .zip(&prob.row_marginals)
        .map(|(r, a)| (r.sum() - a).abs());
    let cols = plan
        .column_iter()
        .zip(&prob.col_marginals)
        .map(|(c, b)| (c.sum() - b).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IteratedOtConfig {
    pub tau_feat: f64,
    pub lambda_geo: f64,
    pub epsilon: f64,
    pub ot_iters: usize,
    pub tol_fix: f64,
}

impl Default for IteratedOtConfig {
    fn default() -> Self {
        Self {
            tau_feat: 0.05,
            lambda_geo: DEFAULT_LAMBDA_GEO,
            epsilon: 0.05,
            ot_iters: 2000,
            tol_fix: DEFAULT_TOL_FIX,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OuterStep {
    /// `<C^n, E^n> + eps H(E^n)`.
    pub objective_before: f64,
    /// `<C^n, E^{n+1}> + eps H(E^{n+1})`.
    pub objective_after: f64,
    pub change: f64,
}

#[derive(Clone, Debug)]
pub struct IteratedOtResult {
    /// `E^0, E^1, ...`; `E^0` comes from feature costs alone.
    pub plans: Vec<MatchingMatrix>,
    pub steps: Vec<OuterStep>,
    pub converged: bool,
}

/// Cost built from a plan: negative scaled feature logits plus the squared
/// distance after warping `p` by the plan's Procrustes fit.
pub fn warp_cost(
    plan: &MatchingMatrix,
    p: &PointCloud,
    q: &PointCloud,
    feature_cost: &DMatrix<f64>,
    lambda_geo: f64,
) -> Result<DMatrix<f64>> {
    let fit = soft_procrustes(plan, p, q)?;
    let warped = apply_transform(&fit.transform, p);
    Ok(feature_cost + squared_distances(&warped, q) * lambda_geo)
}

/// Alternates warp estimation and entropic transport for up to `n_outer`
/// rounds, stopping once consecutive plans differ by less than `tol_fix`
/// in Frobenius norm.
pub fn theorem2_iterate(
    p: &PointCloud,
    q: &PointCloud,
    n_outer: usize,
    cfg: &IteratedOtConfig,
) -> Result<IteratedOtResult> {
    theorem2_iterate_from(p, q, n_outer, cfg, None)
}

/// As [`theorem2_iterate`], optionally starting from a given plan instead
/// of the feature-only solution.
pub fn theorem2_iterate_from(
    p: &PointCloud,
    q: &PointCloud,
    n_outer: usize,
    cfg: &IteratedOtConfig,
    start: Option<&MatchingMatrix>,
) -> Result<IteratedOtResult> {
    if cfg.tau_feat.is_nan() || cfg.tau_feat <= 0.0 || cfg.lambda_geo.is_nan() || cfg.lambda_geo < 0.0 {
        return Err(invalid("tau_feat must be positive and lambda_geo nonnegative"));
    }
    let feature_cost = -matching_logits(p.require_features()?, q.require_features()?)?.into_entries() / cfg.tau_feat;
    let first = match start {
        Some(e) => e.clone(),
        None => {
            let sol = entropic_ot(
                &TransportProblem::uniform(feature_cost.clone(), cfg.epsilon),
                cfg.ot_iters,
            )?;
            if !sol.converged {
                log::warn!("initial transport stopped at residual {:e}", sol.residual);
            }
            sol.plan
        }
    };
    let mut plans = vec![first];
    let mut steps = Vec::new();
    let mut converged = false;
    for _ in 0..n_outer {
        let current = plans.last().expect("at least the initial plan");
        let cost = warp_cost(current, p, q, &feature_cost, cfg.lambda_geo)?;
        let prob = TransportProblem::uniform(cost, cfg.epsilon);
        let sol = entropic_ot(&prob, cfg.ot_iters)?;
        if !sol.converged {
            log::warn!("inner transport stopped at residual {:e}", sol.residual);
        }
        let change = (sol.plan.entries() - current.entries()).norm();
        steps.push(OuterStep {
            objective_before: prob.objective(current.entries()),
            objective_after: prob.objective(sol.plan.entries()),
            change,
        });
        plans.push(sol.plan);
        if change < cfg.tol_fix {
            converged = true;
            break;
        }
    }
    Ok(IteratedOtResult {
        plans,
        steps,
        converged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `perm[i]` is the column assigned to row `i`.
    pub perm: Vec<usize>,
    pub value: f64,
}

/// Exhaustive minimum-cost assignment. Among equal values the
/// lexicographically first permutation wins.
pub fn exact_assignment(cost: &DMatrix<f64>) -> Result<Assignment> {
    let n = cost.nrows();
    if cost.ncols() != n || n == 0 {
        return Err(invalid("exact_assignment needs a nonempty square cost"));
    }
    if n > MAX_ASSIGNMENT_SIZE {
        return Err(Error::Refused(format!(
            "exact assignment limited to n <= {MAX_ASSIGNMENT_SIZE}, got {n}"
        )));
    }
    let mut best = Assignment {
        perm: Vec::new(),
        value: f64::INFINITY,
    };
    let mut current = Vec::with_capacity(n);
    let mut used = vec![false; n];
    enumerate(cost, 0.0, &mut current, &mut used, &mut best);
    Ok(best)
}

fn enumerate(cost: &DMatrix<f64>, partial: f64, current: &mut Vec<usize>, used: &mut [bool], best: &mut Assignment) {
    let n = cost.nrows();
    let row = current.len();
    if row == n {
        if partial < best.value {
            best.value = partial;
            best.perm = current.clone();
        }
        return;
    }
    for j in 0..n {
        if !used[j] {
            used[j] = true;
            current.push(j);
            enumerate(cost, partial + cost[(row, j)], current, used, best);
            current.pop();
            used[j] = false;
        }
    }
}

/// Outcome of one Theorem-1 style check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub lhs: f64,
    pub rhs_upper: f64,
    pub holds: bool,
}

/// Compares the best matching-induced warp against a sampled set of warps.
///
/// `lhs` minimizes, over one-to-one matchings, the squared residual of the
/// matching under its own Procrustes warp. `rhs_upper` minimizes, over the
/// Procrustes warps of every matching plus `n_warp_samples` random
/// perturbations of them, the squared residual under the optimal one-to-one
/// matching for that warp. Since the sample set only covers part of SE(3),
/// `rhs_upper` bounds the continuous minimum from above.
pub fn verify_theorem1(p: &PointCloud, q: &PointCloud, n_warp_samples: usize, seed: u64) -> Result<Theorem1Report> {
    let (n, m) = (p.len(), q.len());
    if n == 0 || m == 0 {
        return Err(invalid("clouds must be nonempty"));
    }
    if n > MAX_VERIFY_SIZE || m > MAX_VERIFY_SIZE {
        return Err(Error::Refused(format!(
            "theorem check limited to {MAX_VERIFY_SIZE} points per cloud, got {n} and {m}"
        )));
    }
    let matchings = one_to_one_matchings(n, m);
    let mut lhs = f64::INFINITY;
    let mut warps = Vec::with_capacity(matchings.len() + n_warp_samples);
    for pairs in &matchings {
        let e = MatchingMatrix::from_pairs(n, m, pairs)?;
        let tf = soft_procrustes(&e, p, q)?.transform;
        lhs = lhs.min(matching_residual(&tf, p, q, pairs));
        warps.push(tf);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..n_warp_samples {
        let base = warps[k % matchings.len()];
        warps.push(perturb(&base, &mut rng));
    }
    let rhs_upper = warps
        .iter()
        .map(|tf| {
            matchings
                .iter()
                .map(|pairs| matching_residual(tf, p, q, pairs))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(f64::INFINITY, f64::min);
    Ok(Theorem1Report {
        lhs,
        rhs_upper,
        holds: lhs <= rhs_upper + 1e-9,
    })
}

fn matching_residual(tf: &RigidTransform, p: &PointCloud, q: &PointCloud, pairs: &[(usize, usize)]) -> f64 {
    pairs
        .iter()
        .map(|&(i, j)| (tf.apply(&p.points()[i]) - q.points()[j]).norm_squared())
        .sum()
}

/// All maximal one-to-one matchings between `n` rows and `m` columns, in
/// lexicographic order of the padded permutation.
fn one_to_one_matchings(n: usize, m: usize) -> Vec<Vec<(usize, usize)>> {
    let size = n.max(m);
    let mut out = Vec::new();
    let mut perm: Vec<usize> = (0..size).collect();
    loop {
        out.push(
            perm.iter()
                .copied()
                .enumerate()
                .filter(|&(i, j)| i < n && j < m)
                .collect(),
        );
        if !next_permutation(&mut perm) {
            break;
        }
    }
    out.sort();
    out.dedup();
    out
}

fn next_permutation(perm: &mut [usize]) -> bool {
    let Some(i) = (1..perm.len()).rev().find(|&i| perm[i - 1] < perm[i]) else {
        return false;
    };
    let j = (i..perm.len())
        .rev()
        .find(|&j| perm[j] > perm[i - 1])
        .expect("pivot exists");
    perm.swap(i - 1, j);
    perm[i..].reverse();
    true
}

fn perturb(base: &RigidTransform, rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis = Vector3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    );
    let angle: f64 = PERTURB_ANGLE * rng.sample::<f64, _>(StandardNormal);
    let rot: Matrix3<f64> = Rotation3::from_scaled_axis(axis.normalize() * angle).into_inner();
    let shift = Vector3::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    ) * PERTURB_SHIFT;
    RigidTransform {
        rotation: rot * base.rotation,
        translation: base.translation + shift,
    }
}
