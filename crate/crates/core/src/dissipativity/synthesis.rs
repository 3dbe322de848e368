use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dissimilarity::Dissimilarity;
use crate::error::Result;
use crate::lp::{LinearProgram, Var};
use crate::mdp::{DeterministicPolicy, PolicySpace};
use crate::measure::Measure;
use crate::rng::{random_measures, rng_for, stream};

use super::{residuals_with, ClassKInf, DissipativityProblem, StorageFunctional, AUDIT_TOL};

/// Floor on the slope of `alpha`.
pub const C_MIN: f64 = 1e-6;
const C_CAP: f64 = 1e6;
const AUDIT_FACTOR: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub policy_cap: usize,
    pub use_quadratic: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig { n_samples: 1000, seed: 0, policy_cap: crate::mdp::DEFAULT_POLICY_CAP, use_quadratic: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateStatus {
    Certified,
    NotCertified,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySet {
    All { count: usize },
    RandomSubset { count: usize, total: String },
}

impl PolicySet {
    pub fn count(&self) -> usize {
        match self {
            PolicySet::All { count } | PolicySet::RandomSubset { count, .. } => *count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub seed: u64,
    pub interior_samples: usize,
    pub vertices: usize,
    pub includes_steady_state: bool,
    pub audit_samples: usize,
    pub policy_set: PolicySet,
}

/// The tightest audited pair for the returned storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstPoint {
    pub rho: Measure,
    pub policy: DeterministicPolicy,
    pub r_a: f64,
    pub r_b: f64,
    pub dissimilarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FsdsdCertificate {
    pub status: CertificateStatus,
    pub storage: StorageFunctional,
    pub alpha: ClassKInf,
    /// Minimum of both residuals over the synthesis sample set.
    pub margin: f64,
    /// Minimum of both residuals over the fresh audit set (absent when the
    /// synthesis set already failed).
    pub audit_min_residual: Option<f64>,
    pub dissimilarity: Dissimilarity,
    pub manifest: SampleManifest,
    pub worst_point: WorstPoint,
    pub rho_star: Measure,
    pub steady_policy: DeterministicPolicy,
}

struct Point {
    rho: Measure,
    policy: usize,
    next: Measure,
    d: f64,
    v_next: f64,
    cost: f64,
}

fn policy_set(space: &PolicySpace, cap: usize, seed: u64, must_include: &[&DeterministicPolicy]) -> (Vec<DeterministicPolicy>, PolicySet) {
    match space.count() {
        Some(count) if count <= cap => {
            let all = (0..count).map(|i| space.policy(i)).collect();
            (all, PolicySet::All { count })
        }
        total => {
            let mut rng = rng_for(seed, stream::SYNTHESIS_POLICIES);
            let mut chosen: Vec<DeterministicPolicy> = must_include.iter().map(|p| (*p).clone()).collect();
            chosen.dedup();
            while chosen.len() < cap.max(must_include.len()) {
                let actions: Vec<usize> = (0..space.n_states).map(|_| rng.random_range(0..space.n_actions)).collect();
                let p = DeterministicPolicy::new(actions);
                if !chosen.contains(&p) {
                    chosen.push(p);
                }
            }
            let total = total.map_or_else(|| "overflow".to_string(), |t| t.to_string());
            let count = chosen.len();
            (chosen, PolicySet::RandomSubset { count, total })
        }
    }
}

fn build_points(problem: &DissipativityProblem<'_>, measures: &[Measure], policies: &[DeterministicPolicy]) -> Result<Vec<Point>> {
    let pairs: Vec<(usize, usize)> = (0..measures.len())
        .flat_map(|i| (0..policies.len()).map(move |j| (i, j)))
        .collect();
    let dists = measures
        .par_iter()
        .map(|rho| problem.distance_to_steady(rho))
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairs
        .into_par_iter()
        .map(|(i, j)| {
            let rho = &measures[i];
            let pi = &policies[j];
            let next = problem.mdp.propagate(pi, rho);
            let v_next = problem.value.value(&next);
            Point { rho: rho.clone(), policy: j, cost: problem.stage.eval(rho, pi), next, d: dists[i], v_next }
        })
        .collect())
}

/// Upper-triangular index pairs of the quadratic weights.
fn quad_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect()
}

fn quad_coeff(x: &[f64], i: usize, j: usize) -> f64 {
    if i == j {
        x[i] * x[i]
    } else {
        2.0 * x[i] * x[j]
    }
}

struct Layout {
    w: Vec<Var>,
    m: Vec<Var>,
    c: Var,
}

/// Affine-in-parameters rows `(coefficients on w, coefficients on M, D, constant)`
/// for both residuals at one point.
fn rows(point: &Point, rho_star: &Measure, gamma: f64, pairs: &[(usize, usize)]) -> [(Vec<f64>, Vec<f64>, f64, f64); 2] {
    let x = point.rho.weights();
    let y = point.next.weights();
    let z = rho_star.weights();
    let n = x.len();
    let wa: Vec<f64> = (0..n).map(|s| x[s] - gamma * y[s] - (1.0 - gamma) * z[s]).collect();
    let wb: Vec<f64> = (0..n).map(|s| x[s] - y[s]).collect();
    let ma: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| quad_coeff(x, i, j) - gamma * quad_coeff(y, i, j) - (1.0 - gamma) * quad_coeff(z, i, j))
        .collect();
    let mb: Vec<f64> = pairs.iter().map(|&(i, j)| quad_coeff(x, i, j) - quad_coeff(y, i, j)).collect();
    [
        (wa, ma, point.d, point.cost),
        (wb, mb, point.d, point.cost + (gamma - 1.0) * point.v_next),
    ]
}

fn layout(lp: &mut LinearProgram, n: usize, n_quad: usize, bound: f64, c_obj: f64) -> Layout {
    let w = (0..n).map(|_| lp.var(0.0, (-bound, bound))).collect();
    let m = (0..n_quad).map(|_| lp.var(0.0, (-bound, bound))).collect();
    let c = lp.var(c_obj, (C_MIN, C_CAP));
    Layout { w, m, c }
}

/// Adds `row(params) - c D >= rhs_floor - constant` plus an optional `- t`.
fn add_rows(lp: &mut LinearProgram, lay: &Layout, rows: &[(Vec<f64>, Vec<f64>, f64, f64)], t: Option<Var>, floor: f64) {
    for (wc, mc, d, constant) in rows {
        let mut terms: Vec<(Var, f64)> = lay.w.iter().copied().zip(wc.iter().copied()).collect();
        terms.extend(lay.m.iter().copied().zip(mc.iter().copied()));
        terms.push((lay.c, -d));
        if let Some(t) = t {
            terms.push((t, -1.0));
        }
        lp.ge(&terms, floor - constant);
    }
}

fn storage_from(lp_values: impl Fn(Var) -> f64, lay: &Layout, n: usize, pairs: &[(usize, usize)], rho_star: &Measure) -> Result<StorageFunctional> {
    let w: Vec<f64> = lay.w.iter().map(|v| lp_values(*v)).collect();
    let quadratic = if lay.m.is_empty() {
        None
    } else {
        let mut m = vec![vec![0.0; n]; n];
        for (&(i, j), v) in pairs.iter().zip(&lay.m) {
            let x = lp_values(*v);
            m[i][j] = x;
            m[j][i] = x;
        }
        Some(m)
    };
    StorageFunctional::anchored(w, quadratic, rho_star)
}

fn worst_point(
    problem: &DissipativityProblem<'_>,
    storage: &StorageFunctional,
    alpha: &ClassKInf,
    points: &[Point],
    policies: &[DeterministicPolicy],
) -> (f64, WorstPoint) {
    let evaluated: Vec<(f64, f64)> = points
        .par_iter()
        .map(|p| residuals_with(problem, storage, alpha, &p.rho, &policies[p.policy], &p.next, p.d, p.v_next))
        .collect();
    let (idx, (r_a, r_b)) = evaluated
        .iter()
        .copied()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.0.min(a.1).total_cmp(&b.0.min(b.1)))
        .expect("non-empty sample set");
    let p = &points[idx];
    (
        r_a.min(r_b),
        WorstPoint { rho: p.rho.clone(), policy: policies[p.policy].clone(), r_a, r_b, dissimilarity: p.d },
    )
}

/// Searches for an affine (optionally quadratic) storage and a linear
/// `alpha(x) = c x` such that both residuals are nonnegative on a sample set.
///
/// The sample set holds every simplex vertex, the steady state and
/// `n_samples` flat-Dirichlet interior points, crossed with every
/// deterministic policy (or a seeded subset when there are more than
/// `policy_cap`). Three linear programs run in sequence:
///
/// 1. maximize the smallest residual `t` over storage weights and `c`;
/// 2. if `t >= 0` up to rounding, maximize `c` keeping every residual at least `min(t, 0)`;
/// 3. fix `c` to three quarters of that maximum and minimize the L1 norm of the weights.
///
/// The reported `alpha` uses half of the maximal slope so the synthesis
/// points keep some slack. A `Certified` storage is then re-audited on a fresh
/// set ten times larger; any residual below `-1e-9` there yields
/// `Inconclusive`. "Certified" therefore means certified on the audited set.
/// For linear stage costs, affine storage and a convex dissimilarity both
/// residuals are concave in `rho`, so the vertex constraints alone already
/// cover the whole simplex.
pub fn synthesize_storage(problem: &DissipativityProblem<'_>, steady_policy: &DeterministicPolicy, config: &SynthesisConfig) -> Result<FsdsdCertificate> {
    if config.n_samples == 0 {
        return Err(crate::error::Error::input("synthesis needs at least one interior sample"));
    }
    let mdp = problem.mdp;
    let n = mdp.n_states();
    let gamma = mdp.gamma();
    let rho_star = problem.rho_star;

    let (policies, set) = policy_set(&mdp.policy_space(), config.policy_cap, config.seed, &[steady_policy]);
    let mut measures: Vec<Measure> = (0..n).map(|s| Measure::dirac(s, n)).collect::<Result<_>>()?;
    measures.push(rho_star.clone());
    measures.extend(random_measures(config.seed, stream::SYNTHESIS_SAMPLES, n, config.n_samples));
    let points = build_points(problem, &measures, &policies)?;

    let pairs = if config.use_quadratic { quad_pairs(n) } else { Vec::new() };
    let all_rows: Vec<_> = points.iter().flat_map(|p| rows(p, rho_star, gamma, &pairs)).collect();
    let v_scale = points.iter().fold(0.0_f64, |m, p| m.max(p.v_next.abs()));
    let bound = 10.0 * (problem.stage.magnitude_bound() / (1.0 - gamma)).max(v_scale).max(1.0);

    // Phase 1: best achievable worst-case residual.
    let mut lp = LinearProgram::maximize();
    let lay = layout(&mut lp, n, pairs.len(), bound, 0.0);
    let t = lp.var(1.0, (f64::NEG_INFINITY, 1.0));
    add_rows(&mut lp, &lay, &all_rows, Some(t), 0.0);
    let phase1 = lp.solve()?;
    let t_star = phase1.get(t);

    let manifest = SampleManifest {
        seed: config.seed,
        interior_samples: config.n_samples,
        vertices: n,
        includes_steady_state: true,
        audit_samples: AUDIT_FACTOR * config.n_samples,
        policy_set: set,
    };

    if t_star < -AUDIT_TOL {
        let storage = storage_from(|v| phase1.get(v), &lay, n, &pairs, rho_star)?;
        let alpha = ClassKInf::linear(phase1.get(lay.c).max(C_MIN))?;
        let (margin, worst) = worst_point(problem, &storage, &alpha, &points, &policies);
        return Ok(FsdsdCertificate {
            status: CertificateStatus::NotCertified,
            storage,
            alpha,
            margin,
            audit_min_residual: None,
            dissimilarity: problem.dissimilarity.clone(),
            manifest,
            worst_point: worst,
            rho_star: rho_star.clone(),
            steady_policy: steady_policy.clone(),
        });
    }
    let floor = t_star.min(0.0);

    // Phase 2: steepest admissible alpha.
    let mut lp = LinearProgram::maximize();
    let lay = layout(&mut lp, n, pairs.len(), bound, 1.0);
    add_rows(&mut lp, &lay, &all_rows, None, floor);
    let c_max = lp.solve()?.get(lay.c);

    // Phase 3: smallest weights for a slightly flatter alpha.
    let c_fixed = (0.75 * c_max).max(C_MIN);
    let mut lp = LinearProgram::minimize();
    let lay = layout(&mut lp, n, pairs.len(), bound, 0.0);
    lp.eq(&[(lay.c, 1.0)], c_fixed);
    for v in lay.w.iter().chain(&lay.m) {
        let u = lp.var(1.0, (0.0, f64::INFINITY));
        lp.ge(&[(u, 1.0), (*v, -1.0)], 0.0);
        lp.ge(&[(u, 1.0), (*v, 1.0)], 0.0);
    }
    add_rows(&mut lp, &lay, &all_rows, None, floor);
    let phase3 = lp.solve()?;
    let storage = storage_from(|v| phase3.get(v), &lay, n, &pairs, rho_star)?;
    let alpha = ClassKInf::linear((0.5 * c_max).max(C_MIN))?;
    let (margin, worst) = worst_point(problem, &storage, &alpha, &points, &policies);
    if margin < -AUDIT_TOL {
        return Ok(FsdsdCertificate {
            status: CertificateStatus::NotCertified,
            storage,
            alpha,
            margin,
            audit_min_residual: None,
            dissimilarity: problem.dissimilarity.clone(),
            manifest,
            worst_point: worst,
            rho_star: rho_star.clone(),
            steady_policy: steady_policy.clone(),
        });
    }

    let audit_measures = random_measures(config.seed, stream::AUDIT, n, AUDIT_FACTOR * config.n_samples);
    let audit_points = build_points(problem, &audit_measures, &policies)?;
    let (audit_min, audit_worst) = worst_point(problem, &storage, &alpha, &audit_points, &policies);
    let (status, worst) = if audit_min < -AUDIT_TOL {
        (CertificateStatus::Inconclusive, audit_worst)
    } else {
        (CertificateStatus::Certified, worst)
    };
    Ok(FsdsdCertificate {
        status,
        storage,
        alpha,
        margin,
        audit_min_residual: Some(audit_min),
        dissimilarity: problem.dissimilarity.clone(),
        manifest,
        worst_point: worst,
        rho_star: rho_star.clone(),
        steady_policy: steady_policy.clone(),
    })
}
