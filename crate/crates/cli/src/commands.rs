use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use measure_mdp::dissimilarity::{Dissimilarity, GroundMetric};
use measure_mdp::dissipativity::{
    check_lyapunov, check_theorem1, synthesize_storage, CertificateStatus, ClassKInf, DissipativityProblem,
    FsdsdCertificate, LyapunovConfig, StorageFunctional, SynthesisConfig, C_MIN,
};
use measure_mdp::functionals::{
    optimal_steady_state, solve_linear_functional, solve_optimal_linear, solve_optimal_nonlinear, FunctionalKindName,
    RolloutValue,
};
use measure_mdp::learning::{fitted_q_learning, theta_from_learned, LearningConfig, LearningStatus, LiftConfig, QParameterization};
use measure_mdp::ocp::{check_theorem4, Theorem4Config};
use measure_mdp::{
    DeterministicPolicy, FiniteMdp, FunctionalSpec, Measure, MdpFile, StageCostFunctional, SteadyState, ValueFunctional,
};
use serde::Serialize;
use serde_json::json;

use crate::artifacts::{Artifacts, Inputs};
use crate::error::{CliError, CliResult};

const ROLLOUT_TOL: f64 = 1e-10;
const DESCENT_TOL: f64 = 1e-9;

/// Shortest round-trip form, switching to scientific notation for very small or large magnitudes.
fn num(x: f64) -> String {
    let a = x.abs();
    if a != 0.0 && !(1e-4..1e15).contains(&a) {
        format!("{x:e}")
    } else {
        x.to_string()
    }
}

pub struct Common {
    pub out: PathBuf,
    pub cap: usize,
}

pub struct FunctionalChoice {
    pub kind: Option<FunctionalKindName>,
    pub beta: f64,
    pub reference: Option<Vec<f64>>,
}

pub struct DissimilarityChoice {
    pub name: &'static str,
    pub metric: Option<PathBuf>,
}

pub struct CertifyOptions {
    pub samples: usize,
    pub seed: u64,
    pub quadratic: bool,
}

pub struct SimulateOptions {
    pub certificate: Option<PathBuf>,
    pub rho_star: Option<Vec<f64>>,
    pub policy: Option<Vec<usize>>,
    pub rho0: Vec<Vec<f64>>,
    pub steps: usize,
}

fn parse_problem(path: &Path, inputs: &mut Inputs) -> CliResult<MdpFile> {
    inputs.json(path)
}

fn load_problem(path: &Path, inputs: &mut Inputs) -> CliResult<(MdpFile, FiniteMdp)> {
    let file = parse_problem(path, inputs)?;
    let report = file.validate();
    if !report.is_valid() {
        return Err(CliError::Domain(format!("invalid problem {}: {report}", path.display())));
    }
    let mdp = FiniteMdp::from_file(&file)?;
    Ok((file, mdp))
}

fn resolve_functional(mdp: &FiniteMdp, file: &MdpFile, choice: &FunctionalChoice) -> CliResult<StageCostFunctional> {
    let spec = match choice.kind {
        Some(kind) => FunctionalSpec { kind, beta: choice.beta, reference: choice.reference.clone() },
        None => file.functional.clone().unwrap_or(FunctionalSpec {
            kind: FunctionalKindName::Linear,
            beta: 0.0,
            reference: None,
        }),
    };
    Ok(StageCostFunctional::from_spec(mdp, &spec)?)
}

fn resolve_dissimilarity(choice: &DissimilarityChoice, n: usize, inputs: &mut Inputs) -> CliResult<Dissimilarity> {
    let metric = match &choice.metric {
        Some(path) => Some(inputs.json::<GroundMetric>(path)?),
        None => None,
    };
    Ok(Dissimilarity::from_name(choice.name, metric, n)?)
}

fn measure_arg(weights: &[f64], n: usize, what: &str) -> CliResult<Measure> {
    if weights.len() != n {
        return Err(CliError::Usage(format!("{what} has {} entries, expected {n}", weights.len())));
    }
    Measure::new(weights.to_vec()).map_err(|e| CliError::Usage(format!("{what}: {e}")))
}

/// Normalized stage cost together with its value functional.
struct Pipeline {
    stage: StageCostFunctional,
    steady: SteadyState,
    value: Box<dyn ValueFunctional>,
    linear_policy: Option<DeterministicPolicy>,
    rollout: Option<RolloutValue>,
}

impl Pipeline {
    fn new(mdp: &FiniteMdp, raw: &StageCostFunctional, cap: usize) -> CliResult<Self> {
        let steady = optimal_steady_state(mdp, raw, cap)?;
        let stage = steady.normalize(raw);
        if stage.is_linear() {
            let solution = solve_linear_functional(mdp, &stage)?;
            let policy = solution.pi_star.clone();
            Ok(Pipeline { stage, steady, value: Box::new(solution), linear_policy: Some(policy), rollout: None })
        } else {
            let rollout = RolloutValue::new(mdp, &stage, ROLLOUT_TOL, cap)?;
            Ok(Pipeline { stage, steady, value: Box::new(rollout.clone()), linear_policy: None, rollout: Some(rollout) })
        }
    }

    fn policy_for(&self, rho: &Measure) -> measure_mdp::Result<DeterministicPolicy> {
        match (&self.linear_policy, &self.rollout) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(r)) => r.solve(rho).map(|(_, p)| p),
            (None, None) => unreachable!("pipeline holds a value functional"),
        }
    }
}

pub fn validate(problem: &Path) -> CliResult<()> {
    let mut inputs = Inputs::new();
    let file = parse_problem(problem, &mut inputs)?;
    let report = file.validate();
    if report.is_valid() {
        println!("{}: valid ({} states, {} actions, gamma {})", problem.display(), file.n_states, file.n_actions, file.gamma);
        Ok(())
    } else {
        for v in &report.violations {
            eprintln!("{}: {v}", problem.display());
        }
        Err(CliError::Domain(format!("{} violation(s) in {}", report.violations.len(), problem.display())))
    }
}

#[derive(Serialize)]
struct SolutionFile {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    functional: Option<FunctionalSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    v_star: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    q_star: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pi_star: Option<DeterministicPolicy>,
    /// `V*[delta_s]` for nonlinear functionals.
    #[serde(skip_serializing_if = "Option::is_none")]
    dirac_values: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dirac_policies: Option<Vec<DeterministicPolicy>>,
    rho_star: Measure,
    steady_policy: DeterministicPolicy,
    l0: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    residual: Option<f64>,
}

pub fn solve(problem: &Path, functional: &FunctionalChoice, common: &Common) -> CliResult<()> {
    let mut inputs = Inputs::new();
    let (file, mdp) = load_problem(problem, &mut inputs)?;
    let raw = resolve_functional(&mdp, &file, functional)?;
    let steady = optimal_steady_state(&mdp, &raw, common.cap)?;
    let n = mdp.n_states();
    let mut out = SolutionFile {
        n_states: n,
        n_actions: mdp.n_actions(),
        gamma: mdp.gamma(),
        functional: None,
        v_star: None,
        q_star: None,
        pi_star: None,
        dirac_values: None,
        dirac_policies: None,
        rho_star: steady.rho_star.clone(),
        steady_policy: steady.policy.clone(),
        l0: steady.l0,
        residual: None,
    };
    if raw.is_linear() {
        let sol = solve_optimal_linear(&mdp)?;
        out.q_star = Some(sol.q_star.chunks(mdp.n_actions()).map(<[f64]>::to_vec).collect());
        out.v_star = Some(sol.v_star);
        out.pi_star = Some(sol.pi_star);
        out.residual = Some(sol.residual);
    } else {
        let mut values = Vec::with_capacity(n);
        let mut policies = Vec::with_capacity(n);
        for s in 0..n {
            let (v, p) = solve_optimal_nonlinear(&mdp, &raw, &Measure::dirac(s, n)?, ROLLOUT_TOL, common.cap)?;
            values.push(v);
            policies.push(p);
        }
        out.functional = Some(raw.to_spec());
        out.dirac_values = Some(values);
        out.dirac_policies = Some(policies);
    }
    let mut artifacts = Artifacts::create(&common.out, "solve")?;
    artifacts.write_json("solution.json", &out)?;
    let params = json!({ "functional": out.functional, "cap": common.cap });
    artifacts.finish(inputs, params, None)?;
    println!("solution written to {}", common.out.join("solution.json").display());
    Ok(())
}

pub fn certify(
    problem: &Path,
    functional: &FunctionalChoice,
    dissimilarity: &DissimilarityChoice,
    options: CertifyOptions,
    common: &Common,
) -> CliResult<()> {
    let mut inputs = Inputs::new();
    let (file, mdp) = load_problem(problem, &mut inputs)?;
    let raw = resolve_functional(&mdp, &file, functional)?;
    let dissim = resolve_dissimilarity(dissimilarity, mdp.n_states(), &mut inputs)?;
    let pipeline = Pipeline::new(&mdp, &raw, common.cap)?;
    let problem_ = DissipativityProblem::new(&mdp, &pipeline.stage, pipeline.value.as_ref(), &pipeline.steady, &dissim);
    let config = SynthesisConfig {
        n_samples: options.samples,
        seed: options.seed,
        policy_cap: common.cap,
        use_quadratic: options.quadratic,
    };
    let cert = synthesize_storage(&problem_, &pipeline.steady.policy, &config)?;

    let mut artifacts = Artifacts::create(&common.out, "certify")?;
    artifacts.write_json("certificate.json", &cert)?;
    let telescoping = check_theorem1(
        &mdp,
        &pipeline.stage,
        pipeline.value.as_ref(),
        &cert.storage,
        pipeline.linear_policy.as_ref(),
        50,
        options.seed,
        common.cap,
    )?;
    artifacts.write_json("telescoping.json", &telescoping)?;
    if cert.status == CertificateStatus::Certified {
        let lyapunov = check_lyapunov(
            &problem_,
            &cert.storage,
            &cert.alpha,
            &|rho: &Measure| pipeline.policy_for(rho),
            &LyapunovConfig { seed: options.seed, ..Default::default() },
        )?;
        artifacts.write_json("lyapunov.json", &lyapunov)?;
        if !lyapunov.passed() {
            eprintln!("warning: Lyapunov audit reported {} violation(s)", lyapunov.violations.len());
        }
    }
    if !telescoping.passed() {
        eprintln!("warning: telescoping audit reported {} violation(s)", telescoping.violations.len());
    }
    let params = json!({
        "functional": (!pipeline.stage.is_linear()).then(|| raw.to_spec()),
        "dissimilarity": dissim.short_name(),
        "samples": options.samples,
        "quadratic": options.quadratic,
        "cap": common.cap,
    });
    artifacts.finish(inputs, params, Some(options.seed))?;

    match cert.status {
        CertificateStatus::Certified => {
            println!("certified: alpha(x) = {} x, margin {:e}", cert.alpha.c, cert.margin);
            Ok(())
        }
        status => {
            let w = &cert.worst_point;
            Err(CliError::NotCertified(format!(
                "status {status:?}; worst point rho = {:?}, policy = {:?}, r_a = {:e}, r_b = {:e}",
                w.rho.weights(),
                w.policy.actions(),
                w.r_a,
                w.r_b
            )))
        }
    }
}

#[derive(Serialize)]
struct LearnedFile<'a> {
    param: &'a QParameterization,
    status: LearningStatus,
    final_error: f64,
    unvisited: &'a [(usize, usize)],
    seed: u64,
}

fn history_csv(history: &[measure_mdp::learning::HistoryEntry]) -> String {
    let mut csv = String::from("iteration,sup_error,ls_residual,bellman_residual,epsilon,transitions\n");
    for h in history {
        let sup = h.sup_error.map(num).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{sup},{},{},{},{}",
            h.iteration,
            num(h.ls_residual),
            num(h.bellman_residual),
            num(h.epsilon),
            h.transitions
        );
    }
    csv
}

pub fn learn(
    problem: &Path,
    config_path: &Path,
    seed: Option<u64>,
    dissimilarity: &DissimilarityChoice,
    horizon: usize,
    common: &Common,
) -> CliResult<()> {
    let mut inputs = Inputs::new();
    let (_, mdp) = load_problem(problem, &mut inputs)?;
    let mut config: LearningConfig = inputs.json(config_path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate(&mdp).map_err(|e| CliError::Usage(format!("{}: {e}", config_path.display())))?;
    let dissim = resolve_dissimilarity(dissimilarity, mdp.n_states(), &mut inputs)?;
    let reference = solve_optimal_linear(&mdp)?;
    let start = QParameterization::tabular_zero(mdp.n_states(), mdp.n_actions());
    let outcome = fitted_q_learning(&mdp, &start, &config, Some(&reference))?;
    if !outcome.unvisited.is_empty() {
        let pairs: Vec<String> = outcome.unvisited.iter().map(|(s, a)| format!("({s},{a})")).collect();
        eprintln!("warning: {} unvisited (s,a) pairs: {}", pairs.len(), pairs.join(" "));
    }

    let mut artifacts = Artifacts::create(&common.out, "learn")?;
    artifacts.write_json(
        "learned.json",
        &LearnedFile {
            param: &outcome.param,
            status: outcome.status,
            final_error: outcome.final_error,
            unvisited: &outcome.unvisited,
            seed: config.seed,
        },
    )?;
    artifacts.write_bytes("history.csv", history_csv(&outcome.history).as_bytes())?;
    let params = json!({
        "config": config,
        "dissimilarity": dissim.short_name(),
        "horizon": horizon,
        "cap": common.cap,
    });
    if outcome.status != LearningStatus::Converged {
        artifacts.finish(inputs, params, Some(config.seed))?;
        return Err(CliError::Learning(format!(
            "status {:?}, final sup-norm error {:e} (tolerance {:e}); see history.csv",
            outcome.status, outcome.final_error, config.tolerance
        )));
    }

    let raw = StageCostFunctional::linear(&mdp);
    let steady = optimal_steady_state(&mdp, &raw, common.cap)?;
    let stage = steady.normalize(&raw);
    let solution = solve_linear_functional(&mdp, &stage)?;
    let lift_config = LiftConfig { horizon, seed: config.seed, cap: common.cap, ..Default::default() };
    let lift = theta_from_learned(&mdp, &stage, &outcome.param, &steady, &dissim, &lift_config)?;
    artifacts.write_json("theta.json", &lift.theta)?;
    artifacts.write_json("lift_report.json", &lift.report)?;
    let alpha0 = ClassKInf::linear(C_MIN)?;
    let audit_config = Theorem4Config { seed: config.seed, cap: common.cap, ..Default::default() };
    let audit = check_theorem4(&mdp, &stage, &lift.theta, &solution, &steady, &dissim, &alpha0, &audit_config)?;
    artifacts.write_json("ocp_audit.json", &audit)?;
    artifacts.finish(inputs, params, Some(config.seed))?;

    if !lift.report.accepted {
        return Err(CliError::Learning(format!("lift rejected: {}", lift.report.reasons.join("; "))));
    }
    println!("learned: sup-norm error {:e}; lifted parameters {}", outcome.final_error, if audit.conclusion {
        "pass every audit"
    } else {
        "fail at least one audit (see ocp_audit.json)"
    });
    Ok(())
}

#[derive(Serialize)]
struct TrajectorySummary {
    file: String,
    rho0: Vec<f64>,
    final_dissimilarity: f64,
    descent_violations: usize,
    /// `max_k (V[rho_{k+1}] - V[rho_k] + alpha(D(rho_k)))`.
    worst_descent: f64,
    monotone_dissimilarity: bool,
}

#[derive(Serialize)]
struct SimulationSummary {
    steps: usize,
    dissimilarity: &'static str,
    rho_star: Measure,
    #[serde(skip_serializing_if = "Option::is_none")]
    policy: Option<DeterministicPolicy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<ClassKInf>,
    total_descent_violations: usize,
    trajectories: Vec<TrajectorySummary>,
}

pub fn simulate(
    problem: &Path,
    options: SimulateOptions,
    functional: &FunctionalChoice,
    dissimilarity: &DissimilarityChoice,
    common: &Common,
) -> CliResult<()> {
    let mut inputs = Inputs::new();
    let (file, mdp) = load_problem(problem, &mut inputs)?;
    let n = mdp.n_states();
    let raw = resolve_functional(&mdp, &file, functional)?;
    let mut pipeline = Pipeline::new(&mdp, &raw, common.cap)?;

    let (storage, alpha, dissim) = match &options.certificate {
        Some(path) => {
            let cert: FsdsdCertificate = inputs.json(path)?;
            if cert.rho_star.len() != n {
                return Err(CliError::Usage(format!("certificate {} does not match the problem size", path.display())));
            }
            pipeline.steady.rho_star = cert.rho_star.clone();
            (cert.storage, Some(cert.alpha), cert.dissimilarity)
        }
        None => {
            let weights = options.rho_star.as_ref().ok_or_else(|| {
                CliError::Domain("no steady-state distribution given; pass --certificate or --rho-star".into())
            })?;
            pipeline.steady.rho_star = measure_arg(weights, n, "--rho-star")?;
            (StorageFunctional::zero(n), None, resolve_dissimilarity(dissimilarity, n, &mut inputs)?)
        }
    };
    if let Some(w) = &options.rho_star {
        pipeline.steady.rho_star = measure_arg(w, n, "--rho-star")?;
    }
    let fixed = match &options.policy {
        Some(actions) => {
            let p = DeterministicPolicy::new(actions.clone());
            p.check(&mdp).map_err(|e| CliError::Usage(format!("--policy: {e}")))?;
            Some(p)
        }
        None => pipeline.linear_policy.clone(),
    };
    let starts: Vec<Measure> = if options.rho0.is_empty() {
        (0..n).map(|s| Measure::dirac(s, n)).chain(std::iter::once(Ok(Measure::uniform(n)))).collect::<Result<_, _>>()?
    } else {
        options.rho0.iter().map(|w| measure_arg(w, n, "--rho0")).collect::<CliResult<_>>()?
    };

    let problem_ = DissipativityProblem::new(&mdp, &pipeline.stage, pipeline.value.as_ref(), &pipeline.steady, &dissim);
    let mut artifacts = Artifacts::create(&common.out, "simulate")?;
    let mut summaries = Vec::with_capacity(starts.len());
    for (i, rho0) in starts.iter().enumerate() {
        let mut rho = rho0.clone();
        let mut rows = Vec::with_capacity(options.steps + 1);
        for k in 0..=options.steps {
            let d = problem_.distance_to_steady(&rho)?;
            let v = problem_.rotated_value(&storage, &rho);
            rows.push((rho.clone(), d, v));
            if k < options.steps {
                let policy = match &fixed {
                    Some(p) => p.clone(),
                    None => pipeline.policy_for(&rho)?,
                };
                rho = mdp.apply_transition(&policy, &rho)?;
            }
        }
        let mut csv = String::from("k");
        for s in 0..n {
            let _ = write!(csv, ",rho_{s}");
        }
        csv.push_str(",D,V_rot\n");
        for (k, (m, d, v)) in rows.iter().enumerate() {
            let _ = write!(csv, "{k}");
            for w in m.weights() {
                let _ = write!(csv, ",{}", num(*w));
            }
            let _ = writeln!(csv, ",{},{}", num(*d), num(*v));
        }
        let name = format!("trajectory_{i}.csv");
        artifacts.write_bytes(&name, csv.as_bytes())?;

        let mut violations = 0;
        let mut worst = f64::NEG_INFINITY;
        for pair in rows.windows(2) {
            let decrease = alpha.map(|a| a.eval(pair[0].1)).unwrap_or(0.0);
            let excess = pair[1].2 - pair[0].2 + decrease;
            worst = worst.max(excess);
            if excess > DESCENT_TOL {
                violations += 1;
            }
        }
        summaries.push(TrajectorySummary {
            file: name,
            rho0: rho0.weights().to_vec(),
            final_dissimilarity: rows.last().map(|r| r.1).unwrap_or(0.0),
            descent_violations: violations,
            worst_descent: if rows.len() > 1 { worst } else { 0.0 },
            monotone_dissimilarity: rows.windows(2).all(|p| p[1].1 <= p[0].1 + 1e-12),
        });
    }
    let summary = SimulationSummary {
        steps: options.steps,
        dissimilarity: dissim.short_name(),
        rho_star: pipeline.steady.rho_star.clone(),
        policy: fixed,
        alpha,
        total_descent_violations: summaries.iter().map(|s| s.descent_violations).sum(),
        trajectories: summaries,
    };
    artifacts.write_json("summary.json", &summary)?;
    let params = json!({ "steps": options.steps, "dissimilarity": dissim.short_name(), "cap": common.cap });
    artifacts.finish(inputs, params, None)?;
    println!(
        "{} trajectories written; {} descent violation(s)",
        summary.trajectories.len(),
        summary.total_descent_violations
    );
    Ok(())
}
