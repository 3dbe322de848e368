#![allow(dead_code)]

use std::path::PathBuf;

use measure_mdp::dissimilarity::Dissimilarity;
use measure_mdp::dissipativity::{synthesize_storage, DissipativityProblem, FsdsdCertificate, SynthesisConfig};
use measure_mdp::functionals::{optimal_steady_state, solve_linear_functional};
use measure_mdp::{FiniteMdp, MdpFile, StageCostFunctional, SteadyState, ValueSolution, DEFAULT_POLICY_CAP};

pub fn bundled(name: &str) -> FiniteMdp {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../cli/examples").join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let file: MdpFile = serde_json::from_str(&text).unwrap();
    FiniteMdp::from_file(&file).unwrap()
}

/// Normalized stage cost, its optimal values and the optimal steady state.
pub struct Setup {
    pub mdp: FiniteMdp,
    pub stage: StageCostFunctional,
    pub solution: ValueSolution,
    pub steady: SteadyState,
}

impl Setup {
    pub fn new(mdp: FiniteMdp) -> Self {
        let raw = StageCostFunctional::linear(&mdp);
        let steady = optimal_steady_state(&mdp, &raw, DEFAULT_POLICY_CAP).unwrap();
        let stage = steady.normalize(&raw);
        let solution = solve_linear_functional(&mdp, &stage).unwrap();
        Setup { mdp, stage, solution, steady }
    }

    pub fn problem<'a>(&'a self, dissim: &'a Dissimilarity) -> DissipativityProblem<'a> {
        DissipativityProblem::new(&self.mdp, &self.stage, &self.solution, &self.steady, dissim)
    }

    pub fn certify(&self, dissim: &Dissimilarity, config: &SynthesisConfig) -> FsdsdCertificate {
        synthesize_storage(&self.problem(dissim), &self.steady.policy, config).unwrap()
    }
}
