//! Thin layer over `microlp` that maps failures into crate errors.

use microlp::{ComparisonOp, OptimizationDirection, Problem, Variable};

use crate::error::{Error, Result};

pub(crate) struct LinearProgram {
    problem: Problem,
    vars: Vec<Variable>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Var(usize);

pub(crate) struct LpSolution {
    values: Vec<f64>,
}

impl LpSolution {
    pub fn get(&self, v: Var) -> f64 {
        self.values[v.0]
    }
}

impl LinearProgram {
    pub fn minimize() -> Self {
        LinearProgram { problem: Problem::new(OptimizationDirection::Minimize), vars: Vec::new() }
    }

    pub fn maximize() -> Self {
        LinearProgram { problem: Problem::new(OptimizationDirection::Maximize), vars: Vec::new() }
    }

    pub fn var(&mut self, objective: f64, bounds: (f64, f64)) -> Var {
        self.vars.push(self.problem.add_var(objective, bounds));
        Var(self.vars.len() - 1)
    }

    fn terms(&self, terms: &[(Var, f64)]) -> Vec<(Variable, f64)> {
        terms
            .iter()
            .filter(|(_, c)| *c != 0.0)
            .map(|(v, c)| (self.vars[v.0], *c))
            .collect()
    }

    pub fn ge(&mut self, terms: &[(Var, f64)], rhs: f64) {
        let t = self.terms(terms);
        self.problem.add_constraint(t, ComparisonOp::Ge, rhs);
    }

    pub fn eq(&mut self, terms: &[(Var, f64)], rhs: f64) {
        let t = self.terms(terms);
        self.problem.add_constraint(t, ComparisonOp::Eq, rhs);
    }

    pub fn solve(&self) -> Result<LpSolution> {
        let outcome = self.problem.solve().map_err(|e| Error::Lp(e.to_string()))?;
        let solution = outcome
            .into_solution()
            .map_err(|_| Error::Lp("solver stopped before reaching an optimum".into()))?;
        Ok(LpSolution {
            values: self.vars.iter().map(|v| solution.var_value(*v)).collect(),
        })
    }
}
