//! Probability measures on a finite state set.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a measure at construction time.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// A probability vector over `0..n`.
///
/// Construction validates nonnegativity and unit mass within [`SIMPLEX_TOL`].
/// Operations that produce new measures (transitions, mixtures) never
/// renormalize, so accumulated drift stays observable through [`Measure::mass`].
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Measure(Vec<f64>);

impl Measure {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::input("measure must have at least one state"));
        }
        if let Some((s, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !w.is_finite() || **w < 0.0)
        {
            return Err(Error::input(format!("measure weight {s} is {w}")));
        }
        let mass: f64 = weights.iter().sum();
        if (mass - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::input(format!("measure sums to {mass}, not 1")));
        }
        Ok(Measure(weights))
    }

    /// Rescales nonnegative weights to unit mass.
    pub fn normalized(mut weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::input("weights must be finite and nonnegative"));
        }
        let mass: f64 = weights.iter().sum();
        if mass <= 0.0 {
            return Err(Error::input("weights have zero total mass"));
        }
        weights.iter_mut().for_each(|w| *w /= mass);
        Measure::new(weights)
    }

    pub fn dirac(state: usize, n: usize) -> Result<Self> {
        if state >= n {
            return Err(Error::input(format!(
                "dirac state {state} out of range for {n} states"
            )));
        }
        let mut w = vec![0.0; n];
        w[state] = 1.0;
        Ok(Measure(w))
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform measure needs at least one state");
        Measure(vec![1.0 / n as f64; n])
    }

    /// Wraps weights produced by a mass-preserving operation.
    pub(crate) fn from_raw(weights: Vec<f64>) -> Self {
        Measure(weights)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn mass(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn dot(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.0.len());
        self.0.iter().zip(values).map(|(p, v)| p * v).sum()
    }

    /// `alpha * self + (1 - alpha) * other`.
    pub fn mix(&self, other: &Measure, alpha: f64) -> Result<Measure> {
        if other.len() != self.len() {
            return Err(Error::input("cannot mix measures of different sizes"));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::input(format!("mixing weight {alpha} not in [0,1]")));
        }
        Ok(Measure(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
                .collect(),
        ))
    }

    /// State carrying all the mass, if this is a Dirac measure.
    pub fn dirac_state(&self) -> Option<usize> {
        let mut found = None;
        for (s, &w) in self.0.iter().enumerate() {
            if w == 1.0 && found.is_none() {
                found = Some(s);
            } else if w != 0.0 {
                return None;
            }
        }
        found
    }

    pub fn max_abs_diff(&self, other: &Measure) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl TryFrom<Vec<f64>> for Measure {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Measure::new(v)
    }
}

impl From<Measure> for Vec<f64> {
    fn from(m: Measure) -> Self {
        m.0
    }
}

impl std::ops::Index<usize> for Measure {
    type Output = f64;

    fn index(&self, s: usize) -> &f64 {
        &self.0[s]
    }
}

impl fmt::Debug for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.0).finish()
    }
}

/// Unit mass at `state` among `n` states.
pub fn dirac(state: usize, n: usize) -> Result<Measure> {
    Measure::dirac(state, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dirac_vectors() {
        assert_eq!(dirac(0, 2).unwrap().weights(), &[1.0, 0.0]);
        assert_eq!(dirac(2, 3).unwrap().weights(), &[0.0, 0.0, 1.0]);
        assert!(dirac(3, 3).is_err());
    }

    #[test]
    fn rejects_bad_mass() {
        assert!(Measure::new(vec![0.5, 0.6]).is_err());
        assert!(Measure::new(vec![1.5, -0.5]).is_err());
        assert!(Measure::new(vec![]).is_err());
        assert!(Measure::new(vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn normalization_only_at_construction() {
        let m = Measure::normalized(vec![1.0, 3.0]).unwrap();
        assert_eq!(m.weights(), &[0.25, 0.75]);
        assert!(Measure::normalized(vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn dirac_detection() {
        assert_eq!(dirac(1, 3).unwrap().dirac_state(), Some(1));
        assert_eq!(Measure::uniform(2).dirac_state(), None);
    }

    #[test]
    fn serde_validates() {
        let ok: Measure = serde_json::from_str("[0.5, 0.5]").unwrap();
        assert_eq!(ok.len(), 2);
        assert!(serde_json::from_str::<Measure>("[0.5, 0.6]").is_err());
    }
}
