//! Dissimilarity measures `D(rho || rho')` between measures on a finite set.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lp::LinearProgram;
use crate::measure::Measure;

const METRIC_TOL: f64 = 1e-12;

/// Symmetric ground distance with zero diagonal satisfying the triangle inequality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct GroundMetric {
    n: usize,
    d: Vec<f64>,
}

impl GroundMetric {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::input("ground metric must be a non-empty square matrix"));
        }
        let d: Vec<f64> = rows.into_iter().flatten().collect();
        let at = |i: usize, j: usize| d[i * n + j];
        for i in 0..n {
            if at(i, i) != 0.0 {
                return Err(Error::input(format!("ground metric diagonal ({i},{i}) is nonzero")));
            }
            for j in 0..n {
                let x = at(i, j);
                if !x.is_finite() || x < 0.0 {
                    return Err(Error::input(format!("ground metric entry ({i},{j}) = {x}")));
                }
                if (x - at(j, i)).abs() > METRIC_TOL {
                    return Err(Error::input(format!("ground metric is not symmetric at ({i},{j})")));
                }
                for k in 0..n {
                    if x > at(i, k) + at(k, j) + METRIC_TOL {
                        return Err(Error::input(format!(
                            "ground metric violates the triangle inequality at ({i},{k},{j})"
                        )));
                    }
                }
            }
        }
        Ok(GroundMetric { n, d })
    }

    /// `d(i, j) = |i - j|`.
    pub fn line(n: usize) -> Self {
        GroundMetric {
            n,
            d: (0..n * n).map(|k| (k / n).abs_diff(k % n) as f64).collect(),
        }
    }

    /// `d(i, j) = 1` for `i != j`; W1 under this metric equals total variation.
    pub fn discrete(n: usize) -> Self {
        GroundMetric {
            n,
            d: (0..n * n).map(|k| if k / n == k % n { 0.0 } else { 1.0 }).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    pub fn max_entry(&self) -> f64 {
        self.d.iter().copied().fold(0.0, f64::max)
    }
}

impl TryFrom<Vec<Vec<f64>>> for GroundMetric {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        GroundMetric::new(rows)
    }
}

impl From<GroundMetric> for Vec<Vec<f64>> {
    fn from(g: GroundMetric) -> Self {
        g.d.chunks(g.n).map(<[f64]>::to_vec).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dissimilarity {
    /// `0.5 * sum |rho - rho'|`
    #[default]
    TotalVariation,
    /// `sum rho log(rho / rho')`; requires `rho << rho'`.
    KullbackLeibler,
    /// Optimal transport cost under a ground metric.
    Wasserstein1 { metric: GroundMetric },
}

impl Dissimilarity {
    /// Parses the short names `tv`, `kl`, `w1`. W1 without a metric uses the line metric.
    pub fn from_name(name: &str, metric: Option<GroundMetric>, n_states: usize) -> Result<Self> {
        match name {
            "tv" => Ok(Dissimilarity::TotalVariation),
            "kl" => Ok(Dissimilarity::KullbackLeibler),
            "w1" => {
                let metric = metric.unwrap_or_else(|| GroundMetric::line(n_states));
                if metric.len() != n_states {
                    return Err(Error::input("ground metric size does not match the state count"));
                }
                Ok(Dissimilarity::Wasserstein1 { metric })
            }
            other => Err(Error::input(format!("unknown dissimilarity '{other}' (expected tv|kl|w1)"))),
        }
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            Dissimilarity::TotalVariation => "tv",
            Dissimilarity::KullbackLeibler => "kl",
            Dissimilarity::Wasserstein1 { .. } => "w1",
        }
    }

    pub fn eval(&self, rho: &Measure, rho_prime: &Measure) -> Result<f64> {
        if rho.len() != rho_prime.len() {
            return Err(Error::input("dissimilarity between measures of different sizes"));
        }
        match self {
            Dissimilarity::TotalVariation => Ok(total_variation(rho, rho_prime)),
            Dissimilarity::KullbackLeibler => kullback_leibler(rho, rho_prime),
            Dissimilarity::Wasserstein1 { metric } => wasserstein1(metric, rho, rho_prime),
        }
    }

    /// Upper bound of `D` over the simplex, if finite.
    pub fn upper_bound(&self) -> Option<f64> {
        match self {
            Dissimilarity::TotalVariation => Some(1.0),
            Dissimilarity::KullbackLeibler => None,
            Dissimilarity::Wasserstein1 { metric } => Some(metric.max_entry()),
        }
    }
}

impl fmt::Display for Dissimilarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

pub fn dissimilarity(kind: &Dissimilarity, rho: &Measure, rho_prime: &Measure) -> Result<f64> {
    kind.eval(rho, rho_prime)
}

pub fn total_variation(rho: &Measure, rho_prime: &Measure) -> f64 {
    0.5 * rho
        .weights()
        .iter()
        .zip(rho_prime.weights())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
}

pub fn kullback_leibler(rho: &Measure, rho_prime: &Measure) -> Result<f64> {
    let mut total = 0.0;
    for (s, (&p, &q)) in rho.weights().iter().zip(rho_prime.weights()).enumerate() {
        if p > 0.0 {
            if q <= 0.0 {
                return Err(Error::Domain(format!(
                    "KL undefined: state {s} has mass {p} but the reference has none"
                )));
            }
            total += p * (p / q).ln();
        }
    }
    // Rounding can push the sum slightly below zero when rho == rho'.
    Ok(total.max(0.0))
}

/// Exact W1 through the transport linear program over the coupling polytope.
pub fn wasserstein1(metric: &GroundMetric, rho: &Measure, rho_prime: &Measure) -> Result<f64> {
    if metric.len() != rho.len() || metric.len() != rho_prime.len() {
        return Err(Error::input("ground metric size does not match the measures"));
    }
    if rho == rho_prime {
        return Ok(0.0);
    }
    let sources: Vec<usize> = (0..rho.len()).filter(|&i| rho[i] > 0.0).collect();
    let sinks: Vec<usize> = (0..rho_prime.len()).filter(|&j| rho_prime[j] > 0.0).collect();
    if sources.len() == 1 && sinks.len() == 1 {
        return Ok(metric.get(sources[0], sinks[0]));
    }

    let mut lp = LinearProgram::minimize();
    let plan: Vec<Vec<_>> = sources
        .iter()
        .map(|&i| {
            sinks
                .iter()
                .map(|&j| lp.var(metric.get(i, j), (0.0, f64::INFINITY)))
                .collect()
        })
        .collect();
    for (r, &i) in sources.iter().enumerate() {
        let row: Vec<_> = plan[r].iter().map(|v| (*v, 1.0)).collect();
        lp.eq(&row, rho[i]);
    }
    // One marginal constraint is implied by the others (up to rounding of the masses).
    for (c, &j) in sinks.iter().enumerate().skip(1) {
        let col: Vec<_> = plan.iter().map(|row| (row[c], 1.0)).collect();
        lp.eq(&col, rho_prime[j]);
    }
    let solution = lp.solve()?;
    let mut cost = 0.0;
    for (r, &i) in sources.iter().enumerate() {
        for (c, &j) in sinks.iter().enumerate() {
            cost += metric.get(i, j) * solution.get(plan[r][c]).max(0.0);
        }
    }
    Ok(cost)
}
