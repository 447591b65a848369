//! Accuracy, human effort, utility, and β sensitivity.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for UtilityWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.5 }
    }
}

impl UtilityWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Parameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Fraction of instances classified correctly; human-routed instances count as correct.
pub fn accuracy(correct: usize, total: usize) -> Result<f64> {
    ratio(correct, total, "accuracy")
}

/// Fraction of instances classified by the human expert.
pub fn human_effort(human: usize, total: usize) -> Result<f64> {
    ratio(human, total, "human effort")
}

fn ratio(part: usize, total: usize, what: &str) -> Result<f64> {
    if total == 0 {
        return Err(Error::Data(format!("{what} over zero instances")));
    }
    if part > total {
        return Err(Error::Data(format!("{what}: {part} exceeds total {total}")));
    }
    Ok(part as f64 / total as f64)
}

/// `alpha * phi - beta * rho`, unclamped.
pub fn utility(phi: f64, rho: f64, weights: &UtilityWeights) -> Result<f64> {
    for (name, v) in [("phi", phi), ("rho", rho)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Parameter(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    weights.validate()?;
    Ok(weights.alpha * phi - weights.beta * rho)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub total: usize,
    pub correct: usize,
    pub human: usize,
    pub phi: f64,
    pub rho: f64,
    pub utility: f64,
    pub weights: UtilityWeights,
}

impl MetricsSummary {
    pub fn from_counts(total: usize, correct: usize, human: usize, weights: UtilityWeights) -> Result<Self> {
        let phi = accuracy(correct, total)?;
        let rho = human_effort(human, total)?;
        Ok(Self {
            total,
            correct,
            human,
            phi,
            rho,
            utility: utility(phi, rho, &weights)?,
            weights,
        })
    }

    /// Sums the counts of several summaries under the given weights.
    pub fn pooled<'a>(parts: impl IntoIterator<Item = &'a MetricsSummary>, weights: UtilityWeights) -> Result<Self> {
        let (mut total, mut correct, mut human) = (0, 0, 0);
        for p in parts {
            total += p.total;
            correct += p.correct;
            human += p.human;
        }
        Self::from_counts(total, correct, human, weights)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub system: String,
    pub phi: f64,
    pub rho: f64,
    pub utility: f64,
    /// 1 is best at this β; ties share the better rank.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub betas: Vec<f64>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn get(&self, system: &str, beta: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.system == system && r.beta == beta)
    }

    /// Systems ordered best first at `beta`.
    pub fn ranking(&self, beta: f64) -> Vec<&str> {
        let mut rows: Vec<&SweepRow> = self.rows.iter().filter(|r| r.beta == beta).collect();
        rows.sort_by_key(|r| r.rank);
        rows.into_iter().map(|r| r.system.as_str()).collect()
    }

    /// One row per system, one utility column per β.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("system,phi,rho");
        for b in &self.betas {
            out.push_str(&format!(",utility_at_beta_{}", beta_label(*b)));
        }
        out.push('\n');
        let mut systems: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !systems.contains(&r.system.as_str()) {
                systems.push(&r.system);
            }
        }
        for s in systems {
            let first = self.rows.iter().find(|r| r.system == s).expect("present");
            out.push_str(&format!("{s},{},{}", fmt2(first.phi), fmt2(first.rho)));
            for b in &self.betas {
                let row = self.get(s, *b).expect("every system has every beta");
                out.push_str(&format!(",{}", fmt2(row.utility)));
            }
            out.push('\n');
        }
        out
    }
}

/// Recomputes utility with `alpha = 1` for every (system, β) pair and ranks systems per β.
pub fn beta_sweep(systems: &[(String, f64, f64)], betas: &[f64]) -> Result<SweepTable> {
    if systems.is_empty() || betas.is_empty() {
        return Err(Error::Data("beta sweep needs at least one system and one beta".into()));
    }
    let mut rows = Vec::with_capacity(systems.len() * betas.len());
    for &beta in betas {
        let weights = UtilityWeights { alpha: 1.0, beta };
        weights.validate()?;
        let mut block = systems
            .iter()
            .map(|(name, phi, rho)| {
                Ok(SweepRow {
                    beta,
                    system: name.clone(),
                    phi: *phi,
                    rho: *rho,
                    utility: utility(*phi, *rho, &weights)?,
                    rank: 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let utilities: Vec<f64> = block.iter().map(|r| r.utility).collect();
        for row in &mut block {
            row.rank = 1 + utilities.iter().filter(|&&u| u > row.utility).count();
        }
        rows.extend(block);
    }
    Ok(SweepTable {
        betas: betas.to_vec(),
        rows,
    })
}

/// The β at which two systems reach equal utility (with `alpha = 1`), or `None`
/// if their human effort is equal. Below it the system with more human effort wins.
pub fn crossover_beta(a: (f64, f64), b: (f64, f64)) -> Option<f64> {
    let (phi_a, rho_a) = a;
    let (phi_b, rho_b) = b;
    if rho_a == rho_b {
        return None;
    }
    Some((phi_a - phi_b) / (rho_a - rho_b))
}

/// Rounds half away from zero at two decimals, after snapping to ten decimals
/// so that values like `0.605` (stored as 0.60499999...) round as written.
pub fn round2(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    let snapped = (x * 1e10).round() as i128;
    let cents = (snapped.abs() + 50_000_000) / 100_000_000;
    let cents = if snapped < 0 { -cents } else { cents };
    cents as f64 / 100.0
}

/// Two-decimal rendering used by every exported table.
pub fn fmt2(x: f64) -> String {
    let r = round2(x);
    if r == 0.0 {
        "0.00".into()
    } else {
        format!("{r:.2}")
    }
}

/// Column-name form of a β value, e.g. `0.75` becomes `0_75`.
pub fn beta_label(beta: f64) -> String {
    format!("{beta:?}").replace('.', "_").replace('-', "m")
}
