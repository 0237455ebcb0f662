//! Rational crime-supply model: expected values of crime and legal work, the
//! closed-form equilibrium crime quantity under a linear apprehension
//! technology, and the crime-benefit elasticity.
//!
//! The apprehension probability is linearized as kappa1*C + kappa2*O + kappa3,
//! so the equilibrium condition
//!
//!   (1 - pi(C)) * P - pi(C) * S = (1 - u) * W + u * B
//!
//! solves in closed form for C. The linearization does not constrain the
//! implied probability to [0, 1]; we report it and flag when it escapes.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Parameters of the crime-supply model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeckerParams {
    /// Monetary gain from a successful crime.
    pub gain: f64,
    /// Sanction cost when apprehended.
    pub sanction: f64,
    /// Wage when employed.
    pub wage: f64,
    /// Benefit income when unemployed.
    pub benefits: f64,
    /// Unemployment probability.
    pub unemployment: f64,
    /// Apprehension-probability slope in the crime quantity. Must be > 0.
    pub kappa1: f64,
    /// Apprehension-probability slope in police strength.
    pub kappa2: f64,
    /// Baseline detection level.
    pub kappa3: f64,
    /// Police strength.
    pub police: f64,
}

impl BeckerParams {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gain", self.gain),
            ("sanction", self.sanction),
            ("wage", self.wage),
            ("benefits", self.benefits),
            ("unemployment", self.unemployment),
            ("kappa1", self.kappa1),
            ("kappa2", self.kappa2),
            ("kappa3", self.kappa3),
            ("police", self.police),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("parameter {name} is not finite")));
            }
        }
        if !(0.0..=1.0).contains(&self.unemployment) {
            return Err(Error::Config(format!(
                "unemployment probability {} outside [0, 1]",
                self.unemployment
            )));
        }
        if self.gain + self.sanction <= 0.0 {
            return Err(Error::Config(format!(
                "gain + sanction must be positive, got {}",
                self.gain + self.sanction
            )));
        }
        if self.kappa1 <= 0.0 {
            return Err(Error::Config(format!(
                "kappa1 must be positive, got {}",
                self.kappa1
            )));
        }
        if self.kappa2 < 0.0 || self.police < 0.0 {
            return Err(Error::Config(
                "kappa2 and police strength must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Expected value of committing a crime: (1 - pi) * gain - pi * sanction.
pub fn ev_crime(gain: f64, sanction: f64, pi: f64) -> f64 {
    (1.0 - pi) * gain - pi * sanction
}

/// Expected value of legal work: (1 - u) * wage + u * benefits.
pub fn ev_work(wage: f64, benefits: f64, unemployment: f64) -> f64 {
    (1.0 - unemployment) * wage + unemployment * benefits
}

/// Equilibrium crime quantity, the implied apprehension probability at that
/// quantity, and the crime-benefit elasticity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub crime: f64,
    pub elasticity: f64,
    /// kappa1*C + kappa2*O + kappa3 evaluated at the equilibrium.
    pub implied_probability: f64,
    /// True when the linearized probability leaves [0, 1]; the closed form
    /// still holds, the linear technology is just extrapolating.
    pub probability_out_of_range: bool,
    /// Relative imbalance of the equilibrium condition at the returned C.
    pub residual: f64,
}

/// Relative imbalance of the equilibrium condition at crime quantity `c`.
fn equilibrium_residual(p: &BeckerParams, c: f64) -> f64 {
    let pi = p.kappa1 * c + p.kappa2 * p.police + p.kappa3;
    let lhs = ev_crime(p.gain, p.sanction, pi);
    let rhs = ev_work(p.wage, p.benefits, p.unemployment);
    let scale = lhs.abs().max(rhs.abs()).max(1.0);
    (lhs - rhs).abs() / scale
}

/// Solves the linearized equilibrium in closed form:
/// C = (gain - ev_work - (gain+sanction)(kappa2*O + kappa3)) / (kappa1 (gain+sanction)).
pub fn equilibrium_crime(params: &BeckerParams) -> Result<EquilibriumResult> {
    params.validate()?;
    let total_stake = params.gain + params.sanction;
    let outside = ev_work(params.wage, params.benefits, params.unemployment);
    let crime = (params.gain - outside - total_stake * (params.kappa2 * params.police + params.kappa3))
        / (params.kappa1 * total_stake);
    let implied_probability = params.kappa1 * crime + params.kappa2 * params.police + params.kappa3;
    let residual = equilibrium_residual(params, crime);
    if residual >= 1e-10 {
        return Err(Error::Numeric(format!(
            "equilibrium condition unbalanced at closed form: relative residual {residual:e}"
        )));
    }
    let elasticity = if crime > 0.0 {
        benefit_elasticity(params, crime)?
    } else {
        f64::NAN
    };
    Ok(EquilibriumResult {
        crime,
        elasticity,
        implied_probability,
        probability_out_of_range: !(0.0..=1.0).contains(&implied_probability),
        residual,
    })
}

/// Elasticity of equilibrium crime with respect to benefits:
/// (dC/dB) * (B/C) = -u * B / (kappa1 (gain+sanction) C).
pub fn benefit_elasticity(params: &BeckerParams, crime: f64) -> Result<f64> {
    params.validate()?;
    if crime <= 0.0 {
        return Err(Error::Config(format!(
            "elasticity undefined at non-positive crime quantity {crime}"
        )));
    }
    Ok(-params.unemployment * params.benefits
        / (params.kappa1 * (params.gain + params.sanction) * crime))
}
