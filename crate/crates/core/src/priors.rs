//! Prior over the eight physiological parameters.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::physiology::PhysioParams;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const MAX_REJECTION_TRIES: usize = 10_000;

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// One-dimensional prior marginal, truncated to `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Marginal {
    TruncatedNormal {
        mean: f64,
        sd: f64,
        lower: f64,
        upper: f64,
    },
    /// `ln x ~ N(ln median, log_sd^2)`.
    LogNormal {
        median: f64,
        log_sd: f64,
        lower: f64,
        upper: f64,
    },
}

impl Marginal {
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            Marginal::TruncatedNormal { lower, upper, .. } | Marginal::LogNormal { lower, upper, .. } => {
                (lower, upper)
            }
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        let (lo, hi) = self.bounds();
        x >= lo && x <= hi
    }

    /// Point the distribution collapses to when its scale goes to zero.
    pub fn location(&self) -> f64 {
        match *self {
            Marginal::TruncatedNormal { mean, .. } => mean,
            Marginal::LogNormal { median, .. } => median,
        }
    }

    /// Location and scale in the working coordinate (identity for the
    /// truncated normal, log for the log-normal).
    fn working_normal(&self) -> (f64, f64) {
        match *self {
            Marginal::TruncatedNormal { mean, sd, .. } => (mean, sd),
            Marginal::LogNormal { median, log_sd, .. } => (median.ln(), log_sd),
        }
    }

    pub fn is_log(&self) -> bool {
        matches!(self, Marginal::LogNormal { .. })
    }

    pub fn to_working(&self, x: f64) -> f64 {
        if self.is_log() {
            x.ln()
        } else {
            x
        }
    }

    pub fn from_working(&self, u: f64) -> f64 {
        if self.is_log() {
            u.exp()
        } else {
            u
        }
    }

    /// `ln |dx/du|` of the working-coordinate map.
    pub fn log_jacobian(&self, u: f64) -> f64 {
        if self.is_log() {
            u
        } else {
            0.0
        }
    }

    /// Standard deviation of the untruncated distribution in working coordinates.
    pub fn working_sd(&self) -> f64 {
        self.working_normal().1
    }

    fn log_truncation_mass(&self) -> f64 {
        let (mu, s) = self.working_normal();
        let (lo, hi) = self.bounds();
        if s <= 0.0 {
            return 0.0;
        }
        let a = (self.to_working(lo) - mu) / s;
        let b = (self.to_working(hi) - mu) / s;
        (std_normal_cdf(b) - std_normal_cdf(a)).ln()
    }

    /// Log density (normalized over the truncated support); `None` outside it.
    pub fn log_pdf(&self, x: f64) -> Option<f64> {
        if !self.contains(x) || !x.is_finite() {
            return None;
        }
        let (mu, s) = self.working_normal();
        if s <= 0.0 {
            return None;
        }
        let u = self.to_working(x);
        let z = (u - mu) / s;
        let mut lp = -0.5 * z * z - s.ln() - LN_SQRT_2PI - self.log_truncation_mass();
        if self.is_log() {
            lp -= u;
        }
        Some(lp)
    }

    /// Mean of the truncated distribution (closed form for the normal family).
    pub fn truncated_mean(&self) -> f64 {
        match *self {
            Marginal::TruncatedNormal { mean, sd, lower, upper } => {
                let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
                let a = (lower - mean) / sd;
                let b = (upper - mean) / sd;
                let z = std_normal_cdf(b) - std_normal_cdf(a);
                mean + sd * (phi(a) - phi(b)) / z
            }
            Marginal::LogNormal { median, log_sd, lower, upper } => {
                // E[X | lo <= X <= hi] for X = exp(N(mu, s^2))
                let mu = median.ln();
                let s = log_sd;
                let a = (lower.ln() - mu) / s;
                let b = (upper.ln() - mu) / s;
                let z = std_normal_cdf(b) - std_normal_cdf(a);
                (mu + 0.5 * s * s).exp() * (std_normal_cdf(b - s) - std_normal_cdf(a - s)) / z
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (mu, s) = self.working_normal();
        let (lo, hi) = self.bounds();
        if s <= 0.0 {
            return self.location().clamp(lo, hi);
        }
        for _ in 0..MAX_REJECTION_TRIES {
            let z: f64 = StandardNormal.sample(rng);
            let x = self.from_working(mu + s * z);
            if self.contains(x) {
                return x;
            }
        }
        self.location().clamp(lo, hi)
    }

    fn validate(&self, name: &str) -> Result<()> {
        let (lo, hi) = self.bounds();
        let (_, s) = self.working_normal();
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(Error::validation(format!(
                "prior {name}: support [{lo}, {hi}] must be strictly positive and non-empty"
            )));
        }
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::validation(format!("prior {name}: scale must be >= 0")));
        }
        if let Marginal::LogNormal { median, .. } = self {
            if !(*median > 0.0) {
                return Err(Error::validation(format!("prior {name}: median must be > 0")));
            }
        }
        Ok(())
    }
}

/// Independent marginals for each component of the parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    #[serde(rename = "Gb")]
    pub gb: Marginal,
    #[serde(rename = "SG")]
    pub sg: Marginal,
    pub p2: Marginal,
    pub ka2: Marginal,
    pub kd: Marginal,
    pub kempt: Marginal,
    #[serde(rename = "SI")]
    pub si: Marginal,
    pub kabs: Marginal,
}

impl Default for PriorSpec {
    fn default() -> Self {
        let ln = |median: f64, log_sd: f64, lower: f64, upper: f64| Marginal::LogNormal {
            median,
            log_sd,
            lower,
            upper,
        };
        PriorSpec {
            gb: Marginal::TruncatedNormal {
                mean: 120.0,
                sd: 20.0,
                lower: 70.0,
                upper: 180.0,
            },
            sg: ln(0.015, 0.3, 0.003, 0.08),
            p2: ln(0.012, 0.3, 0.002, 0.08),
            ka2: ln(0.014, 0.3, 0.002, 0.08),
            kd: ln(0.026, 0.3, 0.004, 0.15),
            kempt: ln(0.18, 0.3, 0.03, 0.9),
            si: ln(3.5e-4, 0.35, 8.0e-5, 2.0e-3),
            kabs: ln(0.012, 0.3, 0.002, 0.08),
        }
    }
}

impl PriorSpec {
    pub fn marginals(&self) -> [&Marginal; 8] {
        [
            &self.gb, &self.sg, &self.p2, &self.ka2, &self.kd, &self.kempt, &self.si, &self.kabs,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in PhysioParams::NAMES.iter().zip(self.marginals()) {
            m.validate(name)?;
        }
        let (lo, hi) = self.gb.bounds();
        if lo < 40.0 || hi > 300.0 {
            return Err(Error::validation(format!(
                "prior Gb support [{lo}, {hi}] must lie within [40, 300]"
            )));
        }
        Ok(())
    }

    pub fn sample_theta<R: Rng + ?Sized>(&self, rng: &mut R) -> PhysioParams {
        let v: Vec<f64> = self.marginals().iter().map(|m| m.sample(rng)).collect();
        PhysioParams::from_slice(&v)
    }

    pub fn contains(&self, theta: &PhysioParams) -> bool {
        self.marginals()
            .iter()
            .zip(theta.to_array())
            .all(|(m, x)| m.contains(x))
    }

    /// Joint log density; `None` outside the support box.
    pub fn log_density(&self, theta: &PhysioParams) -> Option<f64> {
        self.marginals()
            .iter()
            .zip(theta.to_array())
            .map(|(m, x)| m.log_pdf(x))
            .sum()
    }

    pub fn to_working(&self, theta: &PhysioParams) -> [f64; 8] {
        let x = theta.to_array();
        let mut u = [0.0; 8];
        for (i, m) in self.marginals().iter().enumerate() {
            u[i] = m.to_working(x[i]);
        }
        u
    }

    pub fn from_working(&self, u: &[f64]) -> PhysioParams {
        let v: Vec<f64> = self
            .marginals()
            .iter()
            .zip(u)
            .map(|(m, &w)| m.from_working(w))
            .collect();
        PhysioParams::from_slice(&v)
    }

    /// Median point of every marginal.
    pub fn location(&self) -> PhysioParams {
        let v: Vec<f64> = self.marginals().iter().map(|m| m.location()).collect();
        PhysioParams::from_slice(&v)
    }

    pub fn hash(&self) -> String {
        crate::hash::json_sha256(self)
    }
}
