//! Meal and insulin schedules, their rasterization onto the integration grid,
//! and the transformations used for out-of-sample replay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physiology::{whole_steps, MG_PER_G, MICRO_U_PER_U};

/// Minutes in a day.
pub const DAY_MIN: f64 = 1440.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MealEvent {
    pub t_min: f64,
    /// Carbohydrate (g).
    pub grams: f64,
    pub duration_min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BolusEvent {
    pub t_min: f64,
    /// Insulin units.
    pub dose: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub horizon_min: f64,
    /// Basal insulin (µU/(kg·min)).
    pub basal_rate: f64,
    #[serde(default)]
    pub meals: Vec<MealEvent>,
    #[serde(default)]
    pub boluses: Vec<BolusEvent>,
}

/// Insulin and carbohydrate inputs on the integration grid.
///
/// `cho[k]` is the carbohydrate rate over `[k dt, (k+1) dt)`; `insulin` is
/// prefixed by `pre_roll_steps` basal-only entries so that
/// `insulin[pre_roll_steps + k]` is the insulin rate at step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterizedInputs {
    pub dt: f64,
    pub pre_roll_steps: usize,
    /// mg/(kg·min).
    pub cho: Vec<f64>,
    /// µU/(kg·min).
    pub insulin: Vec<f64>,
}

impl RasterizedInputs {
    pub fn steps(&self) -> usize {
        self.cho.len()
    }

    /// Insulin rate at step `k` of the horizon (pre-roll excluded).
    pub fn insulin_at(&self, k: usize) -> f64 {
        self.insulin[self.pre_roll_steps + k]
    }
}

/// How `alter_meals` changes a meal train.
///
/// Scales and shifts are applied cyclically over meals in time order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MealPerturbation {
    pub gram_scales: Vec<f64>,
    pub time_shifts_min: Vec<f64>,
    /// Move each bolus with the meal it coincides with and scale its dose.
    #[serde(default)]
    pub adjust_boluses: bool,
}

impl Default for MealPerturbation {
    fn default() -> Self {
        MealPerturbation {
            gram_scales: vec![0.5, 1.5],
            time_shifts_min: vec![-30.0, 30.0],
            adjust_boluses: false,
        }
    }
}

impl MealPerturbation {
    pub fn scale_all(factor: f64) -> Self {
        MealPerturbation {
            gram_scales: vec![factor],
            time_shifts_min: vec![0.0],
            adjust_boluses: false,
        }
    }
}

impl Scenario {
    pub fn empty(horizon_min: f64, basal_rate: f64) -> Self {
        Scenario {
            horizon_min,
            basal_rate,
            meals: Vec::new(),
            boluses: Vec::new(),
        }
    }

    /// The fixed training profile: 22 h, meals of 50/70/80 g at 07:00, 12:30
    /// and 19:00 eaten over 15 min, boluses at meal time with a 10 g/U carb ratio.
    pub fn canonical(basal_rate: f64) -> Self {
        let carb_ratio = 10.0;
        let meals = [(420.0, 50.0), (750.0, 70.0), (1140.0, 80.0)];
        Scenario {
            horizon_min: 1320.0,
            basal_rate,
            meals: meals
                .iter()
                .map(|&(t_min, grams)| MealEvent {
                    t_min,
                    grams,
                    duration_min: 15.0,
                })
                .collect(),
            boluses: meals
                .iter()
                .map(|&(t_min, grams)| BolusEvent {
                    t_min,
                    dose: grams / carb_ratio,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon_min > 0.0) || whole_steps(self.horizon_min, 5.0, "horizon").is_err() {
            return Err(Error::validation(format!(
                "horizon must be a positive multiple of 5 min, got {}",
                self.horizon_min
            )));
        }
        if !(self.basal_rate.is_finite() && self.basal_rate >= 0.0) {
            return Err(Error::validation(format!(
                "basal_rate must be >= 0, got {}",
                self.basal_rate
            )));
        }
        let mut prev = f64::NEG_INFINITY;
        for (i, m) in self.meals.iter().enumerate() {
            if !(m.grams > 0.0 && m.grams.is_finite()) {
                return Err(Error::validation(format!("meal {i}: grams must be > 0, got {}", m.grams)));
            }
            if !(m.duration_min > 0.0) {
                return Err(Error::validation(format!(
                    "meal {i}: duration must be > 0, got {}",
                    m.duration_min
                )));
            }
            if !(m.t_min >= 0.0 && m.t_min + m.duration_min <= self.horizon_min) {
                return Err(Error::validation(format!(
                    "meal {i} at {} min (duration {}) falls outside the {} min horizon",
                    m.t_min, m.duration_min, self.horizon_min
                )));
            }
            if m.t_min < prev {
                return Err(Error::validation("meals must be sorted by time"));
            }
            prev = m.t_min;
        }
        let mut prev = f64::NEG_INFINITY;
        for (i, b) in self.boluses.iter().enumerate() {
            if !(b.dose > 0.0 && b.dose.is_finite()) {
                return Err(Error::validation(format!("bolus {i}: dose must be > 0, got {}", b.dose)));
            }
            if !(b.t_min >= 0.0 && b.t_min < self.horizon_min) {
                return Err(Error::validation(format!(
                    "bolus {i} at {} min falls outside the {} min horizon",
                    b.t_min, self.horizon_min
                )));
            }
            if b.t_min < prev {
                return Err(Error::validation("boluses must be sorted by time"));
            }
            prev = b.t_min;
        }
        Ok(())
    }

    /// Piecewise-constant inputs on a `dt` grid.
    ///
    /// Meal grams are spread uniformly over their duration; each bolus is
    /// delivered within a single step. The insulin raster is prefixed by
    /// `pre_roll_min` of basal-only input.
    pub fn rasterize(&self, dt: f64, pre_roll_min: f64, body_weight_kg: f64) -> Result<RasterizedInputs> {
        self.validate()?;
        let steps = whole_steps(self.horizon_min, dt, "horizon")?;
        let pre = whole_steps(pre_roll_min, dt, "pre-roll")?;
        let mut cho = vec![0.0; steps];
        let mut insulin = vec![self.basal_rate; pre + steps];
        for m in &self.meals {
            let start = whole_steps(m.t_min, dt, "meal time")?;
            let n = whole_steps(m.duration_min, dt, "meal duration")?;
            let rate = m.grams * MG_PER_G / body_weight_kg / m.duration_min;
            for v in &mut cho[start..start + n] {
                *v += rate;
            }
        }
        for b in &self.boluses {
            let k = whole_steps(b.t_min, dt, "bolus time")?;
            insulin[pre + k] += b.dose * MICRO_U_PER_U / body_weight_kg / dt;
        }
        Ok(RasterizedInputs {
            dt,
            pre_roll_steps: pre,
            cho,
            insulin,
        })
    }

    /// Append a second day: every event is copied 24 h later and the horizon
    /// grows by 24 h.
    pub fn extend_next_day(&self) -> Scenario {
        let mut out = self.clone();
        out.horizon_min = self.horizon_min + DAY_MIN;
        out.meals.extend(self.meals.iter().map(|m| MealEvent {
            t_min: m.t_min + DAY_MIN,
            ..*m
        }));
        out.boluses.extend(self.boluses.iter().map(|b| BolusEvent {
            t_min: b.t_min + DAY_MIN,
            ..*b
        }));
        out
    }

    /// Restrict to `[0, horizon_min]`, dropping events that do not fit.
    pub fn truncate(&self, horizon_min: f64) -> Scenario {
        Scenario {
            horizon_min,
            basal_rate: self.basal_rate,
            meals: self
                .meals
                .iter()
                .filter(|m| m.t_min + m.duration_min <= horizon_min)
                .copied()
                .collect(),
            boluses: self
                .boluses
                .iter()
                .filter(|b| b.t_min < horizon_min)
                .copied()
                .collect(),
        }
    }

    pub fn alter_meals(&self, spec: &MealPerturbation) -> Result<Scenario> {
        if spec.gram_scales.is_empty() || spec.time_shifts_min.is_empty() {
            return Err(Error::validation("meal perturbation needs at least one scale and one shift"));
        }
        let mut out = self.clone();
        for (i, m) in out.meals.iter_mut().enumerate() {
            let scale = spec.gram_scales[i % spec.gram_scales.len()];
            let shift = spec.time_shifts_min[i % spec.time_shifts_min.len()];
            if spec.adjust_boluses {
                for b in out.boluses.iter_mut().filter(|b| b.t_min == m.t_min) {
                    b.t_min += shift;
                    b.dose *= scale;
                }
            }
            m.grams *= scale;
            m.t_min += shift;
        }
        out.meals
            .sort_by(|a, b| a.t_min.total_cmp(&b.t_min));
        out.boluses
            .sort_by(|a, b| a.t_min.total_cmp(&b.t_min));
        out.validate()?;
        Ok(out)
    }

    /// Total carbohydrate (g).
    pub fn total_grams(&self) -> f64 {
        self.meals.iter().map(|m| m.grams).sum()
    }

    pub fn hash(&self) -> String {
        crate::hash::json_sha256(self)
    }
}
