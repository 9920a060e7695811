//! Simplified UVA/Padova type-1 diabetes model.
//!
//! Nine states in three coupled blocks (subcutaneous insulin, oral glucose,
//! glucose-insulin kinetics) plus an affine-drift CGM sensor with white noise.
//!
//! # Units
//!
//! | quantity                  | unit            | conversion                          |
//! |---------------------------|-----------------|-------------------------------------|
//! | meal carbohydrate input   | mg/(kg·min)     | grams · 1000 / BW / duration        |
//! | insulin bolus             | µU/kg           | units · 1e6 / BW, delivered in one step |
//! | basal insulin rate        | µU/(kg·min)     | U/h · 1e6 / 60 / BW                 |
//! | `VI'` (insulin volume)    | mL/kg           | VI [L/kg] · 1000                    |
//! | Isc1, Isc2, Ip            | µU/mL           | input / `VI'`                       |
//! | Qsto1, Qsto2, Qgut        | mg/kg           |                                     |
//! | Ra / VG                   | mg/(dL·min)     | Ra [mg/(kg·min)] / VG [dL/kg]       |
//! | G, IG, CGM                | mg/dL           |                                     |
//! | X                         | 1/min           |                                     |

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::RasterizedInputs;

/// Integration step of the reference simulator (min).
pub const DT_MIN: f64 = 1.0;
/// CGM sampling interval (min).
pub const CGM_EVERY_MIN: f64 = 5.0;
/// mL per L.
pub const ML_PER_L: f64 = 1000.0;
/// mg per g.
pub const MG_PER_G: f64 = 1000.0;
/// µU per insulin unit.
pub const MICRO_U_PER_U: f64 = 1.0e6;
/// Numerical floor for plasma and interstitial glucose (mg/dL).
pub const GLUCOSE_FLOOR: f64 = 1.0;

/// The eight patient-specific physiological parameters that are inferred.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysioParams {
    /// Basal glucose (mg/dL).
    #[serde(rename = "Gb")]
    pub gb: f64,
    /// Fractional glucose effectiveness (1/min).
    #[serde(rename = "SG")]
    pub sg: f64,
    /// Insulin action decay rate (1/min).
    pub p2: f64,
    /// Monomeric insulin absorption rate (1/min).
    pub ka2: f64,
    /// Non-monomeric to monomeric transition rate (1/min).
    pub kd: f64,
    /// Gastric emptying rate (1/min).
    pub kempt: f64,
    /// Insulin sensitivity (mL/(µU·min)).
    #[serde(rename = "SI")]
    pub si: f64,
    /// Intestinal absorption rate (1/min).
    pub kabs: f64,
}

impl PhysioParams {
    pub const DIM: usize = 8;
    pub const NAMES: [&'static str; 8] = ["Gb", "SG", "p2", "ka2", "kd", "kempt", "SI", "kabs"];

    pub fn to_array(&self) -> [f64; 8] {
        [
            self.gb, self.sg, self.p2, self.ka2, self.kd, self.kempt, self.si, self.kabs,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert!(v.len() >= Self::DIM, "need {} parameter values", Self::DIM);
        PhysioParams {
            gb: v[0],
            sg: v[1],
            p2: v[2],
            ka2: v[3],
            kd: v[4],
            kempt: v[5],
            si: v[6],
            kabs: v[7],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in Self::NAMES.iter().zip(self.to_array()) {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(format!(
                    "parameter {name} must be finite and > 0, got {v}"
                )));
            }
        }
        if !(40.0..=300.0).contains(&self.gb) {
            return Err(Error::validation(format!(
                "Gb must lie in [40, 300] mg/dL, got {}",
                self.gb
            )));
        }
        Ok(())
    }
}

/// Hypoglycemia amplification of insulin action.
///
/// `rho(G) = 1` at or above `threshold`; below it
/// `rho(G) = min(cap, 1 + gain * ln(threshold / G)^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoConfig {
    pub threshold: f64,
    pub gain: f64,
    pub cap: f64,
}

impl Default for RhoConfig {
    fn default() -> Self {
        RhoConfig {
            threshold: 120.0,
            gain: 10.0,
            cap: 10.0,
        }
    }
}

/// Parameters held at population level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationConstants {
    /// Insulin distribution volume (L/kg).
    #[serde(rename = "VI")]
    pub vi: f64,
    /// Insulin clearance rate (1/min).
    pub ke: f64,
    /// Insulin appearance delay (min).
    pub beta: f64,
    /// Fraction of ingested glucose absorbed.
    pub f: f64,
    /// Glucose distribution volume (dL/kg).
    #[serde(rename = "VG")]
    pub vg: f64,
    /// Plasma-to-interstitium delay (min).
    pub alpha: f64,
    /// Body weight (kg).
    #[serde(rename = "BW")]
    pub bw: f64,
    /// Basal insulin infusion (µU/(kg·min)).
    pub basal_rate: f64,
    #[serde(default)]
    pub rho: RhoConfig,
}

impl Default for PopulationConstants {
    fn default() -> Self {
        PopulationConstants {
            vi: 0.126,
            ke: 0.127,
            beta: 8.0,
            f: 0.9,
            vg: 1.45,
            alpha: 7.0,
            bw: 70.0,
            basal_rate: 240.0,
            rho: RhoConfig::default(),
        }
    }
}

impl PopulationConstants {
    /// Insulin distribution volume in mL/kg.
    pub fn vi_ml(&self) -> f64 {
        self.vi * ML_PER_L
    }

    /// Basal plasma insulin (µU/mL), derived so the basal infusion is an equilibrium.
    pub fn ipb(&self) -> f64 {
        self.basal_rate / (self.ke * self.vi_ml())
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("VI", self.vi),
            ("ke", self.ke),
            ("beta", self.beta),
            ("f", self.f),
            ("VG", self.vg),
            ("alpha", self.alpha),
            ("BW", self.bw),
            ("basal_rate", self.basal_rate),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(format!(
                    "constant {name} must be finite and > 0, got {v}"
                )));
            }
        }
        if self.f > 1.0 {
            return Err(Error::validation(format!("f must be <= 1, got {}", self.f)));
        }
        let r = self.rho;
        if !(r.threshold > 0.0 && r.gain >= 0.0 && r.cap >= 1.0) {
            return Err(Error::validation("rho config needs threshold > 0, gain >= 0, cap >= 1"));
        }
        Ok(())
    }
}

/// The nine model states.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StateVector {
    #[serde(rename = "G")]
    pub g: f64,
    #[serde(rename = "Isc1")]
    pub isc1: f64,
    #[serde(rename = "Isc2")]
    pub isc2: f64,
    #[serde(rename = "Ip")]
    pub ip: f64,
    #[serde(rename = "Qsto1")]
    pub qsto1: f64,
    #[serde(rename = "Qsto2")]
    pub qsto2: f64,
    #[serde(rename = "Qgut")]
    pub qgut: f64,
    #[serde(rename = "X")]
    pub x: f64,
    #[serde(rename = "IG")]
    pub ig: f64,
}

impl StateVector {
    pub const DIM: usize = 9;
    pub const NAMES: [&'static str; 9] =
        ["G", "Isc1", "Isc2", "Ip", "Qsto1", "Qsto2", "Qgut", "X", "IG"];

    pub fn to_array(&self) -> [f64; 9] {
        [
            self.g, self.isc1, self.isc2, self.ip, self.qsto1, self.qsto2, self.qgut, self.x,
            self.ig,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert!(v.len() >= Self::DIM, "need {} state values", Self::DIM);
        StateVector {
            g: v[0],
            isc1: v[1],
            isc2: v[2],
            ip: v[3],
            qsto1: v[4],
            qsto2: v[5],
            qgut: v[6],
            x: v[7],
            ig: v[8],
        }
    }

    /// Lower bound of each component.
    pub fn floors() -> [f64; 9] {
        let mut f = [0.0; 9];
        f[0] = GLUCOSE_FLOOR;
        f[8] = GLUCOSE_FLOOR;
        f
    }

    /// Clamp every component to its lower bound.
    pub fn floor(&mut self) {
        self.g = self.g.max(GLUCOSE_FLOOR);
        self.ig = self.ig.max(GLUCOSE_FLOOR);
        self.isc1 = self.isc1.max(0.0);
        self.isc2 = self.isc2.max(0.0);
        self.ip = self.ip.max(0.0);
        self.qsto1 = self.qsto1.max(0.0);
        self.qsto2 = self.qsto2.max(0.0);
        self.qgut = self.qgut.max(0.0);
        self.x = self.x.max(0.0);
    }

    pub fn validate(&self) -> Result<()> {
        for ((name, v), lo) in Self::NAMES.iter().zip(self.to_array()).zip(Self::floors()) {
            if !v.is_finite() || v < lo {
                return Err(Error::validation(format!(
                    "state {name} must be finite and >= {lo}, got {v}"
                )));
            }
        }
        Ok(())
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        Self::NAMES
            .iter()
            .zip(self.to_array())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }
}

/// CGM sensor: `CGM(t) = (a0 + a1 t + a2 t^2) IG(t) + b0 + v(t)`, `v ~ N(0, noise_sd^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    pub b0: f64,
    pub noise_sd: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        SensorModel {
            a0: 1.0,
            a1: 0.0,
            a2: 0.0,
            b0: 0.0,
            noise_sd: 2.0,
        }
    }
}

impl SensorModel {
    pub fn ideal() -> Self {
        SensorModel {
            noise_sd: 0.0,
            ..Default::default()
        }
    }

    pub fn noiseless(&self) -> Self {
        SensorModel {
            noise_sd: 0.0,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::validation(format!(
                "noise_sd must be >= 0, got {}",
                self.noise_sd
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn reading(&self, t_min: f64, ig: f64) -> f64 {
        (self.a0 + self.a1 * t_min + self.a2 * t_min * t_min) * ig + self.b0
    }
}

/// States on a uniform time grid, `states[k]` at `t0 + k * dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub t0: f64,
    pub states: Vec<StateVector>,
}

impl Trajectory {
    pub fn horizon_min(&self) -> f64 {
        (self.states.len().saturating_sub(1)) as f64 * self.dt
    }

    pub fn state_at(&self, t_min: f64) -> Option<&StateVector> {
        let k = (t_min / self.dt).round();
        if k < 0.0 || (k * self.dt - t_min).abs() > 1e-9 {
            return None;
        }
        self.states.get(k as usize)
    }

    /// Write one component as `t_min,value` rows.
    pub fn write_component_csv<W: Write>(&self, w: W, component: usize) -> Result<()> {
        let t: Vec<f64> = (0..self.states.len())
            .map(|k| self.t0 + k as f64 * self.dt)
            .collect();
        let v: Vec<f64> = self.states.iter().map(|s| s.to_array()[component]).collect();
        write_series_csv(w, &t, &v)
    }
}

/// CGM readings on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CgmTrace {
    pub t_min: Vec<f64>,
    pub values: Vec<f64>,
}

impl CgmTrace {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_series_csv(w, &self.t_min, &self.values)
    }

    pub fn read_csv(text: &str) -> Result<Self> {
        let (t_min, values) = read_series_csv(text)?;
        Ok(CgmTrace { t_min, values })
    }
}

/// `t_min,value` CSV, LF line endings, shortest round-trip float formatting.
pub fn write_series_csv<W: Write>(mut w: W, t: &[f64], v: &[f64]) -> Result<()> {
    let io = |e| Error::io("<csv>", e);
    let mut out = String::with_capacity(32 * t.len() + 16);
    out.push_str("t_min,value\n");
    for (a, b) in t.iter().zip(v) {
        out.push_str(&format!("{a:?},{b:?}\n"));
    }
    w.write_all(out.as_bytes()).map_err(io)?;
    Ok(())
}

pub fn read_series_csv(text: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut lines = text.lines();
    match lines.next().map(str::trim) {
        Some("t_min,value") => {}
        other => {
            return Err(Error::Format(format!(
                "expected header `t_min,value`, found {other:?}"
            )))
        }
    }
    let mut t = Vec::new();
    let mut v = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| Error::Format(format!("line {}: expected two columns", i + 2)))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("line {}: {e}", i + 2)))
        };
        t.push(parse(a)?);
        v.push(parse(b)?);
    }
    Ok((t, v))
}

/// Hypoglycemia multiplier on insulin action.
pub fn rho(g: f64, cfg: &RhoConfig) -> Result<f64> {
    if !(g > 0.0) {
        return Err(Error::Domain(format!("rho needs G > 0, got {g}")));
    }
    Ok(rho_unchecked(g, cfg))
}

#[inline]
fn rho_unchecked(g: f64, cfg: &RhoConfig) -> f64 {
    if g >= cfg.threshold {
        1.0
    } else {
        let l = (cfg.threshold / g).ln();
        (1.0 + cfg.gain * l * l).min(cfg.cap)
    }
}

/// Time derivatives of the nine states.
///
/// `insulin_rate_delayed` is the insulin input already shifted by `beta`.
#[inline]
pub fn derivatives(
    x: &StateVector,
    theta: &PhysioParams,
    c: &PopulationConstants,
    cho_rate: f64,
    insulin_rate_delayed: f64,
) -> StateVector {
    let vi_ml = c.vi_ml();
    let ra = c.f * theta.kabs * x.qgut;
    StateVector {
        isc1: -theta.kd * x.isc1 + insulin_rate_delayed / vi_ml,
        isc2: theta.kd * x.isc1 - theta.ka2 * x.isc2,
        ip: theta.ka2 * x.isc2 - c.ke * x.ip,
        qsto1: -theta.kempt * x.qsto1 + cho_rate,
        qsto2: theta.kempt * x.qsto1 - theta.kempt * x.qsto2,
        qgut: theta.kempt * x.qsto2 - theta.kabs * x.qgut,
        g: -rho_unchecked(x.g, &c.rho) * x.x * x.g - theta.sg * (x.g - theta.gb) + ra / c.vg,
        x: -theta.p2 * x.x + theta.p2 * theta.si * (x.ip - c.ipb()),
        ig: -(x.ig - x.g) / c.alpha,
    }
}

/// Rate of glucose appearance `f * kabs * Qgut` (mg/(kg·min)).
pub fn rate_of_appearance(x: &StateVector, theta: &PhysioParams, c: &PopulationConstants) -> f64 {
    c.f * theta.kabs * x.qgut
}

/// Fixed point under basal insulin and no carbohydrate.
pub fn steady_state(theta: &PhysioParams, c: &PopulationConstants) -> StateVector {
    let vi_ml = c.vi_ml();
    StateVector {
        g: theta.gb,
        isc1: c.basal_rate / (theta.kd * vi_ml),
        isc2: c.basal_rate / (theta.ka2 * vi_ml),
        ip: c.ipb(),
        qsto1: 0.0,
        qsto2: 0.0,
        qgut: 0.0,
        x: 0.0,
        ig: theta.gb,
    }
}

/// Explicit Euler integration over `[0, horizon_min]`.
///
/// The insulin input applied at step `k` is `inputs.insulin_at(k - beta/dt)`;
/// states are floored after each step.
pub fn integrate(
    x0: &StateVector,
    theta: &PhysioParams,
    c: &PopulationConstants,
    inputs: &RasterizedInputs,
    horizon_min: f64,
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity((horizon_min / inputs.dt) as usize + 1);
    integrate_visit(x0, theta, c, inputs, horizon_min, |_, x| states.push(*x))?;
    Ok(Trajectory {
        dt: inputs.dt,
        t0: 0.0,
        states,
    })
}

/// Same scheme as [`integrate`], handing each grid state (index, state) to
/// `visit` instead of storing the trajectory.
pub fn integrate_visit<F: FnMut(usize, &StateVector)>(
    x0: &StateVector,
    theta: &PhysioParams,
    c: &PopulationConstants,
    inputs: &RasterizedInputs,
    horizon_min: f64,
    mut visit: F,
) -> Result<()> {
    let dt = inputs.dt;
    let steps = whole_steps(horizon_min, dt, "horizon")?;
    let delay = whole_steps(c.beta, dt, "beta")?;
    if inputs.cho.len() < steps {
        return Err(Error::validation(format!(
            "inputs cover {} steps, horizon needs {steps}",
            inputs.cho.len()
        )));
    }
    if inputs.pre_roll_steps < delay {
        return Err(Error::validation(format!(
            "insulin pre-roll of {} steps is shorter than the {delay}-step delay",
            inputs.pre_roll_steps
        )));
    }
    let mut x = *x0;
    visit(0, &x);
    for k in 0..steps {
        let ins = inputs.insulin[inputs.pre_roll_steps + k - delay];
        let d = derivatives(&x, theta, c, inputs.cho[k], ins);
        x = StateVector {
            g: x.g + dt * d.g,
            isc1: x.isc1 + dt * d.isc1,
            isc2: x.isc2 + dt * d.isc2,
            ip: x.ip + dt * d.ip,
            qsto1: x.qsto1 + dt * d.qsto1,
            qsto2: x.qsto2 + dt * d.qsto2,
            qgut: x.qgut + dt * d.qgut,
            x: x.x + dt * d.x,
            ig: x.ig + dt * d.ig,
        };
        if let Some(component) = x.first_non_finite() {
            return Err(Error::Integration {
                step: k + 1,
                t_min: (k + 1) as f64 * dt,
                component,
            });
        }
        x.floor();
        visit(k + 1, &x);
    }
    Ok(())
}

pub(crate) fn whole_steps(span: f64, dt: f64, what: &str) -> Result<usize> {
    if !(dt > 0.0) {
        return Err(Error::validation(format!("dt must be > 0, got {dt}")));
    }
    let n = (span / dt).round();
    if !(span >= 0.0) || (n * dt - span).abs() > 1e-9 {
        return Err(Error::validation(format!(
            "{what} ({span} min) must be a non-negative multiple of dt ({dt} min)"
        )));
    }
    Ok(n as usize)
}

/// Noiseless sensor readings of IG every `every_min`.
///
/// Readings start at t = 0; `include_end` adds the reading at the horizon.
pub fn sensor_readings(
    traj: &Trajectory,
    sensor: &SensorModel,
    every_min: f64,
    include_end: bool,
) -> Result<CgmTrace> {
    let stride = whole_steps(every_min, traj.dt, "sampling interval")?;
    if stride == 0 {
        return Err(Error::validation("sampling interval must be > 0"));
    }
    let intervals = (traj.states.len() - 1) / stride;
    let count = if include_end { intervals + 1 } else { intervals };
    let mut t_min = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count);
    for j in 0..count {
        let k = j * stride;
        let t = k as f64 * traj.dt;
        t_min.push(traj.t0 + t);
        values.push(sensor.reading(t, traj.states[k].ig));
    }
    Ok(CgmTrace { t_min, values })
}

/// CGM observation: `horizon / every_min` readings from t = 0 with additive white noise.
pub fn apply_sensor<R: Rng + ?Sized>(
    traj: &Trajectory,
    sensor: &SensorModel,
    every_min: f64,
    rng: &mut R,
) -> Result<CgmTrace> {
    sensor.validate()?;
    let mut trace = sensor_readings(traj, sensor, every_min, false)?;
    if sensor.noise_sd > 0.0 {
        let noise = Normal::new(0.0, sensor.noise_sd)
            .map_err(|e| Error::validation(format!("sensor noise: {e}")))?;
        for v in &mut trace.values {
            *v += noise.sample(rng);
        }
    }
    Ok(trace)
}
