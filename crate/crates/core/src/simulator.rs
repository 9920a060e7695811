//! A scenario bound to population constants and a sensor, rasterized once and
//! reused for many parameter vectors.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physiology::{
    integrate, integrate_visit, steady_state, whole_steps, PhysioParams, PopulationConstants,
    SensorModel, StateVector, Trajectory, CGM_EVERY_MIN, DT_MIN,
};
use crate::scenario::{RasterizedInputs, Scenario};

/// Full inferred vector: eight physiological parameters then nine initial states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwinParams {
    pub theta: PhysioParams,
    pub x0: StateVector,
}

impl TwinParams {
    pub const DIM: usize = PhysioParams::DIM + StateVector::DIM;

    pub fn names() -> [&'static str; 17] {
        [
            "Gb", "SG", "p2", "ka2", "kd", "kempt", "SI", "kabs", "G_0", "Isc1_0", "Isc2_0",
            "Ip_0", "Qsto1_0", "Qsto2_0", "Qgut_0", "X_0", "IG_0",
        ]
    }

    pub fn at_steady_state(theta: PhysioParams, c: &PopulationConstants) -> Self {
        TwinParams {
            theta,
            x0: steady_state(&theta, c),
        }
    }

    pub fn to_array(&self) -> [f64; 17] {
        let mut out = [0.0; 17];
        out[..8].copy_from_slice(&self.theta.to_array());
        out[8..].copy_from_slice(&self.x0.to_array());
        out
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert!(v.len() >= Self::DIM, "need {} values", Self::DIM);
        TwinParams {
            theta: PhysioParams::from_slice(&v[..8]),
            x0: StateVector::from_slice(&v[8..17]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Simulator {
    pub constants: PopulationConstants,
    pub scenario: Scenario,
    pub sensor: SensorModel,
    inputs: RasterizedInputs,
    cgm_stride: usize,
}

impl Simulator {
    pub fn new(constants: PopulationConstants, scenario: Scenario, sensor: SensorModel) -> Result<Self> {
        constants.validate()?;
        sensor.validate()?;
        let inputs = scenario.rasterize(DT_MIN, constants.beta, constants.bw)?;
        let cgm_stride = whole_steps(CGM_EVERY_MIN, DT_MIN, "CGM interval")?;
        if whole_steps(scenario.horizon_min, CGM_EVERY_MIN, "horizon").is_err() {
            return Err(Error::validation("horizon must be a multiple of the CGM interval"));
        }
        Ok(Simulator {
            constants,
            scenario,
            sensor,
            inputs,
            cgm_stride,
        })
    }

    pub fn horizon_min(&self) -> f64 {
        self.scenario.horizon_min
    }

    pub fn inputs(&self) -> &RasterizedInputs {
        &self.inputs
    }

    /// Number of CGM readings in an observation (`horizon / 5 min`).
    pub fn obs_len(&self) -> usize {
        (self.inputs.steps()) / self.cgm_stride
    }

    /// Times of the observation readings.
    pub fn obs_times(&self) -> Vec<f64> {
        (0..self.obs_len())
            .map(|j| (j * self.cgm_stride) as f64 * DT_MIN)
            .collect()
    }

    /// Times of the replay grid, endpoints included.
    pub fn grid_times(&self) -> Vec<f64> {
        (0..=self.obs_len())
            .map(|j| (j * self.cgm_stride) as f64 * DT_MIN)
            .collect()
    }

    pub fn trajectory(&self, p: &TwinParams) -> Result<Trajectory> {
        integrate(&p.x0, &p.theta, &self.constants, &self.inputs, self.horizon_min())
    }

    /// Noiseless CGM on the 5-min grid; `include_end` adds the reading at the horizon.
    pub fn noiseless_cgm(&self, p: &TwinParams, include_end: bool) -> Result<Vec<f64>> {
        let n = self.obs_len() + usize::from(include_end);
        let mut out = Vec::with_capacity(n);
        let stride = self.cgm_stride;
        let sensor = self.sensor;
        integrate_visit(
            &p.x0,
            &p.theta,
            &self.constants,
            &self.inputs,
            self.horizon_min(),
            |k, x| {
                if k % stride == 0 && out.len() < n {
                    out.push(sensor.reading(k as f64 * DT_MIN, x.ig));
                }
            },
        )?;
        Ok(out)
    }

    /// Noisy observation: noiseless readings plus white sensor noise.
    pub fn observe<R: Rng + ?Sized>(&self, p: &TwinParams, rng: &mut R) -> Result<Vec<f64>> {
        let mut y = self.noiseless_cgm(p, false)?;
        if self.sensor.noise_sd > 0.0 {
            let noise = Normal::new(0.0, self.sensor.noise_sd)
                .map_err(|e| Error::validation(format!("sensor noise: {e}")))?;
            for v in &mut y {
                *v += noise.sample(rng);
            }
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physiology::apply_sensor;
    use crate::rng::{ns, stream};

    #[test]
    fn observe_matches_trajectory_plus_sensor() {
        let c = PopulationConstants::default();
        let s = Scenario::canonical(c.basal_rate);
        let sim = Simulator::new(c, s, SensorModel::default()).unwrap();
        let p = TwinParams::at_steady_state(crate::priors::PriorSpec::default().location(), &c);
        let y = sim.observe(&p, &mut stream(1, ns::DATAGEN, 0)).unwrap();
        let traj = sim.trajectory(&p).unwrap();
        let trace = apply_sensor(&traj, &sim.sensor, 5.0, &mut stream(1, ns::DATAGEN, 0)).unwrap();
        assert_eq!(y, trace.values);
        assert_eq!(y.len(), 264);
        assert_eq!(sim.grid_times().len(), 265);
    }

    #[test]
    fn twin_params_round_trip() {
        let c = PopulationConstants::default();
        let p = TwinParams::at_steady_state(crate::priors::PriorSpec::default().location(), &c);
        assert_eq!(TwinParams::from_slice(&p.to_array()), p);
    }
}
