//! Training-set generation by prior simulation with range rejection, and the
//! binary dataset file format.
//!
//! File layout: the 7 magic bytes `T1DDS1\n`, a little-endian `u64` metadata
//! length, UTF-8 JSON metadata, then row-major little-endian `f64` blocks: the
//! `N x 17` parameter block followed by the `N x obs_dim` observation block.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physiology::{
    integrate, steady_state, PhysioParams, PopulationConstants, SensorModel, StateVector,
    CGM_EVERY_MIN, DT_MIN,
};
use crate::priors::PriorSpec;
use crate::rng::{ns, stream};
use crate::scenario::{RasterizedInputs, Scenario};
use crate::simulator::{Simulator, TwinParams};

pub const DATASET_MAGIC: &[u8; 7] = b"T1DDS1\n";

/// Physiological CGM range; simulations leaving it are rejected.
pub const CGM_RANGE: (f64, f64) = (40.0, 400.0);

/// Span of the x0 burn-in simulation (min).
pub const BURN_IN_SPAN_MIN: f64 = 2640.0;

/// The two-day input schedule the initial states are drawn from: the
/// training day followed by its next-day copy, cut at 44 h.
pub fn base_scenario(day: &Scenario) -> Scenario {
    day.extend_next_day().truncate(BURN_IN_SPAN_MIN)
}

/// Draws x0 by simulating the base scenario from the steady state and
/// reading the state at a uniformly chosen 5-min offset in `[0, 22 h]`.
#[derive(Debug, Clone)]
pub struct InitialStateSampler {
    constants: PopulationConstants,
    inputs: RasterizedInputs,
    span_min: f64,
    max_offset_min: f64,
}

impl InitialStateSampler {
    pub fn new(constants: PopulationConstants, base: &Scenario, max_offset_min: f64) -> Result<Self> {
        constants.validate()?;
        if base.horizon_min < max_offset_min {
            return Err(Error::validation(format!(
                "base scenario ({} min) shorter than the maximum offset ({max_offset_min} min)",
                base.horizon_min
            )));
        }
        let inputs = base.rasterize(DT_MIN, constants.beta, constants.bw)?;
        Ok(InitialStateSampler {
            constants,
            inputs,
            span_min: base.horizon_min,
            max_offset_min,
        })
    }

    /// Number of admissible offsets on the 5-min grid.
    pub fn offset_count(&self) -> usize {
        (self.max_offset_min / CGM_EVERY_MIN).round() as usize + 1
    }

    pub fn sample<R: Rng + ?Sized>(&self, theta: &PhysioParams, rng: &mut R) -> Result<(StateVector, f64)> {
        let offset = rng.random_range(0..self.offset_count()) as f64 * CGM_EVERY_MIN;
        Ok((self.state_at(theta, offset)?, offset))
    }

    pub fn state_at(&self, theta: &PhysioParams, offset_min: f64) -> Result<StateVector> {
        let x_ss = steady_state(theta, &self.constants);
        if offset_min == 0.0 {
            return Ok(x_ss);
        }
        let traj = integrate(&x_ss, theta, &self.constants, &self.inputs, offset_min)?;
        Ok(*traj.states.last().expect("trajectory is never empty"))
    }

    pub fn span_min(&self) -> f64 {
        self.span_min
    }
}

/// Initial state for `theta`: simulate the 44-h base scenario from steady
/// state and take the state at a random 5-min offset in `[0, 22 h]`.
pub fn sample_initial_state<R: Rng + ?Sized>(
    theta: &PhysioParams,
    c: &PopulationConstants,
    base: &Scenario,
    rng: &mut R,
) -> Result<(StateVector, f64)> {
    InitialStateSampler::new(*c, base, 1320.0)?.sample(theta, rng)
}

/// Noisy CGM observation of `p` under `scenario`.
pub fn simulate_observation<R: Rng + ?Sized>(
    p: &TwinParams,
    c: &PopulationConstants,
    scenario: &Scenario,
    sensor: &SensorModel,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Simulator::new(*c, scenario.clone(), *sensor)?.observe(p, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionStats {
    pub attempted: usize,
    pub accepted: usize,
    pub rejected_range: usize,
    pub rejected_failed: usize,
    pub acceptance_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub theta_dim: usize,
    pub obs_dim: usize,
    pub theta_names: Vec<String>,
    pub seed: u64,
    pub scenario: Scenario,
    pub prior: PriorSpec,
    pub constants: PopulationConstants,
    pub sensor: SensorModel,
    pub scenario_hash: String,
    pub prior_hash: String,
    pub stats: RejectionStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    /// `n x theta_dim`, row-major.
    pub thetas: Vec<f64>,
    /// `n x obs_dim`, row-major.
    pub observations: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.meta.n
    }

    pub fn is_empty(&self) -> bool {
        self.meta.n == 0
    }

    pub fn theta_row(&self, i: usize) -> &[f64] {
        let d = self.meta.theta_dim;
        &self.thetas[i * d..(i + 1) * d]
    }

    pub fn obs_row(&self, i: usize) -> &[f64] {
        let d = self.meta.obs_dim;
        &self.observations[i * d..(i + 1) * d]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(
            DATASET_MAGIC.len() + 8 + meta.len() + 8 * (self.thetas.len() + self.observations.len()),
        );
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for v in self.thetas.iter().chain(&self.observations) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, body) = split_header::<DatasetMeta>(bytes, DATASET_MAGIC)?;
        let nt = meta.n * meta.theta_dim;
        let ny = meta.n * meta.obs_dim;
        if body.len() != 8 * (nt + ny) {
            return Err(Error::Format(format!(
                "dataset body has {} bytes, header implies {}",
                body.len(),
                8 * (nt + ny)
            )));
        }
        let values = read_f64s(body);
        Ok(Dataset {
            thetas: values[..nt].to_vec(),
            observations: values[nt..].to_vec(),
            meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn hash(&self) -> String {
        crate::hash::sha256_hex(&self.to_bytes())
    }

    /// First `n` rows as a new dataset.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.meta.n);
        let mut meta = self.meta.clone();
        meta.n = n;
        Dataset {
            thetas: self.thetas[..n * meta.theta_dim].to_vec(),
            observations: self.observations[..n * meta.obs_dim].to_vec(),
            meta,
        }
    }
}

/// Parse `magic | u64 LE length | JSON header | body`.
pub(crate) fn split_header<'a, T: serde::de::DeserializeOwned>(
    bytes: &'a [u8],
    magic: &[u8],
) -> Result<(T, &'a [u8])> {
    if bytes.len() < magic.len() + 8 || &bytes[..magic.len()] != magic {
        return Err(Error::Format(format!(
            "missing magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut len = [0u8; 8];
    len.copy_from_slice(&bytes[magic.len()..magic.len() + 8]);
    let len = u64::from_le_bytes(len) as usize;
    let start = magic.len() + 8;
    if bytes.len() < start + len {
        return Err(Error::Format("truncated header".into()));
    }
    let header: T = serde_json::from_slice(&bytes[start..start + len])?;
    Ok((header, &bytes[start + len..]))
}

pub(crate) fn read_f64s(body: &[u8]) -> Vec<f64> {
    body.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateOptions {
    /// Abort if the acceptance rate after the probe batch falls below this.
    pub acceptance_floor: f64,
    /// Candidates evaluated before the acceptance floor is checked.
    pub probe: usize,
    /// Candidates simulated per parallel batch.
    pub batch: usize,
    pub range: (f64, f64),
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            acceptance_floor: 0.01,
            probe: 500,
            batch: 256,
            range: CGM_RANGE,
        }
    }
}

/// Everything needed to turn a stream index into a candidate `(theta_hat, y)`.
#[derive(Debug, Clone)]
pub struct PriorSimulator {
    pub prior: PriorSpec,
    pub x0_sampler: InitialStateSampler,
    pub simulator: Simulator,
}

pub enum Candidate {
    Accepted(TwinParams, Vec<f64>),
    OutOfRange,
    Failed,
}

impl PriorSimulator {
    pub fn new(
        prior: PriorSpec,
        constants: PopulationConstants,
        scenario: Scenario,
        sensor: SensorModel,
    ) -> Result<Self> {
        prior.validate()?;
        let base = base_scenario(&scenario);
        let x0_sampler = InitialStateSampler::new(constants, &base, scenario.horizon_min)?;
        let simulator = Simulator::new(constants, scenario, sensor)?;
        Ok(PriorSimulator {
            prior,
            x0_sampler,
            simulator,
        })
    }

    /// Joint draw `theta ~ p(theta)`, `x0 ~ p(x0 | theta)`, `y ~ p(y | theta, x0)`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(TwinParams, Vec<f64>)> {
        let theta = self.prior.sample_theta(rng);
        let (x0, _) = self.x0_sampler.sample(&theta, rng)?;
        let p = TwinParams { theta, x0 };
        let y = self.simulator.observe(&p, rng)?;
        Ok((p, y))
    }

    pub fn candidate(&self, seed: u64, namespace: u16, index: u64, range: (f64, f64)) -> Candidate {
        let mut rng = stream(seed, namespace, index);
        match self.draw(&mut rng) {
            Ok((p, y)) => {
                if y.iter().all(|v| *v >= range.0 && *v <= range.1) {
                    Candidate::Accepted(p, y)
                } else {
                    Candidate::OutOfRange
                }
            }
            Err(_) => Candidate::Failed,
        }
    }
}

/// Simulate from the prior until `n` observations stay inside the CGM range.
pub fn generate_dataset(
    n: usize,
    prior: &PriorSpec,
    c: &PopulationConstants,
    scenario: &Scenario,
    sensor: &SensorModel,
    seed: u64,
    opts: &GenerateOptions,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::validation("dataset size must be >= 1"));
    }
    let ps = PriorSimulator::new(prior.clone(), *c, scenario.clone(), *sensor)?;
    let obs_dim = ps.simulator.obs_len();
    let mut thetas = Vec::with_capacity(n * TwinParams::DIM);
    let mut observations = Vec::with_capacity(n * obs_dim);
    let mut stats = RejectionStats {
        attempted: 0,
        accepted: 0,
        rejected_range: 0,
        rejected_failed: 0,
        acceptance_rate: 0.0,
    };
    let batch = opts.batch.max(1) as u64;
    let mut next: u64 = 0;
    let mut probed = false;
    'outer: while stats.accepted < n {
        let results: Vec<Candidate> = (next..next + batch)
            .into_par_iter()
            .map(|i| ps.candidate(seed, ns::DATAGEN, i, opts.range))
            .collect();
        next += batch;
        for cand in results {
            stats.attempted += 1;
            match cand {
                Candidate::Accepted(p, y) => {
                    thetas.extend_from_slice(&p.to_array());
                    observations.extend_from_slice(&y);
                    stats.accepted += 1;
                }
                Candidate::OutOfRange => stats.rejected_range += 1,
                Candidate::Failed => stats.rejected_failed += 1,
            }
            if !probed && stats.attempted >= opts.probe {
                probed = true;
                let rate = stats.accepted as f64 / stats.attempted as f64;
                if rate < opts.acceptance_floor {
                    return Err(Error::LowAcceptance {
                        rate,
                        floor: opts.acceptance_floor,
                        attempted: stats.attempted,
                    });
                }
            }
            if stats.accepted == n {
                break 'outer;
            }
        }
    }
    stats.acceptance_rate = stats.accepted as f64 / stats.attempted as f64;
    log::info!(
        "generated {n} simulations from {} candidates (acceptance {:.3})",
        stats.attempted,
        stats.acceptance_rate
    );
    Ok(Dataset {
        meta: DatasetMeta {
            n,
            theta_dim: TwinParams::DIM,
            obs_dim,
            theta_names: TwinParams::names().iter().map(|s| s.to_string()).collect(),
            seed,
            scenario: scenario.clone(),
            prior: prior.clone(),
            constants: *c,
            sensor: *sensor,
            scenario_hash: scenario.hash(),
            prior_hash: prior.hash(),
            stats,
        },
        thetas,
        observations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::Marginal;

    fn setup() -> (PriorSpec, PopulationConstants, Scenario, SensorModel) {
        let c = PopulationConstants::default();
        (
            PriorSpec::default(),
            c,
            Scenario::canonical(c.basal_rate),
            SensorModel::default(),
        )
    }

    fn pinned(prior: &PriorSpec) -> PriorSpec {
        let pin = |m: &Marginal| match *m {
            Marginal::TruncatedNormal { mean, lower, upper, .. } => Marginal::TruncatedNormal {
                mean,
                sd: 0.0,
                lower,
                upper,
            },
            Marginal::LogNormal { median, lower, upper, .. } => Marginal::LogNormal {
                median,
                log_sd: 0.0,
                lower,
                upper,
            },
        };
        PriorSpec {
            gb: pin(&prior.gb),
            sg: pin(&prior.sg),
            p2: pin(&prior.p2),
            ka2: pin(&prior.ka2),
            kd: pin(&prior.kd),
            kempt: pin(&prior.kempt),
            si: pin(&prior.si),
            kabs: pin(&prior.kabs),
        }
    }

    #[test]
    fn zero_offset_is_steady_state() {
        let (prior, c, s, _) = setup();
        let sampler = InitialStateSampler::new(c, &base_scenario(&s), 1320.0).unwrap();
        let th = prior.location();
        assert_eq!(sampler.state_at(&th, 0.0).unwrap(), steady_state(&th, &c));
    }

    #[test]
    fn offset_state_matches_trajectory_index() {
        let (prior, c, s, _) = setup();
        let base = base_scenario(&s);
        let sampler = InitialStateSampler::new(c, &base, 1320.0).unwrap();
        let th = prior.location();
        let inputs = base.rasterize(DT_MIN, c.beta, c.bw).unwrap();
        let traj = integrate(&steady_state(&th, &c), &th, &c, &inputs, base.horizon_min).unwrap();
        for offset in [5.0, 425.0, 1320.0] {
            let x = sampler.state_at(&th, offset).unwrap();
            assert_eq!(x, traj.states[offset as usize]);
        }
        // shortly after breakfast the stomach holds carbohydrate
        assert!(sampler.state_at(&th, 430.0).unwrap().qsto1 > 0.0);
    }

    #[test]
    fn steady_noiseless_observation_is_flat() {
        let (prior, c, _, _) = setup();
        let th = prior.location();
        let p = TwinParams::at_steady_state(th, &c);
        let s = Scenario::empty(1320.0, c.basal_rate);
        let y = simulate_observation(&p, &c, &s, &SensorModel::ideal(), &mut stream(0, 0, 0)).unwrap();
        assert_eq!(y.len(), 264);
        for v in y {
            assert!((v - th.gb).abs() < 1e-9);
        }
    }

    #[test]
    fn observation_is_deterministic_given_seed() {
        let (prior, c, s, sensor) = setup();
        let p = TwinParams::at_steady_state(prior.location(), &c);
        let a = simulate_observation(&p, &c, &s, &sensor, &mut stream(5, 0, 1)).unwrap();
        let b = simulate_observation(&p, &c, &s, &sensor, &mut stream(5, 0, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_rows_is_rejected() {
        let (prior, c, s, sensor) = setup();
        let err = generate_dataset(0, &prior, &c, &s, &sensor, 1, &GenerateOptions::default()).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn pinned_prior_accepts_everything() {
        let (prior, c, s, sensor) = setup();
        let ds = generate_dataset(10, &pinned(&prior), &c, &s, &sensor, 3, &GenerateOptions::default()).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.meta.stats.attempted, 10);
        assert_eq!(ds.meta.stats.acceptance_rate, 1.0);
    }

    #[test]
    fn accepted_rows_are_in_range_and_reproducible() {
        let (prior, c, s, sensor) = setup();
        let opts = GenerateOptions::default();
        let a = generate_dataset(40, &prior, &c, &s, &sensor, 9, &opts).unwrap();
        for i in 0..a.len() {
            assert!(a.obs_row(i).iter().all(|v| (40.0..=400.0).contains(v)));
            assert_eq!(a.obs_row(i).len(), 264);
        }
        let b = generate_dataset(40, &prior, &c, &s, &sensor, 9, &opts).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn low_acceptance_aborts() {
        let (prior, c, s, sensor) = setup();
        let opts = GenerateOptions {
            range: (1000.0, 2000.0),
            probe: 50,
            batch: 50,
            ..Default::default()
        };
        let err = generate_dataset(5, &prior, &c, &s, &sensor, 1, &opts).unwrap_err();
        assert!(matches!(err, Error::LowAcceptance { .. }));
    }

    #[test]
    fn file_layout_is_bit_exact() {
        let (prior, c, s, sensor) = setup();
        let ds = generate_dataset(3, &prior, &c, &s, &sensor, 4, &GenerateOptions::default()).unwrap();
        let bytes = ds.to_bytes();
        assert_eq!(&bytes[..7], b"T1DDS1\n");
        let len = u64::from_le_bytes(bytes[7..15].try_into().unwrap()) as usize;
        let meta: serde_json::Value = serde_json::from_slice(&bytes[15..15 + len]).unwrap();
        assert_eq!(meta["n"], 3);
        let body = &bytes[15 + len..];
        assert_eq!(body.len(), 8 * 3 * (17 + 264));
        let first = f64::from_le_bytes(body[..8].try_into().unwrap());
        assert_eq!(first, ds.thetas[0]);
        let y0 = f64::from_le_bytes(body[8 * 51..8 * 52].try_into().unwrap());
        assert_eq!(y0, ds.observations[0]);
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), ds);
    }
}
