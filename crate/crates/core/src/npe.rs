//! Amortized inference: train a conditional flow on a simulated dataset, then
//! draw posterior samples for any observation without touching the simulator.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, CGM_RANGE};
use crate::error::{Error, Result};
use crate::flow::{
    train, DimTransform, FlowArch, FlowModel, SupportBox, SupportPolicy, TrainConfig, TrainData, TrainHistory,
};
use crate::hash::{f64s_sha256, sha256_hex};
use crate::physiology::{PopulationConstants, SensorModel, GLUCOSE_FLOOR};
use crate::priors::PriorSpec;
use crate::rng::{ns, stream};
use crate::scenario::Scenario;
use crate::simulator::TwinParams;
use crate::stats;

/// Shift for the gut masses (mg/kg), whose initial values can be exactly 0.
pub const MASS_SHIFT: f64 = 1.0;
/// Shift for insulin action (1/min), which is 0 at steady state.
pub const ACTION_SHIFT: f64 = 1e-4;

/// Log transforms for the 17 inferred quantities.
pub fn twin_transforms() -> Vec<DimTransform> {
    let log = DimTransform::Log { shift: 0.0 };
    let mut t = vec![log; 8];
    t.extend([
        log,
        log,
        log,
        log,
        DimTransform::Log { shift: MASS_SHIFT },
        DimTransform::Log { shift: MASS_SHIFT },
        DimTransform::Log { shift: MASS_SHIFT },
        DimTransform::Log { shift: ACTION_SHIFT },
        log,
    ]);
    t
}

/// Parameters outside the prior box are redrawn; initial states below their
/// physical floor are clamped onto it.
pub fn twin_support(prior: &PriorSpec) -> SupportBox {
    let mut lower = Vec::with_capacity(17);
    let mut upper = Vec::with_capacity(17);
    for m in prior.marginals() {
        let (lo, hi) = m.bounds();
        lower.push(lo);
        upper.push(hi);
    }
    for i in 0..9 {
        lower.push(if i == 0 || i == 8 { GLUCOSE_FLOOR } else { 0.0 });
        upper.push(f64::INFINITY);
    }
    let mut policy = vec![SupportPolicy::Reject; 8];
    policy.extend([SupportPolicy::Clamp; 9]);
    SupportBox { lower, upper, policy }
}

/// Where a posterior model came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub prior_hash: String,
    pub scenario_hash: String,
    pub dataset_hash: String,
    pub prior: PriorSpec,
    pub scenario: Scenario,
    pub constants: PopulationConstants,
    pub sensor: SensorModel,
    pub train_seed: u64,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorModel {
    pub flow: FlowModel,
    pub provenance: Provenance,
}

impl PosteriorModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let extra = serde_json::to_value(&self.provenance).expect("provenance serializes");
        self.flow.to_checkpoint(&extra)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (flow, extra) = FlowModel::from_checkpoint(bytes)?;
        let provenance: Provenance = serde_json::from_value(extra)
            .map_err(|e| Error::Format(format!("checkpoint provenance: {e}")))?;
        if flow.standardizer.is_none() {
            return Err(Error::Format("checkpoint has no standardizer".into()));
        }
        if provenance.prior.hash() != provenance.prior_hash || provenance.scenario.hash() != provenance.scenario_hash {
            return Err(Error::Format("checkpoint provenance hashes do not match its contents".into()));
        }
        Ok(PosteriorModel { flow, provenance })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.to_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// First 16 hex digits of the checkpoint hash.
    pub fn id(&self) -> String {
        sha256_hex(&self.to_bytes())[..16].to_string()
    }

    pub fn obs_len(&self) -> usize {
        self.flow.arch.ctx_dim
    }
}

/// Trains a posterior model on a dataset. The seed drives weight
/// initialization, the train/validation split and minibatch order.
pub fn train_npe(dataset: &Dataset, arch: FlowArch, cfg: &TrainConfig, seed: u64) -> Result<PosteriorModel> {
    if dataset.is_empty() {
        return Err(Error::validation("dataset is empty"));
    }
    let meta = &dataset.meta;
    if arch.dim != meta.theta_dim || arch.ctx_dim != meta.obs_dim {
        return Err(Error::validation(format!(
            "architecture ({} x {}) does not match the dataset ({} x {})",
            arch.dim, arch.ctx_dim, meta.theta_dim, meta.obs_dim
        )));
    }
    let theta = Array2::from_shape_vec((meta.n, meta.theta_dim), dataset.thetas.clone())
        .map_err(|e| Error::Format(e.to_string()))?;
    let ctx = Array2::from_shape_vec((meta.n, meta.obs_dim), dataset.observations.clone())
        .map_err(|e| Error::Format(e.to_string()))?;
    let data = TrainData::new(theta, ctx)?;
    let model = FlowModel::new(arch, twin_transforms(), 1e-3, seed)?;
    let (flow, history) = train(model, &data, cfg, &mut stream(seed, ns::TRAIN, 1))?;
    for w in &history.warnings {
        log::warn!("{w}");
    }
    Ok(PosteriorModel {
        flow,
        provenance: Provenance {
            prior_hash: meta.prior_hash.clone(),
            scenario_hash: meta.scenario_hash.clone(),
            dataset_hash: dataset.hash(),
            prior: meta.prior.clone(),
            scenario: meta.scenario.clone(),
            constants: meta.constants,
            sensor: meta.sensor,
            train_seed: seed,
            history,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferOptions {
    /// Observations may exceed the CGM range by this much (mg/dL).
    pub obs_margin: f64,
    /// When set, inference refuses a model trained on another scenario.
    pub expected_scenario_hash: Option<String>,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            obs_margin: 20.0,
            expected_scenario_hash: None,
        }
    }
}

/// Posterior draws over the 17 twin parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub names: Vec<String>,
    /// `n` rows of 17 values.
    pub rows: Vec<Vec<f64>>,
    pub observation_id: String,
    pub model_id: String,
    pub seed: u64,
    pub leakage: f64,
    #[serde(skip)]
    pub elapsed_s: f64,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    pub fn median(&self) -> Vec<f64> {
        (0..self.names.len()).map(|j| stats::median(&self.column(j))).collect()
    }

    pub fn percentile(&self, p: f64) -> Vec<f64> {
        (0..self.names.len()).map(|j| stats::percentile(&self.column(j), p)).collect()
    }

    pub fn params(&self) -> Vec<TwinParams> {
        self.rows.iter().map(|r| TwinParams::from_slice(r)).collect()
    }

    pub fn to_csv(&self) -> String {
        write_rows_csv(&self.names, &self.rows)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Provenance without the draws.
    pub fn meta_json(&self) -> serde_json::Value {
        serde_json::json!({
            "observation_id": self.observation_id,
            "model_id": self.model_id,
            "seed": self.seed,
            "n": self.rows.len(),
            "leakage": self.leakage,
        })
    }
}

/// Header line of names, then one line per row; floats use shortest round-trip form.
pub fn write_rows_csv(names: &[String], rows: &[Vec<f64>]) -> String {
    let mut out = names.join(",");
    out.push('\n');
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Parses a header-plus-rows CSV of floats.
pub fn read_rows_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Format("empty CSV".into()))?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (i, l) in lines.enumerate() {
        let row: Vec<f64> = l
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("CSV line {}: {e}", i + 2)))?;
        if row.len() != names.len() {
            return Err(Error::Format(format!(
                "CSV line {} has {} fields, header has {}",
                i + 2,
                row.len(),
                names.len()
            )));
        }
        rows.push(row);
    }
    Ok((names, rows))
}

pub fn read_posterior_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_rows_csv(&text)
}

pub fn observation_id(y: &[f64]) -> String {
    f64s_sha256(y)[..16].to_string()
}

/// Checks an observation's length and range.
pub fn validate_observation(y: &[f64], expected_len: usize, margin: f64) -> Result<()> {
    if y.len() != expected_len {
        return Err(Error::validation(format!(
            "observation has {} readings, model expects {expected_len}",
            y.len()
        )));
    }
    let (lo, hi) = (CGM_RANGE.0 - margin, CGM_RANGE.1 + margin);
    if let Some((i, v)) = y.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= lo && **v <= hi)) {
        return Err(Error::validation(format!(
            "reading {i} = {v} outside [{lo}, {hi}] mg/dL"
        )));
    }
    Ok(())
}

/// Draws `n` posterior samples for observation `y`.
pub fn infer(model: &PosteriorModel, y: &[f64], n: usize, seed: u64, opts: &InferOptions) -> Result<PosteriorSamples> {
    let start = Instant::now();
    if let Some(h) = &opts.expected_scenario_hash {
        if *h != model.provenance.scenario_hash {
            return Err(Error::Refused(format!(
                "model was trained on scenario {}, caller expects {h}",
                model.provenance.scenario_hash
            )));
        }
    }
    if n == 0 {
        return Err(Error::validation("sample count must be at least 1"));
    }
    validate_observation(y, model.obs_len(), opts.obs_margin)?;
    let support = twin_support(&model.provenance.prior);
    let out = model
        .flow
        .sample(y, n, &mut stream(seed, ns::INFER, 0), Some(&support))?;
    let rows = out.values.outer_iter().map(|r| r.to_vec()).collect();
    Ok(PosteriorSamples {
        names: TwinParams::names().iter().map(|s| s.to_string()).collect(),
        rows,
        observation_id: observation_id(y),
        model_id: model.id(),
        seed,
        leakage: out.leakage(),
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}
