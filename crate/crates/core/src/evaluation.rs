//! Accuracy, coverage and replay metrics, and the experiment runners that
//! compare the amortized posterior with the MCMC and MAP baselines.

use std::time::Instant;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{map_estimate, rwmh_sample, MapConfig, McmcConfig};
use crate::datagen::{Candidate, PriorSimulator, CGM_RANGE};
use crate::error::{Error, Result};
use crate::npe::{infer, InferOptions, PosteriorModel};
use crate::physiology::{PopulationConstants, SensorModel};
use crate::rng::{ns, stream};
use crate::scenario::{MealPerturbation, Scenario, DAY_MIN};
use crate::simulator::{Simulator, TwinParams};
use crate::stats::{self, MeanSd};

/// Lower and upper percentiles of the credible interval.
pub const INTERVAL: (f64, f64) = (2.5, 97.5);
/// Lower and upper percentiles of the replay band.
pub const BAND: (f64, f64) = (5.0, 95.0);

/// Per-component accuracy of one posterior against the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMetrics {
    pub median: Vec<f64>,
    pub q_lo: Vec<f64>,
    pub q_hi: Vec<f64>,
    pub abs_err: Vec<f64>,
    /// Percent; `None` where the true value is 0.
    pub rel_err: Vec<Option<f64>>,
    pub mad: Vec<f64>,
    pub covered: Vec<bool>,
}

/// Metrics of posterior draws (`rows`, at least two) against `truth`.
pub fn param_metrics(rows: &[Vec<f64>], truth: &[f64]) -> Result<ParamMetrics> {
    if rows.len() < 2 {
        return Err(Error::validation("parameter metrics need at least two samples"));
    }
    let d = truth.len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::validation("sample rows and truth differ in length"));
    }
    let mut m = ParamMetrics {
        median: Vec::with_capacity(d),
        q_lo: Vec::with_capacity(d),
        q_hi: Vec::with_capacity(d),
        abs_err: Vec::with_capacity(d),
        rel_err: Vec::with_capacity(d),
        mad: Vec::with_capacity(d),
        covered: Vec::with_capacity(d),
    };
    for (j, &t) in truth.iter().enumerate() {
        let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        let s = stats::sorted(&col);
        let med = stats::percentile_sorted(&s, 50.0);
        let lo = stats::percentile_sorted(&s, INTERVAL.0);
        let hi = stats::percentile_sorted(&s, INTERVAL.1);
        let abs = (med - t).abs();
        m.median.push(med);
        m.q_lo.push(lo);
        m.q_hi.push(hi);
        m.abs_err.push(abs);
        m.rel_err.push((t != 0.0).then(|| 100.0 * abs / t.abs()));
        m.mad.push(stats::mean(&col.iter().map(|v| (v - t).abs()).collect::<Vec<_>>()));
        m.covered.push(lo <= t && t <= hi);
    }
    Ok(m)
}

/// Errors of a point estimate; no interval, so no coverage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub estimate: Vec<f64>,
    pub abs_err: Vec<f64>,
    pub rel_err: Vec<Option<f64>>,
}

pub fn point_metrics(estimate: &[f64], truth: &[f64]) -> Result<PointMetrics> {
    if estimate.len() != truth.len() {
        return Err(Error::validation("estimate and truth differ in length"));
    }
    let abs_err: Vec<f64> = estimate.iter().zip(truth).map(|(e, t)| (e - t).abs()).collect();
    let rel_err = abs_err
        .iter()
        .zip(truth)
        .map(|(a, t)| (*t != 0.0).then(|| 100.0 * a / t.abs()))
        .collect();
    Ok(PointMetrics {
        estimate: estimate.to_vec(),
        abs_err,
        rel_err,
    })
}

/// Mean absolute relative difference in percent.
pub fn mard(y_ref: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y_ref, y_hat)?;
    if y_ref.iter().any(|v| *v <= 0.0) {
        return Err(Error::validation("MARD needs a strictly positive reference"));
    }
    let s: f64 = y_ref.iter().zip(y_hat).map(|(r, h)| (h - r).abs() / r).sum();
    Ok(100.0 * s / y_ref.len() as f64)
}

/// Root mean square error.
pub fn rmse(y_ref: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y_ref, y_hat)?;
    let s: f64 = y_ref.iter().zip(y_hat).map(|(r, h)| (h - r) * (h - r)).sum();
    Ok((s / y_ref.len() as f64).sqrt())
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::validation(format!("signal lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::validation("signals are empty"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplaySetting {
    InSample,
    NextDay,
    AlteredMeals,
}

impl ReplaySetting {
    pub const ALL: [ReplaySetting; 3] = [ReplaySetting::InSample, ReplaySetting::NextDay, ReplaySetting::AlteredMeals];

    pub fn name(&self) -> &'static str {
        match self {
            ReplaySetting::InSample => "in_sample",
            ReplaySetting::NextDay => "next_day",
            ReplaySetting::AlteredMeals => "altered_meals",
        }
    }

    /// The scenario replayed under this setting.
    pub fn scenario(&self, base: &Scenario, perturbation: &MealPerturbation) -> Result<Scenario> {
        match self {
            ReplaySetting::InSample => Ok(base.clone()),
            ReplaySetting::NextDay => Ok(base.extend_next_day()),
            ReplaySetting::AlteredMeals => base.alter_meals(perturbation),
        }
    }

    /// Replayed readings before this time are not scored.
    pub fn scored_from_min(&self) -> f64 {
        match self {
            ReplaySetting::NextDay => DAY_MIN,
            _ => 0.0,
        }
    }
}

/// Pointwise median and band of simulated noiseless CGM traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBand {
    pub t_min: Vec<f64>,
    pub median: Vec<f64>,
    pub q05: Vec<f64>,
    pub q95: Vec<f64>,
    pub simulated: usize,
    pub dropped: usize,
}

impl ReplayBand {
    /// Median readings at or after `from_min`.
    pub fn scored_median(&self, from_min: f64) -> Vec<f64> {
        self.t_min
            .iter()
            .zip(&self.median)
            .filter(|(t, _)| **t >= from_min)
            .map(|(_, v)| *v)
            .collect()
    }
}

/// Simulates one noiseless trace per row on the scenario's 5-min grid
/// (endpoints included) and reduces pointwise. Rows whose integration
/// fails are dropped and counted.
pub fn replay_scenario(
    rows: &[TwinParams],
    scenario: &Scenario,
    c: &PopulationConstants,
    sensor: &SensorModel,
) -> Result<ReplayBand> {
    if rows.is_empty() {
        return Err(Error::validation("replay needs at least one parameter row"));
    }
    let sim = Simulator::new(*c, scenario.clone(), sensor.noiseless())?;
    let traces: Vec<Option<Vec<f64>>> = rows
        .par_iter()
        .map(|p| sim.noiseless_cgm(p, true).ok())
        .collect();
    let ok: Vec<&Vec<f64>> = traces.iter().flatten().collect();
    let dropped = rows.len() - ok.len();
    if ok.is_empty() {
        return Err(Error::Numeric("every replay simulation failed".into()));
    }
    let t_min = sim.grid_times();
    let mut band = ReplayBand {
        median: Vec::with_capacity(t_min.len()),
        q05: Vec::with_capacity(t_min.len()),
        q95: Vec::with_capacity(t_min.len()),
        t_min,
        simulated: ok.len(),
        dropped,
    };
    let mut col = Vec::with_capacity(ok.len());
    for k in 0..band.t_min.len() {
        col.clear();
        col.extend(ok.iter().map(|t| t[k]));
        col.sort_by(f64::total_cmp);
        band.median.push(stats::percentile_sorted(&col, 50.0));
        band.q05.push(stats::percentile_sorted(&col, BAND.0));
        band.q95.push(stats::percentile_sorted(&col, BAND.1));
    }
    Ok(band)
}

/// Replay under a setting with the default meal alteration.
pub fn replay(
    rows: &[TwinParams],
    base: &Scenario,
    setting: ReplaySetting,
    c: &PopulationConstants,
    sensor: &SensorModel,
) -> Result<ReplayBand> {
    replay_scenario(rows, &setting.scenario(base, &MealPerturbation::default())?, c, sensor)
}

/// One held-out simulated observation and the parameters that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub index: usize,
    pub truth: TwinParams,
    pub y: Vec<f64>,
}

/// The first `n` in-range prior simulations in the evaluation namespace.
pub fn test_cases(ps: &PriorSimulator, n: usize, seed: u64) -> Vec<TestCase> {
    let mut out = Vec::with_capacity(n);
    let mut next = 0u64;
    while out.len() < n {
        let batch: Vec<Candidate> = (next..next + 64)
            .into_par_iter()
            .map(|i| ps.candidate(seed, ns::EVAL_CASES, i, CGM_RANGE))
            .collect();
        next += 64;
        for c in batch {
            if let Candidate::Accepted(truth, y) = c {
                if out.len() < n {
                    out.push(TestCase {
                        index: out.len(),
                        truth,
                        y,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sbi,
    Mcmc,
    Map,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Sbi => "sbi",
            Method::Mcmc => "mcmc",
            Method::Map => "map",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_cases: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    /// Posterior draws per case for the flow.
    pub samples: usize,
    /// Baseline chain draws kept for replay.
    pub replay_draws: usize,
    pub mcmc: McmcConfig,
    pub map: MapConfig,
    pub perturbation: MealPerturbation,
    pub infer: InferOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_cases: 50,
            seed: 0,
            methods: vec![Method::Sbi, Method::Mcmc, Method::Map],
            samples: 1000,
            replay_draws: 1000,
            mcmc: McmcConfig::default(),
            map: MapConfig::default(),
            perturbation: MealPerturbation::default(),
            infer: InferOptions::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cases == 0 || self.samples < 2 || self.replay_draws == 0 {
            return Err(Error::validation("need at least one case, two samples and one replay draw"));
        }
        if self.methods.is_empty() {
            return Err(Error::validation("no methods selected"));
        }
        self.mcmc.validate()?;
        self.map.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingErrors {
    pub setting: ReplaySetting,
    pub mard: f64,
    pub rmse: f64,
    pub dropped: usize,
}

/// Outcome of one method on one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodCase {
    pub method: Method,
    pub case: usize,
    pub error: Option<String>,
    pub params: Option<ParamMetrics>,
    pub point: Option<PointMetrics>,
    pub replay: Vec<SettingErrors>,
    #[serde(skip)]
    pub seconds: f64,
}

fn derived_seed(seed: u64, namespace: u16, index: usize) -> u64 {
    stream(seed, namespace, index as u64).next_u64()
}

/// What a method produced for one case before scoring.
enum Estimate {
    Draws(Vec<TwinParams>, Vec<Vec<f64>>),
    Point(TwinParams),
}

struct Context<'a> {
    model: &'a PosteriorModel,
    cfg: &'a EvalConfig,
    simulator: Simulator,
    truth_sims: Vec<(ReplaySetting, Scenario)>,
}

impl Context<'_> {
    fn estimate(&self, method: Method, case: &TestCase) -> Result<(Estimate, f64)> {
        let prov = &self.model.provenance;
        match method {
            Method::Sbi => {
                let s = infer(
                    self.model,
                    &case.y,
                    self.cfg.samples,
                    derived_seed(self.cfg.seed, ns::EVAL_SBI, case.index),
                    &self.cfg.infer,
                )?;
                let params = s.params();
                Ok((Estimate::Draws(params, s.rows), s.elapsed_s))
            }
            Method::Mcmc => {
                let cfg = McmcConfig {
                    seed: derived_seed(self.cfg.seed, ns::MCMC, case.index),
                    ..self.cfg.mcmc.clone()
                };
                let start = Instant::now();
                let r = rwmh_sample(&case.y, &prov.prior, &self.simulator, &cfg)?;
                let secs = start.elapsed().as_secs_f64();
                let rows: Vec<Vec<f64>> = r.thetas.iter().map(|t| t.to_array().to_vec()).collect();
                let params = r
                    .thinned(self.cfg.replay_draws)
                    .into_iter()
                    .map(|t| TwinParams::at_steady_state(t, &prov.constants))
                    .collect();
                Ok((Estimate::Draws(params, rows), secs))
            }
            Method::Map => {
                let cfg = MapConfig {
                    seed: derived_seed(self.cfg.seed, ns::MAP, case.index),
                    ..self.cfg.map.clone()
                };
                let start = Instant::now();
                let r = map_estimate(&case.y, &prov.prior, &self.simulator, &cfg)?;
                let secs = start.elapsed().as_secs_f64();
                Ok((Estimate::Point(TwinParams::at_steady_state(r.theta, &prov.constants)), secs))
            }
        }
    }

    fn score(&self, method: Method, case: &TestCase, with_replay: bool) -> MethodCase {
        let mut out = MethodCase {
            method,
            case: case.index,
            error: None,
            params: None,
            point: None,
            replay: Vec::new(),
            seconds: 0.0,
        };
        let result = self.estimate(method, case).and_then(|(est, secs)| {
            out.seconds = secs;
            let truth = case.truth.to_array();
            let replay_rows = match &est {
                Estimate::Draws(params, rows) => {
                    let d = rows[0].len();
                    out.params = Some(param_metrics(rows, &truth[..d])?);
                    params.clone()
                }
                Estimate::Point(p) => {
                    out.point = Some(point_metrics(&p.theta.to_array(), &case.truth.theta.to_array())?);
                    vec![*p]
                }
            };
            if with_replay {
                let prov = &self.model.provenance;
                for (setting, scn) in &self.truth_sims {
                    let band = replay_scenario(&replay_rows, scn, &prov.constants, &prov.sensor)?;
                    let truth_trace = replay_scenario(&[case.truth], scn, &prov.constants, &prov.sensor)?;
                    let from = setting.scored_from_min();
                    let reference = truth_trace.scored_median(from);
                    let predicted = band.scored_median(from);
                    out.replay.push(SettingErrors {
                        setting: *setting,
                        mard: mard(&reference, &predicted)?,
                        rmse: rmse(&reference, &predicted)?,
                        dropped: band.dropped,
                    });
                }
            }
            Ok(())
        });
        if let Err(e) = result {
            out.error = Some(e.to_string());
            out.params = None;
            out.point = None;
            out.replay.clear();
        }
        out
    }
}

/// Every method on every case. Cases run in parallel unless `sequential`.
pub fn run_cases(
    model: &PosteriorModel,
    cfg: &EvalConfig,
    with_replay: bool,
    sequential: bool,
) -> Result<(Vec<TestCase>, Vec<MethodCase>)> {
    cfg.validate()?;
    let prov = &model.provenance;
    let ps = PriorSimulator::new(prov.prior.clone(), prov.constants, prov.scenario.clone(), prov.sensor)?;
    let cases = test_cases(&ps, cfg.n_cases, cfg.seed);
    let truth_sims = ReplaySetting::ALL
        .iter()
        .map(|s| Ok((*s, s.scenario(&prov.scenario, &cfg.perturbation)?)))
        .collect::<Result<Vec<_>>>()?;
    let ctx = Context {
        model,
        cfg,
        simulator: Simulator::new(prov.constants, prov.scenario.clone(), prov.sensor.noiseless())?,
        truth_sims,
    };
    let jobs: Vec<(Method, &TestCase)> = cases
        .iter()
        .flat_map(|c| cfg.methods.iter().map(move |m| (*m, c)))
        .collect();
    let results: Vec<MethodCase> = if sequential {
        jobs.iter().map(|(m, c)| ctx.score(*m, c, with_replay)).collect()
    } else {
        jobs.par_iter().map(|(m, c)| ctx.score(*m, c, with_replay)).collect()
    };
    Ok((cases, results))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub name: String,
    pub abs_err: MeanSd,
    pub rel_err_pct: MeanSd,
    /// Cases where the relative error was defined.
    pub rel_err_n: usize,
    pub mad: Option<MeanSd>,
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodParamSummary {
    pub method: Method,
    pub n_complete: usize,
    pub n_incomplete: usize,
    pub components: Vec<ComponentSummary>,
    /// Mean of the per-component coverage fractions.
    pub average_coverage: Option<f64>,
    /// Fraction of all (case, component) pairs covered.
    pub pooled_coverage: Option<f64>,
    pub cases: Vec<MethodCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub n_cases: usize,
    pub seed: u64,
    pub truths: Vec<Vec<f64>>,
    pub methods: Vec<MethodParamSummary>,
}

fn summarize_params(method: Method, rows: Vec<MethodCase>) -> MethodParamSummary {
    let names = TwinParams::names();
    let complete: Vec<&MethodCase> = rows.iter().filter(|r| r.error.is_none()).collect();
    let d = match method {
        Method::Sbi => 17,
        _ => 8,
    };
    let mut components = Vec::with_capacity(d);
    let mut coverages = Vec::new();
    let mut pooled = (0usize, 0usize);
    for (j, name) in names.iter().take(d).enumerate() {
        let (abs, rel, mad, cov): (Vec<f64>, Vec<f64>, Vec<f64>, Vec<bool>) = complete.iter().fold(
            (vec![], vec![], vec![], vec![]),
            |mut acc, r| {
                if let Some(p) = &r.params {
                    acc.0.push(p.abs_err[j]);
                    if let Some(v) = p.rel_err[j] {
                        acc.1.push(v);
                    }
                    acc.2.push(p.mad[j]);
                    acc.3.push(p.covered[j]);
                } else if let Some(p) = &r.point {
                    acc.0.push(p.abs_err[j]);
                    if let Some(v) = p.rel_err[j] {
                        acc.1.push(v);
                    }
                }
                acc
            },
        );
        let coverage = (!cov.is_empty()).then(|| cov.iter().filter(|c| **c).count() as f64 / cov.len() as f64);
        if let Some(c) = coverage {
            coverages.push(c);
            pooled.0 += cov.iter().filter(|c| **c).count();
            pooled.1 += cov.len();
        }
        components.push(ComponentSummary {
            name: name.to_string(),
            abs_err: MeanSd::of(&abs),
            rel_err_pct: MeanSd::of(&rel),
            rel_err_n: rel.len(),
            mad: (!mad.is_empty()).then(|| MeanSd::of(&mad)),
            coverage,
        });
    }
    MethodParamSummary {
        method,
        n_complete: complete.len(),
        n_incomplete: rows.len() - complete.len(),
        components,
        average_coverage: (!coverages.is_empty()).then(|| stats::mean(&coverages)),
        pooled_coverage: (pooled.1 > 0).then(|| pooled.0 as f64 / pooled.1 as f64),
        cases: rows,
    }
}

fn by_method(methods: &[Method], results: &[MethodCase]) -> Vec<(Method, Vec<MethodCase>)> {
    methods
        .iter()
        .map(|m| (*m, results.iter().filter(|r| r.method == *m).cloned().collect()))
        .collect()
}

pub fn param_report(cfg: &EvalConfig, cases: &[TestCase], results: &[MethodCase]) -> ParamReport {
    ParamReport {
        n_cases: cases.len(),
        seed: cfg.seed,
        truths: cases.iter().map(|c| c.truth.to_array().to_vec()).collect(),
        methods: by_method(&cfg.methods, results)
            .into_iter()
            .map(|(m, rows)| {
                let rows = rows
                    .into_iter()
                    .map(|mut r| {
                        r.replay.clear();
                        r
                    })
                    .collect();
                summarize_params(m, rows)
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRow {
    pub method: Method,
    pub setting: ReplaySetting,
    pub n: usize,
    pub mard: MeanSd,
    pub rmse: MeanSd,
    pub per_case_mard: Vec<f64>,
    pub per_case_rmse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub n_cases: usize,
    pub seed: u64,
    pub rows: Vec<ReplayRow>,
    pub incomplete: Vec<(Method, usize, String)>,
}

impl ReplayReport {
    pub fn row(&self, method: Method, setting: ReplaySetting) -> Option<&ReplayRow> {
        self.rows.iter().find(|r| r.method == method && r.setting == setting)
    }
}

pub fn replay_report(cfg: &EvalConfig, cases: &[TestCase], results: &[MethodCase]) -> ReplayReport {
    let mut rows = Vec::new();
    for (m, rs) in by_method(&cfg.methods, results) {
        for setting in ReplaySetting::ALL {
            let errs: Vec<&SettingErrors> = rs
                .iter()
                .filter_map(|r| r.replay.iter().find(|e| e.setting == setting))
                .collect();
            let mards: Vec<f64> = errs.iter().map(|e| e.mard).collect();
            let rmses: Vec<f64> = errs.iter().map(|e| e.rmse).collect();
            rows.push(ReplayRow {
                method: m,
                setting,
                n: errs.len(),
                mard: MeanSd::of(&mards),
                rmse: MeanSd::of(&rmses),
                per_case_mard: mards,
                per_case_rmse: rmses,
            });
        }
    }
    ReplayReport {
        n_cases: cases.len(),
        seed: cfg.seed,
        rows,
        incomplete: results
            .iter()
            .filter_map(|r| r.error.as_ref().map(|e| (r.method, r.case, e.clone())))
            .collect(),
    }
}

pub fn run_param_eval(model: &PosteriorModel, cfg: &EvalConfig) -> Result<ParamReport> {
    let (cases, results) = run_cases(model, cfg, false, false)?;
    Ok(param_report(cfg, &cases, &results))
}

pub fn run_replay_eval(model: &PosteriorModel, cfg: &EvalConfig) -> Result<ReplayReport> {
    let (cases, results) = run_cases(model, cfg, true, false)?;
    Ok(replay_report(cfg, &cases, &results))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: Method,
    pub n: usize,
    pub inference_s: MeanSd,
    /// One-time cost before any inference; 0 for the baselines.
    pub training_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub n_cases: usize,
    pub rows: Vec<TimingRow>,
}

impl TimingReport {
    pub fn row(&self, method: Method) -> Option<&TimingRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Wall-clock inference time per method, cases run one at a time.
pub fn run_timing(model: &PosteriorModel, cfg: &EvalConfig, training_s: Option<f64>) -> Result<TimingReport> {
    let (cases, results) = run_cases(model, cfg, false, true)?;
    Ok(TimingReport {
        n_cases: cases.len(),
        rows: by_method(&cfg.methods, &results)
            .into_iter()
            .map(|(m, rs)| {
                let secs: Vec<f64> = rs.iter().filter(|r| r.error.is_none()).map(|r| r.seconds).collect();
                TimingRow {
                    method: m,
                    n: secs.len(),
                    inference_s: MeanSd::of(&secs),
                    training_s: match m {
                        Method::Sbi => training_s,
                        _ => Some(0.0),
                    },
                }
            })
            .collect(),
    })
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else {
        String::new()
    }
}

impl ParamReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,parameter,abs_err_mean,abs_err_sd,rel_err_pct_mean,rel_err_pct_sd,mad_mean,mad_sd,coverage\n");
        for m in &self.methods {
            for c in &m.components {
                let mad = c.mad.unwrap_or(MeanSd { mean: f64::NAN, sd: f64::NAN });
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    m.method.name(),
                    c.name,
                    fmt(c.abs_err.mean),
                    fmt(c.abs_err.sd),
                    fmt(c.rel_err_pct.mean),
                    fmt(c.rel_err_pct.sd),
                    fmt(mad.mean),
                    fmt(mad.sd),
                    c.coverage.map(fmt).unwrap_or_default()
                ));
            }
        }
        out
    }

    pub fn method(&self, m: Method) -> Option<&MethodParamSummary> {
        self.methods.iter().find(|s| s.method == m)
    }
}

impl ReplayReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,setting,n,mard_mean,mard_sd,rmse_mean,rmse_sd\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.method.name(),
                r.setting.name(),
                r.n,
                fmt(r.mard.mean),
                fmt(r.mard.sd),
                fmt(r.rmse.mean),
                fmt(r.rmse.sd)
            ));
        }
        out
    }
}

impl TimingReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,n,inference_s_mean,inference_s_sd,training_s\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.method.name(),
                r.n,
                fmt(r.inference_s.mean),
                fmt(r.inference_s.sd),
                r.training_s.map(fmt).unwrap_or_default()
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|x| vec![*x]).collect()
    }

    #[test]
    fn exact_samples_give_zero_error_and_coverage() {
        let m = param_metrics(&vec![vec![3.0, 4.0]; 10], &[3.0, 4.0]).unwrap();
        assert_eq!(m.abs_err, vec![0.0, 0.0]);
        assert_eq!(m.rel_err, vec![Some(0.0), Some(0.0)]);
        assert_eq!(m.mad, vec![0.0, 0.0]);
        assert_eq!(m.covered, vec![true, true]);
    }

    #[test]
    fn interval_uses_interpolated_percentiles() {
        let rows = col(&(1..=100).map(f64::from).collect::<Vec<_>>());
        let m = param_metrics(&rows, &[50.0]).unwrap();
        assert!(m.covered[0]);
        assert!((m.q_lo[0] - 3.475).abs() < 1e-12);
        assert!((m.q_hi[0] - 97.525).abs() < 1e-12);
        assert!(!param_metrics(&rows, &[1.0]).unwrap().covered[0]);
    }

    #[test]
    fn two_sample_hand_values() {
        let m = param_metrics(&col(&[40.0, 60.0]), &[50.0]).unwrap();
        assert_eq!(m.median[0], 50.0);
        assert_eq!(m.abs_err[0], 0.0);
        assert_eq!(m.mad[0], 10.0);
    }

    #[test]
    fn zero_truth_has_undefined_relative_error() {
        let m = param_metrics(&col(&[0.0, 1.0]), &[0.0]).unwrap();
        assert_eq!(m.rel_err[0], None);
        assert!(param_metrics(&col(&[1.0]), &[1.0]).is_err());
    }

    #[test]
    fn mard_rmse_hand_values() {
        let y = [100.0, 200.0, 150.0];
        let h = [110.0, 190.0, 150.0];
        assert!((mard(&y, &h).unwrap() - 5.0).abs() < 1e-12);
        assert!((rmse(&y, &h).unwrap() - (200.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mard(&y, &y).unwrap(), 0.0);
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        let y2: Vec<f64> = y.iter().map(|v| v * 2.0).collect();
        let h2: Vec<f64> = h.iter().map(|v| v * 2.0).collect();
        assert!((mard(&y2, &h2).unwrap() - 5.0).abs() < 1e-12);
        assert!((rmse(&y2, &h2).unwrap() - 2.0 * (200.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(mard(&y, &h[..2]).unwrap_err().is_validation());
        assert!(rmse(&y, &h[..2]).unwrap_err().is_validation());
    }

    #[test]
    fn rmse_ignores_pair_order() {
        let y = [100.0, 200.0, 150.0, 80.0];
        let h = [110.0, 190.0, 150.0, 95.0];
        let (yp, hp) = ([80.0, 150.0, 100.0, 200.0], [95.0, 150.0, 110.0, 190.0]);
        assert_eq!(rmse(&y, &h).unwrap(), rmse(&yp, &hp).unwrap());
    }

    fn base() -> (PopulationConstants, Scenario, TwinParams) {
        let c = PopulationConstants::default();
        let s = Scenario::canonical(c.basal_rate);
        let p = TwinParams::at_steady_state(crate::priors::PriorSpec::default().location(), &c);
        (c, s, p)
    }

    #[test]
    fn identical_rows_give_zero_width_band() {
        let (c, s, p) = base();
        let band = replay(&[p; 5], &s, ReplaySetting::InSample, &c, &SensorModel::default()).unwrap();
        let single = replay(&[p], &s, ReplaySetting::InSample, &c, &SensorModel::default()).unwrap();
        assert_eq!(band.median, single.median);
        assert_eq!(band.q05, band.q95);
        assert_eq!(band.t_min.len(), 265);
    }

    #[test]
    fn next_day_grid_and_scoring_window() {
        let (c, s, p) = base();
        let band = replay(&[p], &s, ReplaySetting::NextDay, &c, &SensorModel::default()).unwrap();
        assert_eq!(band.t_min.len(), 553);
        assert_eq!(band.scored_median(ReplaySetting::NextDay.scored_from_min()).len(), 553 - 288);
    }

    #[test]
    fn self_replay_has_zero_mard() {
        let (c, s, p) = base();
        let sim = Simulator::new(c, s.clone(), SensorModel::ideal()).unwrap();
        let truth = sim.noiseless_cgm(&p, true).unwrap();
        let band = replay(&[p], &s, ReplaySetting::InSample, &c, &SensorModel::ideal()).unwrap();
        assert_eq!(mard(&truth, &band.median).unwrap(), 0.0);
    }

    #[test]
    fn median_lies_inside_band() {
        let (c, s, _) = base();
        let prior = crate::priors::PriorSpec::default();
        let mut rng = stream(1, 0, 0);
        let rows: Vec<TwinParams> = (0..50)
            .map(|_| TwinParams::at_steady_state(prior.sample_theta(&mut rng), &c))
            .collect();
        let band = replay(&rows, &s, ReplaySetting::AlteredMeals, &c, &SensorModel::default()).unwrap();
        for k in 0..band.t_min.len() {
            assert!(band.q05[k] <= band.median[k] && band.median[k] <= band.q95[k]);
        }
    }

    #[test]
    fn exact_posterior_coverage_on_conjugate_toy() {
        // theta ~ N(0,1), y ~ N(theta, 0.5^2): posterior N(0.8 y, 0.2).
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut rng = stream(4, 0, 0);
        let mut hits = 0;
        for _ in 0..200 {
            let theta: f64 = rng.sample(StandardNormal);
            let y = theta + 0.5 * rng.sample::<f64, _>(StandardNormal);
            let (m, s) = (0.8 * y, 0.2f64.sqrt());
            let rows: Vec<Vec<f64>> = (0..1000).map(|_| vec![m + s * rng.sample::<f64, _>(StandardNormal)]).collect();
            if param_metrics(&rows, &[theta]).unwrap().covered[0] {
                hits += 1;
            }
        }
        // Binomial(200, 0.95) central 95% range.
        assert!((184..=196).contains(&hits), "{hits}");
    }
}
