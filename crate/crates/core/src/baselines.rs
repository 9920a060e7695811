//! Reference estimators that fix the initial state at steady state and infer
//! only the eight physiological parameters: componentwise random-walk
//! Metropolis and multi-start Nelder-Mead MAP.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physiology::{PhysioParams, PopulationConstants};
use crate::priors::PriorSpec;
use crate::rng::{ns, stream};
use crate::simulator::{Simulator, TwinParams};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LikelihoodConfig {
    /// Residual sd (mg/dL).
    pub sigma: f64,
}

impl Default for LikelihoodConfig {
    fn default() -> Self {
        LikelihoodConfig { sigma: 2.5 }
    }
}

impl LikelihoodConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::validation("likelihood sigma must be positive"));
        }
        Ok(())
    }
}

/// `sum log N(y_i; yhat_i, sigma^2)`.
pub fn gaussian_log_likelihood(y: &[f64], y_hat: &[f64], sigma: f64) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::validation(format!(
            "observation has {} readings, simulation {}",
            y.len(),
            y_hat.len()
        )));
    }
    let sse: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-sse / (2.0 * sigma * sigma) - y.len() as f64 * (sigma.ln() + LN_SQRT_2PI))
}

/// Likelihood plus prior for a fixed observation, with x0 at steady state.
#[derive(Debug, Clone)]
pub struct Posterior<'a> {
    pub y: &'a [f64],
    pub prior: &'a PriorSpec,
    pub simulator: &'a Simulator,
    pub likelihood: LikelihoodConfig,
}

impl Posterior<'_> {
    /// `None` outside the prior support or when the simulation fails.
    pub fn log_posterior(&self, theta: &PhysioParams) -> Option<f64> {
        let lp = self.prior.log_density(theta)?;
        let p = TwinParams::at_steady_state(*theta, &self.simulator.constants);
        let y_hat = self.simulator.noiseless_cgm(&p, false).ok()?;
        let ll = gaussian_log_likelihood(self.y, &y_hat, self.likelihood.sigma).ok()?;
        let v = ll + lp;
        v.is_finite().then_some(v)
    }

    /// Log density of the working coordinates (log for rates), Jacobian included.
    pub fn log_target_working(&self, u: &[f64]) -> Option<f64> {
        let theta = self.prior.from_working(u);
        let jac: f64 = self
            .prior
            .marginals()
            .iter()
            .zip(u)
            .map(|(m, &w)| m.log_jacobian(w))
            .sum();
        Some(self.log_posterior(&theta)? + jac)
    }
}

/// Convenience wrapper over [`Posterior::log_posterior`].
pub fn log_posterior(
    theta: &PhysioParams,
    y: &[f64],
    prior: &PriorSpec,
    simulator: &Simulator,
    lik: &LikelihoodConfig,
) -> Option<f64> {
    Posterior {
        y,
        prior,
        simulator,
        likelihood: *lik,
    }
    .log_posterior(theta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub burn_in: usize,
    pub main_steps: usize,
    /// Initial proposal sd as a fraction of each prior working sd.
    pub proposal_fraction: f64,
    /// Tune proposal scales during burn-in.
    pub adapt: bool,
    pub likelihood: LikelihoodConfig,
    pub seed: u64,
    /// Abort the chain after this many seconds.
    #[serde(default)]
    pub time_limit_s: Option<f64>,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            burn_in: 10_000,
            main_steps: 5_000,
            proposal_fraction: 0.05,
            adapt: true,
            likelihood: LikelihoodConfig::default(),
            seed: 0,
            time_limit_s: None,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.main_steps == 0 {
            return Err(Error::validation("MCMC needs at least one main step"));
        }
        if !(self.proposal_fraction >= 0.0 && self.proposal_fraction.is_finite()) {
            return Err(Error::validation("proposal fraction must be non-negative"));
        }
        self.likelihood.validate()
    }
}

/// Post-burn-in acceptance outside this band is reported.
pub const ACCEPTANCE_BAND: (f64, f64) = (0.05, 0.7);

/// Adaptation window (sweeps) and per-component target acceptance.
const ADAPT_WINDOW: usize = 50;
const ADAPT_TARGET: f64 = 0.44;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOutput {
    /// One row per main-phase sweep.
    pub samples: Vec<Vec<f64>>,
    pub acceptance_rate: f64,
    pub burn_in_acceptance_rate: f64,
    pub final_scales: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainOptions {
    pub burn_in: usize,
    pub main_steps: usize,
    pub adapt: bool,
    pub time_limit: Option<Duration>,
}

impl ChainOptions {
    pub fn new(burn_in: usize, main_steps: usize, adapt: bool) -> Self {
        ChainOptions {
            burn_in,
            main_steps,
            adapt,
            time_limit: None,
        }
    }
}

/// Componentwise Gaussian random-walk Metropolis. One step updates every
/// coordinate once, in order. Scales adapt only during burn-in.
pub fn componentwise_metropolis<R, F>(
    mut log_target: F,
    start: &[f64],
    scales: &[f64],
    opts: ChainOptions,
    rng: &mut R,
) -> Result<ChainOutput>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64]) -> Option<f64>,
{
    let ChainOptions {
        burn_in,
        main_steps,
        adapt,
        time_limit,
    } = opts;
    let started = Instant::now();
    let d = start.len();
    if scales.len() != d {
        return Err(Error::validation("one proposal scale per coordinate required"));
    }
    let mut x = start.to_vec();
    let mut lp = log_target(&x).ok_or_else(|| Error::validation("MCMC start point has zero density"))?;
    let mut scales = scales.to_vec();
    let mut window_acc = vec![0usize; d];
    let (mut acc_burn, mut acc_main) = (0usize, 0usize);
    let mut samples = Vec::with_capacity(main_steps);
    for step in 0..burn_in + main_steps {
        if let Some(limit) = time_limit {
            if step % 100 == 0 && started.elapsed() > limit {
                return Err(Error::Timeout(format!(
                    "MCMC exceeded {:.1} s after {step} steps",
                    limit.as_secs_f64()
                )));
            }
        }
        for j in 0..d {
            let old = x[j];
            x[j] = old + scales[j] * rng.sample::<f64, _>(StandardNormal);
            let accepted = match log_target(&x) {
                Some(lq) => {
                    let log_u: f64 = rng.random::<f64>().ln();
                    if log_u < lq - lp {
                        lp = lq;
                        true
                    } else {
                        false
                    }
                }
                None => false,
            };
            if !accepted {
                x[j] = old;
            }
            if step < burn_in {
                acc_burn += usize::from(accepted);
                window_acc[j] += usize::from(accepted);
            } else {
                acc_main += usize::from(accepted);
            }
        }
        if step < burn_in {
            if adapt && (step + 1) % ADAPT_WINDOW == 0 {
                for j in 0..d {
                    let rate = window_acc[j] as f64 / ADAPT_WINDOW as f64;
                    scales[j] *= if rate > ADAPT_TARGET { 1.25 } else { 0.8 };
                    window_acc[j] = 0;
                }
            }
        } else {
            samples.push(x.clone());
        }
    }
    let acceptance_rate = acc_main as f64 / (main_steps * d).max(1) as f64;
    let mut warnings = Vec::new();
    if !(ACCEPTANCE_BAND.0..=ACCEPTANCE_BAND.1).contains(&acceptance_rate) {
        warnings.push(format!(
            "acceptance rate {acceptance_rate:.3} outside [{}, {}]",
            ACCEPTANCE_BAND.0, ACCEPTANCE_BAND.1
        ));
    }
    Ok(ChainOutput {
        samples,
        acceptance_rate,
        burn_in_acceptance_rate: acc_burn as f64 / (burn_in * d).max(1) as f64,
        final_scales: scales,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcResult {
    /// Main-phase parameter draws.
    pub thetas: Vec<PhysioParams>,
    pub acceptance_rate: f64,
    pub warnings: Vec<String>,
}

impl McmcResult {
    /// Every `k`-th draw so that at most `n` remain.
    pub fn thinned(&self, n: usize) -> Vec<PhysioParams> {
        if n == 0 || self.thetas.len() <= n {
            return self.thetas.clone();
        }
        let k = self.thetas.len().div_ceil(n);
        self.thetas.iter().step_by(k).copied().collect()
    }
}

/// Posterior sampling over the 8 parameters, started at the prior location.
pub fn rwmh_sample(y: &[f64], prior: &PriorSpec, simulator: &Simulator, cfg: &McmcConfig) -> Result<McmcResult> {
    cfg.validate()?;
    if y.len() != simulator.obs_len() {
        return Err(Error::validation(format!(
            "observation has {} readings, scenario produces {}",
            y.len(),
            simulator.obs_len()
        )));
    }
    let post = Posterior {
        y,
        prior,
        simulator,
        likelihood: cfg.likelihood,
    };
    let start = prior.to_working(&prior.location());
    let scales: Vec<f64> = prior
        .marginals()
        .iter()
        .map(|m| cfg.proposal_fraction * m.working_sd())
        .collect();
    let chain = componentwise_metropolis(
        |u| post.log_target_working(u),
        &start,
        &scales,
        ChainOptions {
            burn_in: cfg.burn_in,
            main_steps: cfg.main_steps,
            adapt: cfg.adapt,
            time_limit: cfg.time_limit_s.map(Duration::from_secs_f64),
        },
        &mut stream(cfg.seed, ns::MCMC, 0),
    )?;
    Ok(McmcResult {
        thetas: chain.samples.iter().map(|u| prior.from_working(u)).collect(),
        acceptance_rate: chain.acceptance_rate,
        warnings: chain.warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    pub restarts: usize,
    /// Objective evaluations per restart.
    pub max_evals: usize,
    /// Stop when the simplex's objective spread falls below this.
    pub tolerance: f64,
    /// Initial simplex edge as a fraction of each prior working sd.
    pub initial_step: f64,
    /// Tried before the random starts.
    pub start: Option<PhysioParams>,
    pub likelihood: LikelihoodConfig,
    pub seed: u64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            restarts: 10,
            max_evals: 3000,
            tolerance: 1e-8,
            initial_step: 0.5,
            start: None,
            likelihood: LikelihoodConfig::default(),
            seed: 0,
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.max_evals == 0 {
            return Err(Error::validation("MAP needs at least one restart and evaluation"));
        }
        self.likelihood.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub theta: PhysioParams,
    pub log_posterior: f64,
    /// Log posterior at each start point, in order.
    pub start_values: Vec<f64>,
    pub evaluations: usize,
    pub warnings: Vec<String>,
}

/// Nelder-Mead minimization; non-finite values count as `+inf`.
/// Returns `(argmin, min, evaluations)`.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    step: &[f64],
    max_evals: usize,
    tol: f64,
) -> (Vec<f64>, f64, usize) {
    let d = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    let f0 = eval(x0, &mut evals);
    simplex.push((x0.to_vec(), f0));
    for i in 0..d {
        let mut x = x0.to_vec();
        x[i] += step[i];
        let v = eval(&x, &mut evals);
        simplex.push((x, v));
    }
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[d].1);
        if best.is_finite() && (worst - best).abs() <= tol * (1.0 + best.abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..d)
            .map(|j| simplex[..d].iter().map(|p| p.0[j]).sum::<f64>() / d as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            (0..d)
                .map(|j| centroid[j] + t * (simplex[d].0[j] - centroid[j]))
                .collect()
        };
        let xr = along(-alpha);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(-alpha * gamma);
            let fe = eval(&xe, &mut evals);
            simplex[d] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[d - 1].1 {
            simplex[d] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[d].1 {
                let xc = along(-rho);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            } else {
                let xc = along(rho);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            };
            if fc < simplex[d].1.min(fr) {
                simplex[d] = (xc, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for p in simplex.iter_mut().skip(1) {
                    for j in 0..d {
                        p.0[j] = x_best[j] + sigma * (p.0[j] - x_best[j]);
                    }
                    p.1 = eval(&p.0, &mut evals);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, v) = simplex.swap_remove(0);
    (x, v, evals)
}

/// Multi-start Nelder-Mead on the negative log posterior in working
/// coordinates. Restarts run in parallel with independent streams.
pub fn map_estimate(y: &[f64], prior: &PriorSpec, simulator: &Simulator, cfg: &MapConfig) -> Result<MapResult> {
    cfg.validate()?;
    if y.len() != simulator.obs_len() {
        return Err(Error::validation(format!(
            "observation has {} readings, scenario produces {}",
            y.len(),
            simulator.obs_len()
        )));
    }
    let post = Posterior {
        y,
        prior,
        simulator,
        likelihood: cfg.likelihood,
    };
    let mut starts: Vec<PhysioParams> = Vec::with_capacity(cfg.restarts);
    if let Some(s) = cfg.start {
        if !prior.contains(&s) {
            return Err(Error::validation("MAP start point lies outside the prior support"));
        }
        starts.push(s);
    }
    let mut r = 0u64;
    while starts.len() < cfg.restarts {
        starts.push(prior.sample_theta(&mut stream(cfg.seed, ns::MAP, r)));
        r += 1;
    }
    let step: Vec<f64> = prior
        .marginals()
        .iter()
        .map(|m| cfg.initial_step * m.working_sd())
        .collect();
    let runs: Vec<(Vec<f64>, f64, f64, usize)> = starts
        .par_iter()
        .map(|s| {
            let u0 = prior.to_working(s);
            let f0 = post.log_posterior(s).unwrap_or(f64::NEG_INFINITY);
            let (u, v, n) = nelder_mead(
                |u| post.log_posterior(&prior.from_working(u)).map_or(f64::INFINITY, |v| -v),
                &u0,
                &step,
                cfg.max_evals,
                cfg.tolerance,
            );
            (u, -v, f0, n)
        })
        .collect();
    let start_values: Vec<f64> = runs.iter().map(|r| r.2).collect();
    let evaluations = runs.iter().map(|r| r.3).sum();
    let best = runs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .expect("at least one restart");
    let mut warnings = Vec::new();
    let best_start = start_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (theta, value) = if runs[best].1 > best_start {
        (prior.from_working(&runs[best].0), runs[best].1)
    } else {
        warnings.push("no restart improved on its start point".to_string());
        let i = start_values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("at least one start");
        (starts[i], start_values[i])
    };
    if !value.is_finite() {
        return Err(Error::Numeric("MAP search found no point with finite posterior".into()));
    }
    Ok(MapResult {
        theta,
        log_posterior: value,
        start_values,
        evaluations,
        warnings,
    })
}

/// Baseline draws as 17-column rows, with x0 at each draw's steady state.
pub fn with_steady_state(thetas: &[PhysioParams], c: &PopulationConstants) -> Vec<Vec<f64>> {
    thetas
        .iter()
        .map(|t| TwinParams::at_steady_state(*t, c).to_array().to_vec())
        .collect()
}
