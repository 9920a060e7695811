use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use t1d_core::baselines::{map_estimate, rwmh_sample, with_steady_state, MapConfig, McmcConfig};
use t1d_core::datagen::GenerateOptions;
use t1d_core::evaluation::{param_report, replay_report, run_cases, run_timing, EvalConfig};
use t1d_core::flow::{FlowArch, TrainConfig};
use t1d_core::npe::{infer, train_npe, write_rows_csv, InferOptions, PosteriorModel};
use t1d_core::physiology::{write_series_csv, CgmTrace, StateVector};
use t1d_core::rng::{ns, stream};
use t1d_core::{generate_dataset, Dataset, Error, PhysioParams, Result, Simulator, TwinParams};

use crate::args::*;
use crate::config::{load_json, load_or_default, read_text, sidecar, to_json, write_file, Setup};
use crate::service;

pub fn dispatch(command: Command, threads: Option<usize>) -> Result<()> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Baseline(BaselineCommand::Mcmc(a)) => mcmc(a),
        Command::Baseline(BaselineCommand::Map(a)) => map(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Serve(a) => service::serve_blocking(a, threads),
    }
}

/// Parameter file for `simulate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsFile {
    pub theta: PhysioParams,
    /// Initial state; steady state of `theta` when absent.
    #[serde(default)]
    pub x0: Option<StateVector>,
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let setup = Setup::resolve(&a.setup, None)?;
    let params: ParamsFile = load_json(&a.params)?;
    params.theta.validate()?;
    let p = match params.x0 {
        Some(x0) => {
            x0.validate()?;
            TwinParams { theta: params.theta, x0 }
        }
        None => TwinParams::at_steady_state(params.theta, &setup.constants),
    };
    let sensor = if a.noiseless { setup.sensor.noiseless() } else { setup.sensor };
    let sim = Simulator::new(setup.constants, setup.scenario, sensor)?;
    let y = sim.observe(&p, &mut stream(a.seed, ns::SIMULATE, 0))?;
    let mut buf = Vec::new();
    write_series_csv(&mut buf, &sim.obs_times(), &y)?;
    write_file(&a.out, buf)?;
    log::info!("wrote {} readings to {}", y.len(), a.out.display());
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let setup = Setup::resolve(&a.setup, None)?;
    let opts: GenerateOptions = load_or_default(a.config.as_ref())?;
    let ds = generate_dataset(a.n, &setup.prior, &setup.constants, &setup.scenario, &setup.sensor, a.seed, &opts)?;
    ds.save(&a.out)?;
    log::info!(
        "wrote {} rows to {} (acceptance {:.3})",
        ds.len(),
        a.out.display(),
        ds.meta.stats.acceptance_rate
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = load_or_default(a.config.as_ref())?;
    if let Some(v) = a.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.patience {
        cfg.patience = v;
    }
    cfg.validate()?;
    let ds = Dataset::load(&a.data)?;
    log::info!("training on {} rows from {}", ds.len(), a.data.display());
    let start = Instant::now();
    let model = train_npe(&ds, FlowArch::standard(ds.meta.theta_dim, ds.meta.obs_dim), &cfg, a.seed)?;
    let secs = start.elapsed().as_secs_f64();
    model.save(&a.out)?;
    let h = &model.provenance.history;
    write_file(
        &sidecar(&a.out, ".timing.json"),
        to_json(&json!({ "training_s": secs, "epochs_run": h.epochs_run }))?,
    )?;
    log::info!(
        "model {} written to {} ({} epochs, best {} at val loss {:.4}, {secs:.1} s)",
        model.id(),
        a.out.display(),
        h.epochs_run,
        h.best_epoch,
        h.best_val_loss
    );
    Ok(())
}

fn read_cgm(path: &std::path::Path) -> Result<Vec<f64>> {
    let trace = CgmTrace::read_csv(&read_text(path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(trace.values)
}

fn infer_cmd(a: InferArgs) -> Result<()> {
    let model = PosteriorModel::load(&a.model)?;
    let y = read_cgm(&a.cgm)?;
    let mut opts = InferOptions {
        expected_scenario_hash: a.scenario_hash,
        ..InferOptions::default()
    };
    if let Some(m) = a.obs_margin {
        opts.obs_margin = m;
    }
    let samples = infer(&model, &y, a.samples, a.seed, &opts)?;
    samples.write_csv(&a.out)?;
    write_file(&sidecar(&a.out, ".meta.json"), to_json(&samples.meta_json())?)?;
    log::info!(
        "{} samples in {:.3} s written to {}",
        samples.len(),
        samples.elapsed_s,
        a.out.display()
    );
    Ok(())
}

fn baseline_setup(c: &BaselineSetup) -> Result<(Setup, Vec<f64>)> {
    let model = c.model.as_ref().map(PosteriorModel::load).transpose()?;
    let setup = Setup::resolve(&c.setup, model.as_ref().map(|m| &m.provenance))?;
    Ok((setup, read_cgm(&c.cgm)?))
}

fn names() -> Vec<String> {
    TwinParams::names().iter().map(|s| s.to_string()).collect()
}

fn mcmc(a: McmcArgs) -> Result<()> {
    let (setup, y) = baseline_setup(&a.common)?;
    let mut cfg: McmcConfig = load_or_default(a.config.as_ref())?;
    if let Some(v) = a.burn_in {
        cfg.burn_in = v;
    }
    if let Some(v) = a.steps {
        cfg.main_steps = v;
    }
    if let Some(v) = a.common.sigma {
        cfg.likelihood.sigma = v;
    }
    if let Some(v) = a.common.seed {
        cfg.seed = v;
    }
    if a.time_limit.is_some() {
        cfg.time_limit_s = a.time_limit;
    }
    let sim = Simulator::new(setup.constants, setup.scenario.clone(), setup.sensor.noiseless())?;
    let r = rwmh_sample(&y, &setup.prior, &sim, &cfg)?;
    for w in &r.warnings {
        log::warn!("{w}");
    }
    let rows = with_steady_state(&r.thetas, &setup.constants);
    write_file(&a.common.out, write_rows_csv(&names(), &rows))?;
    write_file(
        &sidecar(&a.common.out, ".meta.json"),
        to_json(&json!({
            "method": "mcmc",
            "n": rows.len(),
            "acceptance_rate": r.acceptance_rate,
            "warnings": r.warnings,
            "config": cfg,
        }))?,
    )?;
    log::info!("{} draws (acceptance {:.3}) written to {}", rows.len(), r.acceptance_rate, a.common.out.display());
    Ok(())
}

fn map(a: MapArgs) -> Result<()> {
    let (setup, y) = baseline_setup(&a.common)?;
    let mut cfg: MapConfig = load_or_default(a.config.as_ref())?;
    if let Some(v) = a.restarts {
        cfg.restarts = v;
    }
    if let Some(v) = a.max_evals {
        cfg.max_evals = v;
    }
    if let Some(v) = a.common.sigma {
        cfg.likelihood.sigma = v;
    }
    if let Some(v) = a.common.seed {
        cfg.seed = v;
    }
    let sim = Simulator::new(setup.constants, setup.scenario.clone(), setup.sensor.noiseless())?;
    let r = map_estimate(&y, &setup.prior, &sim, &cfg)?;
    for w in &r.warnings {
        log::warn!("{w}");
    }
    let rows = with_steady_state(&[r.theta], &setup.constants);
    write_file(&a.common.out, write_rows_csv(&names(), &rows))?;
    write_file(
        &sidecar(&a.common.out, ".meta.json"),
        to_json(&json!({
            "method": "map",
            "log_posterior": r.log_posterior,
            "start_values": r.start_values,
            "evaluations": r.evaluations,
            "warnings": r.warnings,
            "config": cfg,
        }))?,
    )?;
    log::info!("MAP estimate (log posterior {:.3}) written to {}", r.log_posterior, a.common.out.display());
    Ok(())
}

fn eval_config(a: &EvaluateArgs) -> Result<EvalConfig> {
    let mut cfg: EvalConfig = load_or_default(a.config.as_ref())?;
    if let Some(v) = a.cases {
        cfg.n_cases = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.samples {
        cfg.samples = v;
    }
    if let Some(v) = a.mcmc_burn_in {
        cfg.mcmc.burn_in = v;
    }
    if let Some(v) = a.mcmc_steps {
        cfg.mcmc.main_steps = v;
    }
    if let Some(v) = a.map_restarts {
        cfg.map.restarts = v;
    }
    if let Some(v) = a.replay_draws {
        cfg.replay_draws = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Deserialize)]
struct TimingSidecar {
    training_s: f64,
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg = eval_config(&a)?;
    let model = PosteriorModel::load(&a.model)?;
    let mut written = Vec::new();
    let mut emit = |stem: &str, json_text: String, csv: String| -> Result<()> {
        let path = a.out_dir.join(format!("{stem}.json"));
        write_file(&path, json_text)?;
        write_file(&a.out_dir.join(format!("{stem}.csv")), csv)?;
        written.push(path);
        Ok(())
    };
    let wants = |s: Suite| a.suite == s || a.suite == Suite::All;
    if wants(Suite::Param) || wants(Suite::Replay) {
        let (cases, results) = run_cases(&model, &cfg, wants(Suite::Replay), false)?;
        if wants(Suite::Param) {
            let r = param_report(&cfg, &cases, &results);
            emit("param_report", to_json(&r)?, r.to_csv())?;
        }
        if wants(Suite::Replay) {
            let r = replay_report(&cfg, &cases, &results);
            emit("replay_report", to_json(&r)?, r.to_csv())?;
        }
    }
    if wants(Suite::Timing) {
        let training_s = match a.training_time {
            Some(t) => Some(t),
            None => {
                let path = sidecar(&a.model, ".timing.json");
                match load_json::<TimingSidecar>(&path) {
                    Ok(t) => Some(t.training_s),
                    Err(e) => {
                        log::warn!("training time unavailable: {e}");
                        None
                    }
                }
            }
        };
        let r = run_timing(&model, &cfg, training_s)?;
        emit("timing_report", to_json(&r)?, r.to_csv())?;
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}
