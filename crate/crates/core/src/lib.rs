//! Type-1-diabetes digital twin: a glucose-insulin simulator, a conditional
//! masked autoregressive flow trained as an amortized posterior over
//! physiological parameters and initial states, MCMC and MAP reference
//! estimators, and the metrics used to compare them.

pub mod baselines;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod flow;
pub mod hash;
pub mod npe;
pub mod physiology;
pub mod priors;
pub mod rng;
pub mod scenario;
pub mod simulator;
pub mod stats;

pub use error::{Error, Result};
pub use physiology::{
    apply_sensor, derivatives, integrate, rho, steady_state, CgmTrace, PhysioParams,
    PopulationConstants, RhoConfig, SensorModel, StateVector, Trajectory,
};
pub use priors::{Marginal, PriorSpec};
pub use scenario::{BolusEvent, MealEvent, MealPerturbation, RasterizedInputs, Scenario};
pub use simulator::{Simulator, TwinParams};
pub use datagen::{generate_dataset, Dataset};
pub use baselines::{map_estimate, rwmh_sample, LikelihoodConfig, MapConfig, McmcConfig};
pub use evaluation::{EvalConfig, Method, ParamReport, ReplayReport, ReplaySetting, TimingReport};
pub use flow::{FlowArch, FlowModel, TrainConfig};
pub use npe::{infer, train_npe, InferOptions, PosteriorModel, PosteriorSamples};
