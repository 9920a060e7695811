//! Fixtures shared by the benchmarks.

use t1d_core::datagen::GenerateOptions;
use t1d_core::flow::{FlowArch, TrainConfig};
use t1d_core::npe::{train_npe, PosteriorModel};
use t1d_core::{generate_dataset, Dataset, PopulationConstants, PriorSpec, Scenario, SensorModel};

pub fn dataset(n: usize, seed: u64) -> Dataset {
    let c = PopulationConstants::default();
    generate_dataset(
        n,
        &PriorSpec::default(),
        &c,
        &Scenario::canonical(c.basal_rate),
        &SensorModel::default(),
        seed,
        &GenerateOptions::default(),
    )
    .expect("dataset")
}

/// A full-size model trained briefly; inference cost does not depend on fit quality.
pub fn quick_model() -> PosteriorModel {
    let ds = dataset(400, 1);
    let cfg = TrainConfig {
        max_epochs: 2,
        min_rows: 0,
        ..TrainConfig::default()
    };
    train_npe(&ds, FlowArch::standard(ds.meta.theta_dim, ds.meta.obs_dim), &cfg, 1).expect("model")
}
