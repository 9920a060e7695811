//! Loading of JSON configuration and model setup files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use t1d_core::npe::Provenance;
use t1d_core::{Error, PopulationConstants, PriorSpec, Result, Scenario, SensorModel};

use crate::args::SetupArgs;

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn load_or_default<T: DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), |p| load_json(p))
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// `path` with `suffix` appended to its file name.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Setup {
    pub prior: PriorSpec,
    pub scenario: Scenario,
    pub constants: PopulationConstants,
    pub sensor: SensorModel,
}

impl Setup {
    /// Files named in `args` override `base`, which defaults to the built-in setup.
    pub fn resolve(args: &SetupArgs, base: Option<&Provenance>) -> Result<Setup> {
        let constants = match &args.constants {
            Some(p) => load_json(p)?,
            None => base.map_or_else(PopulationConstants::default, |b| b.constants),
        };
        let setup = Setup {
            prior: match &args.prior {
                Some(p) => load_json(p)?,
                None => base.map_or_else(PriorSpec::default, |b| b.prior.clone()),
            },
            scenario: match &args.scenario {
                Some(p) => load_json(p)?,
                None => base.map_or_else(|| Scenario::canonical(constants.basal_rate), |b| b.scenario.clone()),
            },
            sensor: match &args.sensor {
                Some(p) => load_json(p)?,
                None => base.map_or_else(SensorModel::default, |b| b.sensor),
            },
            constants,
        };
        setup.prior.validate()?;
        setup.scenario.validate()?;
        setup.constants.validate()?;
        setup.sensor.validate()?;
        Ok(setup)
    }
}
