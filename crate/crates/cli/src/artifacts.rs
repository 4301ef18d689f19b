//! On-disk artifacts the binary produces besides shot files: model files,
//! run manifests and the calibration cache.

use std::fs;
use std::path::{Path, PathBuf};

use qread_core::baseline::{Discriminator, ReadoutWindow};
use qread_core::physics::Calibration;
use qread_core::{DeviceParams, MatchedFilterModel, MlpModel, ThresholdModel};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

/// A trained discriminator of any kind, tagged by `kind`.
#[derive(Clone, Debug)]
pub enum ModelFile {
    Threshold(ThresholdModel),
    MatchedFilter(MatchedFilterModel),
    Mlp(MlpModel),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Tagged {
    Threshold { model: ThresholdModel },
    MatchedFilter { model: MatchedFilterModel },
    // The network keeps its own versioned layout.
    Mlp { model: Value },
}

impl ModelFile {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelFile::Threshold(_) => "threshold",
            ModelFile::MatchedFilter(_) => "matched_filter",
            ModelFile::Mlp(_) => "mlp",
        }
    }

    pub fn window(&self) -> Option<ReadoutWindow> {
        match self {
            ModelFile::Threshold(m) => Some(m.window()),
            ModelFile::MatchedFilter(m) => Some(m.window()),
            ModelFile::Mlp(m) => m.window,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tagged = match self {
            ModelFile::Threshold(m) => Tagged::Threshold { model: m.clone() },
            ModelFile::MatchedFilter(m) => Tagged::MatchedFilter { model: m.clone() },
            ModelFile::Mlp(m) => Tagged::Mlp {
                model: serde_json::from_str(&m.to_json()?).map_err(|e| CliError::json(path.display(), e))?,
            },
        };
        write_json(path, &tagged)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
        let tagged: Tagged = serde_json::from_str(&text).map_err(|e| CliError::json(path.display(), e))?;
        Ok(match tagged {
            Tagged::Threshold { model } => ModelFile::Threshold(model),
            Tagged::MatchedFilter { model } => ModelFile::MatchedFilter(model),
            Tagged::Mlp { model } => ModelFile::Mlp(MlpModel::from_json(&model.to_string())?),
        })
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::json(path.display(), e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path.display(), e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
    serde_json::from_str(&text).map_err(|e| CliError::json(path.display(), e))
}

/// Written next to every output as `<out>.manifest.json`. Contains enough to
/// rerun the command: the subcommand, every resolved setting, the seed and
/// the paths involved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: u64,
    pub config: Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: u64, config: Value) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.display().to_string());
        self
    }

    pub fn output(mut self, p: &Path) -> Self {
        self.outputs.push(p.display().to_string());
        self
    }

    pub fn path_for(out: &Path) -> PathBuf {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }

    pub fn write_beside(&self, out: &Path) -> Result<PathBuf> {
        let p = Self::path_for(out);
        write_json(&p, self)?;
        Ok(p)
    }
}

/// Calibration request; also the cache key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRequest {
    pub target_fidelity: f64,
    pub window: ReadoutWindow,
    pub n_cal: usize,
    pub seed: u64,
    pub device: DeviceParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub request: CalibrationRequest,
    pub result: Calibration,
}

// FNV-1a; only needs to be stable, not strong.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn cache_dir() -> Option<PathBuf> {
    std::env::var_os("QREAD_CACHE_DIR")
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

fn cache_path(dir: &Path, req: &CalibrationRequest) -> PathBuf {
    let key = serde_json::to_vec(req).expect("request serializes");
    dir.join(format!("calibration-{:016x}.json", fnv1a(&key)))
}

/// Look the request up in the cache, running the calibration on a miss.
pub fn calibrate_cached(req: &CalibrationRequest, debug: bool) -> Result<CalibrationFile> {
    let dir = cache_dir();
    if let Some(dir) = &dir {
        let p = cache_path(dir, req);
        if let Ok(hit) = read_json::<CalibrationFile>(&p) {
            if &hit.request == req {
                if debug {
                    eprintln!("calibration cache hit: {}", p.display());
                }
                return Ok(hit);
            }
        }
    }
    let result = qread_core::physics::calibrate_noise(req.target_fidelity, req.window, &req.device, req.n_cal, req.seed)?;
    let file = CalibrationFile {
        request: req.clone(),
        result,
    };
    if let Some(dir) = &dir {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
        let p = cache_path(dir, req);
        write_json(&p, &file)?;
        if debug {
            eprintln!("calibration cached: {}", p.display());
        }
    }
    Ok(file)
}
