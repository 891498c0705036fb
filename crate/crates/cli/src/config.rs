//! Plain-text key=value run configuration. Unknown keys are rejected so a
//! typo cannot silently change a run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use equidyn::dynamics::{Boundary, InitFamily};
use equidyn::layers::Symmetry;
use equidyn::models::{Arch, ModelSpec};

use crate::CliError;

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    map: BTreeMap<String, String>,
}

const KNOWN_KEYS: &[&str] = &[
    // model
    "arch",
    "symmetry",
    "depth",
    "width",
    "l",
    "grid",
    "kernel",
    "group_order",
    "scale_grid",
    "t_extent",
    "norm_mean",
    "norm_std",
    // training
    "horizon",
    "k_accum",
    "lr",
    "epochs",
    "batch",
    "seed",
    "stride",
    "resume",
    // data generation
    "field",
    "n_traj",
    "frames",
    "substeps",
    "alpha_min",
    "alpha_max",
    "init",
    "boundary",
    // paths
    "data",
    "out",
    "checkpoint",
    // evaluation
    "transforms",
    "n_samples",
    "tolerance",
];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected key=value, got '{}'", lineno + 1, line))
            })?;
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(CliError::Config(format!("unknown config key '{}'", key)));
            }
            if map.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(CliError::Config(format!("duplicate config key '{}'", key)));
            }
        }
        Ok(Self { map })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {}", path.display(), e)))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn set(&mut self, key: &str, value: String) {
        self.map.insert(key.to_string(), value);
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.get(key).ok_or_else(|| CliError::Config(format!("missing config key '{}'", key)))
    }

    pub fn parse_num<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => {
                v.parse().map_err(|_| CliError::Config(format!("bad value for '{}': {}", key, v)))
            }
        }
    }

    pub fn require_num<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.require(key)?;
        v.parse().map_err(|_| CliError::Config(format!("bad value for '{}': {}", key, v)))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        Ok(PathBuf::from(self.require(key)?))
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parse_num("seed", 0u64)
    }

    /// Model description assembled from the config keys.
    pub fn model_spec(&self) -> Result<ModelSpec, CliError> {
        let arch_name = self.require("arch")?;
        let arch = Arch::parse(arch_name)
            .ok_or_else(|| CliError::Config(format!("bad arch '{}'", arch_name)))?;
        let sym_name = self.require("symmetry")?;
        let symmetry = Symmetry::parse(sym_name)
            .ok_or_else(|| CliError::Config(format!("bad symmetry '{}'", sym_name)))?;
        let mut spec = ModelSpec::new(arch, symmetry);
        spec.depth = self.parse_num("depth", spec.depth)?;
        spec.width = self.parse_num("width", spec.width)?;
        spec.input_frames = self.parse_num("l", spec.input_frames)?;
        spec.grid = self.parse_num("grid", spec.grid)?;
        spec.kernel = self.parse_num("kernel", spec.kernel)?;
        spec.group_order = self.parse_num("group_order", spec.group_order)?;
        spec.t_extent = self.parse_num("t_extent", spec.t_extent)?;
        spec.norm_mean = self.parse_num("norm_mean", spec.norm_mean)?;
        spec.norm_std = self.parse_num("norm_std", spec.norm_std)?;
        spec.channels = match self.get("field").unwrap_or("scalar") {
            "scalar" => 1,
            "vector" => 2,
            other => return Err(CliError::Config(format!("bad field kind '{}'", other))),
        };
        if let Some(grid) = self.get("scale_grid") {
            spec.scale_grid = grid
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| CliError::Config(format!("bad scale_grid entry '{}'", v)))
                })
                .collect::<Result<Vec<f64>, CliError>>()?;
        }
        Ok(spec)
    }

    pub fn init_family(&self) -> Result<InitFamily, CliError> {
        let name = self.get("init").unwrap_or("mixed");
        InitFamily::parse(name).ok_or_else(|| CliError::Config(format!("bad init family '{}'", name)))
    }

    pub fn boundary(&self) -> Result<Boundary, CliError> {
        let name = self.get("boundary").unwrap_or("periodic");
        Boundary::parse(name).ok_or_else(|| CliError::Config(format!("bad boundary '{}'", name)))
    }
}
