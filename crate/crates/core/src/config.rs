//! Run configuration: one flat document of dotted keys (`grid.rows = 8`),
//! parsed strictly and overridable key by key.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ctxlearn::LearnConfig;
use crate::error::{Error, Result};
use crate::featio::{FeatureMode, DEFAULT_HI_LEVELS};
use crate::grid::GridSpec;
use crate::svm::SvmOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub rows: usize,
    pub cols: usize,
    pub radius: usize,
    pub sectors: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        // 8x10 cells, 4-sector disk of radius 1
        GridSection {
            rows: 8,
            cols: 10,
            radius: 1,
            sectors: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapSection {
    pub mode: String,
    pub hi_levels: u32,
}

impl Default for MapSection {
    fn default() -> Self {
        MapSection {
            mode: "linear".into(),
            hi_levels: DEFAULT_HI_LEVELS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSection {
    pub gamma: f64,
    pub depth: usize,
}

impl Default for KernelSection {
    fn default() -> Self {
        KernelSection {
            gamma: crate::kernelcore::DEFAULT_GAMMA,
            depth: crate::kernelcore::DEFAULT_DEPTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnSection {
    pub svm_cost: f64,
    /// Per-concept costs in label-file concept order; overrides `svm_cost`.
    pub svm_costs: Vec<f64>,
    pub bias_feature: bool,
    pub eta: f64,
    pub inner_steps: usize,
    pub max_outer: usize,
    pub tol: f64,
}

impl Default for LearnSection {
    fn default() -> Self {
        LearnSection {
            svm_cost: crate::svm::DEFAULT_COST,
            svm_costs: Vec::new(),
            bias_feature: false,
            eta: crate::ctxlearn::DEFAULT_ETA,
            inner_steps: crate::ctxlearn::DEFAULT_INNER_STEPS,
            max_outer: crate::ctxlearn::DEFAULT_MAX_OUTER,
            tol: crate::ctxlearn::DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for IoSection {
    fn default() -> Self {
        IoSection {
            features: None,
            labels: None,
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSection,
    pub map: MapSection,
    pub kernel: KernelSection,
    pub learn: LearnSection,
    pub io: IoSection,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(config_err)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        RunConfig::parse(&text)
    }

    /// Set one dotted key from its textual value, with the same strictness as
    /// the file parser.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        match key {
            "grid.rows" => self.grid.rows = num(key, value)?,
            "grid.cols" => self.grid.cols = num(key, value)?,
            "grid.radius" => self.grid.radius = num(key, value)?,
            "grid.sectors" => self.grid.sectors = num(key, value)?,
            "map.mode" => self.map.mode = value.to_string(),
            "map.hi_levels" => self.map.hi_levels = num(key, value)?,
            "kernel.gamma" => self.kernel.gamma = num(key, value)?,
            "kernel.depth" => self.kernel.depth = num(key, value)?,
            "learn.svm_cost" => self.learn.svm_cost = num(key, value)?,
            "learn.svm_costs" => {
                self.learn.svm_costs = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            "learn.bias_feature" => self.learn.bias_feature = num(key, value)?,
            "learn.eta" => self.learn.eta = num(key, value)?,
            "learn.inner_steps" => self.learn.inner_steps = num(key, value)?,
            "learn.max_outer" => self.learn.max_outer = num(key, value)?,
            "learn.tol" => self.learn.tol = num(key, value)?,
            "io.features" => self.io.features = Some(PathBuf::from(value)),
            "io.labels" => self.io.labels = Some(PathBuf::from(value)),
            "io.output_dir" => self.io.output_dir = PathBuf::from(value),
            "io.seed" => self.io.seed = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.grid_spec()?;
        self.feature_mode()?;
        let k = &self.kernel;
        if !(k.gamma.is_finite() && k.gamma >= 0.0) {
            return Err(Error::Config(format!("kernel.gamma must be >= 0, got {}", k.gamma)));
        }
        if k.depth < 1 {
            return Err(Error::Config("kernel.depth must be >= 1".into()));
        }
        let l = &self.learn;
        for c in std::iter::once(&l.svm_cost).chain(&l.svm_costs) {
            if !(c.is_finite() && *c > 0.0) {
                return Err(Error::Config(format!("svm costs must be > 0, got {c}")));
            }
        }
        if !(l.eta.is_finite() && l.eta >= 0.0) {
            return Err(Error::Config(format!("learn.eta must be >= 0, got {}", l.eta)));
        }
        if !(l.tol.is_finite() && l.tol > 0.0) {
            return Err(Error::Config(format!("learn.tol must be > 0, got {}", l.tol)));
        }
        if l.max_outer < 1 {
            return Err(Error::Config("learn.max_outer must be >= 1".into()));
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        let g = &self.grid;
        GridSpec::new(g.rows, g.cols, g.radius, g.sectors).map_err(config_err)
    }

    pub fn feature_mode(&self) -> Result<FeatureMode> {
        FeatureMode::parse(&self.map.mode, self.map.hi_levels).map_err(config_err)
    }

    pub fn learn_config(&self, n_concepts: usize) -> Result<LearnConfig> {
        let costs = if self.learn.svm_costs.is_empty() {
            vec![self.learn.svm_cost; n_concepts]
        } else if self.learn.svm_costs.len() == n_concepts {
            self.learn.svm_costs.clone()
        } else {
            return Err(Error::Config(format!(
                "learn.svm_costs has {} values for {n_concepts} concepts",
                self.learn.svm_costs.len()
            )));
        };
        Ok(LearnConfig {
            gamma: self.kernel.gamma,
            depth: self.kernel.depth,
            costs,
            svm: SvmOptions {
                bias_feature: self.learn.bias_feature,
                ..SvmOptions::default()
            },
            eta: self.learn.eta,
            inner_steps: self.learn.inner_steps,
            max_outer: self.learn.max_outer,
            tol: self.learn.tol,
        })
    }

    /// Every key, one `key = value` line each, in a form [`RunConfig::parse`] accepts.
    pub fn to_flat_string(&self) -> String {
        let mut out = String::new();
        let q = |s: &str| toml::Value::String(s.to_string()).to_string();
        let p = |p: &Path| q(&p.to_string_lossy());
        let f = |v: f64| toml::Value::Float(v).to_string();
        let g = &self.grid;
        let _ = writeln!(out, "grid.rows = {}", g.rows);
        let _ = writeln!(out, "grid.cols = {}", g.cols);
        let _ = writeln!(out, "grid.radius = {}", g.radius);
        let _ = writeln!(out, "grid.sectors = {}", g.sectors);
        let _ = writeln!(out, "map.mode = {}", q(&self.map.mode));
        let _ = writeln!(out, "map.hi_levels = {}", self.map.hi_levels);
        let _ = writeln!(out, "kernel.gamma = {}", f(self.kernel.gamma));
        let _ = writeln!(out, "kernel.depth = {}", self.kernel.depth);
        let l = &self.learn;
        let _ = writeln!(out, "learn.svm_cost = {}", f(l.svm_cost));
        let costs: Vec<String> = l.svm_costs.iter().map(|&c| f(c)).collect();
        let _ = writeln!(out, "learn.svm_costs = [{}]", costs.join(", "));
        let _ = writeln!(out, "learn.bias_feature = {}", l.bias_feature);
        let _ = writeln!(out, "learn.eta = {}", f(l.eta));
        let _ = writeln!(out, "learn.inner_steps = {}", l.inner_steps);
        let _ = writeln!(out, "learn.max_outer = {}", l.max_outer);
        let _ = writeln!(out, "learn.tol = {}", f(l.tol));
        if let Some(path) = &self.io.features {
            let _ = writeln!(out, "io.features = {}", p(path));
        }
        if let Some(path) = &self.io.labels {
            let _ = writeln!(out, "io.labels = {}", p(path));
        }
        let _ = writeln!(out, "io.output_dir = {}", p(&self.io.output_dir));
        let _ = writeln!(out, "io.seed = {}", self.io.seed);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_parse() {
        let cfg =
            RunConfig::parse("grid.rows = 2\ngrid.cols = 3\nkernel.gamma = 0.5\nlearn.inner_steps = 0\nio.seed = 9\n")
                .unwrap();
        assert_eq!(cfg.grid.rows, 2);
        assert_eq!(cfg.grid.cols, 3);
        assert_eq!(cfg.kernel.gamma, 0.5);
        assert_eq!(cfg.kernel.depth, 3);
        assert_eq!(cfg.learn.inner_steps, 0);
        assert_eq!(cfg.io.seed, 9);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::parse("grid.rowz = 2\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("extra.x = 1\n"), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        assert!(cfg.set("kernel.alpha", "1").is_err());
    }

    #[test]
    fn ranges_checked() {
        for (k, v) in [
            ("kernel.gamma", "-1"),
            ("kernel.depth", "0"),
            ("learn.svm_cost", "0"),
            ("learn.eta", "-0.1"),
            ("learn.tol", "0"),
            ("grid.rows", "0"),
            ("map.mode", "rbf"),
        ] {
            let mut cfg = RunConfig::default();
            cfg.set(k, v).unwrap();
            assert!(cfg.validate().is_err(), "{k} = {v} accepted");
        }
    }

    #[test]
    fn flat_echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("io.features", "data/f.ctxf").unwrap();
        cfg.set("learn.svm_costs", "1.5,2").unwrap();
        cfg.set("kernel.gamma", "0.3").unwrap();
        let text = cfg.to_flat_string();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }
}
