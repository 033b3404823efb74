//! Run configuration: one TOML file with command-scoped sections, parsed
//! fail-closed (unknown keys are errors, so a typo cannot silently fall
//! back to a default). Every field has a default; an absent file or section
//! means "all defaults". Command-line flags override file values, and the
//! resolved config is echoed next to the artifacts it produced.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::{Stage1Config, Stage2Config};

/// Environment variable consulted for the default output directory when
/// neither the `--out-dir` flag nor the config file sets one.
pub const OUT_DIR_ENV: &str = "NIFGEN_OUT_DIR";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Output directory for checkpoints, logs, and images.
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub generate: GenerateConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: None,
            dataset: DatasetConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            generate: GenerateConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// "synthetic" (procedural shapes) or "dir" (PNG files + sidecars).
    pub kind: String,
    /// Image directory; required when kind = "dir".
    pub path: Option<PathBuf>,
    /// Synthetic dataset size and image dimensions.
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { kind: "synthetic".into(), path: None, count: 8, height: 64, width: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    /// Euler integration steps.
    pub steps: usize,
    /// Guidance strength; 1.0 evaluates only the conditional branch.
    pub cfg_scale: f64,
    /// Sample with the EMA weights (`--no-ema` overrides to raw weights).
    pub use_ema: bool,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { steps: 25, cfg_scale: 4.0, use_ema: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Output sizes as (height, width) pairs.
    pub sizes: Vec<[usize; 2]>,
    /// Unmeasured warm-up runs per phase.
    pub warmup: usize,
    /// Measured runs per phase; the median is reported.
    pub runs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { sizes: vec![[64, 64], [128, 128], [256, 256]], warmup: 1, runs: 5 }
    }
}

impl RunConfig {
    /// Parse TOML text. Split from file I/O so untrusted bytes can be fed
    /// directly (the fuzz targets do).
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        match self.dataset.kind.as_str() {
            "synthetic" => {
                if self.dataset.count == 0 {
                    return Err(Error::Config("dataset.count must be positive".into()));
                }
                if self.dataset.height < 8 || self.dataset.width < 8 {
                    return Err(Error::Config(format!(
                        "dataset images must be at least 8x8, got {}x{}",
                        self.dataset.height, self.dataset.width
                    )));
                }
            }
            "dir" => {
                if self.dataset.path.is_none() {
                    return Err(Error::Config(
                        "dataset.kind = \"dir\" requires dataset.path".into(),
                    ));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown dataset.kind `{other}` (expected \"synthetic\" or \"dir\")"
                )));
            }
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.generate.steps == 0 {
            return Err(Error::Config("generate.steps must be positive".into()));
        }
        if !(self.generate.cfg_scale.is_finite() && self.generate.cfg_scale > 0.0) {
            return Err(Error::Config(format!(
                "generate.cfg_scale must be positive, got {}",
                self.generate.cfg_scale
            )));
        }
        if self.bench.sizes.is_empty() {
            return Err(Error::Config("bench.sizes must not be empty".into()));
        }
        for [h, w] in &self.bench.sizes {
            if *h < 8 || *w < 8 {
                return Err(Error::Config(format!("bench size {h}x{w} is below the 8x8 minimum")));
            }
        }
        if self.bench.runs == 0 {
            return Err(Error::Config("bench.runs must be positive".into()));
        }
        Ok(())
    }
}

/// Output-directory precedence: `--out-dir` flag, then the config file,
/// then the environment variable, then `./runs`.
pub fn resolve_output_dir(
    flag: Option<PathBuf>,
    file_value: Option<PathBuf>,
    env_value: Option<String>,
) -> PathBuf {
    flag.or(file_value)
        .or_else(|| env_value.filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_roundtrips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn empty_and_partial_files_mean_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let cfg = RunConfig::parse("[stage1]\nsteps = 7\n").unwrap();
        assert_eq!(cfg.stage1.steps, 7);
        assert_eq!(cfg.stage2, Stage2Config::default());
    }

    #[test]
    fn unknown_keys_fail_closed_at_every_level() {
        assert!(RunConfig::parse("no_such_key = 1").is_err());
        assert!(RunConfig::parse("[stage1]\nlearning_rate_typo = 0.1").is_err());
        assert!(RunConfig::parse("[stage2.denoiser]\nhiden_dim = 8").is_err());
        assert!(RunConfig::parse("[generate]\nsteps = 0").is_err());
    }

    #[test]
    fn dataset_section_is_validated() {
        assert!(RunConfig::parse("[dataset]\nkind = \"nope\"").is_err());
        assert!(RunConfig::parse("[dataset]\nkind = \"dir\"").is_err());
        let ok = RunConfig::parse("[dataset]\nkind = \"dir\"\npath = \"/tmp/images\"").unwrap();
        assert_eq!(ok.dataset.path.as_deref(), Some(Path::new("/tmp/images")));
        assert!(RunConfig::parse("[dataset]\ncount = 0").is_err());
    }

    #[test]
    fn bench_section_is_validated() {
        assert!(RunConfig::parse("[bench]\nsizes = []").is_err());
        assert!(RunConfig::parse("[bench]\nsizes = [[4, 64]]").is_err());
        assert!(RunConfig::parse("[bench]\nruns = 0").is_err());
        let ok = RunConfig::parse("[bench]\nsizes = [[64, 64], [96, 160]]").unwrap();
        assert_eq!(ok.bench.sizes, vec![[64, 64], [96, 160]]);
    }

    #[test]
    fn output_dir_precedence_is_flag_file_env_default() {
        let flag = Some(PathBuf::from("/flag"));
        let file = Some(PathBuf::from("/file"));
        let env = Some("/env".to_string());
        assert_eq!(resolve_output_dir(flag.clone(), file.clone(), env.clone()), Path::new("/flag"));
        assert_eq!(resolve_output_dir(None, file.clone(), env.clone()), Path::new("/file"));
        assert_eq!(resolve_output_dir(None, None, env), Path::new("/env"));
        assert_eq!(resolve_output_dir(None, None, Some(String::new())), Path::new("runs"));
        assert_eq!(resolve_output_dir(None, None, None), Path::new("runs"));
    }
}
