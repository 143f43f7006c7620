//! Run configuration: JSON file, environment and flag overrides.

use std::path::{Path, PathBuf};

use maw::eval::{load_csv, DataFamily, ExperimentSpec, SweepParam};
use maw::model::{Hyperparams, Variant};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_rank")]
        rank: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    Csv {
        path: PathBuf,
    },
}

fn default_dim() -> usize {
    20
}

fn default_rank() -> usize {
    1
}

fn default_noise() -> f64 {
    0.1
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic { dim: default_dim(), rank: default_rank(), noise: default_noise() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Training inliers.
    pub n_train: usize,
    /// Training contamination ratios; one experiment cell per value.
    pub c: Vec<f64>,
    /// Test inliers.
    pub n_test: usize,
    /// Test contamination ratios; metrics are averaged over them.
    pub c_test: Vec<f64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { n_train: 500, c: vec![0.2], n_test: 200, c_test: vec![0.1, 0.3, 0.5] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: Hyperparams,
    /// Variant for `train`; overrides `model.variant` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    /// Variants compared by `eval` and `sweep`; defaults to the single variant.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variants: Option<Vec<Variant>>,
    pub split: SplitConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Hyperparameter grid for `sweep`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: Hyperparams::default(),
            variant: None,
            variants: None,
            split: SplitConfig::default(),
            seeds: vec![0],
            output_dir: PathBuf::from("maw-out"),
            sweep: None,
        }
    }
}

/// Command-line overrides; `None` keeps the file value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub variant: Option<Variant>,
    pub d: Option<usize>,
    pub eta: Option<f64>,
    pub data: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Defaults, then the file, then `MAW_SEED`, then flags.
    pub fn resolve(path: Option<&Path>, env_seed: Option<&str>, o: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::config("", format!("cannot read {}: {e}", p.display())))?;
                let de = &mut serde_json::Deserializer::from_str(&text);
                serde_path_to_error::deserialize(de)
                    .map_err(|e| CliError::config(e.path().to_string(), e.inner().to_string()))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = env_seed {
            let seed = s.trim().parse().map_err(|_| CliError::config("MAW_SEED", format!("`{s}` is not a seed")))?;
            cfg.seeds = vec![seed];
        }
        if let Some(seed) = o.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(e) = o.epochs {
            cfg.model.epochs = e;
        }
        if let Some(v) = o.variant {
            cfg.variant = Some(v);
            cfg.variants = None;
        }
        if let Some(d) = o.d {
            cfg.model.d = d;
        }
        if let Some(eta) = o.eta {
            cfg.model.eta = eta;
        }
        if let Some(p) = &o.data {
            cfg.data = DataConfig::Csv { path: p.clone() };
        }
        if let Some(p) = &o.output_dir {
            cfg.output_dir = p.clone();
        }
        if let Some(v) = cfg.variant {
            cfg.model.variant = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds", "need at least one seed"));
        }
        if self.split.c.is_empty() || self.split.c_test.is_empty() {
            return Err(CliError::config("split", "need at least one training and one test contamination ratio"));
        }
        for (key, list) in [("split.c", &self.split.c), ("split.c_test", &self.split.c_test)] {
            if let Some(r) = list.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
                return Err(CliError::config(key, format!("contamination ratio must be non-negative, got {r}")));
            }
        }
        if self.split.n_train < 2 || self.split.n_test == 0 {
            return Err(CliError::config("split", "need at least 2 training and 1 test inlier"));
        }
        if let DataConfig::Synthetic { dim, rank, noise } = self.data {
            if rank == 0 || rank >= dim {
                return Err(CliError::config("data.rank", format!("must satisfy 1 ≤ rank < dim, got rank={rank}, dim={dim}")));
            }
            if !(noise >= 0.0 && noise.is_finite()) {
                return Err(CliError::config("data.noise", format!("must be non-negative, got {noise}")));
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seeds[0]
    }

    pub fn variants(&self) -> Vec<Variant> {
        self.variants.clone().unwrap_or_else(|| vec![self.model.variant])
    }

    /// Data family; a CSV is read here so that missing data fails before any
    /// output is written.
    pub fn family(&self) -> Result<DataFamily, CliError> {
        match &self.data {
            DataConfig::Synthetic { dim, rank, noise } => Ok(DataFamily::Synthetic { dim: *dim, rank: *rank, noise: *noise }),
            DataConfig::Csv { path } => Ok(DataFamily::Pool(load_csv(path).map_err(|e| CliError::data_at(path, e))?)),
        }
    }

    pub fn spec(&self) -> Result<ExperimentSpec, CliError> {
        Ok(ExperimentSpec {
            family: self.family()?,
            n_train: self.split.n_train,
            c_values: self.split.c.clone(),
            n_test: self.split.n_test,
            c_test: self.split.c_test.clone(),
            variants: self.variants(),
            hp: self.model.clone(),
            seeds: self.seeds.clone(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, CliError> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, text).unwrap();
        RunConfig::resolve(Some(&p), None, &Overrides::default())
    }

    #[test]
    fn defaults_fill_missing_keys() {
        let cfg = parse("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.d_prime, 128);
        let cfg = parse(r#"{"data": {"source": "synthetic", "dim": 8}, "model": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.data, DataConfig::Synthetic { dim: 8, rank: 1, noise: 0.1 });
        assert_eq!(cfg.model.epochs, 3);
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let err = parse(r#"{"model": {"epoch": 3}}"#).unwrap_err();
        assert_eq!(err.code(), 2);
        assert_eq!(err.path.as_deref(), Some("model.epoch"));
        assert!(err.message.contains("epoch"));
        let err = parse(r#"{"model": {"d": 3}}"#).unwrap_err();
        assert_eq!(err.path.as_deref(), Some("model.d"));
    }

    #[test]
    fn precedence_is_flag_then_env_then_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seeds": [5], "model": {"epochs": 7}, "variant": "vae"}"#).unwrap();
        let cfg = RunConfig::resolve(Some(&p), Some("9"), &Overrides::default()).unwrap();
        assert_eq!((cfg.seeds.clone(), cfg.model.epochs, cfg.model.variant), (vec![9], 7, Variant::Vae));
        let o = Overrides { seed: Some(1), epochs: Some(2), variant: Some(Variant::MawKl), ..Overrides::default() };
        let cfg = RunConfig::resolve(Some(&p), Some("9"), &o).unwrap();
        assert_eq!((cfg.seeds, cfg.model.epochs, cfg.model.variant), (vec![1], 2, Variant::MawKl));
        assert_eq!(RunConfig::resolve(Some(&p), Some("x"), &Overrides::default()).unwrap_err().code(), 2);
    }
}
