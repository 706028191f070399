//! Resolved run configuration: one JSON document covering every module's
//! knobs, with a canonical hash embedded in all artifacts. Unknown keys are
//! rejected; flags override file values at the command layer.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{DenoiserConfig, DenoiserNet};
use crate::engine::{Nets, TrainConfig};
use crate::error::{OccError, Result};
use crate::eval::EvalConfig;
use crate::mda::MdaConfig;
use crate::perception::PerceptionConfig;
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;
use crate::synthworld::WorldConfig;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub t_count: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { t_count: 200, beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataGenConfig {
    pub count: usize,
    pub heldout: usize,
    pub seed: u64,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        DataGenConfig { count: 24, heldout: 8, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Optimizer steps per variant.
    pub budget_steps: usize,
    /// Stage-1 fraction of the budget.
    pub stage1_fraction: f64,
    /// Seeds for the repeated-seed orderings.
    pub seeds: Vec<u64>,
    /// Sampling steps used when evaluating generation metrics.
    pub eval_steps: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            budget_steps: 2000,
            stage1_fraction: 0.3,
            seeds: vec![11, 22, 33],
            eval_steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub precision: Precision,
    pub threads: usize,
    pub world: WorldConfig,
    pub schedule: ScheduleConfig,
    pub perception: PerceptionConfig,
    pub denoiser: DenoiserConfig,
    pub mda: MdaConfig,
    pub train: TrainConfig,
    pub sample_steps: usize,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub data: DataGenConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            precision: Precision::F32,
            threads: 0,
            world: WorldConfig::default(),
            schedule: ScheduleConfig::default(),
            perception: PerceptionConfig::default(),
            denoiser: DenoiserConfig::default(),
            mda: MdaConfig::default(),
            train: TrainConfig::default(),
            sample_steps: 50,
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            data: DataGenConfig::default(),
        }
    }
}

impl Config {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(json)
            .map_err(|e| OccError::InvalidConfig(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        Self::from_json(&raw)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.perception.validate()?;
        self.denoiser.validate()?;
        self.train.validate()?;
        if self.world.image_hw != self.perception.image_hw
            || self.world.image_hw != self.denoiser.image_hw
        {
            return Err(OccError::InvalidConfig(
                "world/perception/denoiser image resolutions must agree".into(),
            ));
        }
        if self.world.grid_dims != self.perception.grid_dims {
            return Err(OccError::InvalidConfig(
                "world and perception grid dims must agree".into(),
            ));
        }
        if self.world.num_classes as usize != self.perception.num_classes {
            return Err(OccError::InvalidConfig("class counts must agree".into()));
        }
        let [hl, wl] = self.denoiser.latent_hw();
        if hl % self.mda.patch != 0 || wl % self.mda.patch != 0 {
            return Err(OccError::InvalidConfig(format!(
                "denoiser latent {hl}x{wl} not divisible by patch {}",
                self.mda.patch
            )));
        }
        if self.sample_steps < 1 || self.sample_steps > self.schedule.t_count {
            return Err(OccError::InvalidConfig(format!(
                "sample_steps {} outside [1, {}]",
                self.sample_steps, self.schedule.t_count
            )));
        }
        NoiseSchedule::linear(
            self.schedule.t_count,
            self.schedule.beta_start,
            self.schedule.beta_end,
        )?;
        Ok(())
    }

    /// Canonical JSON of the fully-resolved config: sorted keys, no spaces.
    pub fn canonical_json(&self) -> String {
        // serde_json's Value object is a sorted map, so a value round trip
        // canonicalizes key order
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&v).expect("value serializes")
    }

    /// Hash embedded in every artifact this run produces.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_json().as_bytes());
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::linear(
            self.schedule.t_count,
            self.schedule.beta_start,
            self.schedule.beta_end,
        )
        .expect("validated schedule")
    }

    /// Build both networks from the config seed, deterministically.
    pub fn build_nets<T: Real>(&self) -> Result<Nets<T>> {
        let root = RngStream::new(self.train.seed);
        let mut rng_p = root.derive("init/perception");
        let perception = crate::perception::PerceptionNet::init(self.perception.clone(), &mut rng_p)?;
        let mut rng_d = root.derive("init/denoiser");
        let denoiser = DenoiserNet::init(
            self.denoiser,
            Some(self.mda),
            self.world.frames,
            self.perception.num_classes,
            self.perception.grid_dims[0],
            &mut rng_d,
        )?;
        Ok(Nets { denoiser, perception })
    }

    /// Worker-thread cap: explicit config, OCCSCENE_THREADS, or all cores.
    pub fn effective_threads(&self) -> usize {
        if self.threads > 0 {
            return self.threads;
        }
        if let Ok(v) = std::env::var("OCCSCENE_THREADS") {
            if let Ok(n) = v.parse::<usize>() {
                if n > 0 {
                    return n;
                }
            }
        }
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_hash_stable() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let h1 = cfg.hash();
        let h2 = Config::default().hash();
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 16);
    }

    #[test]
    fn unknown_keys_rejected() {
        let json = r#"{"bogus_key": 1}"#;
        assert!(matches!(Config::from_json(json), Err(OccError::InvalidConfig(_))));
        let nested = r#"{"schedule": {"t_count": 10, "nope": 2}}"#;
        assert!(Config::from_json(nested).is_err());
    }

    #[test]
    fn partial_config_merges_defaults() {
        let json = r#"{"schedule": {"t_count": 50}}"#;
        let cfg = Config::from_json(json).unwrap();
        assert_eq!(cfg.schedule.t_count, 50);
        assert_eq!(cfg.schedule.beta_start, 1e-4);
        assert_ne!(cfg.hash(), Config::default().hash());
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let c = Config::default().canonical_json();
        let idx_data = c.find("\"data\"").unwrap();
        let idx_world = c.find("\"world\"").unwrap();
        assert!(idx_data < idx_world, "keys must be sorted");
        assert!(!c.contains(": "), "no whitespace in canonical form");
    }

    #[test]
    fn inconsistent_sections_rejected() {
        let mut cfg = Config::default();
        cfg.perception.image_hw = [16, 16];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn nets_build_deterministically() {
        let cfg = Config::default();
        let a = cfg.build_nets::<f32>().unwrap();
        let b = cfg.build_nets::<f32>().unwrap();
        assert!(a.denoiser.params.bit_eq(&b.denoiser.params));
        assert!(a.perception.params.bit_eq(&b.perception.params));
        let mda_a = a.denoiser.mda.as_ref().unwrap();
        let mda_b = b.denoiser.mda.as_ref().unwrap();
        assert!(mda_a.params.bit_eq(&mda_b.params));
    }
}
