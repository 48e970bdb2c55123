//! End-to-end orchestration: one config drives dataset generation, two-phase
//! training, single-pair registration, and evaluation sweeps. Every stage
//! writes a stamp file carrying the config digest so any artifact can be
//! traced to the exact configuration that produced it, and every failure is
//! typed so callers can map it to a distinct process exit code.

mod eval;
mod register;
mod selfsup;

pub use eval::{
    cmd_eval, evaluate_pairs, EvalConfig, EvalOutcome, EvalSweep, PairRecord, PAIR_CSV_HEADER,
};
pub use register::{
    cmd_register, read_intrinsics, register_pair, RegisterConfig, RegisterInputs, RegisterOutcome,
    RegisterQuality,
};
pub use selfsup::{
    selfsup_config_digest, train_selfsup, SelfsupConfig, SelfsupSummary, SELF_EPOCH_CSV_HEADER,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::KeyValues;
use crate::rigid::{train_rigid, Estimator, TrainConfig, TrainSummary};
use crate::synth::{generate_dataset, DatasetConfig, DatasetSummary};

/// Environment variable that, when set, overrides the configured output
/// directory wholesale.
pub const OUT_ROOT_ENV: &str = "P2G_OUT_ROOT";

/// Which stages a full run executes; individual commands ignore toggles for
/// stages they do not own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub synth: bool,
    pub train_rigid: bool,
    pub train_selfsup: bool,
    pub eval: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles { synth: true, train_rigid: true, train_selfsup: true, eval: true }
    }
}

/// The one config that drives everything. Unknown keys are rejected at parse
/// time so typos fail loudly instead of silently falling back to defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
    pub stages: StageToggles,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub selfsup: SelfsupConfig,
    pub register: RegisterConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = crate::io::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset_dir.as_os_str().is_empty() || self.out_dir.as_os_str().is_empty() {
            return Err(Error::invalid("dataset_dir and out_dir must be set"));
        }
        self.train.validate()?;
        self.selfsup.validate()?;
        self.register.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    /// Output root honoring the [`OUT_ROOT_ENV`] override.
    pub fn out_root(&self) -> PathBuf {
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.out_dir.clone(),
        }
    }
}

/// Hex SHA-256 of the TOML form of the whole run config.
pub fn run_config_digest(cfg: &RunConfig) -> Result<String> {
    let text =
        toml::to_string(cfg).map_err(|e| Error::invalid(format!("config not serializable: {e}")))?;
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Writes `run.txt` (stage name + config digest) and a full copy of the
/// config into `dir`, so the artifact's provenance survives on disk.
pub fn stamp_stage(dir: &Path, stage: &str, cfg: &RunConfig) -> Result<String> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let digest = run_config_digest(cfg)?;
    let mut kv = KeyValues::new();
    kv.push("stage", stage);
    kv.push("config_digest", &digest);
    kv.write(&dir.join("run.txt"))?;
    let text =
        toml::to_string(cfg).map_err(|e| Error::invalid(format!("config not serializable: {e}")))?;
    crate::io::write_bytes(&dir.join("config.toml"), text.as_bytes())?;
    Ok(digest)
}

/// Maps the error taxonomy to process exit codes: bad inputs and artifact
/// mismatches exit 2, too-few-matches exits 3, degenerate or numerical
/// failures exit 4. Success is 0 and unexpected panics surface as 1.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidInput(_) | Error::Io { .. } | Error::Parse { .. } => 2,
        Error::ArtifactMismatch(_) => 2,
        Error::InsufficientMatches(_) => 3,
        Error::Degenerate(_) | Error::Numerical(_) => 4,
    }
}

pub(crate) fn estimator_from_str(name: &str) -> Result<Estimator> {
    match name {
        "wsvd" => Ok(Estimator::Wsvd),
        "ransac50k" => Ok(Estimator::Ransac50k),
        "lgr" => Ok(Estimator::Lgr),
        other => Err(Error::invalid(format!(
            "unknown estimator '{other}' (expected wsvd, ransac50k, or lgr)"
        ))),
    }
}

/// Generates the synthetic dataset into `dataset_dir`. Deterministic for a
/// fixed config: re-running produces byte-identical samples and the same
/// dataset digest.
pub fn cmd_synth(cfg: &RunConfig) -> Result<DatasetSummary> {
    cfg.validate()?;
    let summary = generate_dataset(&cfg.dataset_dir, &cfg.dataset)?;
    stamp_stage(&cfg.dataset_dir, "synth", cfg)?;
    Ok(summary)
}

/// Which training phase [`cmd_train`] executes. `Auto` follows the stage
/// toggles in the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPhase {
    Rigid,
    Selfsup,
    Auto,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub rigid: Option<TrainSummary>,
    pub selfsup: Option<SelfsupSummary>,
    pub rigid_dir: PathBuf,
    pub selfsup_dir: PathBuf,
}

/// Phase 1 trains the correspondence network; phase 2 freezes it and trains
/// the deformation gate against the rendering losses. The phase-2 entry
/// verifies afterwards that the rigid checkpoint file is untouched.
pub fn cmd_train(cfg: &RunConfig, phase: TrainPhase) -> Result<TrainOutcome> {
    cfg.validate()?;
    let root = cfg.out_root();
    let rigid_dir = root.join("rigid");
    let selfsup_dir = root.join("selfsup");
    let run_rigid = match phase {
        TrainPhase::Rigid => true,
        TrainPhase::Selfsup => false,
        TrainPhase::Auto => cfg.stages.train_rigid,
    };
    let run_selfsup = match phase {
        TrainPhase::Rigid => false,
        TrainPhase::Selfsup => true,
        TrainPhase::Auto => cfg.stages.train_selfsup,
    };
    if !run_rigid && !run_selfsup {
        return Err(Error::invalid("no training phase enabled"));
    }
    let mut outcome =
        TrainOutcome { rigid: None, selfsup: None, rigid_dir: rigid_dir.clone(), selfsup_dir };
    if run_rigid {
        let summary = train_rigid(&cfg.dataset_dir, &cfg.train, &rigid_dir)?;
        stamp_stage(&rigid_dir, "train-rigid", cfg)?;
        outcome.rigid = Some(summary);
    }
    if run_selfsup {
        let rigid_ckpt = rigid_dir.join("best.ckpt");
        if !rigid_ckpt.is_file() {
            return Err(Error::ArtifactMismatch(format!(
                "phase 2 needs the phase-1 checkpoint at {rigid_ckpt:?}; run the rigid phase first"
            )));
        }
        let summary = train_selfsup(
            &cfg.dataset_dir,
            &rigid_ckpt,
            &cfg.train.matcher,
            &cfg.selfsup,
            &outcome.selfsup_dir,
        )?;
        stamp_stage(&outcome.selfsup_dir, "train-selfsup", cfg)?;
        outcome.selfsup = Some(summary);
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml_and_digest_is_stable() {
        let mut cfg = RunConfig::default();
        cfg.dataset_dir = PathBuf::from("data");
        cfg.out_dir = PathBuf::from("out");
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(run_config_digest(&cfg).unwrap(), run_config_digest(&back).unwrap());
        let mut other = cfg.clone();
        other.train.epochs += 1;
        assert_ne!(run_config_digest(&other).unwrap(), run_config_digest(&cfg).unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("nonsense_knob = 3").unwrap_err();
        assert!(err.to_string().contains("nonsense_knob"));
    }

    #[test]
    fn out_root_env_overrides_config() {
        let mut cfg = RunConfig::default();
        cfg.out_dir = PathBuf::from("configured");
        // Process-global env var: restore it afterwards to avoid poisoning
        // neighboring tests.
        let prev = std::env::var_os(OUT_ROOT_ENV);
        std::env::set_var(OUT_ROOT_ENV, "/tmp/elsewhere");
        let got = cfg.out_root();
        match prev {
            Some(v) => std::env::set_var(OUT_ROOT_ENV, v),
            None => std::env::remove_var(OUT_ROOT_ENV),
        }
        assert_eq!(got, PathBuf::from("/tmp/elsewhere"));
    }

    #[test]
    fn exit_codes_distinguish_failure_classes() {
        assert_eq!(exit_code(&Error::invalid("x")), 2);
        assert_eq!(exit_code(&Error::ArtifactMismatch("x".into())), 2);
        assert_eq!(exit_code(&Error::InsufficientMatches("x".into())), 3);
        assert_eq!(exit_code(&Error::degenerate("x")), 4);
        assert_eq!(exit_code(&Error::numerical("x")), 4);
    }

    #[test]
    fn estimator_names_map_to_variants() {
        assert_eq!(estimator_from_str("wsvd").unwrap(), Estimator::Wsvd);
        assert_eq!(estimator_from_str("ransac50k").unwrap(), Estimator::Ransac50k);
        assert_eq!(estimator_from_str("lgr").unwrap(), Estimator::Lgr);
        assert!(estimator_from_str("icp").is_err());
    }

    #[test]
    fn stage_stamp_lands_with_digest() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.dataset_dir = PathBuf::from("d");
        cfg.out_dir = PathBuf::from("o");
        let digest = stamp_stage(dir.path(), "synth", &cfg).unwrap();
        let kv = KeyValues::read(&dir.path().join("run.txt")).unwrap();
        assert_eq!(kv.get("stage"), Some("synth"));
        assert_eq!(kv.get("config_digest"), Some(digest.as_str()));
        assert!(dir.path().join("config.toml").is_file());
    }
}
