//! Experiment configuration: a strict JSON file plus command-line overrides.

use std::path::{Path, PathBuf};

use adamole::training::ClusterRoutingSpec;
use adamole::{MixMode, TaskSpec, ToyModelConfig, TrainConfig};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ToyModelConfig,
    pub train: TrainConfig,
    pub task: TaskSpec,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ToyModelConfig::default(),
            train: TrainConfig::default(),
            task: TaskSpec::ClusterRouting(ClusterRoutingSpec::default()),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::ConfigRead {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| CliError::ConfigParse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Checks the model, optimizer and task settings against each other.
    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        let m = &self.model;
        let mismatch = |what: String| Err(CliError::Usage(format!("task does not fit the model: {what}")));
        match &self.task {
            TaskSpec::ClusterRouting(s) => {
                if s.features_per_token == 0 || s.dim % s.features_per_token != 0 {
                    return mismatch(format!("dim {} not divisible by features_per_token {}", s.dim, s.features_per_token));
                }
                if s.features_per_token != m.input_features {
                    return mismatch(format!(
                        "features_per_token {} vs input_features {}",
                        s.features_per_token, m.input_features
                    ));
                }
                if s.dim / s.features_per_token > m.seq_len {
                    return mismatch(format!("{} tokens exceed seq_len {}", s.dim / s.features_per_token, m.seq_len));
                }
                if s.n_classes != m.n_classes {
                    return mismatch(format!("{} classes vs {}", s.n_classes, m.n_classes));
                }
            }
            TaskSpec::TokenRule(s) => {
                if s.seq_len > m.seq_len || s.vocab_size > m.vocab_size {
                    return mismatch(format!(
                        "sequences of {} over {} tokens vs seq_len {} and vocab {}",
                        s.seq_len, s.vocab_size, m.seq_len, m.vocab_size
                    ));
                }
                if s.n_classes != m.n_classes {
                    return mismatch(format!("{} classes vs {}", s.n_classes, m.n_classes));
                }
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) -> CliResult<()> {
        if let Some(n) = o.experts {
            self.model.n_experts = n;
        }
        if let Some(r) = o.rank {
            self.model.lora_rank = r;
        }
        let n = self.model.n_experts.max(1);
        if let Some(mode) = o.mode {
            self.model.mode = match (mode, self.model.mode) {
                (ModeArg::Lora, _) => {
                    if o.experts.is_none() {
                        self.model.n_experts = 1;
                    }
                    MixMode::SingleLora
                }
                (ModeArg::Topk, m @ MixMode::TopK { .. }) => m,
                (ModeArg::Topk, _) => MixMode::TopK { k: n.min(2) },
                (ModeArg::Fixed, m @ MixMode::FixedThreshold { .. }) => m,
                (ModeArg::Fixed, _) => MixMode::FixedThreshold { tau: 1.0 / n as f64 },
                (ModeArg::Adamole, m @ MixMode::Adaptive { .. }) => m,
                (ModeArg::Adamole, _) => MixMode::Adaptive { tau_max: 1.0 / n as f64 },
            };
        }
        if let Some(t) = o.tau_max {
            match &mut self.model.mode {
                MixMode::Adaptive { tau_max } => *tau_max = t,
                other => {
                    return Err(CliError::Usage(format!("--tau-max needs adamole mode, config has {other:?}")));
                }
            }
        }
        if let Some(seed) = o.seed {
            self.model.seed = seed;
            self.train.seed = seed;
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Lora,
    Topk,
    Fixed,
    Adamole,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<ModeArg>,
    pub tau_max: Option<f64>,
    pub experts: Option<usize>,
    pub rank: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Reads `path` (or starts from defaults), applies overrides and validates.
pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> CliResult<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"model": {"n_layer": 2}}"#).unwrap_err();
        assert!(err.to_string().contains("n_layer"));
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"extra": 1}"#).is_err());
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"output_dir": "x"}"#).unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("x"));
    }

    #[test]
    fn overrides() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&Overrides {
            mode: Some(ModeArg::Lora),
            rank: Some(32),
            seed: Some(9),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(cfg.model.mode, MixMode::SingleLora);
        assert_eq!((cfg.model.n_experts, cfg.model.lora_rank), (1, 32));
        assert_eq!((cfg.model.seed, cfg.train.seed), (9, 9));

        let mut cfg = ExperimentConfig::default();
        cfg.apply(&Overrides {
            mode: Some(ModeArg::Fixed),
            experts: Some(4),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(cfg.model.mode, MixMode::FixedThreshold { tau: 0.25 });

        let mut cfg = ExperimentConfig::default();
        cfg.apply(&Overrides {
            tau_max: Some(0.5),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(cfg.model.mode, MixMode::Adaptive { tau_max: 0.5 });
        let err = cfg
            .apply(&Overrides {
                mode: Some(ModeArg::Topk),
                tau_max: Some(0.5),
                ..Default::default()
            })
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn task_must_fit_model() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.input_features = 8;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
    }
}
