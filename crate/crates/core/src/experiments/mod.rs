//! Config-driven experiment runs that write CSV and JSON artifacts.
//!
//! Every CSV artifact starts with `# config_hash=<hex> seed=<n>`; every JSON
//! artifact carries `config_hash` and `seed` fields.

mod artifacts;
mod config;
mod report;
mod runs;

pub use artifacts::{config_hash, Artifacts};
pub use config::*;
pub use report::{comparison_table, emit_reports, RunSummary, REPORT_FILE, SUMMARY_FILE};
pub use runs::{run_experiment, RunOutput};

use std::path::PathBuf;

use thiserror::Error;

use crate::arch::ArchError;
use crate::datagen::DataError;
use crate::distill::DistillError;
use crate::eval::EvalError;
use crate::losses::LossError;
use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("cannot parse {path}: {source}")]
    ConfigParse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("no run summaries found under {0}")]
    NoRunsFound(PathBuf),
    #[error("duplicate run {0}")]
    DuplicateRun(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Distill(#[from] DistillError),
}

impl ExperimentError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| ExperimentError::Io { path, source }
    }
}

/// Reads a config file. Relative paths inside it resolve against its
/// directory.
pub fn load_config(path: &std::path::Path) -> Result<ExperimentConfig, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(ExperimentError::io(path))?;
    serde_json::from_str(&text).map_err(|source| ExperimentError::ConfigParse {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn configs_round_trip() {
        for kind in [
            "logit-curves",
            "overlap-map",
            "flops",
            "train",
            "margin-sweep",
            "two-stage",
            "distill",
            "eval",
        ] {
            let cfg = ExperimentConfig {
                seed: 3,
                out: None,
                experiment: Experiment::default_for(kind).unwrap(),
            };
            let text = serde_json::to_string(&cfg).unwrap();
            assert!(text.contains(&format!(r#""kind":"{kind}""#)), "{text}");
            let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
            assert_eq!(back, cfg, "{kind}");
        }
    }

    #[test]
    fn minimal_train_config_uses_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"kind":"train","seed":5,"steps":10,"loss":{"variant":"li-arcface","m":0.4}}"#,
        )
        .unwrap();
        let Experiment::Train(t) = cfg.experiment else { panic!("wrong kind") };
        assert_eq!(t.optim, OptimConfig::default());
        assert_eq!(t.loss.s, 64.0);
    }

    #[test]
    fn sweep_margins_default_and_unknown_fields_rejected() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"kind":"margin-sweep","seed":1,"steps":10,"loss":{"variant":"arcface","m":0.5}}"#,
        )
        .unwrap();
        let Experiment::MarginSweep(s) = cfg.experiment else { panic!("wrong kind") };
        assert_eq!(s.margins, default_margins());
        let bad = serde_json::from_str::<ExperimentConfig>(
            r#"{"kind":"train","seed":1,"steps":10,"loss":{"variant":"arcface","m":0.5},"stepz":3}"#,
        );
        assert!(bad.is_err());
        let no_seed = serde_json::from_str::<ExperimentConfig>(r#"{"kind":"flops"}"#);
        assert!(no_seed.is_err());
    }
}
