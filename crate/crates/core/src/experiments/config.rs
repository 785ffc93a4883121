use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::distill::DistillSpec;
use crate::losses::MarginLossSpec;

/// One experiment: the kind-specific settings plus the master seed every
/// random stream is derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(flatten)]
    pub experiment: Experiment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Experiment {
    LogitCurves(LogitCurvesConfig),
    OverlapMap(OverlapMapConfig),
    Flops(FlopsConfig),
    Train(TrainExperiment),
    MarginSweep(MarginSweepConfig),
    TwoStage(TwoStageConfig),
    Distill(DistillExperiment),
    Eval(EvalConfig),
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::LogitCurves(_) => "logit-curves",
            Experiment::OverlapMap(_) => "overlap-map",
            Experiment::Flops(_) => "flops",
            Experiment::Train(_) => "train",
            Experiment::MarginSweep(_) => "margin-sweep",
            Experiment::TwoStage(_) => "two-stage",
            Experiment::Distill(_) => "distill",
            Experiment::Eval(_) => "eval",
        }
    }

    /// Built-in settings for a kind, used when no config file is given.
    pub fn default_for(kind: &str) -> Option<Experiment> {
        Some(match kind {
            "logit-curves" => Experiment::LogitCurves(LogitCurvesConfig::default()),
            "overlap-map" => Experiment::OverlapMap(OverlapMapConfig::default()),
            "flops" => Experiment::Flops(FlopsConfig::default()),
            "train" => Experiment::Train(TrainExperiment::default()),
            "margin-sweep" => Experiment::MarginSweep(MarginSweepConfig::default()),
            "two-stage" => Experiment::TwoStage(TwoStageConfig::default()),
            "distill" => Experiment::Distill(DistillExperiment::default()),
            "eval" => Experiment::Eval(EvalConfig::default()),
            _ => return None,
        })
    }
}

fn s64(loss: fn(f64, f64) -> MarginLossSpec, m: f64) -> MarginLossSpec {
    loss(64.0, m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogitCurvesConfig {
    pub losses: Vec<MarginLossSpec>,
    pub points: usize,
}

fn default_curve_points() -> usize {
    10_001
}

impl Default for LogitCurvesConfig {
    fn default() -> Self {
        Self {
            losses: vec![
                MarginLossSpec::n_softmax(64.0),
                s64(MarginLossSpec::cosface, 0.35),
                s64(MarginLossSpec::arcface, 0.5),
                s64(MarginLossSpec::li_arcface, 0.0),
                s64(MarginLossSpec::li_arcface, 0.4),
            ],
            points: default_curve_points(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverlapMapConfig {
    pub losses: Vec<MarginLossSpec>,
    pub grid: usize,
}

fn default_grid() -> usize {
    1000
}

impl Default for OverlapMapConfig {
    fn default() -> Self {
        Self {
            losses: vec![
                s64(MarginLossSpec::cosface, 0.35),
                s64(MarginLossSpec::arcface, 0.5),
                s64(MarginLossSpec::li_arcface, 0.4),
            ],
            grid: default_grid(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopsConfig {
    /// Architecture JSON; the built-in table when absent. Relative paths
    /// resolve against the config file's directory.
    #[serde(default)]
    pub arch: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SphereData {
    pub classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlyphData {
    pub classes: usize,
    pub size: usize,
    pub samples_per_class: usize,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum DataConfig {
    Sphere(SphereData),
    Glyphs(GlyphData),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Sphere(SphereData {
            classes: 50,
            dim: 8,
            samples_per_class: 20,
            noise_sigma: 0.1,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Dense → PReLU → Dense on sphere features.
    Dense { hidden: usize, embedding: usize },
    /// Width-scaled architecture table on glyph images.
    Arch {
        #[serde(default)]
        arch: Option<PathBuf>,
        width_mult: f64,
        /// Inserts batch norm after every convolution of the trained copy.
        #[serde(default = "default_true")]
        batch_norm: bool,
    },
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Dense {
            hidden: 64,
            embedding: 64,
        }
    }
}

/// Optimizer settings; the step count and loss come from the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub wd_mult: BTreeMap<String, f64>,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_schedule: vec![(0, 0.1)],
            momentum: 0.9,
            weight_decay: 5e-4,
            wd_mult: BTreeMap::from([("embedding".to_string(), 10.0)]),
            batch_size: 128,
        }
    }
}

/// Held-out verification measured during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Steps between measurements; 0 measures only at the end.
    pub every: usize,
    pub held_out_per_class: usize,
    /// Positive pairs; the same number of negatives is drawn.
    pub pairs: usize,
    pub folds: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            every: 250,
            held_out_per_class: 6,
            pairs: 300,
            folds: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainExperiment {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub loss: MarginLossSpec,
    pub steps: usize,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

impl Default for TrainExperiment {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: s64(MarginLossSpec::li_arcface, 0.4),
            steps: 2000,
            optim: OptimConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginSweepConfig {
    /// The swept loss; its `m` is replaced by each grid value.
    #[serde(flatten)]
    pub base: TrainExperiment,
    #[serde(default = "default_margins")]
    pub margins: Vec<f64>,
}

pub fn default_margins() -> Vec<f64> {
    vec![0.35, 0.40, 0.45, 0.50]
}

impl Default for MarginSweepConfig {
    fn default() -> Self {
        Self {
            base: TrainExperiment::default(),
            margins: default_margins(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub loss: MarginLossSpec,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoStageConfig {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: StageConfig {
                loss: MarginLossSpec::n_softmax(64.0),
                steps: 500,
            },
            finetune: StageConfig {
                loss: s64(MarginLossSpec::arcface, 0.5),
                steps: 1500,
            },
            optim: OptimConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub model: ModelConfig,
    pub loss: MarginLossSpec,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillExperiment {
    #[serde(flatten)]
    pub student: TrainExperiment,
    pub teacher: TeacherConfig,
    pub distill: DistillSpec,
}

impl Default for DistillExperiment {
    fn default() -> Self {
        Self {
            student: TrainExperiment {
                model: ModelConfig::Dense {
                    hidden: 16,
                    embedding: 64,
                },
                steps: 1000,
                ..TrainExperiment::default()
            },
            teacher: TeacherConfig {
                model: ModelConfig::Dense {
                    hidden: 128,
                    embedding: 64,
                },
                loss: s64(MarginLossSpec::li_arcface, 0.4),
                steps: 2000,
            },
            distill: DistillSpec {
                mode: crate::distill::DistillMode::CosineGap,
                weight: 1.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EmbeddingSource {
    /// Synthetic sphere clusters used directly as embeddings.
    Sphere(SphereData),
    /// A `label,f0,f1,…` file; `#` lines are skipped.
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsConfig {
    pub n_pos: usize,
    pub n_neg: usize,
    pub folds: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifyConfig {
    /// Samples per identity enrolled in the gallery; the rest are probes.
    pub gallery_per_class: usize,
    /// Random unit vectors appended after the gallery.
    pub distractors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub source: EmbeddingSource,
    pub pairs: PairsConfig,
    pub fars: Vec<f64>,
    /// `null` skips identification.
    pub identify: Option<IdentifyConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            source: EmbeddingSource::Sphere(SphereData {
                classes: 50,
                dim: 8,
                samples_per_class: 10,
                noise_sigma: 0.3,
            }),
            pairs: PairsConfig {
                n_pos: 600,
                n_neg: 600,
                folds: 10,
            },
            fars: vec![1e-3, 1e-2, 1e-1],
            identify: Some(IdentifyConfig {
                gallery_per_class: 1,
                distractors: 1000,
            }),
        }
    }
}
