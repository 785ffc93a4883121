use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NnError, Param, Tensor};
use crate::losses::MarginLossSpec;

/// The loss used for steps `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossStage {
    pub loss: MarginLossSpec,
    pub start: usize,
    pub end: usize,
}

/// SGD hyperparameters and the staged loss schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// `(first step, learning rate)` pairs; the first entry must start at 0.
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Per-group multiplier on `weight_decay`; groups not listed use 1.
    #[serde(default)]
    pub wd_mult: BTreeMap<String, f64>,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub loss_stages: Vec<LossStage>,
}

impl TrainConfig {
    /// Momentum 0.9, weight decay 5e-4 with ×10 on the embedding layer,
    /// constant learning rate 0.1, batch 128.
    pub fn single_stage(loss: MarginLossSpec, max_steps: usize, seed: u64) -> Self {
        Self {
            lr_schedule: vec![(0, 0.1)],
            momentum: 0.9,
            weight_decay: 5e-4,
            wd_mult: BTreeMap::from([("embedding".to_string(), 10.0)]),
            batch_size: 128,
            max_steps,
            seed,
            loss_stages: vec![LossStage {
                loss,
                start: 0,
                end: max_steps,
            }],
        }
    }

    /// Replaces the loss schedule with consecutive stages of the given lengths.
    pub fn with_stages(mut self, stages: &[(MarginLossSpec, usize)]) -> Self {
        let mut start = 0;
        self.loss_stages = stages
            .iter()
            .map(|&(loss, len)| {
                let stage = LossStage {
                    loss,
                    start,
                    end: start + len,
                };
                start += len;
                stage
            })
            .collect();
        self.max_steps = start;
        self
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |msg: String| Err(NnError::ConfigInvalid(msg));
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be ≥ 0, got {}", self.weight_decay));
        }
        if let Some((g, v)) = self.wd_mult.iter().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
            return bad(format!("wd_mult for {g} must be ≥ 0, got {v}"));
        }
        if self.batch_size == 0 {
            return bad("batch size must be ≥ 1".into());
        }
        match self.lr_schedule.first() {
            Some((0, _)) => {}
            _ => return bad("learning-rate schedule must start at step 0".into()),
        }
        if self.lr_schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return bad("learning-rate schedule steps must increase".into());
        }
        if let Some((_, lr)) = self.lr_schedule.iter().find(|(_, lr)| !(*lr > 0.0 && lr.is_finite())) {
            return bad(format!("learning rates must be > 0, got {lr}"));
        }
        let mut next = 0;
        for stage in &self.loss_stages {
            if stage.start != next || stage.end <= stage.start {
                return bad(format!(
                    "loss stages must tile [0, {}) without gaps or overlap; stage {}..{} found where {next} expected",
                    self.max_steps, stage.start, stage.end
                ));
            }
            stage.loss.validate()?;
            next = stage.end;
        }
        if next != self.max_steps {
            return bad(format!(
                "loss stages cover [0, {next}) but max_steps is {}",
                self.max_steps
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr_schedule
            .iter()
            .take_while(|(s, _)| *s <= step)
            .last()
            .map_or(self.lr_schedule[0].1, |(_, lr)| *lr)
    }

    pub fn stage_at(&self, step: usize) -> Option<&LossStage> {
        self.loss_stages.iter().find(|s| (s.start..s.end).contains(&step))
    }

    pub fn wd_mult_for(&self, group: &str) -> f64 {
        self.wd_mult.get(group).copied().unwrap_or(1.0)
    }
}

/// Momentum buffers and the step counter that indexes the lr schedule.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    pub step: usize,
    velocities: Vec<Tensor>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn velocities(&self) -> &[Tensor] {
        &self.velocities
    }
}

/// One SGD step with coupled weight decay:
/// `g' = g + wd·mult(group)·w`, `v ← μ v + g'`, `w ← w − lr·v`.
///
/// Non-finite gradients are reported before anything is modified.
pub fn sgd_step(
    params: &mut [&mut Param],
    grads: &[Tensor],
    config: &TrainConfig,
    state: &mut SgdState,
) -> Result<(), NnError> {
    if params.len() != grads.len() {
        return Err(NnError::ConfigInvalid(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(NnError::ShapeMismatch {
                layer: "sgd",
                detail: format!("{}: {:?} vs {:?}", p.name, p.value.shape(), g.shape()),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteGradient(p.group.clone()));
        }
    }
    if state.velocities.is_empty() {
        state.velocities = params.iter().map(|p| Tensor::zeros(p.value.raw_dim())).collect();
    }
    let lr = config.lr_at(state.step);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocities) {
        let decay = config.weight_decay * config.wd_mult_for(&p.group);
        ndarray::Zip::from(&mut p.value)
            .and(g)
            .and(v)
            .for_each(|w, &g, v| {
                let eff = g + decay * *w;
                *v = config.momentum * *v + eff;
                *w -= lr * *v;
            });
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::MarginLossSpec;
    use ndarray::arr1;

    fn config(lr: f64, momentum: f64, wd: f64, mult: f64) -> TrainConfig {
        let mut c = TrainConfig::single_stage(MarginLossSpec::n_softmax(64.0), 10, 0);
        c.lr_schedule = vec![(0, lr)];
        c.momentum = momentum;
        c.weight_decay = wd;
        c.wd_mult = BTreeMap::from([("embedding".into(), mult)]);
        c
    }

    fn scalar(v: f64, group: &str) -> Param {
        Param::new("w", group, arr1(&[v]).into_dyn())
    }

    #[test]
    fn vanilla_step() {
        let mut p = scalar(1.0, "backbone");
        let mut state = SgdState::new();
        sgd_step(&mut [&mut p], &[arr1(&[0.1]).into_dyn()], &config(0.1, 0.0, 0.0, 1.0), &mut state).unwrap();
        assert!((p.value[[0]] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_decays_velocity_only() {
        let cfg = config(0.1, 0.9, 0.0, 1.0);
        let mut p = scalar(1.0, "backbone");
        let mut state = SgdState::new();
        sgd_step(&mut [&mut p], &[arr1(&[1.0]).into_dyn()], &cfg, &mut state).unwrap();
        let w = p.value[[0]];
        let v = state.velocities()[0][[0]];
        sgd_step(&mut [&mut p], &[arr1(&[0.0]).into_dyn()], &cfg, &mut state).unwrap();
        assert!((state.velocities()[0][[0]] - 0.9 * v).abs() < 1e-15);
        // Parameters still move by the decayed velocity; with zero velocity they
        // would not.
        assert!((p.value[[0]] - (w - 0.1 * 0.9 * v)).abs() < 1e-15);

        let mut q = scalar(1.0, "backbone");
        let mut fresh = SgdState::new();
        sgd_step(&mut [&mut q], &[arr1(&[0.0]).into_dyn()], &cfg, &mut fresh).unwrap();
        assert_eq!(q.value[[0]], 1.0);
    }

    #[test]
    fn weight_decay_multiplier() {
        let mut p = scalar(1.0, "embedding");
        let mut state = SgdState::new();
        sgd_step(&mut [&mut p], &[arr1(&[0.0]).into_dyn()], &config(0.1, 0.0, 5e-4, 10.0), &mut state).unwrap();
        assert!((p.value[[0]] - 0.9995).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_reported_untouched() {
        let mut p = scalar(1.0, "backbone");
        let mut state = SgdState::new();
        let err = sgd_step(
            &mut [&mut p],
            &[arr1(&[f64::NAN]).into_dyn()],
            &config(0.1, 0.9, 0.0, 1.0),
            &mut state,
        )
        .unwrap_err();
        assert_eq!(err, NnError::NonFiniteGradient("backbone".into()));
        assert_eq!(p.value[[0]], 1.0);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn schedule_and_stage_lookup() {
        let mut c = config(0.1, 0.9, 0.0, 1.0).with_stages(&[
            (MarginLossSpec::n_softmax(64.0), 5),
            (MarginLossSpec::arcface(64.0, 0.5), 10),
        ]);
        c.lr_schedule = vec![(0, 0.1), (4, 0.01), (8, 0.001)];
        c.validate().unwrap();
        assert_eq!(c.lr_at(0), 0.1);
        assert_eq!(c.lr_at(4), 0.01);
        assert_eq!(c.lr_at(100), 0.001);
        assert_eq!(c.stage_at(4).unwrap().start, 0);
        assert_eq!(c.stage_at(5).unwrap().start, 5);
        assert!(c.stage_at(15).is_none());
        assert_eq!(c.max_steps, 15);
    }

    #[test]
    fn invalid_configs() {
        let base = config(0.1, 0.9, 5e-4, 10.0);
        let mut c = base.clone();
        c.momentum = 1.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.loss_stages[0].start = 1;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.lr_schedule = vec![(1, 0.1)];
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.wd_mult.insert("x".into(), -1.0);
        assert!(c.validate().is_err());
        let mut c = base;
        c.max_steps = 11;
        assert!(c.validate().is_err());
    }
}
