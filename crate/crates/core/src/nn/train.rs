use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Ix2, IxDyn};
use serde::Serialize;

use super::{sgd_step, Mode, Module, NnError, Param, Primitive, PrimitiveSpec, SgdState, Tensor, TrainConfig};
use crate::distill::{distill_loss_grad, DistillSpec};
use crate::format::shortest;
use crate::losses::{check_labels, cross_entropy_row, loss_forward_backward, LossError, LossVariant, MarginLossSpec};
use crate::rng::SplitMix64;
use crate::sphere::ZERO_NORM;

/// Stream key for per-epoch shuffling.
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const EVAL_CHUNK: usize = 256;

/// Inputs with the sample on axis 0, and one label per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self, NnError> {
        if inputs.ndim() < 2 || inputs.shape()[0] != labels.len() {
            return Err(NnError::ConfigInvalid(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        check_labels(&labels, classes)?;
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.inputs.select(Axis(0), indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Class centers `W` (`d × n`) plus a bias used only by the plain softmax
/// head. Both live in parameter group `classifier`.
#[derive(Debug, Clone)]
pub struct ClassHead {
    linear: Primitive,
}

/// Loss, gradients and batch metrics from [`ClassHead::forward_loss`].
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub loss: f64,
    pub grad_embedding: Array2<f64>,
    /// Gradients for `[weight, bias]`.
    pub grads: Vec<Tensor>,
    pub correct: usize,
    pub mean_target_angle: f64,
}

impl ClassHead {
    /// Centers drawn from a unit-variance normal and normalized; zero bias.
    pub fn new(embedding: usize, classes: usize, rng: &mut SplitMix64) -> Result<Self, NnError> {
        let spec = PrimitiveSpec::LinearHead {
            inputs: embedding,
            outputs: classes,
        };
        spec.validate()?;
        let mut w = Array2::from_shape_fn((embedding, classes), |_| rng.gaussian());
        for mut col in w.axis_iter_mut(Axis(1)) {
            let n = col.dot(&col).sqrt().max(ZERO_NORM);
            col.mapv_inplace(|v| v / n);
        }
        let params = vec![
            Param::new("weight", "classifier", w.into_dyn()),
            Param::new("bias", "classifier", Tensor::zeros(IxDyn(&[classes]))),
        ];
        Primitive::with_params(spec, params).map(|linear| Self { linear })
    }

    pub fn weight(&self) -> ArrayView2<'_, f64> {
        self.linear.params()[0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("rank 2")
    }

    pub fn embedding_dim(&self) -> usize {
        self.weight().nrows()
    }

    pub fn classes(&self) -> usize {
        self.weight().ncols()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.linear.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.linear.params_mut()
    }

    fn cosines(&self, emb: ArrayView2<f64>) -> Array2<f64> {
        let unit = |m: ArrayView2<f64>| {
            let mut m = m.to_owned();
            for mut r in m.axis_iter_mut(Axis(0)) {
                let n = r.dot(&r).sqrt().max(ZERO_NORM);
                r.mapv_inplace(|v| v / n);
            }
            m
        };
        unit(emb).dot(&unit(self.weight().t()).t())
    }

    /// Class scores used for prediction: raw logits for the plain softmax
    /// head, cosines for every angular variant.
    pub fn scores(&self, variant: LossVariant, emb: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        if variant == LossVariant::Softmax {
            let (y, _) = self.linear.forward(&emb.to_owned().into_dyn(), Mode::Eval)?;
            Ok(y.into_dimensionality::<Ix2>().expect("rank 2"))
        } else {
            Ok(self.cosines(emb))
        }
    }

    pub fn predict(&self, variant: LossVariant, emb: ArrayView2<f64>) -> Result<Vec<usize>, NnError> {
        Ok(self
            .scores(variant, emb)?
            .axis_iter(Axis(0))
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn forward_loss(
        &self,
        spec: &MarginLossSpec,
        emb: ArrayView2<f64>,
        labels: &[usize],
    ) -> Result<HeadOutput, NnError> {
        let batch = emb.nrows();
        let predictions = self.predict(spec.variant, emb)?;
        let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
        if spec.variant == LossVariant::Softmax {
            if emb.iter().any(|v| !v.is_finite()) {
                return Err(LossError::NonFiniteInput("embeddings").into());
            }
            check_labels(labels, self.classes())?;
            let (logits, cache) = self.linear.forward(&emb.to_owned().into_dyn(), Mode::Train)?;
            let logits = logits.into_dimensionality::<Ix2>().expect("rank 2");
            let mut grad = Array2::zeros(logits.raw_dim());
            let mut total = 0.0;
            for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
                let (nll, _, dz) = cross_entropy_row(row.as_slice().expect("contiguous"), labels[i]);
                total += nll;
                for (j, g) in dz.into_iter().enumerate() {
                    grad[[i, j]] = g / batch as f64;
                }
            }
            let (gx, grads) = self.linear.backward(&cache, &grad.into_dyn())?;
            let cos = self.cosines(emb);
            let mean_angle = labels
                .iter()
                .enumerate()
                .map(|(i, &y)| cos[[i, y]].clamp(-1.0, 1.0).acos())
                .sum::<f64>()
                / batch as f64;
            return Ok(HeadOutput {
                loss: total / batch as f64,
                grad_embedding: gx.into_dimensionality::<Ix2>().expect("rank 2"),
                grads,
                correct,
                mean_target_angle: mean_angle,
            });
        }
        let out = loss_forward_backward(spec, emb, self.weight(), labels)?;
        let mean_angle = out.target_angles.iter().map(|a| a.radians()).sum::<f64>() / batch as f64;
        Ok(HeadOutput {
            loss: out.loss,
            grad_embedding: out.grad_x,
            grads: vec![out.grad_w.into_dyn(), Tensor::zeros(IxDyn(&[self.classes()]))],
            correct,
            mean_target_angle: mean_angle,
        })
    }
}

/// Fixed teacher embeddings, one row per dataset sample.
#[derive(Debug, Clone, Copy)]
pub struct Distillation<'a> {
    pub spec: DistillSpec,
    pub teacher: ArrayView2<'a, f64>,
}

/// Optional extras for [`train_with`].
pub struct TrainHooks<'a, M> {
    pub distill: Option<Distillation<'a>>,
    /// Called before every step with the step index and once after the
    /// last completed step with the number of steps taken.
    #[allow(clippy::type_complexity)]
    pub observer: Option<&'a mut dyn FnMut(usize, &M, &ClassHead)>,
}

impl<M> Default for TrainHooks<'_, M> {
    fn default() -> Self {
        Self {
            distill: None,
            observer: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub mean_target_angle: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<TrainRecord>,
    pub divergence_step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub final_batch_acc: Option<f64>,
    pub final_mean_target_angle: Option<f64>,
    pub diverged: bool,
    pub divergence_step: Option<usize>,
}

impl TrainHistory {
    pub fn diverged(&self) -> bool {
        self.divergence_step.is_some()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,train_acc,mean_target_angle,diverged\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step,
                shortest(r.loss),
                shortest(r.train_acc),
                shortest(r.mean_target_angle),
                r.diverged
            ));
        }
        out
    }

    pub fn summary(&self) -> TrainSummary {
        let last = self.records.last();
        let finite = |v: f64| v.is_finite().then_some(v);
        TrainSummary {
            steps: self.records.len(),
            final_loss: last.and_then(|r| finite(r.loss)),
            final_batch_acc: last.and_then(|r| finite(r.train_acc)),
            final_mean_target_angle: last.and_then(|r| finite(r.mean_target_angle)),
            diverged: self.diverged(),
            divergence_step: self.divergence_step,
        }
    }
}

/// Endless sequence of per-epoch Fisher–Yates permutations.
struct BatchStream {
    rng: SplitMix64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    fn new(len: usize, seed: u64) -> Self {
        Self {
            rng: SplitMix64::new(seed).derive(&[SHUFFLE_STREAM]),
            order: (0..len).collect(),
            pos: len,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos == self.order.len() {
                self.order.iter_mut().enumerate().for_each(|(i, v)| *v = i);
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

fn as_matrix(t: Tensor, what: &'static str) -> Result<Array2<f64>, NnError> {
    t.into_dimensionality::<Ix2>().map_err(|e| NnError::ShapeMismatch {
        layer: what,
        detail: format!("expected an N × d embedding: {e}"),
    })
}

pub fn train<M: Module>(
    model: &mut M,
    head: &mut ClassHead,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<TrainHistory, NnError> {
    train_with(model, head, data, config, TrainHooks::default())
}

/// Runs `config.max_steps` SGD steps over the staged losses. Stops at the
/// first non-finite loss or gradient, or an embedding that collapses to
/// zero, and flags that step as diverged.
pub fn train_with<M: Module>(
    model: &mut M,
    head: &mut ClassHead,
    data: &Dataset,
    config: &TrainConfig,
    mut hooks: TrainHooks<'_, M>,
) -> Result<TrainHistory, NnError> {
    config.validate()?;
    if data.is_empty() {
        return Err(NnError::ConfigInvalid("dataset is empty".into()));
    }
    if data.classes != head.classes() {
        return Err(NnError::ConfigInvalid(format!(
            "dataset has {} classes, head has {}",
            data.classes,
            head.classes()
        )));
    }
    if let Some(d) = &hooks.distill {
        d.spec
            .validate()
            .map_err(|e| NnError::ConfigInvalid(format!("distillation: {e}")))?;
        if d.teacher.nrows() != data.len() || d.teacher.ncols() != head.embedding_dim() {
            return Err(NnError::ConfigInvalid(format!(
                "teacher embeddings are {:?}, expected {} × {}",
                d.teacher.dim(),
                data.len(),
                head.embedding_dim()
            )));
        }
    }

    let mut batches = BatchStream::new(data.len(), config.seed);
    let mut state = SgdState::new();
    let mut history = TrainHistory::default();
    for step in 0..config.max_steps {
        if let Some(obs) = hooks.observer.as_mut() {
            obs(step, model, head);
        }
        let stage = config.stage_at(step).expect("validated stages tile all steps");
        let indices = batches.next_batch(config.batch_size);
        let (x, labels) = data.batch(&indices);
        let (emb, cache) = model.forward(&x, Mode::Train)?;
        let emb = as_matrix(emb, "model output")?;

        let diverge = |history: &mut TrainHistory, loss: f64, acc: f64, angle: f64| {
            history.records.push(TrainRecord {
                step,
                loss,
                train_acc: acc,
                mean_target_angle: angle,
                diverged: true,
            });
            history.divergence_step = Some(step);
        };

        let out = match head.forward_loss(&stage.loss, emb.view(), &labels) {
            Ok(out) => out,
            Err(NnError::Loss(LossError::NonFiniteInput(_) | LossError::ZeroVector { .. })) => {
                diverge(&mut history, f64::NAN, f64::NAN, f64::NAN);
                break;
            }
            Err(e) => return Err(e),
        };
        let acc = out.correct as f64 / labels.len() as f64;
        let mut loss = out.loss;
        let mut grad_emb = out.grad_embedding;
        if let Some(d) = &hooks.distill {
            let teacher = d.teacher.select(Axis(0), &indices);
            let (dl, dg) = distill_loss_grad(&d.spec, emb.view(), teacher.view())
                .map_err(|e| NnError::ConfigInvalid(format!("distillation: {e}")))?;
            loss += d.spec.weight * dl;
            grad_emb.scaled_add(d.spec.weight, &dg);
        }
        if !loss.is_finite() {
            diverge(&mut history, loss, acc, out.mean_target_angle);
            break;
        }

        let (_, mut grads) = model.backward(&cache, &grad_emb.into_dyn())?;
        grads.extend(out.grads);
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            diverge(&mut history, loss, acc, out.mean_target_angle);
            break;
        }
        let mut params = model.params_mut();
        params.extend(head.params_mut());
        sgd_step(&mut params, &grads, config, &mut state)?;
        history.records.push(TrainRecord {
            step,
            loss,
            train_acc: acc,
            mean_target_angle: out.mean_target_angle,
            diverged: false,
        });
    }
    if let Some(obs) = hooks.observer.as_mut() {
        let done = history.records.len() - usize::from(history.diverged());
        obs(done, model, head);
    }
    Ok(history)
}

/// Eval-mode embeddings for every sample, in order.
pub fn embed<M: Module>(model: &M, inputs: &Tensor) -> Result<Array2<f64>, NnError> {
    let n = inputs.shape()[0];
    let mut parts = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let chunk = inputs.slice_axis(Axis(0), (start..end).into()).to_owned();
        let (y, _) = model.forward(&chunk, Mode::Eval)?;
        parts.push(as_matrix(y, "model output")?);
    }
    if parts.is_empty() {
        return Ok(Array2::zeros((0, 0)));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(concatenate(Axis(0), &views).expect("equal widths"))
}

/// Fraction of samples whose predicted class matches the label.
pub fn evaluate_accuracy<M: Module>(
    model: &M,
    head: &ClassHead,
    data: &Dataset,
    variant: LossVariant,
) -> Result<f64, NnError> {
    let emb = embed(model, &data.inputs)?;
    let pred = head.predict(variant, emb.slice(s![.., ..]))?;
    let correct = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.len().max(1) as f64)
}
