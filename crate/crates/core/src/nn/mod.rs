//! Minimal trainable network primitives, SGD, and the training loop.
//!
//! Tensors are `ArrayD<f64>` with the batch on axis 0; image tensors use
//! `N × C × H × W`. A forward pass returns a [`Cache`] that must be handed
//! back to `backward` on the same module before its parameters change.

mod primitive;
mod probe;
mod sequential;
mod sgd;
mod train;

pub use primitive::{conv_out, Primitive, PrimitiveSpec, BN_EPS, BN_MOMENTUM, PRELU_INIT};
pub use probe::{adversarial_gradient_probe, PROBE_STEP};
pub use sequential::{dense_net, Sequential};
pub use sgd::{sgd_step, LossStage, SgdState, TrainConfig};
pub use train::{
    embed, evaluate_accuracy, train, train_with, ClassHead, Dataset, Distillation, HeadOutput,
    TrainHistory, TrainHooks, TrainRecord, TrainSummary,
};

use std::any::Any;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::ArrayD;
use thiserror::Error;

use crate::losses::LossError;

pub type Tensor = ArrayD<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {layer}: {detail}")]
    ShapeMismatch { layer: &'static str, detail: String },
    #[error("cache does not belong to this module or its parameters changed since forward")]
    StaleCache,
    #[error("non-finite gradient in parameter group {0}")]
    NonFiniteGradient(String),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Loss(#[from] LossError),
}

pub(crate) fn shape_err(layer: &'static str, detail: impl Into<String>) -> NnError {
    NnError::ShapeMismatch {
        layer,
        detail: detail.into(),
    }
}

/// A named trainable tensor. `group` selects the weight-decay multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, group: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            group: group.into(),
            value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

/// Identity and parameter version of a module, used to reject stale caches.
#[derive(Debug)]
pub struct ModuleId {
    uid: u64,
    version: u64,
}

impl ModuleId {
    pub fn new() -> Self {
        Self {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        }
    }

    /// Marks the parameters as (potentially) modified.
    pub fn bump(&mut self) {
        self.version += 1;
    }

    pub fn cache<T: Any>(&self, data: T) -> Cache {
        Cache {
            owner: self.uid,
            version: self.version,
            data: Box::new(data),
        }
    }

    pub fn open<'c, T: Any>(&self, cache: &'c Cache) -> Result<&'c T, NnError> {
        if cache.owner != self.uid || cache.version != self.version {
            return Err(NnError::StaleCache);
        }
        cache.data.downcast_ref::<T>().ok_or(NnError::StaleCache)
    }
}

impl Default for ModuleId {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ModuleId {
    /// A clone is a different module: caches never transfer between them.
    fn clone(&self) -> Self {
        Self::new()
    }
}

/// Opaque per-forward state consumed by `backward`.
pub struct Cache {
    owner: u64,
    version: u64,
    data: Box<dyn Any>,
}

impl std::fmt::Debug for Cache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cache")
            .field("owner", &self.owner)
            .field("version", &self.version)
            .finish_non_exhaustive()
    }
}

pub trait Module {
    fn forward(&self, input: &Tensor, mode: Mode) -> Result<(Tensor, Cache), NnError>;

    /// Input gradient plus one gradient per entry of [`Module::params`], in
    /// the same order.
    fn backward(&self, cache: &Cache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>), NnError>;

    fn params(&self) -> Vec<&Param>;

    /// Mutable parameter access. Invalidates outstanding caches.
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn box_clone(&self) -> Box<dyn Module>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

impl Clone for Box<dyn Module> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}
