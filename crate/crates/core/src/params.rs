//! Named parameter storage and the layer descriptors that reference it.
//!
//! Blocks never own tensors. They hold [`ParamId`]s into a [`ParamStore`],
//! which keeps every trainable tensor and running statistic of a network
//! under a unique hierarchical name such as
//! `stack1/hg/level2/up/conv1/weight`.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{HgError, Result};
use crate::kernels::BN_MOMENTUM;
use crate::tensor::{ConvSpec, Real, Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable tensor, updated by the optimizer.
    Trainable,
    /// Running statistic, updated by training-mode forward passes.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor4<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

/// Per-channel batch statistics produced by one training-mode batch-norm.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance.
    pub batch_var: Vec<T>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: String, kind: ParamKind, tensor: Tensor4<T>) -> Result<ParamId> {
        if self.index.contains_key(&name) {
            return Err(HgError::config(format!("duplicate parameter name {name}")));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        let requires_grad = kind == ParamKind::Trainable;
        self.entries.push(ParamEntry {
            name,
            kind,
            tensor: tensor.with_requires_grad(requires_grad),
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor4<T> {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor4<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|i| ParamId(*i))
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(i, _)| ParamId(i))
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.clear_grad();
        }
    }

    /// Folds a batch of running-statistic updates into the buffers:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<T>]) {
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        for u in updates {
            for (r, b) in self.entries[u.running_mean.0]
                .tensor
                .data_mut()
                .iter_mut()
                .zip(&u.batch_mean)
            {
                *r = keep * *r + m * *b;
            }
            for (r, b) in self.entries[u.running_var.0]
                .tensor
                .data_mut()
                .iter_mut()
                .zip(&u.batch_var)
            {
                *r = keep * *r + m * *b;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    tensor: e.tensor.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// A convolution whose weight and optional bias live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub name: String,
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl ConvLayer {
    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BnLayer {
    pub name: String,
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BnLayer {
    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }
}

/// Allocates and initializes parameters under a name prefix.
///
/// Convolution weights are drawn from N(0, 2/fan_in) with fan_in =
/// (in_channels/groups)·kh·kw; biases and batch-norm shifts start at zero,
/// batch-norm scales at one, running variances at one.
pub struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Init<'_, T> {
        let prefix = self.path(name);
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}/{}", self.prefix, name)
        }
    }

    pub fn conv(&mut self, name: &str, spec: ConvSpec) -> Result<ConvLayer> {
        spec.validate()?;
        let layer = self.path(name);
        let ws = spec.weight_shape();
        let fan_in = (ws.c * ws.h * ws.w) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt())
            .map_err(|e| HgError::config(format!("bad init distribution: {e}")))?;
        let data: Vec<T> = (0..ws.numel())
            .map(|_| T::of(normal.sample(&mut *self.rng)))
            .collect();
        let weight = self.store.insert(
            format!("{layer}/weight"),
            ParamKind::Trainable,
            Tensor4::from_vec(ws, data)?,
        )?;
        let bias = if spec.has_bias {
            Some(self.store.insert(
                format!("{layer}/bias"),
                ParamKind::Trainable,
                Tensor4::zeros(Shape4::new(1, spec.out_channels, 1, 1)),
            )?)
        } else {
            None
        };
        Ok(ConvLayer {
            name: layer,
            spec,
            weight,
            bias,
        })
    }

    pub fn bn(&mut self, name: &str, channels: usize) -> Result<BnLayer> {
        let layer = self.path(name);
        let s = Shape4::new(1, channels, 1, 1);
        let gamma = self
            .store
            .insert(format!("{layer}/gamma"), ParamKind::Trainable, Tensor4::ones(s))?;
        let beta = self
            .store
            .insert(format!("{layer}/beta"), ParamKind::Trainable, Tensor4::zeros(s))?;
        let running_mean = self.store.insert(
            format!("{layer}/running_mean"),
            ParamKind::Buffer,
            Tensor4::zeros(s),
        )?;
        let running_var = self.store.insert(
            format!("{layer}/running_var"),
            ParamKind::Buffer,
            Tensor4::ones(s),
        )?;
        Ok(BnLayer {
            name: layer,
            channels,
            gamma,
            beta,
            running_mean,
            running_var,
        })
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
