//! Parameter storage and the handful of layers the models are assembled from.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::ops::Padding;
use crate::tensor::{Real, Tape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.9;
pub const NORM_EPS: f64 = 1e-5;
pub const GROUP_NORM_GROUPS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Batch statistics in training, running statistics in evaluation.
    #[default]
    Batch,
    /// Per-sample statistics over channel groups.
    Group,
}

/// Number of groups for group normalization over `channels`: the largest
/// divisor of `channels` not exceeding [`GROUP_NORM_GROUPS`].
pub fn group_count(channels: usize) -> usize {
    (1..=GROUP_NORM_GROUPS.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

/// One forward pass: the tape plus the mode and the dropout generator.
pub struct Ctx<T: Real> {
    pub tape: Tape<T>,
    pub mode: Mode,
    rng: SeededRng,
}

impl<T: Real> Ctx<T> {
    pub fn new(mode: Mode, rng: SeededRng) -> Self {
        Self {
            tape: Tape::new(),
            mode,
            rng,
        }
    }

    pub fn train(rng: SeededRng) -> Self {
        Self::new(Mode::Train, rng)
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval, SeededRng::new(0))
    }

    /// Inverted dropout; the identity outside training or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if self.mode != Mode::Train || p <= 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let len = self.tape.value(x).len();
        let mask = (0..len)
            .map(|_| if self.rng.uniform() < p { T::zero() } else { keep })
            .collect();
        self.tape.dropout_with_mask(x, mask)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Trainable,
    /// Non-learned state such as running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq)]
struct Binding {
    tape_id: u64,
    vars: Vec<Option<Var>>,
}

/// Ordered, uniquely named parameters and buffers of one model component.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Real> {
    entries: IndexMap<String, Param<T>>,
    frozen: bool,
    binding: Option<Binding>,
}

// The tape binding is a cache and does not take part in equality.
impl<T: Real> PartialEq for ParamStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.frozen == other.frozen && self.entries == other.entries
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
            frozen: false,
            binding: None,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, role: Role) {
        let name = name.into();
        assert!(!self.entries.contains_key(&name), "duplicate parameter {name}");
        self.entries.insert(name, Param { value, role });
        self.binding = None;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn tensor(&self, name: &str) -> &Tensor<T> {
        self.get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Tensor<T> {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
            .value
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.role == Role::Trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        self.binding = None;
    }

    /// Pushes every trainable parameter onto `tape` as a leaf (tracking
    /// gradients unless frozen). Idempotent per tape.
    pub fn bind(&mut self, tape: &mut Tape<T>) {
        if self.binding.as_ref().is_some_and(|b| b.tape_id == tape.id()) {
            return;
        }
        let frozen = self.frozen;
        let vars = self
            .entries
            .values()
            .map(|p| match p.role {
                Role::Trainable => Some(tape.leaf(p.value.clone().with_requires_grad(!frozen))),
                Role::Buffer => None,
            })
            .collect();
        self.binding = Some(Binding {
            tape_id: tape.id(),
            vars,
        });
    }

    /// The tape handle of a bound trainable parameter.
    pub fn var(&self, name: &str) -> Var {
        let idx = self
            .entries
            .get_index_of(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        self.binding
            .as_ref()
            .and_then(|b| b.vars[idx])
            .unwrap_or_else(|| panic!("parameter {name} is not bound to a tape"))
    }

    /// Adds the gradients accumulated on `tape` into the parameters' buffers.
    pub fn collect_grads(&mut self, tape: &Tape<T>) {
        let Some(binding) = &self.binding else { return };
        if binding.tape_id != tape.id() || self.frozen {
            return;
        }
        for (param, var) in self.entries.values_mut().zip(&binding.vars) {
            if let Some(v) = var {
                if let Some(g) = tape.grad(*v) {
                    param.value.accumulate_grad(g);
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.entries.values_mut().for_each(|p| p.value.zero_grad());
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            role: p.role,
                        },
                    )
                })
                .collect(),
            frozen: self.frozen,
            binding: None,
        }
    }

    /// Replaces every value from `(name, tensor)` pairs; names and shapes must
    /// match exactly.
    pub fn load_values<'a>(
        &mut self,
        values: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
    ) -> Result<()> {
        let mut seen = 0;
        for (name, t) in values {
            let p = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            if p.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} does not match model shape {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
            seen += 1;
        }
        if seen != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {seen}",
                self.entries.len()
            )));
        }
        self.binding = None;
        Ok(())
    }
}

// ----- initialization -----

fn he_uniform<T: Real>(rng: &mut SeededRng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.uniform_range(-limit, limit)))
}

pub fn init_conv<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut SeededRng,
    name: &str,
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    bias: bool,
) {
    let fan_in = in_channels * kernel * kernel;
    store.insert(
        format!("{name}.weight"),
        he_uniform(rng, vec![out_channels, in_channels, kernel, kernel], fan_in),
        Role::Trainable,
    );
    if bias {
        store.insert(format!("{name}.bias"), Tensor::zeros(vec![out_channels]), Role::Trainable);
    }
}

pub fn init_depthwise<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut SeededRng,
    name: &str,
    channels: usize,
    kernel: usize,
) {
    store.insert(
        format!("{name}.weight"),
        he_uniform(rng, vec![channels, 1, kernel, kernel], kernel * kernel),
        Role::Trainable,
    );
}

pub fn init_dense<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut SeededRng,
    name: &str,
    inputs: usize,
    outputs: usize,
) {
    init_linear(store, rng, name, inputs, outputs, true);
}

pub fn init_linear<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut SeededRng,
    name: &str,
    inputs: usize,
    outputs: usize,
    bias: bool,
) {
    store.insert(
        format!("{name}.weight"),
        he_uniform(rng, vec![inputs, outputs], inputs),
        Role::Trainable,
    );
    if bias {
        store.insert(format!("{name}.bias"), Tensor::zeros(vec![outputs]), Role::Trainable);
    }
}

pub fn init_norm<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, kind: NormKind) {
    store.insert(format!("{name}.gamma"), Tensor::ones(vec![channels]), Role::Trainable);
    store.insert(format!("{name}.beta"), Tensor::zeros(vec![channels]), Role::Trainable);
    if kind == NormKind::Batch {
        store.insert(format!("{name}.running_mean"), Tensor::zeros(vec![channels]), Role::Buffer);
        store.insert(format!("{name}.running_var"), Tensor::ones(vec![channels]), Role::Buffer);
    }
}

// ----- layers -----

pub fn conv<T: Real>(
    cx: &mut Ctx<T>,
    store: &ParamStore<T>,
    name: &str,
    x: Var,
    stride: usize,
    padding: Padding,
) -> Result<Var> {
    let w = store.var(&format!("{name}.weight"));
    let bias_name = format!("{name}.bias");
    let b = store.contains(&bias_name).then(|| store.var(&bias_name));
    cx.tape.conv2d(x, w, b, stride, padding)
}

pub fn depthwise<T: Real>(
    cx: &mut Ctx<T>,
    store: &ParamStore<T>,
    name: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let w = store.var(&format!("{name}.weight"));
    cx.tape.depthwise_conv2d(x, w, stride, Padding::Same)
}

pub fn dense<T: Real>(cx: &mut Ctx<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = store.var(&format!("{name}.weight"));
    let bias_name = format!("{name}.bias");
    let b = store.contains(&bias_name).then(|| store.var(&bias_name));
    cx.tape.linear(x, w, b)
}

/// Normalization layer. Batch norm uses batch statistics (and updates the
/// running buffers) only when training an unfrozen store.
pub fn norm<T: Real>(
    cx: &mut Ctx<T>,
    store: &mut ParamStore<T>,
    name: &str,
    x: Var,
    kind: NormKind,
) -> Result<Var> {
    let gamma = store.var(&format!("{name}.gamma"));
    let beta = store.var(&format!("{name}.beta"));
    let eps = T::from_f64_lossy(NORM_EPS);
    match kind {
        NormKind::Group => {
            let groups = group_count(cx.tape.shape(x)[1]);
            cx.tape.group_norm(x, gamma, beta, groups, eps)
        }
        NormKind::Batch if cx.mode == Mode::Train && !store.is_frozen() => {
            let (y, mean, var) = cx.tape.batch_norm(x, gamma, beta, eps)?;
            let m = T::from_f64_lossy(BN_MOMENTUM);
            let one_m = T::one() - m;
            for (buf, batch) in [("running_mean", &mean), ("running_var", &var)] {
                let t = store.tensor_mut(&format!("{name}.{buf}"));
                for (r, &b) in t.data_mut().iter_mut().zip(batch.iter()) {
                    *r = m * *r + one_m * b;
                }
            }
            Ok(y)
        }
        NormKind::Batch => {
            let mean = store.tensor(&format!("{name}.running_mean")).data().to_vec();
            let var = store.tensor(&format!("{name}.running_var")).data().to_vec();
            cx.tape.batch_norm_fixed(x, gamma, beta, &mean, &var, eps)
        }
    }
}
