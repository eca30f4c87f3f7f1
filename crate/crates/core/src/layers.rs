//! Parameterised building blocks on top of the tape.
//!
//! Layers only hold [`ParamId`]s; the tensors live in a [`ParamStore`] so the
//! whole network can be initialised, checkpointed and updated as one table.
//! A forward pass runs inside a [`Graph`], which binds parameters to tape
//! leaves on first use and collects batch-norm running-statistic updates
//! instead of mutating the store mid-pass.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Deref, DerefMut};

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::norm::BatchStats;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter is filled by [`ParamStore::initialize`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal(0, sqrt(2 / fan_in)).
    He { fan_in: usize },
    Constant(f64),
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    tensor: Tensor<T>,
    trainable: bool,
    init: Init,
}

/// Named parameter table. Registration order is the canonical order for
/// initialisation and serialisation.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        let fill = match init {
            Init::Constant(v) => T::from_f64(v),
            Init::He { .. } => T::zero(),
        };
        let tensor = Tensor::full(shape, fill)
            .expect("parameter shape")
            .with_requires_grad(trainable);
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
            trainable,
            init,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Fills one parameter from its registered initialiser.
    pub fn init_param<R: Rng + ?Sized>(&mut self, id: ParamId, rng: &mut R) {
        let e = &mut self.entries[id.0];
        match e.init {
            Init::Constant(v) => e.tensor.data_mut().fill(T::from_f64(v)),
            Init::He { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                for v in e.tensor.data_mut() {
                    *v = T::from_f64(normal.sample(rng));
                }
            }
        }
    }

    /// Initialises every parameter in registration order.
    pub fn initialize<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for i in 0..self.entries.len() {
            self.init_param(ParamId(i), rng);
        }
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in &grads.0 {
            self.entries[id.0].tensor.accumulate_grad(g);
        }
    }

    /// Folds batch statistics into running estimates:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        for u in updates {
            let m = T::from_f64(u.momentum);
            let keep = T::one() - m;
            let rm = self.entries[u.running_mean.0].tensor.data_mut();
            rm.iter_mut().zip(&u.stats.mean).for_each(|(r, &b)| *r = keep * *r + m * b);
            let rv = self.entries[u.running_var.0].tensor.data_mut();
            rv.iter_mut().zip(&u.stats.var).for_each(|(r, &b)| *r = keep * *r + m * b);
        }
    }

    /// Element-type conversion of the whole table.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    trainable: e.trainable,
                    init: e.init,
                })
                .collect(),
        }
    }
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients<T>(pub Vec<(ParamId, Vec<T>)>);

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.0.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// A pending running-statistics update from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub stats: BatchStats<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a tape plus parameter bindings.
pub struct Graph<'p, T> {
    tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    grad_enabled: bool,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            mode,
            grad_enabled: true,
            bn_updates: Vec::new(),
        }
    }

    /// Eval-mode pass that records no parameter gradients.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        let mut g = Self::new(params, Mode::Eval);
        g.grad_enabled = false;
        g
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    /// Tape leaf for a stored parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.params.get(id).clone();
        let wants = self.grad_enabled && self.params.is_trainable(id);
        let v = self.tape.leaf(t.with_requires_grad(wants));
        self.bound[id.0] = Some(v);
        v
    }

    pub(crate) fn push_bn_update(&mut self, u: BnUpdate<T>) {
        self.bn_updates.push(u);
    }

    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        core::mem::take(&mut self.bn_updates)
    }

    /// Reverse sweep from `loss`, returning the gradient of every bound
    /// trainable parameter in id order.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.tape.backward(loss)?;
        let mut out = Vec::new();
        for (i, v) in self.bound.iter().enumerate() {
            let Some(v) = *v else { continue };
            if let Some(g) = self.tape.grad(v) {
                out.push((ParamId(i), g.to_vec()));
            }
        }
        Ok(Gradients(out))
    }
}

impl<T> Deref for Graph<'_, T> {
    type Target = Tape<T>;

    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}

/// 2-D convolution with optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

/// Builder-style options for [`Conv2dLayer::new`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOptions {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl Default for ConvOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            bias: true,
        }
    }
}

impl ConvOptions {
    /// Padding that keeps the spatial extent at stride 1.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            padding: dilation * (kernel - 1) / 2,
            dilation,
            ..Self::default()
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }
}

impl Conv2dLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        opts: ConvOptions,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.register(
            &format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            Init::He { fan_in },
            true,
        );
        let bias = opts
            .bias
            .then(|| store.register(&format!("{name}.bias"), &[out_channels], Init::Constant(0.0), true));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride: opts.stride,
            padding: opts.padding,
            dilation: opts.dilation,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.padding, self.dilation)
    }

    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        store.init_param(self.weight, rng);
        if let Some(b) = self.bias {
            store.init_param(b, rng);
        }
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
            + if self.bias.is_some() { self.out_channels } else { 0 }
    }

    /// Receptive field of the kernel along one axis.
    pub fn effective_kernel(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }
}

/// Per-channel batch normalisation with learned affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self::with_shift(store, name, channels, 0.0)
    }

    /// Like [`BatchNormLayer::new`] with a custom initial shift.
    pub fn with_shift<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, beta0: f64) -> Self {
        let c = [channels];
        Self {
            gamma: store.register(&format!("{name}.gamma"), &c, Init::Constant(1.0), true),
            beta: store.register(&format!("{name}.beta"), &c, Init::Constant(beta0), true),
            running_mean: store.register(&format!("{name}.running_mean"), &c, Init::Constant(0.0), false),
            running_var: store.register(&format!("{name}.running_var"), &c, Init::Constant(1.0), false),
            channels,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let eps = T::from_f64(self.eps);
        match g.mode() {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, eps)?;
                g.push_bn_update(BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    momentum: self.momentum,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let params = g.params();
                let rm = params.get(self.running_mean).data();
                let rv = params.get(self.running_var).data();
                g.batch_norm_eval(x, gamma, beta, rm, rv, eps)
            }
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// Fully connected layer, `y = x W^T + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl LinearLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_features: usize, out_features: usize) -> Self {
        Self {
            weight: store.register(
                &format!("{name}.weight"),
                &[out_features, in_features],
                Init::He { fan_in: in_features },
                true,
            ),
            bias: store.register(&format!("{name}.bias"), &[out_features], Init::Constant(0.0), true),
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.in_features {
            return Err(Error::shape(
                "linear",
                format!("input {shape:?}, layer expects [_, {}]", self.in_features),
            ));
        }
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }

    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        store.init_param(self.weight, rng);
        store.init_param(self.bias, rng);
    }

    pub fn param_count(&self) -> usize {
        self.out_features * (self.in_features + 1)
    }
}

/// Sets every element of a stored tensor (test fixtures, ablation wiring).
pub fn fill_param<T: Scalar>(store: &mut ParamStore<T>, id: ParamId, value: f64) {
    store.get_mut(id).data_mut().fill(T::from_f64(value));
}

/// Sample standard deviation, used by initialisation checks.
pub fn sample_std<T: Scalar>(v: &[T]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().map(|x| x.as_f64()).sum::<f64>() / n;
    let var = v.iter().map(|x| (x.as_f64() - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Float::sqrt(var)
}
