//! Named parameters, batch-norm buffers and the forward context.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::attention::{AttentionKernel, BufferMeter};
use crate::autodiff::{batchnorm2d, BatchStats, BnMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// A trainable tensor with a stable dotted name, e.g. `gcp.stage2.block0.wq`.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Non-trainable state such as batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Buffer<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    names: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            names: HashMap::new(),
        }
    }

    fn claim(&mut self, name: &str) {
        assert!(
            self.names.insert(name.to_string(), self.names.len()).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        self.claim(&name);
        self.params.push(Parameter { name, tensor });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> BufferId {
        let name = name.into();
        self.claim(&name);
        self.buffers.push(Buffer { name, tensor });
        BufferId(self.buffers.len() - 1)
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Parameter tensors in registration order, e.g. as gradcheck inputs.
    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    /// Replace every parameter value, keeping names and order.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::Precondition(format!(
                "expected {} tensors, got {}",
                self.params.len(),
                tensors.len()
            )));
        }
        for (p, t) in self.params.iter_mut().zip(tensors) {
            if p.tensor.shape() != t.shape() {
                return Err(Error::shape("set_tensors", p.tensor.shape(), t.shape()));
            }
            p.tensor = t;
        }
        Ok(())
    }

    /// Fold batch statistics into running averages:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_running_stats(&mut self, updates: &[BnUpdate<T>]) {
        let m = T::c(BN_MOMENTUM);
        for u in updates {
            for (buf, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                for (r, &b) in self.buffers[buf.0].tensor.data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    /// Replace running statistics by the pooled statistics of all `updates`,
    /// as if every batch had been one. Buffers without updates are untouched.
    pub fn set_pooled_stats(&mut self, updates: &[BnUpdate<T>]) {
        // per buffer pair: count, sum, sum of squares
        let mut pooled: HashMap<(usize, usize), (f64, Vec<f64>, Vec<f64>)> = HashMap::new();
        for u in updates {
            let c = u.stats.mean.len();
            let e = pooled.entry((u.mean.0, u.var.0)).or_insert_with(|| (0.0, vec![0.0; c], vec![0.0; c]));
            let n = u.stats.count as f64;
            e.0 += n;
            for ch in 0..c {
                let (m, v) = (u.stats.mean[ch].f64(), u.stats.var[ch].f64());
                e.1[ch] += n * m;
                e.2[ch] += v * (n - 1.0).max(0.0) + n * m * m;
            }
        }
        for ((mid, vid), (n, sum, sq)) in pooled {
            let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
            let var: Vec<f64> = sq.iter().zip(&mean).map(|(q, m)| ((q - n * m * m) / (n - 1.0).max(1.0)).max(0.0)).collect();
            for (r, m) in self.buffers[mid].tensor.data_mut().iter_mut().zip(mean) {
                *r = T::c(m);
            }
            for (r, v) in self.buffers[vid].tensor.data_mut().iter_mut().zip(var) {
                *r = T::c(v);
            }
        }
    }
}

/// Random initializers used by the layers.
pub(crate) fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

pub(crate) fn scaled_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::randn(shape, std, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are collected for the caller.
    Train,
    /// Running statistics.
    Eval,
}

/// Batch statistics produced by one batch-norm layer in training mode.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub mean: BufferId,
    pub var: BufferId,
    pub stats: BatchStats<T>,
}

/// Everything a forward pass needs: the tape, one `Var` per parameter, the
/// normalization mode and the attention core.
pub struct Forward<'a, T: Scalar> {
    pub tape: &'a Tape<T>,
    store: &'a ParamStore<T>,
    vars: Vec<Var>,
    pub mode: Mode,
    pub kernel: AttentionKernel,
    updates: RefCell<Vec<BnUpdate<T>>>,
    meter: RefCell<Option<BufferMeter>>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    /// Put every parameter on `tape`, as leaves if `trainable`.
    pub fn new(tape: &'a Tape<T>, store: &'a ParamStore<T>, mode: Mode, trainable: bool) -> Self {
        let vars = store
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.tensor.clone())
                } else {
                    tape.constant(p.tensor.clone())
                }
            })
            .collect();
        Self::from_vars(tape, store, vars, mode)
    }

    /// Use caller-provided vars (one per parameter, in store order).
    pub fn from_vars(tape: &'a Tape<T>, store: &'a ParamStore<T>, vars: Vec<Var>, mode: Mode) -> Self {
        assert_eq!(vars.len(), store.params.len(), "one var per parameter");
        Forward {
            tape,
            store,
            vars,
            mode,
            kernel: AttentionKernel::Linear,
            updates: RefCell::new(Vec::new()),
            meter: RefCell::new(None),
        }
    }

    pub fn with_kernel(mut self, kernel: AttentionKernel) -> Self {
        self.kernel = kernel;
        self
    }

    /// Meter attention scratch for the rest of this pass.
    pub fn with_meter(self) -> Self {
        *self.meter.borrow_mut() = Some(BufferMeter::default());
        self
    }

    pub fn meter(&self) -> Option<BufferMeter> {
        self.meter.borrow().clone()
    }

    pub(crate) fn with_meter_mut<R>(&self, f: impl FnOnce(Option<&mut BufferMeter>) -> R) -> R {
        let mut m = self.meter.borrow_mut();
        f(m.as_mut())
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn batchnorm(&self, x: Var, gamma: ParamId, beta: ParamId, mean: BufferId, var: BufferId) -> Result<Var> {
        let eps = T::c(BN_EPS);
        match self.mode {
            Mode::Train => {
                let (y, stats) = batchnorm2d(self.tape, x, self.p(gamma), self.p(beta), BnMode::Train, eps)?;
                if let Some(stats) = stats {
                    self.updates.borrow_mut().push(BnUpdate { mean, var, stats });
                }
                Ok(y)
            }
            Mode::Eval => {
                let mode = BnMode::Eval {
                    running_mean: self.store.buffer(mean),
                    running_var: self.store.buffer(var),
                };
                Ok(batchnorm2d(self.tape, x, self.p(gamma), self.p(beta), mode, eps)?.0)
            }
        }
    }

    /// Batch statistics gathered so far (training mode only).
    pub fn take_updates(&self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.updates.borrow_mut())
    }
}
