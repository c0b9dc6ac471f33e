//! Trainable parameters and batch-norm running statistics.

use rand::Rng;

use super::autodiff::{Grads, Tape, Var};
use super::ops::{BnRunning, Mode};
use super::{Scalar, Shape4, Tensor};
use crate::error::{Error, Result};

/// A trainable value and its accumulated gradient (same shape).
#[derive(Clone, Debug, PartialEq)]
pub struct Param<S = f32> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    /// Weight decay applies (conv/linear weights), or not (BN affine, biases).
    pub decay: bool,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>, decay: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatId(pub(crate) usize);

/// Flat storage for every parameter and batch-norm statistic of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S = f32> {
    params: Vec<Param<S>>,
    stats: Vec<(String, BnRunning<S>)>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>, decay: bool) -> ParamId {
        self.params.push(Param::new(name, value, decay));
        ParamId(self.params.len() - 1)
    }

    /// Conv/linear weight with `std = sqrt(gain / fan_in)`.
    pub fn add_gaussian<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: Shape4,
        gain: f64,
        rng: &mut R,
    ) -> ParamId {
        let fan_in = shape.c * shape.h * shape.w;
        let std = (gain / fan_in as f64).sqrt();
        self.add(name, Tensor::randn(shape, std, rng), true)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatId {
        self.stats.push((name.into(), BnRunning::new(channels)));
        StatId(self.stats.len() - 1)
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    pub fn param(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn stats(&self) -> &[(String, BnRunning<S>)] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [(String, BnRunning<S>)] {
        &mut self.stats
    }

    pub fn stat(&self, id: StatId) -> &BnRunning<S> {
        &self.stats[id.0].1
    }

    /// Number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Add the gradients of bound parameters into `Param::grad`.
    pub fn accumulate(&mut self, bindings: &[(ParamId, Var)], grads: &Grads<S>) -> Result<()> {
        for &(id, var) in bindings {
            if let Some(g) = grads.get(var) {
                self.params[id.0].grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    /// Context for recording a forward pass. Train mode updates running stats.
    pub fn ctx<'a>(&'a mut self, tape: &'a mut Tape<S>, mode: Mode) -> Ctx<'a, S> {
        let stats = match mode {
            Mode::Train => StatsAccess::Update(&mut self.stats),
            Mode::Eval => StatsAccess::Read(&self.stats),
        };
        Ctx {
            tape,
            params: &self.params,
            stats,
            bindings: Vec::new(),
            bound: None,
        }
    }

    /// Context whose parameters are the given existing leaves, one per
    /// parameter in store order. Used to differentiate with respect to them.
    pub fn ctx_bound<'a>(&'a mut self, tape: &'a mut Tape<S>, mode: Mode, leaves: &'a [Var]) -> Result<Ctx<'a, S>> {
        if leaves.len() != self.params.len() {
            return Err(Error::invalid(
                "ctx",
                format!("{} leaves bound for {} parameters", leaves.len(), self.params.len()),
            ));
        }
        let mut ctx = self.ctx(tape, mode);
        ctx.bound = Some(leaves);
        Ok(ctx)
    }

    /// Read-only eval-mode context.
    pub fn eval_ctx<'a>(&'a self, tape: &'a mut Tape<S>) -> Ctx<'a, S> {
        Ctx {
            tape,
            params: &self.params,
            stats: StatsAccess::Read(&self.stats),
            bindings: Vec::new(),
            bound: None,
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    decay: p.decay,
                })
                .collect(),
            stats: self.stats.iter().map(|(n, s)| (n.clone(), s.cast())).collect(),
        }
    }
}

enum StatsAccess<'a, S> {
    Update(&'a mut [(String, BnRunning<S>)]),
    Read(&'a [(String, BnRunning<S>)]),
}

/// A forward pass in progress: the tape plus parameter/stat access.
pub struct Ctx<'a, S: Scalar> {
    pub tape: &'a mut Tape<S>,
    params: &'a [Param<S>],
    stats: StatsAccess<'a, S>,
    bindings: Vec<(ParamId, Var)>,
    bound: Option<&'a [Var]>,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    pub fn mode(&self) -> Mode {
        match self.stats {
            StatsAccess::Update(_) => Mode::Train,
            StatsAccess::Read(_) => Mode::Eval,
        }
    }

    /// Put a parameter on the tape as a leaf.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let p = self
            .params
            .get(id.0)
            .ok_or_else(|| Error::invalid("ctx", format!("unknown parameter {}", id.0)))?;
        if let Some(bound) = self.bound {
            let v = bound[id.0];
            self.bindings.push((id, v));
            return Ok(v);
        }
        let v = self.tape.leaf(p.value.clone());
        self.bindings.push((id, v));
        Ok(v)
    }

    pub fn batchnorm(&mut self, x: Var, gamma: ParamId, beta: ParamId, stat: StatId) -> Result<Var> {
        let g = self.param(gamma)?;
        let b = self.param(beta)?;
        match &mut self.stats {
            StatsAccess::Update(stats) => {
                let running = &mut stats[stat.0].1;
                self.tape.batchnorm(x, g, b, running, Mode::Train)
            }
            StatsAccess::Read(stats) => {
                let mut running = stats[stat.0].1.clone();
                self.tape.batchnorm(x, g, b, &mut running, Mode::Eval)
            }
        }
    }

    pub fn bindings(&self) -> &[(ParamId, Var)] {
        &self.bindings
    }

    pub fn into_bindings(self) -> Vec<(ParamId, Var)> {
        self.bindings
    }
}
