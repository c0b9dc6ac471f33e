//! Central finite-difference gradient checking on 64-bit replicas.

use super::autodiff::{Tape, Var};
use super::ops::Mode;
use super::param::{Ctx, ParamStore};
use super::{Shape4, Tensor};
use crate::error::Result;

/// Relative error floor that keeps near-zero gradients from dominating.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many evenly spaced coordinates per input.
    pub max_per_input: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            max_per_input: None,
        }
    }
}

/// One function evaluation: the scalar value and the ReLU sign pattern.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub signature: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU kink.
    pub skipped: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn coords(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
        _ => (0..len).collect(),
    }
}

/// Compare `analytic` gradients against central differences of `f`.
///
/// Coordinates whose `+step`/`-step` evaluations land on a different ReLU
/// sign pattern than the base point are skipped and counted.
pub fn grad_check_with<F>(
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    mut f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<Probe>,
{
    let base = f(inputs)?;
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
        tolerance: opts.tolerance,
    };
    for (i, grad) in analytic.iter().enumerate() {
        for j in coords(inputs[i].len(), opts.max_per_input) {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + opts.step;
            let plus = f(&work)?;
            work[i].data_mut()[j] = orig - opts.step;
            let minus = f(&work)?;
            work[i].data_mut()[j] = orig;
            if plus.signature != base.signature || minus.signature != base.signature {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus.value - minus.value) / (2.0 * opts.step);
            let err = relative_error(grad.data()[j], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

/// Gradient check of a graph built on a fresh tape from `inputs`.
///
/// `build` receives the input leaves and must return any var; a fixed
/// pseudo-random projection turns it into a scalar (unless it already is one).
pub fn grad_check<F>(inputs: &[Tensor<f64>], build: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let run = |vals: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = build(&mut tape, &leaves)?;
        let shape = tape.try_value(out)?.shape();
        let loss = if shape.len() == 1 {
            out
        } else {
            tape.dot(out, projection(shape))?
        };
        Ok((tape, leaves, loss))
    };
    let (tape, leaves, loss) = run(inputs)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    grad_check_with(
        inputs,
        &analytic,
        |vals| {
            let (tape, _, loss) = run(vals)?;
            Ok(Probe {
                value: tape.value(loss).data()[0],
                signature: tape.kink_signature(),
            })
        },
        opts,
    )
}

/// Gradient check of `forward` with respect to its input and every
/// parameter in `store`. Each evaluation runs on a fresh copy of the store,
/// so train-mode statistic updates never leak between probes.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    input: &Tensor<f64>,
    mode: Mode,
    forward: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<'_, f64>, Var) -> Result<Var>,
{
    let mut inputs = vec![input.clone()];
    inputs.extend(store.params().iter().map(|p| p.value.clone()));
    grad_check(
        &inputs,
        |tape, leaves| {
            let mut local = store.clone();
            let mut ctx = local.ctx_bound(tape, mode, &leaves[1..])?;
            forward(&mut ctx, leaves[0])
        },
        opts,
    )
}

/// Deterministic weights in `[-1, 1]` used to reduce a tensor to a scalar.
pub fn projection(shape: Shape4) -> Tensor<f64> {
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15;
    let data = (0..shape.len())
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    Tensor::new(shape, data).expect("projection shape")
}
