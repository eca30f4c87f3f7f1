//! Central finite-difference checks of reverse-mode gradients in `f64`.
//!
//! The checked scalar is `sum(out * R)` for a fixed pseudo-random `R`, so
//! every output element contributes and normalising layers do not produce a
//! trivially zero gradient.

use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{Graph, Mode, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Check at most this many coordinates, sampled uniformly across all
    /// checked tensors. `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords: None,
            seed: 0x5eed,
        }
    }
}

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Moves values that sit within 1e-3 of zero away from it by 0.1, keeping
/// their sign, so finite differences do not straddle a ReLU kink.
pub fn nudge_from_kinks(t: &mut Tensor<f64>) {
    for v in t.data_mut() {
        if v.abs() < 1e-3 {
            *v = if *v < 0.0 { *v - 0.1 } else { *v + 0.1 };
        }
    }
}

fn projection(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn project(out: &[f64], r: &[f64]) -> f64 {
    out.iter().zip(r).map(|(a, b)| a * b).sum()
}

fn coordinates(total: usize, opts: &GradCheckOptions) -> Vec<usize> {
    match opts.max_coords {
        Some(k) if k < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
            let mut v = index::sample(&mut rng, total, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..total).collect(),
    }
}

/// Maximum relative error between the tape gradient of `f` at `x` and
/// central differences.
pub fn grad_check<F>(x: &Tensor<f64>, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_with(x, GradCheckOptions::default(), f)
}

pub fn grad_check_with<F>(x: &Tensor<f64>, opts: GradCheckOptions, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |input: &Tensor<f64>, r: Option<&[f64]>| -> Result<(Vec<f64>, f64, Option<Vec<f64>>)> {
        let mut tape = Tape::new();
        let v = tape.leaf(input.clone().with_requires_grad(true));
        let out = f(&mut tape, v)?;
        let data = tape.value(out).data().to_vec();
        let Some(r) = r else { return Ok((data, 0.0, None)) };
        let proj = project(&data, r);
        let rv = tape.constant(Tensor::from_vec(tape.shape(out), r.to_vec())?);
        let prod = tape.mul(out, rv)?;
        let loss = tape.sum(prod)?;
        tape.backward(loss)?;
        let grad = tape.grad(v).map(|g| g.to_vec());
        Ok((data, proj, grad))
    };
    let (first, _, _) = eval(x, None)?;
    let r = projection(first.len(), opts.seed);
    let (_, _, grad) = eval(x, Some(&r))?;
    let analytic = grad.unwrap_or_else(|| alloc::vec![0.0; x.numel()]);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in coordinates(x.numel(), &opts) {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + opts.h;
        let (plus, _, _) = eval(&probe, None)?;
        probe.data_mut()[i] = orig - opts.h;
        let (minus, _, _) = eval(&probe, None)?;
        probe.data_mut()[i] = orig;
        let numeric = (project(&plus, &r) - project(&minus, &r)) / (2.0 * opts.h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Gradient check of every trainable parameter used by `f`. Inputs that
/// should be checked too can be registered in `store` as parameters.
pub fn grad_check_params<F>(store: &ParamStore<f64>, mode: Mode, opts: GradCheckOptions, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let forward = |s: &ParamStore<f64>| -> Result<Vec<f64>> {
        let mut g = Graph::new(s, mode);
        let out = f(&mut g)?;
        Ok(g.value(out).data().to_vec())
    };
    let first = forward(store)?;
    let r = projection(first.len(), opts.seed);

    let grads = {
        let mut g = Graph::new(store, mode);
        let out = f(&mut g)?;
        let rt = Tensor::from_vec(g.shape(out), r.clone())?;
        let rv = g.constant(rt);
        let prod = g.mul(out, rv)?;
        let loss = g.sum(prod)?;
        g.backward(loss)?
    };

    // flat coordinate space over trainable parameters, in id order
    let params: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let mut offsets = Vec::with_capacity(params.len() + 1);
    offsets.push(0usize);
    for &id in &params {
        offsets.push(offsets.last().unwrap() + store.get(id).numel());
    }
    let total = *offsets.last().unwrap();

    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for flat in coordinates(total, &opts) {
        let slot = offsets.partition_point(|&o| o <= flat) - 1;
        let (id, i) = (params[slot], flat - offsets[slot]);
        let analytic = grads.get(id).map_or(0.0, |g| g[i]);
        let orig = probe.get(id).data()[i];
        probe.get_mut(id).data_mut()[i] = orig + opts.h;
        let plus = project(&forward(&probe)?, &r);
        probe.get_mut(id).data_mut()[i] = orig - opts.h;
        let minus = project(&forward(&probe)?, &r);
        probe.get_mut(id).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * opts.h);
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(worst)
}
