//! Central finite-difference verification of `LayerStack::backward`.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Architecture, LayerStack, Mode, Tensor};
use crate::error::Result;
use crate::rng::RngSeed;

pub(crate) fn randn(n: usize, seed: RngSeed) -> Vec<f64> {
    let mut r = seed.rng();
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

/// Scalar probe loss Σ r·y + aux, whose output gradient is r.
fn probe(stack: &LayerStack, x: &Tensor, side: Option<&Tensor>, r: &[f64], mode: Mode, rs: RngSeed) -> Result<f64> {
    let (y, tape) = stack.forward(x, side, mode, rs)?;
    Ok(y.data().iter().zip(r).map(|(a, b)| a * b).sum::<f64>() + tape.aux_loss())
}

/// |a − n| / max(|a|, |n|, 1e-4).
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Builds `arch` from `seed`, perturbs its parameters, and compares
/// backward against central differences (h = 1e-5) of a random linear
/// probe for every parameter, input and side entry. Returns the worst
/// relative error. `avoid_kinks` nudges inputs away from 0, where ReLU is
/// not differentiable.
pub fn gradient_check(arch: &Architecture, batch: usize, mode: Mode, seed: u64, avoid_kinks: bool) -> Result<f64> {
    let h = 1e-5;
    let base = RngSeed::new(seed, 0);
    let mut stack = LayerStack::new(arch.clone(), base.purpose("init"))?;
    // Non-trivial biases and norm parameters.
    for (i, p) in stack.params_mut().into_iter().enumerate() {
        let noise = randn(p.len(), base.purpose("perturb").child(i as u64));
        p.iter_mut().zip(noise).for_each(|(v, n)| *v += 0.1 * n);
    }
    let n_in: usize = arch.input_shape.iter().product();
    let mut xv = randn(batch * n_in, base.purpose("x"));
    if avoid_kinks {
        xv.iter_mut().filter(|v| v.abs() < 1e-2).for_each(|v| *v += 0.05);
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(&arch.input_shape);
    let x = Tensor::new(shape, xv)?;
    let side = match arch.side_width {
        0 => None,
        w => Some(Tensor::new(vec![batch, w], randn(batch * w, base.purpose("side")))?),
    };
    let rs = base.purpose("fwd");
    let (y, tape) = stack.forward(&x, side.as_ref(), mode, rs)?;
    let r = randn(y.data().len(), base.purpose("probe"));
    let grads = stack.backward(tape, &Tensor::new(y.shape().to_vec(), r.clone())?)?;

    let mut worst = 0.0f64;
    for pi in 0..stack.params().len() {
        for j in 0..stack.params()[pi].len() {
            let orig = stack.params()[pi][j];
            stack.params_mut()[pi][j] = orig + h;
            let lp = probe(&stack, &x, side.as_ref(), &r, mode, rs)?;
            stack.params_mut()[pi][j] = orig - h;
            let lm = probe(&stack, &x, side.as_ref(), &r, mode, rs)?;
            stack.params_mut()[pi][j] = orig;
            worst = worst.max(rel_err(grads.params[pi][j], (lp - lm) / (2.0 * h)));
        }
    }
    for j in 0..x.data().len() {
        let mut xp = x.clone();
        xp.data_mut()[j] += h;
        let lp = probe(&stack, &xp, side.as_ref(), &r, mode, rs)?;
        xp.data_mut()[j] -= 2.0 * h;
        let lm = probe(&stack, &xp, side.as_ref(), &r, mode, rs)?;
        worst = worst.max(rel_err(grads.input.data()[j], (lp - lm) / (2.0 * h)));
    }
    if let (Some(s), Some(gs)) = (&side, &grads.side) {
        for j in 0..s.data().len() {
            let mut sp = s.clone();
            sp.data_mut()[j] += h;
            let lp = probe(&stack, &x, Some(&sp), &r, mode, rs)?;
            sp.data_mut()[j] -= 2.0 * h;
            let lm = probe(&stack, &x, Some(&sp), &r, mode, rs)?;
            worst = worst.max(rel_err(gs.data()[j], (lp - lm) / (2.0 * h)));
        }
    }
    Ok(worst)
}
