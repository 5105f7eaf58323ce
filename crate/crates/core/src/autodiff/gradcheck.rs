//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |a − n| / max(|a|, |n|, 1e−8)` over every input entry.
    pub max_rel_error: f64,
    /// `(input index, flat entry)` where the maximum occurred.
    pub worst: (usize, usize),
    pub kink_margin: f64,
    pub entries: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(build: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check: graph must produce a scalar, got {}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Compares the tape gradient of `build(inputs)` against
/// `(f(x+eps) − f(x−eps)) / (2·eps)` for every entry of every input.
pub fn grad_check<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!(
            "grad_check: eps must lie in [1e-7, 1e-3], got {eps}"
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let kink_margin = tape.kink_margin();

    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut max_rel_error = 0.0;
    let mut worst = (0, 0);
    let mut entries = 0;
    for (ii, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("every input tracks gradients");
        for e in 0..inputs[ii].numel() {
            let x0 = inputs[ii].data()[e];
            probe[ii].data_mut()[e] = x0 + eps;
            let fp = eval(&build, &probe)?;
            probe[ii].data_mut()[e] = x0 - eps;
            let fm = eval(&build, &probe)?;
            probe[ii].data_mut()[e] = x0;
            let numeric = (fp - fm) / (2.0 * eps);
            let err = rel_error(analytic.data()[e], numeric);
            if err > max_rel_error || err.is_nan() {
                max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                worst = (ii, e);
            }
            entries += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        kink_margin,
        entries,
    })
}

/// Like [`grad_check`], but draws inputs from `sample` and redraws while any
/// non-smooth op sits within `10·eps` of its kink.
pub fn grad_check_sampled<F, S>(
    build: F,
    mut sample: S,
    rng: &mut Rng,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    S: FnMut(&mut Rng) -> Vec<Tensor>,
{
    const MAX_DRAWS: usize = 50;
    for _ in 0..MAX_DRAWS {
        let inputs = sample(rng);
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        build(&mut tape, &vars)?;
        if tape.kink_margin() >= 10.0 * eps {
            return grad_check(&build, &inputs, eps);
        }
    }
    Err(Error::Contract(format!(
        "grad_check: no kink-free sample within {MAX_DRAWS} draws"
    )))
}
