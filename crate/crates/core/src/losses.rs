//! Class-weighted cross-entropy, soft Dice and their sum.
//!
//! Values and logit gradients are computed in closed form and recorded on the
//! tape as a single scalar node.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_channels, Tape, Var};
use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::tensor::Tensor;

/// Smoothing term of the soft Dice score.
pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub Vec<f64>);

impl ClassWeights {
    pub fn uniform(n_classes: usize) -> Self {
        ClassWeights(vec![1.0; n_classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Median-frequency weights from voxel counts summed over a corpus.
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::Contract("median frequency weights need a non-empty corpus".into()));
        }
        let freqs: Vec<f64> = counts.iter().map(|&n| n as f64 / total as f64).collect();
        median_freq_weights(&freqs)
    }

    pub fn from_corpus<'a>(volumes: impl IntoIterator<Item = &'a LabelVolume>, n_classes: usize) -> Result<Self> {
        let mut counts = vec![0; n_classes];
        for v in volumes {
            for (acc, n) in counts.iter_mut().zip(v.histogram(n_classes)?) {
                *acc += n;
            }
        }
        Self::from_counts(&counts)
    }
}

/// `w_c = median(freq) / freq_c`, with the median over present classes (mean
/// of the middle pair for even counts). Absent classes get weight 0.
pub fn median_freq_weights(freqs: &[f64]) -> Result<ClassWeights> {
    let mut present: Vec<f64> = freqs.iter().copied().filter(|&f| f > 0.0).collect();
    if present.is_empty() {
        return Err(Error::Contract("median frequency weights need a non-empty corpus".into()));
    }
    present.sort_by(f64::total_cmp);
    let n = present.len();
    let median = if n % 2 == 1 {
        present[n / 2]
    } else {
        (present[n / 2 - 1] + present[n / 2]) / 2.0
    };
    Ok(ClassWeights(
        freqs.iter().map(|&f| if f > 0.0 { median / f } else { 0.0 }).collect(),
    ))
}

fn check(logits: &Tensor, labels: &LabelVolume) -> Result<()> {
    let s = logits.shape();
    if !s.same_spatial(&labels.shape()) {
        return Err(Error::shape(format!(
            "logits {s} and labels {} differ in extent",
            labels.shape()
        )));
    }
    labels.histogram(s.c)?;
    Ok(())
}

/// Value and logit gradient of `−(1/N) Σ_v w_{y(v)} log softmax(z)_{y(v)}(v)`.
pub fn weighted_ce_grad(logits: &Tensor, labels: &LabelVolume, weights: &ClassWeights) -> Result<(f64, Tensor)> {
    check(logits, labels)?;
    let s = logits.shape();
    if weights.len() != s.c {
        return Err(Error::shape(format!("{} class weights for {} classes", weights.len(), s.c)));
    }
    let n = s.spatial();
    let logp = log_softmax_channels(logits);
    let lp = logp.data();
    let w = weights.as_slice();
    let mut total = 0.0;
    let mut grad = vec![0.0; s.numel()];
    for (v, &y) in labels.data().iter().enumerate() {
        let y = y as usize;
        total += w[y] * lp[y * n + v];
        let scale = w[y] / n as f64;
        for c in 0..s.c {
            let p = lp[c * n + v].exp();
            let onehot = if c == y { 1.0 } else { 0.0 };
            grad[c * n + v] = scale * (p - onehot);
        }
    }
    Ok((-total / n as f64, Tensor::from_data(s, grad)?))
}

/// Value and logit gradient of
/// `1 − (1/K) Σ_c (2 Σ p_c g_c + s) / (Σ p_c + Σ g_c + s)`.
pub fn soft_dice_grad(logits: &Tensor, labels: &LabelVolume, smooth: f64) -> Result<(f64, Tensor)> {
    if !(smooth > 0.0) {
        return Err(Error::Contract(format!("soft Dice smoothing must be > 0, got {smooth}")));
    }
    check(logits, labels)?;
    let s = logits.shape();
    let (k, n) = (s.c, s.spatial());
    let probs: Vec<f64> = log_softmax_channels(logits).data().iter().map(|v| v.exp()).collect();
    let y = labels.data();

    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut gsum = vec![0.0; k];
    for c in 0..k {
        for v in 0..n {
            let p = probs[c * n + v];
            psum[c] += p;
            if y[v] as usize == c {
                inter[c] += p;
                gsum[c] += 1.0;
            }
        }
    }
    let mut score = 0.0;
    let mut num = vec![0.0; k];
    let mut den = vec![0.0; k];
    for c in 0..k {
        num[c] = 2.0 * inter[c] + smooth;
        den[c] = psum[c] + gsum[c] + smooth;
        score += num[c] / den[c];
    }
    let value = 1.0 - score / k as f64;

    // dL/dp, then through the softmax Jacobian voxel by voxel.
    let mut grad = vec![0.0; s.numel()];
    let mut a = vec![0.0; k];
    for v in 0..n {
        let mut mean = 0.0;
        for c in 0..k {
            let g = if y[v] as usize == c { 1.0 } else { 0.0 };
            a[c] = -(2.0 * g * den[c] - num[c]) / (den[c] * den[c]) / k as f64;
            mean += probs[c * n + v] * a[c];
        }
        for c in 0..k {
            grad[c * n + v] = probs[c * n + v] * (a[c] - mean);
        }
    }
    Ok((value, Tensor::from_data(s, grad)?))
}

pub fn weighted_ce(tape: &mut Tape, logits: Var, labels: &LabelVolume, weights: &ClassWeights) -> Result<Var> {
    let (value, grad) = weighted_ce_grad(tape.value(logits), labels, weights)?;
    tape.custom_scalar(logits, value, grad)
}

pub fn soft_dice_loss(tape: &mut Tape, logits: Var, labels: &LabelVolume, smooth: f64) -> Result<Var> {
    let (value, grad) = soft_dice_grad(tape.value(logits), labels, smooth)?;
    tape.custom_scalar(logits, value, grad)
}

/// Cross-entropy plus soft Dice with unit coefficients.
pub fn combined_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &LabelVolume,
    weights: &ClassWeights,
    smooth: f64,
) -> Result<Var> {
    let ce = weighted_ce(tape, logits, labels, weights)?;
    let dice = soft_dice_loss(tape, logits, labels, smooth)?;
    tape.add(ce, dice)
}

/// Loss value without recording anything.
pub fn combined_loss_value(logits: &Tensor, labels: &LabelVolume, weights: &ClassWeights, smooth: f64) -> Result<f64> {
    let (ce, _) = weighted_ce_grad(logits, labels, weights)?;
    let (dice, _) = soft_dice_grad(logits, labels, smooth)?;
    Ok(ce + dice)
}
