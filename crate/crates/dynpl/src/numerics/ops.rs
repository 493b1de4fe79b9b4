use rand::Rng;

use crate::error::{DynplError, Result};
use crate::numerics::tensor::{dot, Tensor2};

pub const BCE_EPS: f64 = 1e-7;

/// Nonlinearity applied after each convolution. `Linear` exists so that
/// oracle tests can check the raw filter arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }
}

/// Same-length 1-D convolution over a token-major input.
///
/// `input` has one row per position (N x d_e), `weights` is d_f x (k * d_e).
/// The window starting at the last positions runs off the end and is zero
/// padded on the right, so the output has exactly N rows (N x d_f).
pub fn conv1d_same(
    input: &Tensor2,
    weights: &Tensor2,
    bias: &[f64],
    width: usize,
    activation: Activation,
) -> Result<Tensor2> {
    if width == 0 {
        return Err(DynplError::InvalidInput("conv width must be >= 1".into()));
    }
    let n = input.rows();
    let d_e = input.cols();
    let d_f = weights.rows();
    if weights.cols() != width * d_e {
        return Err(DynplError::InvalidInput(format!(
            "conv weights expect {} cols, got {}",
            width * d_e,
            weights.cols()
        )));
    }
    if bias.len() != d_f {
        return Err(DynplError::InvalidInput("conv bias length mismatch".into()));
    }

    let mut out = Tensor2::zeros(n, d_f);
    for t in 0..n {
        let full = t + width <= n;
        let out_row = out.row_mut(t);
        for f in 0..d_f
        {
            let w = weights.row(f);
            let mut acc = bias[f];
            if full {
                acc += dot(w, &input.as_slice()[t * d_e..(t + width) * d_e]);
            } else {
                // tail window: positions beyond the input are zero padding
                for (j, pos) in (t..n).enumerate() {
                    acc += dot(&w[j * d_e..(j + 1) * d_e], input.row(pos));
                }
            }
            out_row[f] = activation.apply(acc);
        }
    }
    Ok(out)
}

/// Numerically stable masked softmax. `masked[i] == true` positions get
/// probability exactly zero and do not participate in normalization.
pub fn softmax_masked(scores: &[f64], masked: &[bool]) -> Result<Vec<f64>> {
    assert_eq!(scores.len(), masked.len());
    let mut max = f64::NEG_INFINITY;
    for (s, &m) in scores.iter().zip(masked) {
        if !m && *s > max {
            max = *s;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(DynplError::Numerics(
            "softmax over fully masked input".into(),
        ));
    }
    let mut out = vec![0.0; scores.len()];
    let mut sum = 0.0;
    for i in 0..scores.len() {
        if !masked[i] {
            let e = (scores[i] - max).exp();
            out[i] = e;
            sum += e;
        }
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
    Ok(out)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy with the prediction clamped to [eps, 1-eps].
pub fn bce(y_hat: f64, y: f64) -> f64 {
    let p = y_hat.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Inverted dropout. Returns the keep mask so the backward pass can reuse it;
/// survivors are scaled by 1/(1-p) at train time so eval needs no rescaling.
pub fn dropout_mask<R: Rng>(len: usize, p: f64, rng: &mut R) -> Vec<bool> {
    assert!((0.0..1.0).contains(&p), "dropout p must be in [0,1)");
    (0..len).map(|_| rng.gen::<f64>() >= p).collect()
}

pub fn apply_dropout(values: &mut [f64], mask: &[bool], p: f64) {
    debug_assert_eq!(values.len(), mask.len());
    let scale = 1.0 / (1.0 - p);
    for (v, &keep) in values.iter_mut().zip(mask) {
        *v = if keep { *v * scale } else { 0.0 };
    }
}
