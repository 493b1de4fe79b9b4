use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::narrative::Narrative;
use crate::error::{DynplError, Result};
use crate::model::params::{DynplParams, CONV_DROPOUT, EMBED_DROPOUT};
use crate::numerics::{
    apply_dropout, conv1d_same, dot, dropout_mask, sigmoid, softmax_masked, Activation, Tensor2,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-problem predictions for one narrative. Attention is reported over the
/// 3N concatenated filter positions where N is the narrative's true length;
/// pad positions carry zero attention by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionBundle {
    pub problem_probs: Vec<f64>,
    pub problem_scores: Vec<f64>,
    pub attention: Vec<Vec<f64>>,
    pub outcome_prob: f64,
    /// N: the unmasked narrative length the attention indexes against
    pub active_len: usize,
}

/// Decode a concatenated attention position into (filter width, start token).
/// i in [0, 3N) maps to width floor(i/N)+1 and start i mod N.
pub fn decode_position(i: usize, n: usize) -> (usize, usize) {
    (i / n + 1, i % n)
}

/// Per-problem attention: alpha = softmax(H q / sqrt(d_f)) with masking, and
/// the weighted average v = sum_i alpha_i h_i. `feature_rows` holds one
/// feature vector per row.
pub fn attend(
    feature_rows: &Tensor2,
    query: &[f64],
    masked: &[bool],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d_f = feature_rows.cols();
    assert_eq!(query.len(), d_f);
    assert_eq!(masked.len(), feature_rows.rows());
    let scale = 1.0 / (d_f as f64).sqrt();
    let scores: Vec<f64> = (0..feature_rows.rows())
        .map(|i| dot(feature_rows.row(i), query) * scale)
        .collect();
    let alpha = softmax_masked(&scores, masked)?;
    let mut v = vec![0.0; d_f];
    for (i, &a) in alpha.iter().enumerate() {
        if a != 0.0 {
            for (vv, &h) in v.iter_mut().zip(feature_rows.row(i)) {
                *vv += a * h;
            }
        }
    }
    Ok((alpha, v))
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub token_ids: Vec<u32>,
    pub n: usize,
    /// embedded input after embedding dropout, n x d_e
    pub x: Tensor2,
    pub x_mask: Option<Vec<bool>>,
    /// tanh conv outputs before dropout, one n x d_f tensor per width
    pub conv_out: Vec<Tensor2>,
    /// concatenated post-dropout feature rows, 3n x d_f
    pub h: Tensor2,
    pub h_mask: Option<Vec<bool>>,
    pub alphas: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
    pub outcome_prob: f64,
}

impl ForwardCache {
    pub fn bundle(&self) -> PredictionBundle {
        PredictionBundle {
            problem_probs: self.probs.clone(),
            problem_scores: self.scores.clone(),
            attention: self.alphas.clone(),
            outcome_prob: self.outcome_prob,
            active_len: self.n,
        }
    }
}

/// Embed the active narrative prefix and run the three convolutions.
/// Returns (x, x_mask, conv_out, h, h_mask). Shared by the baselines.
pub(crate) fn trunk_forward<R: Rng>(
    narrative: &Narrative,
    embedding: &Tensor2,
    convs: &[crate::model::params::ConvFilter],
    mode: Mode,
    conv_dropout: bool,
    rng: &mut R,
) -> Result<(Tensor2, Option<Vec<bool>>, Vec<Tensor2>, Tensor2, Option<Vec<bool>>)> {
    let n = narrative.true_length;
    if n == 0 {
        return Err(DynplError::InvalidInput(
            "narrative has no unmasked tokens".into(),
        ));
    }
    let d_e = embedding.cols();
    let mut x = Tensor2::zeros(n, d_e);
    for (t, &id) in narrative.active_ids().iter().enumerate() {
        if (id as usize) >= embedding.rows() {
            return Err(DynplError::InvalidInput(format!(
                "token id {id} out of embedding range"
            )));
        }
        x.row_mut(t).copy_from_slice(embedding.row(id as usize));
    }
    let x_mask = match mode {
        Mode::Train => {
            let mask = dropout_mask(n * d_e, EMBED_DROPOUT, rng);
            apply_dropout(x.as_mut_slice(), &mask, EMBED_DROPOUT);
            Some(mask)
        }
        Mode::Eval => None,
    };

    let mut conv_out = Vec::with_capacity(convs.len());
    for conv in convs {
        conv_out.push(conv1d_same(
            &x,
            &conv.weights,
            &conv.bias,
            conv.width,
            Activation::Tanh,
        )?);
    }
    let d_f = conv_out[0].cols();
    let mut h = Tensor2::zeros(convs.len() * n, d_f);
    for (k, t_k) in conv_out.iter().enumerate() {
        for t in 0..n {
            h.row_mut(k * n + t).copy_from_slice(t_k.row(t));
        }
    }
    let h_mask = match (mode, conv_dropout) {
        (Mode::Train, true) => {
            let mask = dropout_mask(h.rows() * d_f, CONV_DROPOUT, rng);
            apply_dropout(h.as_mut_slice(), &mask, CONV_DROPOUT);
            Some(mask)
        }
        _ => None,
    };
    Ok((x, x_mask, conv_out, h, h_mask))
}

/// Per-problem attention heads over shared features: s_l = w_l . v_l + b_l,
/// y_l = sigmoid(s_l).
pub fn problem_heads(
    h: &Tensor2,
    masked: &[bool],
    params: &DynplParams,
) -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let label_count = params.label_count();
    let mut scores = Vec::with_capacity(label_count);
    let mut probs = Vec::with_capacity(label_count);
    let mut alphas = Vec::with_capacity(label_count);
    let mut values = Vec::with_capacity(label_count);
    for l in 0..label_count {
        let (alpha, v) = attend(h, params.queries.row(l), masked)?;
        let s = dot(params.classifier_w.row(l), &v) + params.classifier_b[l];
        scores.push(s);
        probs.push(sigmoid(s));
        alphas.push(alpha);
        values.push(v);
    }
    Ok((scores, probs, alphas, values))
}

/// Outcome probability from the raw problem scores; the logit is exactly
/// affine in s.
pub fn outcome_head(scores: &[f64], params: &DynplParams) -> f64 {
    debug_assert_eq!(scores.len(), params.outcome_w.len());
    sigmoid(dot(&params.outcome_w, scores) + params.outcome_b)
}

/// Full forward pass. In train mode the caller provides the RNG that drives
/// the dropout masks, which keeps runs reproducible.
pub fn forward<R: Rng>(
    narrative: &Narrative,
    params: &DynplParams,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardCache> {
    let (x, x_mask, conv_out, h, h_mask) =
        trunk_forward(narrative, &params.embedding, &params.convs, mode, true, rng)?;
    let masked = vec![false; h.rows()];
    let (scores, probs, alphas, values) = problem_heads(&h, &masked, params)?;
    let outcome_prob = outcome_head(&scores, params);
    Ok(ForwardCache {
        token_ids: narrative.active_ids().to_vec(),
        n: narrative.true_length,
        x,
        x_mask,
        conv_out,
        h,
        h_mask,
        alphas,
        values,
        scores,
        probs,
        outcome_prob,
    })
}

/// Eval-mode forward returning just the prediction bundle.
pub fn predict(narrative: &Narrative, params: &DynplParams) -> Result<PredictionBundle> {
    let mut rng = rand::rngs::mock::StepRng::new(0, 1);
    Ok(forward(narrative, params, Mode::Eval, &mut rng)?.bundle())
}
