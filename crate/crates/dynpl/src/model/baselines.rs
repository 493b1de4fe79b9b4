//! Outcome-only baselines sharing the conv trunk: max-pooled CNN and a
//! single-head attention variant.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::narrative::Narrative;
use crate::error::Result;
use crate::model::backward::trunk_backward;
use crate::model::forward::{attend, trunk_forward, Mode};
use crate::model::params::{ConvFilter, CONV_DROPOUT, CONV_WIDTHS};
use crate::numerics::{apply_dropout, bce, dot, dropout_mask, sigmoid, Tensor2};

/// CNN baseline: per-channel max over positions, concatenated across the
/// three widths, then affine + sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnMaxParams {
    pub embedding: Tensor2,
    pub convs: Vec<ConvFilter>,
    /// 3 * d_f weights over the concatenated pooled features
    pub out_w: Vec<f64>,
    pub out_b: f64,
}

/// Single-head attention baseline: one query over the concatenated features,
/// then affine + sigmoid on the attended vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvAttnParams {
    pub embedding: Tensor2,
    pub convs: Vec<ConvFilter>,
    pub query: Vec<f64>,
    pub out_w: Vec<f64>,
    pub out_b: f64,
}

impl CnnMaxParams {
    pub fn init<R: Rng>(embedding: Tensor2, d_f: usize, rng: &mut R) -> Self {
        let d_e = embedding.cols();
        let convs: Vec<ConvFilter> = CONV_WIDTHS
            .iter()
            .map(|&k| ConvFilter::init(k, d_e, d_f, rng))
            .collect();
        let bound = 1.0 / ((3 * d_f) as f64).sqrt();
        CnnMaxParams {
            embedding,
            convs,
            out_w: (0..3 * d_f).map(|_| rng.gen_range(-bound..bound)).collect(),
            out_b: 0.0,
        }
    }

    pub fn filter_dim(&self) -> usize {
        self.out_w.len() / CONV_WIDTHS.len()
    }

    pub fn groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> =
            vec![("embedding".to_string(), self.embedding.as_mut_slice())];
        for conv in &mut self.convs {
            out.push((format!("conv{}_w", conv.width), conv.weights.as_mut_slice()));
            out.push((format!("conv{}_b", conv.width), conv.bias.as_mut_slice()));
        }
        out.push(("out_w".to_string(), self.out_w.as_mut_slice()));
        out.push(("out_b".to_string(), std::slice::from_mut(&mut self.out_b)));
        out
    }

    pub fn to_named(&self) -> Vec<(String, Vec<f64>)> {
        let mut clone = self.clone();
        clone
            .groups_mut()
            .into_iter()
            .map(|(name, slice)| (name, slice.to_vec()))
            .collect()
    }

    pub fn assign_named(&mut self, named: &[(String, Vec<f64>)]) {
        let mut groups = self.groups_mut();
        assert_eq!(groups.len(), named.len());
        for ((gname, slice), (nname, values)) in groups.iter_mut().zip(named) {
            assert_eq!(gname, nname, "group order mismatch");
            slice.copy_from_slice(values);
        }
    }
}

impl ConvAttnParams {
    pub fn init<R: Rng>(embedding: Tensor2, d_f: usize, rng: &mut R) -> Self {
        let d_e = embedding.cols();
        let convs: Vec<ConvFilter> = CONV_WIDTHS
            .iter()
            .map(|&k| ConvFilter::init(k, d_e, d_f, rng))
            .collect();
        let bound = 1.0 / (d_f as f64).sqrt();
        ConvAttnParams {
            embedding,
            convs,
            query: (0..d_f).map(|_| rng.gen_range(-bound..bound)).collect(),
            out_w: (0..d_f).map(|_| rng.gen_range(-bound..bound)).collect(),
            out_b: 0.0,
        }
    }

    pub fn filter_dim(&self) -> usize {
        self.query.len()
    }

    pub fn groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> =
            vec![("embedding".to_string(), self.embedding.as_mut_slice())];
        for conv in &mut self.convs {
            out.push((format!("conv{}_w", conv.width), conv.weights.as_mut_slice()));
            out.push((format!("conv{}_b", conv.width), conv.bias.as_mut_slice()));
        }
        out.push(("query".to_string(), self.query.as_mut_slice()));
        out.push(("out_w".to_string(), self.out_w.as_mut_slice()));
        out.push(("out_b".to_string(), std::slice::from_mut(&mut self.out_b)));
        out
    }

    pub fn to_named(&self) -> Vec<(String, Vec<f64>)> {
        let mut clone = self.clone();
        clone
            .groups_mut()
            .into_iter()
            .map(|(name, slice)| (name, slice.to_vec()))
            .collect()
    }

    pub fn assign_named(&mut self, named: &[(String, Vec<f64>)]) {
        let mut groups = self.groups_mut();
        assert_eq!(groups.len(), named.len());
        for ((gname, slice), (nname, values)) in groups.iter_mut().zip(named) {
            assert_eq!(gname, nname, "group order mismatch");
            slice.copy_from_slice(values);
        }
    }
}

/// Gradient mirrors keyed by the same group names/order as the params.
#[derive(Debug, Clone)]
pub struct NamedGrads {
    pub groups: Vec<(String, Vec<f64>)>,
}

impl NamedGrads {
    fn from_groups(groups: Vec<(String, usize)>) -> Self {
        NamedGrads {
            groups: groups
                .into_iter()
                .map(|(name, len)| (name, vec![0.0; len]))
                .collect(),
        }
    }

    pub fn zeros_like_cnn(params: &CnnMaxParams) -> Self {
        let mut p = params.clone();
        Self::from_groups(
            p.groups_mut()
                .into_iter()
                .map(|(n, s)| (n, s.len()))
                .collect(),
        )
    }

    pub fn zeros_like_attn(params: &ConvAttnParams) -> Self {
        let mut p = params.clone();
        Self::from_groups(
            p.groups_mut()
                .into_iter()
                .map(|(n, s)| (n, s.len()))
                .collect(),
        )
    }

    pub fn slice_mut(&mut self, name: &str) -> &mut [f64] {
        self.groups
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_mut_slice())
            .expect("unknown gradient group")
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, v) in &mut self.groups {
            for g in v {
                *g *= factor;
            }
        }
    }

    pub fn zero(&mut self) {
        for (_, v) in &mut self.groups {
            for g in v {
                *g = 0.0;
            }
        }
    }
}

/// Forward state kept for the CNN baseline backward pass.
#[derive(Debug, Clone)]
pub struct CnnMaxCache {
    pub token_ids: Vec<u32>,
    pub x: Tensor2,
    pub x_mask: Option<Vec<bool>>,
    pub conv_out: Vec<Tensor2>,
    /// pre-dropout pooled features, 3 * d_f
    pub pooled: Vec<f64>,
    /// winning position per pooled channel
    pub argmax: Vec<usize>,
    pub pooled_mask: Option<Vec<bool>>,
    /// pooled features after dropout, as fed to the affine layer
    pub pooled_dropped: Vec<f64>,
    pub prob: f64,
}

pub fn cnn_max_forward<R: Rng>(
    narrative: &Narrative,
    params: &CnnMaxParams,
    mode: Mode,
    rng: &mut R,
) -> Result<CnnMaxCache> {
    // conv dropout is applied to the pooled vector, not the feature maps
    let (x, x_mask, conv_out, _, _) =
        trunk_forward(narrative, &params.embedding, &params.convs, mode, false, rng)?;
    let n = narrative.true_length;
    let d_f = conv_out[0].cols();
    let mut pooled = vec![0.0; conv_out.len() * d_f];
    let mut argmax = vec![0usize; pooled.len()];
    for (k, t_k) in conv_out.iter().enumerate() {
        for f in 0..d_f {
            let (mut best_t, mut best) = (0usize, t_k.at(0, f));
            for t in 1..n {
                if t_k.at(t, f) > best {
                    best = t_k.at(t, f);
                    best_t = t;
                }
            }
            pooled[k * d_f + f] = best;
            argmax[k * d_f + f] = best_t;
        }
    }
    let mut pooled_dropped = pooled.clone();
    let pooled_mask = match mode {
        Mode::Train => {
            let mask = dropout_mask(pooled.len(), CONV_DROPOUT, rng);
            apply_dropout(&mut pooled_dropped, &mask, CONV_DROPOUT);
            Some(mask)
        }
        Mode::Eval => None,
    };
    let prob = sigmoid(dot(&params.out_w, &pooled_dropped) + params.out_b);
    Ok(CnnMaxCache {
        token_ids: narrative.active_ids().to_vec(),
        x,
        x_mask,
        conv_out,
        pooled,
        argmax,
        pooled_mask,
        pooled_dropped,
        prob,
    })
}

/// Eval-mode outcome probability, per the baseline's contract.
pub fn baseline_cnn_max(narrative: &Narrative, params: &CnnMaxParams) -> Result<f64> {
    let mut rng = rand::rngs::mock::StepRng::new(0, 1);
    Ok(cnn_max_forward(narrative, params, Mode::Eval, &mut rng)?.prob)
}

pub fn cnn_max_backward(
    cache: &CnnMaxCache,
    params: &CnnMaxParams,
    target: f64,
    grads: &mut NamedGrads,
) -> f64 {
    let n = cache.x.rows();
    let d_f = params.filter_dim();
    let dz = cache.prob - target;
    grads.slice_mut("out_b")[0] += dz;
    {
        let gw = grads.slice_mut("out_w");
        for (g, &p) in gw.iter_mut().zip(&cache.pooled_dropped) {
            *g += dz * p;
        }
    }
    let mut dpooled: Vec<f64> = params.out_w.iter().map(|&w| dz * w).collect();
    if let Some(mask) = &cache.pooled_mask {
        let keep_scale = 1.0 / (1.0 - CONV_DROPOUT);
        for (d, &keep) in dpooled.iter_mut().zip(mask) {
            *d = if keep { *d * keep_scale } else { 0.0 };
        }
    }
    // route each channel's gradient to the winning position only
    let mut dt = Tensor2::zeros(CONV_WIDTHS.len() * n, d_f);
    for (c, &d) in dpooled.iter().enumerate() {
        let k = c / d_f;
        let f = c % d_f;
        *dt.at_mut(k * n + cache.argmax[c], f) += d;
    }
    let (mut conv_w, mut conv_b, mut embedding) = scratch_trunk_grads(&params.convs, &params.embedding);
    trunk_backward(
        &dt,
        &cache.conv_out,
        &cache.x,
        cache.x_mask.as_deref(),
        &cache.token_ids,
        &params.convs,
        &mut conv_w,
        &mut conv_b,
        &mut embedding,
    );
    fold_trunk_grads(grads, &conv_w, &conv_b, &embedding, &params.convs);
    bce(cache.prob, target)
}

/// Forward state kept for the single-head attention baseline.
#[derive(Debug, Clone)]
pub struct ConvAttnCache {
    pub token_ids: Vec<u32>,
    pub x: Tensor2,
    pub x_mask: Option<Vec<bool>>,
    pub conv_out: Vec<Tensor2>,
    pub h: Tensor2,
    pub h_mask: Option<Vec<bool>>,
    pub alpha: Vec<f64>,
    pub value: Vec<f64>,
    pub prob: f64,
}

pub fn conv_attn_forward<R: Rng>(
    narrative: &Narrative,
    params: &ConvAttnParams,
    mode: Mode,
    rng: &mut R,
) -> Result<ConvAttnCache> {
    let (x, x_mask, conv_out, h, h_mask) =
        trunk_forward(narrative, &params.embedding, &params.convs, mode, true, rng)?;
    let masked = vec![false; h.rows()];
    let (alpha, value) = attend(&h, &params.query, &masked)?;
    let prob = sigmoid(dot(&params.out_w, &value) + params.out_b);
    Ok(ConvAttnCache {
        token_ids: narrative.active_ids().to_vec(),
        x,
        x_mask,
        conv_out,
        h,
        h_mask,
        alpha,
        value,
        prob,
    })
}

pub fn baseline_conv_attn(
    narrative: &Narrative,
    params: &ConvAttnParams,
) -> Result<(f64, Vec<f64>)> {
    let mut rng = rand::rngs::mock::StepRng::new(0, 1);
    let cache = conv_attn_forward(narrative, params, Mode::Eval, &mut rng)?;
    Ok((cache.prob, cache.alpha))
}

pub fn conv_attn_backward(
    cache: &ConvAttnCache,
    params: &ConvAttnParams,
    target: f64,
    grads: &mut NamedGrads,
) -> f64 {
    let d_f = params.filter_dim();
    let rows = cache.h.rows();
    let scale = 1.0 / (d_f as f64).sqrt();
    let dz = cache.prob - target;
    grads.slice_mut("out_b")[0] += dz;
    {
        let gw = grads.slice_mut("out_w");
        for (g, &v) in gw.iter_mut().zip(&cache.value) {
            *g += dz * v;
        }
    }
    // dv = dz * out_w; softmax backward mirrors the per-problem head
    let dalpha: Vec<f64> = (0..rows)
        .map(|i| dz * dot(&params.out_w, cache.h.row(i)))
        .collect();
    let correction: f64 = cache
        .alpha
        .iter()
        .zip(&dalpha)
        .map(|(&a, &da)| a * da)
        .sum();
    let mut dh = Tensor2::zeros(rows, d_f);
    {
        let gq = grads.slice_mut("query");
        for i in 0..rows {
            let a = cache.alpha[i];
            let dzs = a * (dalpha[i] - correction);
            let h_row = cache.h.row(i);
            let dh_row = dh.row_mut(i);
            for c in 0..d_f {
                gq[c] += dzs * h_row[c] * scale;
                dh_row[c] += a * dz * params.out_w[c] + dzs * params.query[c] * scale;
            }
        }
    }
    if let Some(mask) = &cache.h_mask {
        let keep_scale = 1.0 / (1.0 - CONV_DROPOUT);
        for (v, &keep) in dh.as_mut_slice().iter_mut().zip(mask) {
            *v = if keep { *v * keep_scale } else { 0.0 };
        }
    }
    let (mut conv_w, mut conv_b, mut embedding) = scratch_trunk_grads(&params.convs, &params.embedding);
    trunk_backward(
        &dh,
        &cache.conv_out,
        &cache.x,
        cache.x_mask.as_deref(),
        &cache.token_ids,
        &params.convs,
        &mut conv_w,
        &mut conv_b,
        &mut embedding,
    );
    fold_trunk_grads(grads, &conv_w, &conv_b, &embedding, &params.convs);
    bce(cache.prob, target)
}

fn scratch_trunk_grads(
    convs: &[ConvFilter],
    embedding: &Tensor2,
) -> (Vec<Tensor2>, Vec<Vec<f64>>, Tensor2) {
    (
        convs
            .iter()
            .map(|c| Tensor2::zeros(c.weights.rows(), c.weights.cols()))
            .collect(),
        convs.iter().map(|c| vec![0.0; c.bias.len()]).collect(),
        Tensor2::zeros(embedding.rows(), embedding.cols()),
    )
}

fn fold_trunk_grads(
    grads: &mut NamedGrads,
    conv_w: &[Tensor2],
    conv_b: &[Vec<f64>],
    embedding: &Tensor2,
    convs: &[ConvFilter],
) {
    for (g, &d) in grads
        .slice_mut("embedding")
        .iter_mut()
        .zip(embedding.as_slice())
    {
        *g += d;
    }
    for (k, conv) in convs.iter().enumerate() {
        for (g, &d) in grads
            .slice_mut(&format!("conv{}_w", conv.width))
            .iter_mut()
            .zip(conv_w[k].as_slice())
        {
            *g += d;
        }
        for (g, &d) in grads
            .slice_mut(&format!("conv{}_b", conv.width))
            .iter_mut()
            .zip(&conv_b[k])
        {
            *g += d;
        }
    }
}
