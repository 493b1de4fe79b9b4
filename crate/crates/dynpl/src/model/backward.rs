use crate::corpus::text::PAD_ID;
use crate::error::{DynplError, Result};
use crate::model::forward::ForwardCache;
use crate::model::params::{ConvFilter, DynplGrads, DynplParams, CONV_DROPOUT, EMBED_DROPOUT};
use crate::numerics::{bce, dot, Tensor2};

/// Loss for one example. The problem term sums binary cross-entropy over all
/// labels; the outcome term is included in the total only when the gate is
/// open.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub problem: f64,
    pub outcome: f64,
    pub gated: bool,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        if self.gated {
            self.problem + self.outcome
        } else {
            self.problem
        }
    }
}

pub fn loss_value(cache: &ForwardCache, targets: &[f64], outcome_target: f64, gate: bool) -> LossParts {
    let problem: f64 = cache
        .probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| bce(p, y))
        .sum();
    LossParts {
        problem,
        outcome: bce(cache.outcome_prob, outcome_target),
        gated: gate,
    }
}

/// Reverse-mode gradients for one example, accumulated into `grads`.
///
/// With sigmoid + cross-entropy the score gradients collapse: for problem l,
/// ds_l = (p_l - y_l) + gate * (p_o - y_o) * w_o[l] because the outcome logit
/// is affine in the raw scores. Everything upstream (attention, tanh convs,
/// dropout, embeddings) is chained by hand from there.
pub fn backward(
    cache: &ForwardCache,
    params: &DynplParams,
    targets: &[f64],
    outcome_target: f64,
    gate: bool,
    grads: &mut DynplGrads,
) -> Result<LossParts> {
    let label_count = params.label_count();
    if targets.len() != label_count {
        return Err(DynplError::InvalidInput(format!(
            "expected {label_count} targets, got {}",
            targets.len()
        )));
    }
    let d_f = params.filter_dim();
    let rows = cache.h.rows();
    let scale = 1.0 / (d_f as f64).sqrt();

    // outcome head
    let d_out = if gate {
        cache.outcome_prob - outcome_target
    } else {
        0.0
    };
    if gate {
        grads.outcome_b += d_out;
        for l in 0..label_count {
            grads.outcome_w[l] += d_out * cache.scores[l];
        }
    }

    // problem heads and attention, accumulating into the shared features
    let mut dh = Tensor2::zeros(rows, d_f);
    let mut dalpha = vec![0.0; rows];
    for l in 0..label_count {
        let ds = (cache.probs[l] - targets[l]) + d_out * params.outcome_w[l];
        grads.classifier_b[l] += ds;
        let v = &cache.values[l];
        for (gw, &vv) in grads.classifier_w.row_mut(l).iter_mut().zip(v) {
            *gw += ds * vv;
        }
        let w = params.classifier_w.row(l);
        let alpha = &cache.alphas[l];
        // dv = ds * w; dalpha_i = dv . h_i
        for i in 0..rows {
            dalpha[i] = ds * dot(w, cache.h.row(i));
        }
        let correction: f64 = alpha.iter().zip(&dalpha).map(|(&a, &da)| a * da).sum();
        let q = params.queries.row(l);
        let gq = grads.queries.row_mut(l);
        for i in 0..rows {
            let a = alpha[i];
            let dz = a * (dalpha[i] - correction);
            let h_row = cache.h.row(i);
            let dh_row = dh.row_mut(i);
            for c in 0..d_f {
                gq[c] += dz * h_row[c] * scale;
                dh_row[c] += a * ds * w[c] + dz * q[c] * scale;
            }
        }
    }

    // dropout on the concatenated features
    if let Some(mask) = &cache.h_mask {
        let keep_scale = 1.0 / (1.0 - CONV_DROPOUT);
        for (v, &keep) in dh.as_mut_slice().iter_mut().zip(mask) {
            *v = if keep { *v * keep_scale } else { 0.0 };
        }
    }

    trunk_backward(
        &dh,
        &cache.conv_out,
        &cache.x,
        cache.x_mask.as_deref(),
        &cache.token_ids,
        &params.convs,
        &mut grads.conv_w,
        &mut grads.conv_b,
        &mut grads.embedding,
    );

    Ok(loss_value(cache, targets, outcome_target, gate))
}

/// Shared trunk gradient: from d/dT (tanh conv outputs, concatenated 3n x d_f)
/// back through the convolutions and embedding dropout into the conv and
/// embedding gradients. Used by the main model and both baselines.
#[allow(clippy::too_many_arguments)]
pub(crate) fn trunk_backward(
    dt: &Tensor2,
    conv_out: &[Tensor2],
    x: &Tensor2,
    x_mask: Option<&[bool]>,
    token_ids: &[u32],
    convs: &[ConvFilter],
    grads_conv_w: &mut [Tensor2],
    grads_conv_b: &mut [Vec<f64>],
    grads_embedding: &mut Tensor2,
) {
    let n = x.rows();
    let d_e = x.cols();
    let d_f = conv_out[0].cols();
    let mut dx = Tensor2::zeros(n, d_e);
    for (k, conv) in convs.iter().enumerate() {
        let t_k = &conv_out[k];
        for t in 0..n {
            let dt_row = dt.row(k * n + t);
            let t_row = t_k.row(t);
            for f in 0..d_f {
                let g = dt_row[f] * (1.0 - t_row[f] * t_row[f]);
                if g == 0.0 {
                    continue;
                }
                grads_conv_b[k][f] += g;
                let w_row = conv.weights.row(f);
                let gw_row = grads_conv_w[k].row_mut(f);
                for j in 0..conv.width {
                    if t + j >= n {
                        break; // right zero padding carries no gradient
                    }
                    let x_row = x.row(t + j);
                    let dx_row = dx.row_mut(t + j);
                    for e in 0..d_e {
                        gw_row[j * d_e + e] += g * x_row[e];
                        dx_row[e] += g * w_row[j * d_e + e];
                    }
                }
            }
        }
    }

    // dropout on the embedded input, then scatter into the embedding rows
    if let Some(mask) = x_mask {
        let keep_scale = 1.0 / (1.0 - EMBED_DROPOUT);
        for (v, &keep) in dx.as_mut_slice().iter_mut().zip(mask) {
            *v = if keep { *v * keep_scale } else { 0.0 };
        }
    }
    for (t, &id) in token_ids.iter().enumerate() {
        if id == PAD_ID {
            continue; // the pad row stays zero and is never trained
        }
        let dx_row = dx.row(t);
        for (ge, &d) in grads_embedding.row_mut(id as usize).iter_mut().zip(dx_row) {
            *ge += d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::narrative::Narrative;
    use crate::model::forward::{forward, Mode};
    use crate::numerics::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn narrative_of(ids: &[u32], padded_len: usize) -> Narrative {
        let mut token_ids = ids.to_vec();
        token_ids.resize(padded_len, 0);
        Narrative {
            pad_mask: (0..padded_len).map(|i| i >= ids.len()).collect(),
            true_length: ids.len(),
            token_ids,
        }
    }

    fn random_params(seed: u64, vocab: usize, d_e: usize, d_f: usize, labels: usize) -> DynplParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut emb = Tensor2::zeros(vocab, d_e);
        for r in 1..vocab {
            for v in emb.row_mut(r) {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let mut params = DynplParams::init(emb, labels, d_f, &mut rng);
        // non-zero biases so their gradients are exercised away from zero
        for b in params.classifier_b.iter_mut() {
            *b = rng.gen_range(-0.1..0.1);
        }
        params.outcome_b = 0.05;
        params
    }

    fn run_grad_check(
        params: &DynplParams,
        narrative: &Narrative,
        targets: &[f64],
        outcome_target: f64,
        gate: bool,
    ) -> f64 {
        let mut eval_rng = ChaCha8Rng::seed_from_u64(0);
        let cache = forward(narrative, params, Mode::Eval, &mut eval_rng).unwrap();
        let mut grads = DynplGrads::zeros_like(params);
        backward(&cache, params, targets, outcome_target, gate, &mut grads).unwrap();

        let mut named = params.to_named();
        let analytic = grads.to_named();
        let mut scratch = params.clone();
        let report = grad_check(
            &mut named,
            &analytic,
            |p| {
                scratch.assign_named(p);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let c = forward(narrative, &scratch, Mode::Eval, &mut rng).unwrap();
                loss_value(&c, targets, outcome_target, gate).total()
            },
            1e-5,
        );
        report.max_rel_err
    }

    #[test]
    fn full_model_grad_check_gated() {
        // N=12, L=3, d_f=4, d_e=8
        let params = random_params(21, 10, 8, 4, 3);
        let ids: Vec<u32> = ChaCha8Rng::seed_from_u64(5)
            .sample_iter(rand::distributions::Uniform::new(1u32, 10))
            .take(12)
            .collect();
        let narrative = narrative_of(&ids, 16);
        let err = run_grad_check(&params, &narrative, &[1.0, 0.0, 1.0], 1.0, true);
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn full_model_grad_check_gate_closed() {
        let params = random_params(22, 10, 8, 4, 3);
        let ids: Vec<u32> = ChaCha8Rng::seed_from_u64(6)
            .sample_iter(rand::distributions::Uniform::new(1u32, 10))
            .take(12)
            .collect();
        let narrative = narrative_of(&ids, 16);
        let err = run_grad_check(&params, &narrative, &[0.0, 1.0, 0.0], 0.0, false);
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn gate_closed_leaves_outcome_grads_zero() {
        let params = random_params(23, 10, 4, 3, 2);
        let narrative = narrative_of(&[1, 3, 5, 7], 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cache = forward(&narrative, &params, Mode::Eval, &mut rng).unwrap();
        let mut grads = DynplGrads::zeros_like(&params);
        backward(&cache, &params, &[1.0, 0.0], 1.0, false, &mut grads).unwrap();
        assert!(grads.outcome_w.iter().all(|&g| g == 0.0));
        assert_eq!(grads.outcome_b, 0.0);
        // extraction grads still flow
        assert!(grads.classifier_b.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn pad_embedding_row_gets_no_gradient() {
        let params = random_params(24, 10, 4, 3, 2);
        let narrative = narrative_of(&[2, 4, 6], 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cache = forward(&narrative, &params, Mode::Eval, &mut rng).unwrap();
        let mut grads = DynplGrads::zeros_like(&params);
        backward(&cache, &params, &[1.0, 1.0], 0.0, true, &mut grads).unwrap();
        assert!(grads.embedding.row(0).iter().all(|&g| g == 0.0));
        // used token rows do get gradient
        assert!(grads.embedding.row(2).iter().any(|&g| g != 0.0));
    }

    #[test]
    fn train_mode_grad_check_with_fixed_dropout_masks() {
        // dropout masks come from the cache, so the analytic gradient must
        // match finite differences of the same masked forward
        let params = random_params(25, 10, 4, 3, 2);
        let narrative = narrative_of(&[1, 2, 3, 4, 5], 8);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let cache = forward(&narrative, &params, Mode::Train, &mut rng).unwrap();
        let x_mask = cache.x_mask.clone().unwrap();
        let h_mask = cache.h_mask.clone().unwrap();
        let targets = [1.0, 0.0];

        let mut grads = DynplGrads::zeros_like(&params);
        backward(&cache, &params, &targets, 1.0, true, &mut grads).unwrap();

        let mut named = params.to_named();
        let analytic = grads.to_named();
        let mut scratch = params.clone();
        let report = grad_check(
            &mut named,
            &analytic,
            |p| {
                scratch.assign_named(p);
                // replay the forward with the recorded masks
                let mut rng2 = ChaCha8Rng::seed_from_u64(0);
                let mut c = forward(&narrative, &scratch, Mode::Eval, &mut rng2).unwrap();
                // re-apply the saved masks by recomputing manually
                replay_with_masks(&narrative, &scratch, &x_mask, &h_mask, &mut c);
                loss_value(&c, &targets, 1.0, true).total()
            },
            1e-5,
        );
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    // Recompute the forward pass applying the given dropout masks, updating
    // the cache's outputs in place.
    fn replay_with_masks(
        narrative: &Narrative,
        params: &DynplParams,
        x_mask: &[bool],
        h_mask: &[bool],
        cache: &mut ForwardCache,
    ) {
        use crate::model::forward::{outcome_head, problem_heads};
        use crate::numerics::{apply_dropout, conv1d_same, Activation};
        let n = narrative.true_length;
        let d_e = params.embed_dim();
        let mut x = Tensor2::zeros(n, d_e);
        for (t, &id) in narrative.active_ids().iter().enumerate() {
            x.row_mut(t).copy_from_slice(params.embedding.row(id as usize));
        }
        apply_dropout(x.as_mut_slice(), x_mask, EMBED_DROPOUT);
        let d_f = params.filter_dim();
        let mut h = Tensor2::zeros(3 * n, d_f);
        for (k, conv) in params.convs.iter().enumerate() {
            let t_k =
                conv1d_same(&x, &conv.weights, &conv.bias, conv.width, Activation::Tanh).unwrap();
            for t in 0..n {
                h.row_mut(k * n + t).copy_from_slice(t_k.row(t));
            }
        }
        apply_dropout(h.as_mut_slice(), h_mask, CONV_DROPOUT);
        let masked = vec![false; h.rows()];
        let (scores, probs, _, _) = problem_heads(&h, &masked, params).unwrap();
        cache.outcome_prob = outcome_head(&scores, params);
        cache.scores = scores;
        cache.probs = probs;
    }

    #[test]
    fn target_length_mismatch_errors() {
        let params = random_params(26, 10, 4, 3, 2);
        let narrative = narrative_of(&[1, 2], 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cache = forward(&narrative, &params, Mode::Eval, &mut rng).unwrap();
        let mut grads = DynplGrads::zeros_like(&params);
        assert!(backward(&cache, &params, &[1.0], 0.0, true, &mut grads).is_err());
    }

    #[test]
    fn loss_total_respects_gate() {
        let parts = LossParts {
            problem: 1.5,
            outcome: 0.5,
            gated: false,
        };
        assert_eq!(parts.total(), 1.5);
        let parts = LossParts {
            gated: true,
            ..parts
        };
        assert_eq!(parts.total(), 2.0);
    }
}
