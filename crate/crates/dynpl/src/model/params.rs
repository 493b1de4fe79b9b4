use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor2;

pub const CONV_WIDTHS: [usize; 3] = [1, 2, 3];
pub const DEFAULT_FILTER_DIM: usize = 64;
pub const EMBED_DROPOUT: f64 = 0.2;
pub const CONV_DROPOUT: f64 = 0.3;

/// One convolutional filter bank: weights are d_f x (width * d_e) with the
/// window's token embeddings flattened in position order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvFilter {
    pub width: usize,
    pub weights: Tensor2,
    pub bias: Vec<f64>,
}

impl ConvFilter {
    pub fn init<R: Rng>(width: usize, d_e: usize, d_f: usize, rng: &mut R) -> Self {
        let fan_in = width * d_e;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weights = Tensor2::from_vec(
            d_f,
            fan_in,
            (0..d_f * fan_in).map(|_| rng.gen_range(-bound..bound)).collect(),
        );
        ConvFilter {
            width,
            weights,
            bias: vec![0.0; d_f],
        }
    }
}

/// Parameters of the problem-extraction network with its outcome head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynplParams {
    /// vocab-aligned embedding matrix, pad row all-zero
    pub embedding: Tensor2,
    pub convs: Vec<ConvFilter>,
    /// per-problem query vectors, L x d_f
    pub queries: Tensor2,
    /// per-problem classifier weights, L x d_f
    pub classifier_w: Tensor2,
    pub classifier_b: Vec<f64>,
    /// outcome head over the L raw problem scores
    pub outcome_w: Vec<f64>,
    pub outcome_b: f64,
}

impl DynplParams {
    pub fn init<R: Rng>(embedding: Tensor2, label_count: usize, d_f: usize, rng: &mut R) -> Self {
        let d_e = embedding.cols();
        let convs = CONV_WIDTHS
            .iter()
            .map(|&k| ConvFilter::init(k, d_e, d_f, rng))
            .collect();
        let q_bound = 1.0 / (d_f as f64).sqrt();
        let queries = Tensor2::from_vec(
            label_count,
            d_f,
            (0..label_count * d_f)
                .map(|_| rng.gen_range(-q_bound..q_bound))
                .collect(),
        );
        let classifier_w = Tensor2::from_vec(
            label_count,
            d_f,
            (0..label_count * d_f)
                .map(|_| rng.gen_range(-q_bound..q_bound))
                .collect(),
        );
        let o_bound = 1.0 / (label_count as f64).sqrt();
        DynplParams {
            embedding,
            convs,
            queries,
            classifier_w,
            classifier_b: vec![0.0; label_count],
            outcome_w: (0..label_count).map(|_| rng.gen_range(-o_bound..o_bound)).collect(),
            outcome_b: 0.0,
        }
    }

    pub fn label_count(&self) -> usize {
        self.queries.rows()
    }

    pub fn filter_dim(&self) -> usize {
        self.queries.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.cols()
    }

    /// Named flat views over every parameter group, in a fixed order shared
    /// with `DynplGrads`.
    pub fn groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> =
            vec![("embedding".to_string(), self.embedding.as_mut_slice())];
        for conv in &mut self.convs {
            out.push((format!("conv{}_w", conv.width), conv.weights.as_mut_slice()));
            out.push((format!("conv{}_b", conv.width), conv.bias.as_mut_slice()));
        }
        out.push(("queries".to_string(), self.queries.as_mut_slice()));
        out.push(("classifier_w".to_string(), self.classifier_w.as_mut_slice()));
        out.push(("classifier_b".to_string(), self.classifier_b.as_mut_slice()));
        out.push(("outcome_w".to_string(), self.outcome_w.as_mut_slice()));
        out.push((
            "outcome_b".to_string(),
            std::slice::from_mut(&mut self.outcome_b),
        ));
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

    pub fn max_abs(&self) -> f64 {
        let mut clone = self.clone();
        clone
            .groups_mut()
            .iter()
            .flat_map(|(_, s)| s.iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}

/// Gradient accumulator with the same shapes and group order as the params.
#[derive(Debug, Clone)]
pub struct DynplGrads {
    pub embedding: Tensor2,
    pub conv_w: Vec<Tensor2>,
    pub conv_b: Vec<Vec<f64>>,
    pub queries: Tensor2,
    pub classifier_w: Tensor2,
    pub classifier_b: Vec<f64>,
    pub outcome_w: Vec<f64>,
    pub outcome_b: f64,
}

impl DynplGrads {
    pub fn zeros_like(params: &DynplParams) -> Self {
        DynplGrads {
            embedding: Tensor2::zeros(params.embedding.rows(), params.embedding.cols()),
            conv_w: params
                .convs
                .iter()
                .map(|c| Tensor2::zeros(c.weights.rows(), c.weights.cols()))
                .collect(),
            conv_b: params.convs.iter().map(|c| vec![0.0; c.bias.len()]).collect(),
            queries: Tensor2::zeros(params.queries.rows(), params.queries.cols()),
            classifier_w: Tensor2::zeros(params.classifier_w.rows(), params.classifier_w.cols()),
            classifier_b: vec![0.0; params.classifier_b.len()],
            outcome_w: vec![0.0; params.outcome_w.len()],
            outcome_b: 0.0,
        }
    }

    pub fn groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> =
            vec![("embedding".to_string(), self.embedding.as_mut_slice())];
        for ((&width, w), b) in CONV_WIDTHS
            .iter()
            .zip(self.conv_w.iter_mut())
            .zip(self.conv_b.iter_mut())
        {
            out.push((format!("conv{width}_w"), w.as_mut_slice()));
            out.push((format!("conv{width}_b"), b.as_mut_slice()));
        }
        out.push(("queries".to_string(), self.queries.as_mut_slice()));
        out.push(("classifier_w".to_string(), self.classifier_w.as_mut_slice()));
        out.push(("classifier_b".to_string(), self.classifier_b.as_mut_slice()));
        out.push(("outcome_w".to_string(), self.outcome_w.as_mut_slice()));
        out.push((
            "outcome_b".to_string(),
            std::slice::from_mut(&mut self.outcome_b),
        ));
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, slice) in self.groups_mut() {
            for v in slice {
                *v *= factor;
            }
        }
    }

    pub fn zero(&mut self) {
        for (_, slice) in self.groups_mut() {
            for v in slice {
                *v = 0.0;
            }
        }
    }

    pub fn to_named(&self) -> Vec<(String, Vec<f64>)> {
        let mut clone = self.clone();
        clone
            .groups_mut()
            .into_iter()
            .map(|(name, slice)| (name, slice.to_vec()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn initialization_bounded_by_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let emb = Tensor2::zeros(10, 8);
        let params = DynplParams::init(emb, 5, 4, &mut rng);
        assert!(params.max_abs() <= 1.0);
    }

    #[test]
    fn grads_mirror_param_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = DynplParams::init(Tensor2::zeros(10, 8), 5, 4, &mut rng);
        let mut grads = DynplGrads::zeros_like(&params);
        let pg = params.groups_mut();
        let gg = grads.groups_mut();
        assert_eq!(pg.len(), gg.len());
        for ((pn, ps), (gn, gs)) in pg.iter().zip(gg.iter()) {
            assert_eq!(pn, gn);
            assert_eq!(ps.len(), gs.len());
        }
    }

    #[test]
    fn named_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = DynplParams::init(Tensor2::zeros(6, 4), 3, 4, &mut rng);
        let named = params.to_named();
        let snapshot = params.clone();
        params.assign_named(&named);
        assert_eq!(params, snapshot);
    }
}
