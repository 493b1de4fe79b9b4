//! Gated multi-task training, early stopping, cross-validation, and the
//! frozen-extractor ablation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::cohort::{CohortRecord, Outcome};
use crate::corpus::narrative::{assemble_narrative_with_len, Narrative};
use crate::corpus::tables::RawTables;
use crate::corpus::text::normalize_text;
use crate::corpus::vocab::Vocabulary;
use crate::error::{DynplError, Result};
use crate::labels::{label_vector, LabelSpace, PhecodeMapping};
use crate::metrics::{aggregate, au_roc, micro_macro, MeanStd, MicroMacro, ScoredSet};
use crate::model::backward::backward;
use crate::model::forward::{forward, outcome_head, Mode};
use crate::model::params::{DynplGrads, DynplParams};
use crate::numerics::{bce, AdamConfig, AdamState};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// effective batch size reached by gradient accumulation
    pub batch_size: usize,
    pub rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// validation extraction micro AU-ROC required to open the outcome gate
    pub threshold_p: f64,
    pub seed: u64,
    pub fold: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            rate: 0.001,
            max_epochs: 100,
            patience: 10,
            threshold_p: 0.90,
            seed: 0,
            fold: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(DynplError::Config(
                "batch_size, max_epochs, patience must be positive".into(),
            ));
        }
        if !(self.rate > 0.0) {
            return Err(DynplError::Config("rate must be positive".into()));
        }
        Ok(())
    }
}

/// One training/evaluation instance.
#[derive(Debug, Clone)]
pub struct Example {
    pub patient_id: String,
    pub stay_id: String,
    pub narrative: Narrative,
    pub labels: Vec<f64>,
    pub outcome: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss_problem: f64,
    pub loss_outcome: f64,
    pub val_p: Option<f64>,
    pub val_outcome: Option<f64>,
    pub gate_open: bool,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub params: DynplParams,
    pub reports: Vec<EpochReport>,
    pub best_epoch: Option<usize>,
    pub diverged: bool,
}

/// Sum of per-problem binary cross-entropies for one instance.
pub fn loss_problem(probs: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(probs.len(), targets.len());
    probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| bce(p, y))
        .sum()
}

pub fn loss_outcome(prob: f64, target: f64) -> f64 {
    bce(prob, target)
}

/// §4.5 case split: the outcome term joins the loss only once validation
/// extraction performance has reached the threshold (inclusive).
pub fn gated_loss(l_p: f64, l_o: f64, val_p: f64, threshold_p: f64) -> f64 {
    if val_p >= threshold_p {
        l_p + l_o
    } else {
        l_p
    }
}

/// Per-example dropout RNG: a pure function of (seed, epoch, dataset index),
/// so gradient accumulation order and batch grouping cannot change results.
pub fn example_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut z = seed
        .wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Accumulate gradients over a slice of (dataset index, example) pairs in
/// train mode. Returns (sum L_p, sum L_o) over the slice.
pub fn accumulate_batch(
    params: &DynplParams,
    batch: &[(usize, &Example)],
    seed: u64,
    epoch: usize,
    gate: bool,
    grads: &mut DynplGrads,
) -> Result<(f64, f64)> {
    let mut sum_p = 0.0;
    let mut sum_o = 0.0;
    for &(index, ex) in batch {
        let mut rng = example_rng(seed, epoch, index);
        let cache = forward(&ex.narrative, params, Mode::Train, &mut rng)?;
        let parts = backward(&cache, params, &ex.labels, ex.outcome, gate, grads)?;
        sum_p += parts.problem;
        sum_o += parts.outcome;
    }
    Ok((sum_p, sum_o))
}

/// Eval-mode predictions over a set: per-example problem probabilities and
/// outcome probability.
pub fn predict_set(params: &DynplParams, examples: &[Example]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut probs = Vec::with_capacity(examples.len());
    let mut outcome_probs = Vec::with_capacity(examples.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for ex in examples {
        let cache = forward(&ex.narrative, params, Mode::Eval, &mut rng)?;
        outcome_probs.push(cache.outcome_prob);
        probs.push(cache.probs);
    }
    Ok((probs, outcome_probs))
}

/// Label-major scored sets for extraction metrics.
pub fn extraction_sets(probs: &[Vec<f64>], examples: &[Example]) -> Vec<ScoredSet> {
    let label_count = examples.first().map_or(0, |e| e.labels.len());
    (0..label_count)
        .map(|l| {
            ScoredSet::new(
                probs.iter().map(|p| p[l]).collect(),
                examples.iter().map(|e| e.labels[l] as u8).collect(),
            )
        })
        .collect()
}

pub fn evaluate_extraction(params: &DynplParams, examples: &[Example]) -> Result<MicroMacro> {
    let (probs, _) = predict_set(params, examples)?;
    micro_macro(&extraction_sets(&probs, examples))
}

pub fn evaluate_outcome(params: &DynplParams, examples: &[Example]) -> Result<Option<f64>> {
    let (_, outcome_probs) = predict_set(params, examples)?;
    let labels: Vec<u8> = examples.iter().map(|e| e.outcome as u8).collect();
    Ok(au_roc(&ScoredSet::new(outcome_probs, labels)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Objective {
    /// gated multi-task training selected on validation outcome AU-ROC
    Gated,
    /// problem extraction only, selected on validation extraction micro AU-ROC
    ExtractionOnly,
}

/// Gated multi-task training with early stopping.
pub fn train(
    init: DynplParams,
    train_set: &[Example],
    val_set: &[Example],
    config: &TrainConfig,
) -> Result<TrainRun> {
    train_inner(init, train_set, val_set, config, Objective::Gated)
}

/// Extraction-only pretraining for the frozen ablation: the outcome head is
/// never part of the gradient and model selection tracks val_p.
pub fn train_extraction_only(
    init: DynplParams,
    train_set: &[Example],
    val_set: &[Example],
    config: &TrainConfig,
) -> Result<TrainRun> {
    train_inner(init, train_set, val_set, config, Objective::ExtractionOnly)
}

fn train_inner(
    init: DynplParams,
    train_set: &[Example],
    val_set: &[Example],
    config: &TrainConfig,
    objective: Objective,
) -> Result<TrainRun> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(DynplError::InvalidInput(
            "train and validation sets must be non-empty".into(),
        ));
    }
    let mut params = init;
    let mut adam = AdamState::new(AdamConfig {
        rate: config.rate,
        ..AdamConfig::default()
    });
    let mut grads = DynplGrads::zeros_like(&params);

    let mut reports = Vec::new();
    let mut last_good = params.clone();
    let mut best: Option<(usize, f64, DynplParams)> = None;
    let mut stale = 0usize;
    // gate for the first epoch: no validation yet, val_p starts at 0
    let mut prev_val_p = 0.0;

    for epoch in 1..=config.max_epochs {
        let gate = match objective {
            Objective::Gated => prev_val_p >= config.threshold_p,
            Objective::ExtractionOnly => false,
        };
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng = example_rng(config.seed ^ 0x5157_464c_4553, epoch, usize::MAX / 2);
        order.shuffle(&mut shuffle_rng);

        let mut sum_p = 0.0;
        let mut sum_o = 0.0;
        for chunk in order.chunks(config.batch_size) {
            grads.zero();
            let batch: Vec<(usize, &Example)> =
                chunk.iter().map(|&i| (i, &train_set[i])).collect();
            let (bp, bo) = accumulate_batch(&params, &batch, config.seed, epoch, gate, &mut grads)?;
            if !bp.is_finite() || !bo.is_finite() {
                // divergence: return the last epoch's parameters
                return Ok(TrainRun {
                    params: best.map(|(_, _, p)| p).unwrap_or(last_good),
                    reports,
                    best_epoch: None,
                    diverged: true,
                });
            }
            sum_p += bp;
            sum_o += bo;
            grads.scale(1.0 / chunk.len() as f64);
            adam.begin_step();
            for ((pname, pslice), (gname, gslice)) in
                params.groups_mut().into_iter().zip(grads.groups_mut())
            {
                debug_assert_eq!(pname, gname);
                adam.update(&pname, pslice, gslice)?;
            }
        }
        last_good = params.clone();

        let val_mm = evaluate_extraction(&params, val_set)?;
        let val_p = val_mm.micro_au_roc;
        let val_outcome = evaluate_outcome(&params, val_set)?;
        let n = train_set.len() as f64;
        let gate_open = val_p >= config.threshold_p;
        reports.push(EpochReport {
            epoch,
            loss_problem: sum_p / n,
            loss_outcome: sum_o / n,
            val_p: Some(val_p),
            val_outcome,
            gate_open,
        });
        prev_val_p = val_p;

        // model selection: best validation metric among qualifying epochs
        let (qualifies, metric) = match objective {
            Objective::Gated => (gate_open, val_outcome.unwrap_or(0.0)),
            Objective::ExtractionOnly => (true, val_p),
        };
        if qualifies && best.as_ref().is_none_or(|(_, m, _)| metric > *m) {
            best = Some((epoch, metric, params.clone()));
            stale = 0;
        } else if best.is_some() {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    let best_epoch = best.as_ref().map(|(e, _, _)| *e);
    Ok(TrainRun {
        params: best.map(|(_, _, p)| p).unwrap_or(params),
        reports,
        best_epoch,
        diverged: false,
    })
}

/// Freeze a pretrained extractor and fit only the outcome head. Raw problem
/// scores are deterministic once the extractor is frozen, so they are
/// computed once and the head is fit on them directly.
pub fn train_frozen(
    extractor: &DynplParams,
    train_set: &[Example],
    val_set: &[Example],
    config: &TrainConfig,
) -> Result<TrainRun> {
    config.validate()?;
    let frozen_named = extractor.to_named();
    let mut params = extractor.clone();

    let score_of = |set: &[Example]| -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        set.iter()
            .map(|ex| Ok(forward(&ex.narrative, extractor, Mode::Eval, &mut rng)?.scores))
            .collect()
    };
    let train_scores = score_of(train_set)?;
    let val_scores = score_of(val_set)?;

    let mut adam = AdamState::new(AdamConfig {
        rate: config.rate,
        ..AdamConfig::default()
    });
    let mut reports = Vec::new();
    let mut best: Option<(usize, f64, Vec<f64>, f64)> = None;
    let mut stale = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.max_epochs {
        let mut shuffle_rng = example_rng(config.seed ^ 0x46_525a, epoch, usize::MAX / 2);
        order.shuffle(&mut shuffle_rng);
        let mut sum_o = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut gw = vec![0.0; params.outcome_w.len()];
            let mut gb = 0.0;
            for &i in chunk {
                let prob = outcome_head(&train_scores[i], &params);
                let d = prob - train_set[i].outcome;
                sum_o += bce(prob, train_set[i].outcome);
                for (g, &s) in gw.iter_mut().zip(&train_scores[i]) {
                    *g += d * s;
                }
                gb += d;
            }
            let scale = 1.0 / chunk.len() as f64;
            for g in gw.iter_mut() {
                *g *= scale;
            }
            gb *= scale;
            adam.begin_step();
            adam.update("outcome_w", &mut params.outcome_w, &gw)?;
            adam.update("outcome_b", std::slice::from_mut(&mut params.outcome_b), &[gb])?;
        }

        let val_probs: Vec<f64> = val_scores
            .iter()
            .map(|s| outcome_head(s, &params))
            .collect();
        let val_outcome = au_roc(&ScoredSet::new(
            val_probs,
            val_set.iter().map(|e| e.outcome as u8).collect(),
        ));
        reports.push(EpochReport {
            epoch,
            loss_problem: 0.0,
            loss_outcome: sum_o / train_set.len() as f64,
            val_p: None,
            val_outcome,
            gate_open: true,
        });
        let metric = val_outcome.unwrap_or(0.0);
        if best.as_ref().is_none_or(|(_, m, _, _)| metric > *m) {
            best = Some((epoch, metric, params.outcome_w.clone(), params.outcome_b));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let best_epoch = best.as_ref().map(|(e, _, _, _)| *e);
    if let Some((_, _, w, b)) = best {
        params.outcome_w = w;
        params.outcome_b = b;
    }

    // freezing contract: everything but the outcome head is bit-identical
    let after = params.to_named();
    for ((name, before), (_, now)) in frozen_named.iter().zip(&after) {
        if name != "outcome_w" && name != "outcome_b" {
            assert_eq!(before, now, "frozen group '{name}' changed");
        }
    }
    Ok(TrainRun {
        params,
        reports,
        best_epoch,
        diverged: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    CnnMax,
    ConvAttn,
}

/// Outcome-only training for the two baselines: same trunk hyperparameters,
/// no gate, selection on validation outcome AU-ROC.
pub fn train_baseline(
    kind: BaselineKind,
    embedding: crate::numerics::Tensor2,
    d_f: usize,
    train_set: &[Example],
    val_set: &[Example],
    config: &TrainConfig,
) -> Result<(crate::model::checkpoint::ModelKind, Vec<EpochReport>)> {
    use crate::model::baselines::{
        baseline_cnn_max, baseline_conv_attn, cnn_max_backward, cnn_max_forward,
        conv_attn_backward, conv_attn_forward, CnnMaxParams, ConvAttnParams, NamedGrads,
    };
    use crate::model::checkpoint::ModelKind;

    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(DynplError::InvalidInput(
            "train and validation sets must be non-empty".into(),
        ));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    enum Either {
        Cnn(CnnMaxParams),
        Attn(ConvAttnParams),
    }
    let mut model = match kind {
        BaselineKind::CnnMax => Either::Cnn(CnnMaxParams::init(embedding, d_f, &mut init_rng)),
        BaselineKind::ConvAttn => {
            Either::Attn(ConvAttnParams::init(embedding, d_f, &mut init_rng))
        }
    };

    let mut adam = AdamState::new(AdamConfig {
        rate: config.rate,
        ..AdamConfig::default()
    });
    let mut grads = match &model {
        Either::Cnn(p) => NamedGrads::zeros_like_cnn(p),
        Either::Attn(p) => NamedGrads::zeros_like_attn(p),
    };
    let mut reports = Vec::new();
    let mut best: Option<(usize, f64, Vec<(String, Vec<f64>)>)> = None;
    let mut stale = 0usize;

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng = example_rng(config.seed ^ 0x42_4153_45, epoch, usize::MAX / 2);
        order.shuffle(&mut shuffle_rng);
        let mut sum_o = 0.0;
        for chunk in order.chunks(config.batch_size) {
            grads.zero();
            for &i in chunk {
                let ex = &train_set[i];
                let mut rng = example_rng(config.seed, epoch, i);
                sum_o += match &model {
                    Either::Cnn(p) => {
                        let cache = cnn_max_forward(&ex.narrative, p, Mode::Train, &mut rng)?;
                        cnn_max_backward(&cache, p, ex.outcome, &mut grads)
                    }
                    Either::Attn(p) => {
                        let cache = conv_attn_forward(&ex.narrative, p, Mode::Train, &mut rng)?;
                        conv_attn_backward(&cache, p, ex.outcome, &mut grads)
                    }
                };
            }
            grads.scale(1.0 / chunk.len() as f64);
            adam.begin_step();
            let groups = match &mut model {
                Either::Cnn(p) => p.groups_mut(),
                Either::Attn(p) => p.groups_mut(),
            };
            for ((name, pslice), (_, gslice)) in groups.into_iter().zip(&grads.groups) {
                adam.update(&name, pslice, gslice)?;
            }
        }

        let val_probs: Vec<f64> = match &model {
            Either::Cnn(p) => val_set
                .iter()
                .map(|ex| baseline_cnn_max(&ex.narrative, p))
                .collect::<Result<_>>()?,
            Either::Attn(p) => val_set
                .iter()
                .map(|ex| Ok(baseline_conv_attn(&ex.narrative, p)?.0))
                .collect::<Result<_>>()?,
        };
        let val_outcome = au_roc(&ScoredSet::new(
            val_probs,
            val_set.iter().map(|e| e.outcome as u8).collect(),
        ));
        reports.push(EpochReport {
            epoch,
            loss_problem: 0.0,
            loss_outcome: sum_o / train_set.len() as f64,
            val_p: None,
            val_outcome,
            gate_open: true,
        });
        let metric = val_outcome.unwrap_or(0.0);
        if best.as_ref().is_none_or(|(_, m, _)| metric > *m) {
            let snapshot = match &model {
                Either::Cnn(p) => p.to_named(),
                Either::Attn(p) => p.to_named(),
            };
            best = Some((epoch, metric, snapshot));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    if let Some((_, _, snapshot)) = &best {
        match &mut model {
            Either::Cnn(p) => p.assign_named(snapshot),
            Either::Attn(p) => p.assign_named(snapshot),
        }
    }
    let out = match model {
        Either::Cnn(p) => ModelKind::CnnMax(p),
        Either::Attn(p) => ModelKind::ConvAttn(p),
    };
    Ok((out, reports))
}

/// Patient-level split for one fold: the k test folds partition the patients
/// exactly once; validation is carved from the remainder.
#[derive(Debug, Clone)]
pub struct FoldSplit {
    pub train_patients: Vec<String>,
    pub val_patients: Vec<String>,
    pub test_patients: Vec<String>,
}

/// Deterministic seeded partition of patients into k folds. Each fold's test
/// set is one k-th of the patients; 10% of all patients (at least one) form
/// the validation set, drawn from outside the test fold.
pub fn partition_patients(patients: &[String], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if patients.len() < k || k < 2 {
        return Err(DynplError::InvalidInput(format!(
            "cannot make {k} folds from {} patients",
            patients.len()
        )));
    }
    let mut unique: Vec<String> = patients.to_vec();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() < k {
        return Err(DynplError::InvalidInput(format!(
            "cannot make {k} folds from {} unique patients",
            unique.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);

    let n = unique.len();
    let val_size = (n / 10).max(1);
    let mut splits = Vec::with_capacity(k);
    for fold in 0..k {
        // contiguous test slice: fold boundaries partition 0..n exactly
        let start = fold * n / k;
        let end = (fold + 1) * n / k;
        let test: Vec<String> = unique[start..end].to_vec();
        let rest: Vec<String> = unique[..start]
            .iter()
            .chain(&unique[end..])
            .cloned()
            .collect();
        let val: Vec<String> = rest[..val_size.min(rest.len().saturating_sub(1))].to_vec();
        let train: Vec<String> = rest[val.len()..].to_vec();
        splits.push(FoldSplit {
            train_patients: train,
            val_patients: val,
            test_patients: test,
        });
    }
    Ok(splits)
}

fn select<'a>(examples: &'a [Example], patients: &[String]) -> Vec<Example> {
    let set: std::collections::HashSet<&str> = patients.iter().map(|s| s.as_str()).collect();
    examples
        .iter()
        .filter(|e| set.contains(e.patient_id.as_str()))
        .cloned()
        .collect::<Vec<_>>()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub extraction: MicroMacro,
    pub outcome_au_roc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldMetrics>,
    pub aggregate: BTreeMap<String, MeanStd>,
}

/// k-fold cross-validation over patients. `fit` trains on (train, val) and
/// returns the parameters to evaluate on the held-out test fold.
pub fn run_cv<F>(examples: &[Example], k: usize, seed: u64, mut fit: F) -> Result<CvReport>
where
    F: FnMut(usize, &[Example], &[Example]) -> Result<DynplParams>,
{
    let patients: Vec<String> = examples.iter().map(|e| e.patient_id.clone()).collect();
    let splits = partition_patients(&patients, k, seed)?;
    let mut folds = Vec::with_capacity(k);
    for (fold, split) in splits.iter().enumerate() {
        let train_set = select(examples, &split.train_patients);
        let val_set = select(examples, &split.val_patients);
        let test_set = select(examples, &split.test_patients);
        if train_set.is_empty() || val_set.is_empty() || test_set.is_empty() {
            return Err(DynplError::Data(format!(
                "fold {fold}: empty split (train {}, val {}, test {})",
                train_set.len(),
                val_set.len(),
                test_set.len()
            )));
        }
        let params = fit(fold, &train_set, &val_set)?;
        folds.push(FoldMetrics {
            fold,
            extraction: evaluate_extraction(&params, &test_set)?,
            outcome_au_roc: evaluate_outcome(&params, &test_set)?,
        });
    }

    let mut aggregate_map = BTreeMap::new();
    let series: [(&str, Box<dyn Fn(&FoldMetrics) -> Option<f64>>); 5] = [
        ("micro_au_roc", Box::new(|f| Some(f.extraction.micro_au_roc))),
        ("macro_au_roc", Box::new(|f| Some(f.extraction.macro_au_roc))),
        ("micro_au_pr", Box::new(|f| Some(f.extraction.micro_au_pr))),
        ("macro_au_pr", Box::new(|f| Some(f.extraction.macro_au_pr))),
        ("outcome_au_roc", Box::new(|f| f.outcome_au_roc)),
    ];
    for (name, get) in series {
        let values: Vec<f64> = folds.iter().filter_map(&get).collect();
        if values.len() >= 2 {
            aggregate_map.insert(name.to_string(), aggregate(&values));
        }
    }
    Ok(CvReport {
        folds,
        aggregate: aggregate_map,
    })
}

/// Bridge from the corpus stage: build one `Example` per cohort record by
/// concatenating its notes in chart order.
pub fn build_examples(
    tables: &RawTables,
    records: &[CohortRecord],
    vocab: &Vocabulary,
    space: &LabelSpace,
    phecodes: &PhecodeMapping,
    outcome: Outcome,
    max_len: usize,
) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|rec| {
            let notes: Vec<Vec<String>> = rec
                .note_refs
                .iter()
                .map(|&i| normalize_text(&tables.notes[i].text))
                .collect();
            let narrative = assemble_narrative_with_len(&notes, vocab, max_len)?;
            let labels: Vec<f64> = label_vector(rec, space, phecodes)
                .into_iter()
                .map(f64::from)
                .collect();
            Ok(Example {
                patient_id: rec.patient_id.clone(),
                stay_id: rec.stay_id.clone(),
                narrative,
                labels,
                outcome: f64::from(outcome.of(&rec.outcomes)),
            })
        })
        .collect()
}

pub fn write_epoch_reports(path: &std::path::Path, reports: &[EpochReport]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor2;
    use rand::Rng;

    // tiny planted-rule corpus straight from token ids: problem l <=> token
    // (l + 4) present; outcome = problem 0
    fn toy_examples(seed: u64, n: usize, vocab: usize, labels: usize) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let y: Vec<f64> = (0..labels)
                    .map(|_| f64::from(rng.gen_bool(0.4)))
                    .collect();
                let mut ids: Vec<u32> = (0..10)
                    .map(|_| rng.gen_range((4 + labels as u32)..vocab as u32))
                    .collect();
                for (l, &v) in y.iter().enumerate() {
                    if v == 1.0 {
                        let pos = rng.gen_range(0..=ids.len());
                        ids.insert(pos, 4 + l as u32);
                    }
                }
                let len = ids.len();
                let mut token_ids = ids;
                token_ids.resize(16, 0);
                Example {
                    patient_id: format!("p{i:04}"),
                    stay_id: format!("s{i:04}"),
                    narrative: Narrative {
                        pad_mask: (0..16).map(|j| j >= len).collect(),
                        true_length: len,
                        token_ids,
                    },
                    outcome: y[0],
                    labels: y,
                }
            })
            .collect()
    }

    fn toy_params(seed: u64, vocab: usize, labels: usize) -> DynplParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut emb = Tensor2::zeros(vocab, 8);
        for r in 1..vocab {
            for v in emb.row_mut(r) {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        DynplParams::init(emb, labels, 6, &mut rng)
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            max_epochs: 20,
            patience: 20,
            seed: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_helpers_match_formulas() {
        let probs = vec![0.5, 0.5, 0.5];
        assert!((loss_problem(&probs, &[0.0, 1.0, 0.0]) - 3.0 * 2f64.ln()).abs() < 1e-12);
        assert!((loss_outcome(0.5, 1.0) - 2f64.ln()).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probs: Vec<f64> = (0..8).map(|_| rng.gen_range(0.01..0.99)).collect();
        let ys: Vec<f64> = (0..8).map(|_| f64::from(rng.gen_bool(0.5))).collect();
        let oracle: f64 = probs
            .iter()
            .zip(&ys)
            .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum();
        assert!((loss_problem(&probs, &ys) - oracle).abs() < 1e-12);
    }

    #[test]
    fn gated_loss_case_split() {
        assert_eq!(gated_loss(1.0, 0.5, 0.95, 0.90), 1.5);
        assert_eq!(gated_loss(1.0, 0.5, 0.85, 0.90), 1.0);
        // boundary is inclusive
        assert_eq!(gated_loss(1.0, 0.5, 0.90, 0.90), 1.5);
    }

    #[test]
    fn unreachable_gate_leaves_outcome_head_at_initialization() {
        let examples = toy_examples(10, 60, 24, 3);
        let (train_set, val_set) = examples.split_at(45);
        let init = toy_params(11, 24, 3);
        let init_w = init.outcome_w.clone();
        let init_b = init.outcome_b;
        let config = TrainConfig {
            threshold_p: 1.01,
            ..quick_config()
        };
        let run = train(init, train_set, val_set, &config).unwrap();
        assert_eq!(run.params.outcome_w, init_w);
        assert_eq!(run.params.outcome_b, init_b);
        assert!(run.reports.iter().all(|r| !r.gate_open));
    }

    #[test]
    fn zero_threshold_trains_outcome_head_from_epoch_one() {
        let examples = toy_examples(12, 60, 24, 3);
        let (train_set, val_set) = examples.split_at(45);
        let init = toy_params(13, 24, 3);
        let init_w = init.outcome_w.clone();
        let config = TrainConfig {
            threshold_p: 0.0,
            max_epochs: 1,
            ..quick_config()
        };
        let run = train(init, train_set, val_set, &config).unwrap();
        assert_ne!(run.params.outcome_w, init_w);
        assert!(run.reports[0].gate_open);
    }

    #[test]
    fn training_is_reproducible() {
        let examples = toy_examples(14, 40, 24, 2);
        let (train_set, val_set) = examples.split_at(30);
        let config = TrainConfig {
            max_epochs: 3,
            ..quick_config()
        };
        let a = train(toy_params(15, 24, 2), train_set, val_set, &config).unwrap();
        let b = train(toy_params(15, 24, 2), train_set, val_set, &config).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(
            serde_json::to_string(&a.reports).unwrap(),
            serde_json::to_string(&b.reports).unwrap()
        );
    }

    #[test]
    fn gradient_accumulation_grouping_is_equivalent() {
        let examples = toy_examples(16, 32, 24, 3);
        let params = toy_params(17, 24, 3);
        let batch: Vec<(usize, &Example)> = examples.iter().enumerate().collect();

        let mut whole = DynplGrads::zeros_like(&params);
        accumulate_batch(&params, &batch, 9, 1, true, &mut whole).unwrap();

        let mut pieces = DynplGrads::zeros_like(&params);
        for chunk in batch.chunks(8) {
            accumulate_batch(&params, chunk, 9, 1, true, &mut pieces).unwrap();
        }

        for ((_, a), (_, b)) in whole.to_named().iter().zip(pieces.to_named().iter()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn planted_rule_is_recovered() {
        // separable toy corpus: extraction and outcome should both be learned
        let examples = toy_examples(18, 300, 24, 3);
        let (train_set, val_set) = examples.split_at(240);
        let config = TrainConfig {
            threshold_p: 0.90,
            max_epochs: 60,
            patience: 60,
            rate: 0.01,
            seed: 2,
            ..TrainConfig::default()
        };
        let run = train(toy_params(19, 24, 3), train_set, val_set, &config).unwrap();
        let last = run.reports.last().unwrap();
        let best_val_p = run
            .reports
            .iter()
            .filter_map(|r| r.val_p)
            .fold(0.0f64, f64::max);
        assert!(best_val_p >= 0.95, "val_p {best_val_p} (last {last:?})");
        let best_val_o = run
            .reports
            .iter()
            .filter_map(|r| r.val_outcome)
            .fold(0.0f64, f64::max);
        assert!(best_val_o >= 0.85, "val_outcome {best_val_o}");
        // gate opens at the first epoch whose *previous* val_p cleared 0.90
        assert!(run.reports.iter().any(|r| r.gate_open));
    }

    #[test]
    fn frozen_training_preserves_extractor_bits() {
        let examples = toy_examples(20, 60, 24, 3);
        let (train_set, val_set) = examples.split_at(45);
        let pre = train_extraction_only(
            toy_params(21, 24, 3),
            train_set,
            val_set,
            &TrainConfig {
                max_epochs: 5,
                ..quick_config()
            },
        )
        .unwrap();
        let extractor = pre.params;
        let run = train_frozen(&extractor, train_set, val_set, &quick_config()).unwrap();
        assert_eq!(run.params.embedding, extractor.embedding);
        assert_eq!(run.params.queries, extractor.queries);
        assert_eq!(run.params.classifier_w, extractor.classifier_w);
        for (a, b) in run.params.convs.iter().zip(&extractor.convs) {
            assert_eq!(a, b);
        }
        assert_ne!(run.params.outcome_w, extractor.outcome_w);
    }

    #[test]
    fn partition_covers_every_patient_exactly_once() {
        let patients: Vec<String> = (0..53).map(|i| format!("p{i:03}")).collect();
        let splits = partition_patients(&patients, 5, 7).unwrap();
        let mut seen = Vec::new();
        for split in &splits {
            // disjoint within fold
            let mut all = split.train_patients.clone();
            all.extend(split.val_patients.clone());
            all.extend(split.test_patients.clone());
            let mut dedup = all.clone();
            dedup.sort();
            dedup.dedup();
            assert_eq!(dedup.len(), patients.len(), "overlap inside a fold");
            seen.extend(split.test_patients.clone());
        }
        seen.sort();
        let mut expected = patients.clone();
        expected.sort();
        assert_eq!(seen, expected, "test folds must cover all patients once");
    }

    #[test]
    fn partition_is_seeded_and_deterministic() {
        let patients: Vec<String> = (0..20).map(|i| format!("p{i}")).collect();
        let a = partition_patients(&patients, 4, 1).unwrap();
        let b = partition_patients(&patients, 4, 1).unwrap();
        assert_eq!(a[2].test_patients, b[2].test_patients);
        let c = partition_patients(&patients, 4, 2).unwrap();
        assert_ne!(
            a.iter().map(|s| s.test_patients.clone()).collect::<Vec<_>>(),
            c.iter().map(|s| s.test_patients.clone()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn too_few_patients_is_an_error() {
        let patients: Vec<String> = (0..3).map(|i| format!("p{i}")).collect();
        assert!(partition_patients(&patients, 5, 0).is_err());
    }

    #[test]
    fn cv_aggregation_matches_hand_computed_mean_std() {
        // fixed per-fold numbers through the real aggregation path
        let values = [0.8, 0.9, 0.7];
        let agg = aggregate(&values);
        assert!((agg.mean - 0.8).abs() < 1e-12);
        let hand_var: f64 = values
            .iter()
            .map(|v| (v - 0.8) * (v - 0.8))
            .sum::<f64>()
            / 2.0;
        assert!((agg.std - hand_var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn run_cv_produces_k_folds_and_aggregates() {
        let examples = toy_examples(22, 80, 24, 2);
        let report = run_cv(&examples, 4, 3, |fold, train_set, val_set| {
            let config = TrainConfig {
                max_epochs: 2,
                seed: fold as u64,
                ..quick_config()
            };
            Ok(train(toy_params(23, 24, 2), train_set, val_set, &config)?.params)
        })
        .unwrap();
        assert_eq!(report.folds.len(), 4);
        assert!(report.aggregate.contains_key("micro_au_roc"));
        assert!(report.aggregate.contains_key("outcome_au_roc"));
    }
}
