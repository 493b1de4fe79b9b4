//! Acceptance suite: eleven independent checks covering gradients, attention,
//! metrics, gating, end-to-end recovery, ablation direction, the label
//! oracle, noise robustness, code mapping, report fidelity, and manifest
//! reproducibility. Each check prints one PASS line on success.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dynpl::corpus::cohort::{build_cohort, CohortRecord, Outcomes};
use dynpl::corpus::narrative::{Narrative, NARRATIVE_LEN};
use dynpl::corpus::tables::CodeKind;
use dynpl::corpus::text::normalize_text;
use dynpl::corpus::vocab::Vocabulary;
use dynpl::explain::{build_problem_list, export_false_positives, narrative_tokens, render_report, ReportFormat, StayPrediction, PROBLEM_LIST_K};
use dynpl::labels::{build_label_space, rollup_icd9, LabelConfig, LabelSpace, PhecodeMapping, ProblemKind};
use dynpl::metrics::{au_pr, au_roc, MicroMacro, ScoredSet};
use dynpl::model::logreg::{fit_logreg, LogRegConfig};
use dynpl::model::{attend, backward, forward, loss_value, predict, DynplGrads, DynplParams, Mode};
use dynpl::numerics::{grad_check, Tensor2};
use dynpl::synth::{generate, GenSpec, SynthOutput};
use dynpl::train::{
    build_examples, evaluate_extraction, evaluate_outcome, partition_patients, train,
    train_extraction_only, train_frozen, Example, TrainConfig, TrainRun,
};

fn pass(n: usize, what: &str) {
    println!("PASS criterion {n}: {what}");
}

// ---------------------------------------------------------------- fixtures

struct Fixture {
    output: SynthOutput,
    vocab: Vocabulary,
    space: LabelSpace,
    examples: Vec<Example>,
}

fn build_fixture(spec: GenSpec, min_docs: u32, min_count: u32) -> Fixture {
    let output = generate(&spec).unwrap();
    let (records, _) = build_cohort(&output.tables).unwrap();
    let tokens: Vec<Vec<String>> = output
        .tables
        .notes
        .iter()
        .map(|n| normalize_text(&n.text))
        .collect();
    let vocab = Vocabulary::build(&tokens, min_docs).unwrap();
    let config = LabelConfig::from_selector("R-ICD-diag", min_count).unwrap();
    let space =
        build_label_space(&records, &config, &PhecodeMapping::default(), &HashMap::new()).unwrap();
    let examples = build_examples(
        &output.tables,
        &records,
        &vocab,
        &space,
        &PhecodeMapping::default(),
        spec.outcome,
        NARRATIVE_LEN,
    )
    .unwrap();
    Fixture { output, vocab, space, examples }
}

fn random_embedding(rows: usize, dim: usize, seed: u64) -> Tensor2 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Tensor2::zeros(rows, dim);
    for r in 1..rows {
        for v in m.row_mut(r) {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    m
}

fn init_params(fix: &Fixture, d_e: usize, d_f: usize, seed: u64) -> DynplParams {
    let emb = random_embedding(fix.vocab.len(), d_e, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DynplParams::init(emb, fix.space.len(), d_f, &mut rng)
}

fn split(
    examples: &[Example],
    folds: usize,
    seed: u64,
    fold: usize,
) -> (Vec<Example>, Vec<Example>, Vec<Example>) {
    let patients: Vec<String> = examples.iter().map(|e| e.patient_id.clone()).collect();
    let splits = partition_patients(&patients, folds, seed).unwrap();
    let pick = |ps: &[String]| {
        let set: HashSet<&String> = ps.iter().collect();
        examples
            .iter()
            .filter(|e| set.contains(&e.patient_id))
            .cloned()
            .collect::<Vec<_>>()
    };
    let s = &splits[fold];
    (pick(&s.train_patients), pick(&s.val_patients), pick(&s.test_patients))
}

fn small_spec(seed: u64) -> GenSpec {
    GenSpec {
        seed,
        n_stays: 400,
        vocab_size: 80,
        n_problems: 8,
        emission_prob: 0.3,
        notes_per_stay: (3, 4),
        tokens_per_note: (20, 35),
        risk_problems: 3,
        risk_weight: 5.0,
        outcome_bias: -7.0,
        ..GenSpec::default()
    }
}

fn config(rate: f64, max_epochs: usize, patience: usize, threshold_p: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        rate,
        max_epochs,
        patience,
        threshold_p,
        seed,
        fold: 0,
    }
}

// --------------------------------------------------- 1. gradient integrity

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
    for b in params.classifier_b.iter_mut() {
        *b = rng.gen_range(-0.1..0.1);
    }
    params.outcome_b = 0.05;
    params
}

#[test]
fn criterion_01_gradient_integrity() {
    let started = Instant::now();
    // N=12, L=3, d_f=4, d_e=8, gated loss
    let params = random_params(21, 10, 8, 4, 3);
    let ids: Vec<u32> = ChaCha8Rng::seed_from_u64(5)
        .sample_iter(rand::distributions::Uniform::new(1u32, 10))
        .take(12)
        .collect();
    let narrative = narrative_of(&ids, 16);
    let targets = [1.0, 0.0, 1.0];

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cache = forward(&narrative, &params, Mode::Eval, &mut rng).unwrap();
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
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let c = forward(&narrative, &scratch, Mode::Eval, &mut rng).unwrap();
            loss_value(&c, &targets, 1.0, true).total()
        },
        1e-5,
    );
    assert!(
        report.max_rel_err < 1e-4,
        "max rel err {} in {} [{}]",
        report.max_rel_err,
        report.worst_group,
        report.worst_index
    );
    assert!(started.elapsed() < Duration::from_secs(60), "grad check too slow");
    pass(1, &format!("full-model grad check max rel err {:.2e}", report.max_rel_err));
}

// --------------------------------------------------- 2. attention contract

#[test]
fn criterion_02_attention_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let d_f = 8;
    for case in 0..1000 {
        let n = rng.gen_range(2..=12);
        let mut h = Tensor2::zeros(n, d_f);
        for r in 0..n {
            for v in h.row_mut(r) {
                *v = rng.gen_range(-2.0..2.0);
            }
        }
        let mut masked: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        masked[rng.gen_range(0..n)] = false; // at least one active position
        let query: Vec<f64> = (0..d_f).map(|_| rng.gen_range(-2.0..2.0)).collect();

        let (alpha, _) = attend(&h, &query, &masked).unwrap();
        let sum: f64 = alpha.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "case {case}: sum {sum}");
        for (a, &m) in alpha.iter().zip(&masked) {
            if m {
                assert_eq!(*a, 0.0, "case {case}: masked weight not exactly zero");
            }
        }

        // zero query -> uniform over active positions
        let (uniform, _) = attend(&h, &vec![0.0; d_f], &masked).unwrap();
        let active = masked.iter().filter(|&&m| !m).count() as f64;
        for (a, &m) in uniform.iter().zip(&masked) {
            if !m {
                assert!((a - 1.0 / active).abs() < 1e-12, "case {case}: not uniform");
            }
        }
    }
    pass(2, "1000 random inputs: sums 1, masked exactly 0, zero query uniform");
}

// ---------------------------------------------- 3. metric oracle equivalence

/// O(n^2) pair-counting oracle for AU-ROC.
fn au_roc_pair_oracle(set: &ScoredSet) -> Option<f64> {
    let pos: Vec<f64> = set
        .scores
        .iter()
        .zip(&set.labels)
        .filter(|(_, &y)| y == 1)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = set
        .scores
        .iter()
        .zip(&set.labels)
        .filter(|(_, &y)| y == 0)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &p in &pos {
        for &q in &neg {
            total += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(total / (pos.len() * neg.len()) as f64)
}

/// Explicit threshold-sweep oracle for average precision.
fn au_pr_sweep_oracle(set: &ScoredSet) -> Option<f64> {
    let total_pos = set.labels.iter().filter(|&&y| y == 1).count();
    if total_pos == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = set.scores.clone();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &t in &thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (s, &y) in set.scores.iter().zip(&set.labels) {
            if *s >= t {
                if y == 1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let recall = tp as f64 / total_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += precision * (recall - prev_recall);
        prev_recall = recall;
    }
    Some(ap)
}

#[test]
fn criterion_03_metric_oracle_equivalence() {
    let fixed = ScoredSet::new(vec![0.1, 0.4, 0.35, 0.8], vec![0, 0, 1, 1]);
    assert_eq!(au_roc(&fixed), Some(0.75));

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for case in 0..200 {
        let n = rng.gen_range(2..=20);
        // coarse score grid so ties are common
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..=10) as f64 / 10.0).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
        let set = ScoredSet::new(scores, labels);

        let (roc, roc_oracle) = (au_roc(&set), au_roc_pair_oracle(&set));
        match (roc, roc_oracle) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "case {case}: roc {a} vs {b}"),
            (a, b) => assert_eq!(a, b, "case {case}: roc definedness"),
        }
        let (pr, pr_oracle) = (au_pr(&set), au_pr_sweep_oracle(&set));
        match (pr, pr_oracle) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "case {case}: pr {a} vs {b}"),
            (a, b) => assert_eq!(a, b, "case {case}: pr definedness"),
        }
    }
    pass(3, "200 tied instances match pair-counting and threshold-sweep oracles");
}

// -------------------------------------------------------- 4. gating behavior

fn gate_fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| build_fixture(small_spec(13), 2, 10))
}

#[test]
fn criterion_04_gating_behavior() {
    let fix = gate_fixture();
    let (train_set, val_set, _) = split(&fix.examples, 5, 13, 0);
    let init = init_params(fix, 16, 16, 13);

    // unreachable threshold: outcome head bit-identical after 20 epochs
    let run = train(init.clone(), &train_set, &val_set, &config(0.01, 20, 100, 1.01, 13)).unwrap();
    assert_eq!(run.reports.len(), 20);
    assert_eq!(run.params.outcome_w, init.outcome_w);
    assert_eq!(run.params.outcome_b, init.outcome_b);
    assert!(run.reports.iter().all(|r| !r.gate_open));
    // the extractor itself must still have trained
    assert_ne!(run.params.classifier_b, init.classifier_b);

    // zero threshold: outcome head changes after the first epoch
    let run = train(init.clone(), &train_set, &val_set, &config(0.01, 1, 100, 0.0, 13)).unwrap();
    assert_ne!(run.params.outcome_w, init.outcome_w);
    assert!(run.reports[0].gate_open);

    // 0.90 threshold: the gate opens exactly when validation extraction
    // micro AU-ROC first reaches it
    let run = train(init, &train_set, &val_set, &config(0.004, 30, 100, 0.90, 13)).unwrap();
    let crossing = run
        .reports
        .iter()
        .position(|r| r.val_p.unwrap_or(0.0) >= 0.90)
        .expect("validation extraction never reached 0.90");
    assert!(crossing > 0, "crossed in epoch 1; no transition observed");
    for (i, report) in run.reports.iter().enumerate() {
        assert_eq!(
            report.gate_open,
            i >= crossing,
            "epoch {}: gate_open {} (crossing at epoch {})",
            report.epoch,
            report.gate_open,
            crossing + 1
        );
    }
    pass(4, &format!("gate case split holds; transition at epoch {}", crossing + 1));
}

// ----------------------------------------------- 5. end-to-end recovery

struct E2e {
    fix: Fixture,
    params: DynplParams,
    test_set: Vec<Example>,
    extraction: MicroMacro,
    outcome_au_roc: f64,
    elapsed: Duration,
}

fn e2e() -> &'static E2e {
    static RUN: OnceLock<E2e> = OnceLock::new();
    RUN.get_or_init(|| {
        let started = Instant::now();
        let fix = build_fixture(GenSpec::default(), 5, 50);
        assert_eq!(fix.space.len(), 50, "default corpus must keep all 50 problems");
        let (train_set, val_set, test_set) = split(&fix.examples, 5, 7, 0);
        let init = init_params(&fix, 32, 32, 7);
        let run: TrainRun =
            train(init, &train_set, &val_set, &config(0.005, 30, 6, 0.90, 7)).unwrap();
        let extraction = evaluate_extraction(&run.params, &test_set).unwrap();
        let outcome_au_roc = evaluate_outcome(&run.params, &test_set).unwrap().unwrap();
        E2e {
            fix,
            params: run.params,
            test_set,
            extraction,
            outcome_au_roc,
            elapsed: started.elapsed(),
        }
    })
}

#[test]
fn criterion_05_end_to_end_synthetic_recovery() {
    let run = e2e();
    assert!(
        run.extraction.micro_au_roc >= 0.95,
        "extraction micro AU-ROC {}",
        run.extraction.micro_au_roc
    );
    assert!(run.outcome_au_roc >= 0.85, "outcome AU-ROC {}", run.outcome_au_roc);
    // constant predictions score exactly 0.5 under tie-aware AU-ROC
    let constant = au_roc(&ScoredSet::new(
        vec![0.5; run.test_set.len()],
        run.test_set.iter().map(|e| e.outcome as u8).collect(),
    ))
    .unwrap();
    assert!(run.outcome_au_roc - constant >= 0.3);
    assert!(
        run.elapsed < Duration::from_secs(900),
        "end-to-end run took {:?}",
        run.elapsed
    );
    pass(
        5,
        &format!(
            "micro AU-ROC {:.3}, outcome AU-ROC {:.3} in {:?}",
            run.extraction.micro_au_roc, run.outcome_au_roc, run.elapsed
        ),
    );
}

// -------------------------------------------------- 6. ablation direction

#[test]
fn criterion_06_end_to_end_beats_frozen_under_confounding() {
    let mut gaps = Vec::new();
    for seed in [31u64, 32, 33] {
        // the confounder dominates the outcome, so the achievable AU-ROC
        // from problem labels alone is far below the joint ceiling
        let spec = GenSpec {
            n_stays: 500,
            confounder_weight: Some(8.0),
            outcome_bias: -6.0,
            risk_weight: 3.0,
            ..small_spec(seed)
        };
        let fix = build_fixture(spec, 2, 10);
        let (train_set, val_set, test_set) = split(&fix.examples, 5, seed, 0);
        let init = init_params(&fix, 16, 16, seed);
        // a low gate threshold gives the outcome head time to discover the
        // confounding token pattern through the shared trunk
        let cfg = config(0.01, 40, 100, 0.5, seed);

        let joint = train(init.clone(), &train_set, &val_set, &cfg).unwrap();
        let joint_auc = evaluate_outcome(&joint.params, &test_set).unwrap().unwrap();

        let pre = train_extraction_only(init, &train_set, &val_set, &cfg).unwrap();
        let frozen = train_frozen(&pre.params, &train_set, &val_set, &cfg).unwrap();
        let frozen_auc = evaluate_outcome(&frozen.params, &test_set).unwrap().unwrap();

        println!(
            "seed {seed}: end-to-end {joint_auc:.3} vs frozen {frozen_auc:.3}"
        );
        gaps.push(joint_auc - frozen_auc);
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    assert!(mean >= 0.02, "mean end-to-end advantage {mean:.4} < 0.02 ({gaps:?})");
    pass(6, &format!("end-to-end beats frozen by {mean:.3} mean over 3 seeds"));
}

// ------------------------------------------ 7/8. noisy deterministic corpus

struct Noisy {
    fix: Fixture,
    params: DynplParams,
    dynpl_auc: f64,
    train_set: Vec<Example>,
    test_set: Vec<Example>,
}

fn noisy() -> &'static Noisy {
    static RUN: OnceLock<Noisy> = OnceLock::new();
    RUN.get_or_init(|| {
        let spec = GenSpec {
            n_stays: 800,
            vocab_size: 120,
            n_problems: 12,
            emission_prob: 0.25,
            risk_problems: 4,
            risk_weight: 5.0,
            outcome_bias: -8.5,
            deterministic_outcome: true,
            label_noise: 0.10,
            ..small_spec(11)
        };
        let fix = build_fixture(spec, 2, 10);
        assert_eq!(fix.space.len(), 12);
        let (train_set, val_set, test_set) = split(&fix.examples, 5, 11, 0);
        let init = init_params(&fix, 16, 16, 11);
        let run = train(init, &train_set, &val_set, &config(0.01, 32, 100, 0.85, 11)).unwrap();
        let dynpl_auc = evaluate_outcome(&run.params, &test_set).unwrap().unwrap();
        Noisy { fix, params: run.params, dynpl_auc, train_set, test_set }
    })
}

fn truth_features(fix: &Fixture, set: &[Example]) -> Vec<Vec<f64>> {
    let by_stay: HashMap<&str, &Vec<u8>> = fix
        .output
        .records
        .iter()
        .map(|r| (r.stay_id.as_str(), &r.true_problems))
        .collect();
    set.iter()
        .map(|e| {
            by_stay[e.stay_id.as_str()]
                .iter()
                .map(|&b| b as f64)
                .collect()
        })
        .collect()
}

#[test]
fn criterion_07_oracle_dominates_noisy_text_model() {
    let run = noisy();
    let features = truth_features(&run.fix, &run.train_set);
    let targets: Vec<f64> = run.train_set.iter().map(|e| e.outcome).collect();
    let model = fit_logreg(&features, &targets, &LogRegConfig::default()).unwrap();

    let test_features = truth_features(&run.fix, &run.test_set);
    let probs: Vec<f64> = test_features.iter().map(|x| model.predict(x)).collect();
    let oracle_auc = au_roc(&ScoredSet::new(
        probs,
        run.test_set.iter().map(|e| e.outcome as u8).collect(),
    ))
    .unwrap();
    assert!(oracle_auc >= 0.99, "oracle AU-ROC {oracle_auc}");
    assert!(
        oracle_auc > run.dynpl_auc,
        "oracle {oracle_auc} not strictly above dynpl {}",
        run.dynpl_auc
    );
    pass(
        7,
        &format!("lr_oracle {:.4} > dynpl-with-noise {:.4}", oracle_auc, run.dynpl_auc),
    );
}

#[test]
fn criterion_08_false_positive_export_recovers_flipped_labels() {
    let run = noisy();
    let stays: Vec<StayPrediction> = run
        .fix
        .examples
        .iter()
        .map(|ex| StayPrediction {
            stay_id: ex.stay_id.clone(),
            bundle: predict(&ex.narrative, &run.params).unwrap(),
            labels: ex.labels.clone(),
            tokens: narrative_tokens(&ex.narrative, &run.fix.vocab),
        })
        .collect();
    let fps = export_false_positives(&stays, &run.fix.space, 50);
    assert_eq!(fps.len(), 50, "expected a full top-50 export, got {}", fps.len());

    // label-space index -> synthetic problem index, via the rolled code
    let spec_codes: HashMap<String, usize> = (0..run.fix.space.len())
        .map(|l| (rollup_icd9(&format!("{:03}0", 100 + l)), l))
        .collect();
    let flipped: HashMap<&str, &Vec<usize>> = run
        .fix
        .output
        .records
        .iter()
        .map(|r| (r.stay_id.as_str(), &r.flipped))
        .collect();
    let hits = fps
        .iter()
        .filter(|fp| {
            let problem = spec_codes[&fp.code];
            flipped[fp.stay_id.as_str()].contains(&problem)
        })
        .count();
    assert!(
        hits * 2 >= fps.len(),
        "only {hits}/{} top false positives were flipped labels",
        fps.len()
    );
    pass(8, &format!("{hits}/50 top false positives are flipped-label cases"));
}

// ------------------------------------------------------ 9. rollup / mapping

#[test]
fn criterion_09_rollup_and_count_boundary() {
    assert_eq!(rollup_icd9("4280"), "428");
    assert_eq!(rollup_icd9("V4581"), "V45");

    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let alphabet: Vec<char> = "0123456789EV".chars().collect();
    for _ in 0..1000 {
        let len = rng.gen_range(1..=7);
        let code: String = (0..len)
            .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
            .collect();
        assert_eq!(rollup_icd9(&rollup_icd9(&code)), rollup_icd9(&code), "code {code}");
    }

    // counted fixture: one code at exactly the 50 floor, one just below
    let cutoff = chrono::NaiveDate::from_ymd_opt(2019, 1, 1)
        .unwrap()
        .and_hms_opt(12, 0, 0)
        .unwrap();
    let records: Vec<CohortRecord> = (0..120)
        .map(|i| {
            let mut codes = vec![("9999".to_string(), CodeKind::Diagnosis)];
            if i < 50 {
                codes.push(("1234".to_string(), CodeKind::Diagnosis));
            }
            if i < 49 {
                codes.push(("5678".to_string(), CodeKind::Diagnosis));
            }
            CohortRecord {
                patient_id: format!("p{i}"),
                stay_id: format!("s{i}"),
                admission_id: format!("a{i}"),
                cutoff,
                note_refs: vec![],
                outcomes: Outcomes::default(),
                codes,
                problem_labels: vec![],
            }
        })
        .collect();
    let config = LabelConfig::from_selector("R-ICD-diag", 50).unwrap();
    let space =
        build_label_space(&records, &config, &PhecodeMapping::default(), &HashMap::new()).unwrap();
    assert!(space.index_of(ProblemKind::IcdDiag, true, "123").is_some());
    assert!(space.index_of(ProblemKind::IcdDiag, true, "567").is_none());
    assert!(space.index_of(ProblemKind::IcdDiag, true, "999").is_some());
    pass(9, "rollup fixed points, idempotence on 1000 codes, exact 50-count floor");
}

// ------------------------------------------------------ 10. report fidelity

#[test]
fn criterion_10_report_fidelity() {
    let run = e2e();
    for ex in run.test_set.iter().take(20) {
        let bundle = predict(&ex.narrative, &run.params).unwrap();
        let tokens = narrative_tokens(&ex.narrative, &run.fix.vocab);
        let narrative_text = tokens.join(" ");
        let entries =
            build_problem_list(&bundle, &tokens, &run.fix.space, &run.params.outcome_w, PROBLEM_LIST_K);
        assert_eq!(entries.len(), PROBLEM_LIST_K);

        // top-k ordering: descending probability, ties broken by label index
        let mut expected: Vec<usize> = (0..bundle.problem_probs.len()).collect();
        expected.sort_by(|&a, &b| {
            bundle.problem_probs[b]
                .partial_cmp(&bundle.problem_probs[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let got: Vec<usize> = entries.iter().map(|e| e.label_index).collect();
        assert_eq!(got, expected[..PROBLEM_LIST_K], "stay {}", ex.stay_id);

        for entry in &entries {
            for span in &entry.spans {
                assert!(
                    narrative_text.contains(&span.text),
                    "stay {}: span {:?} not verbatim in narrative",
                    ex.stay_id,
                    span.text
                );
                assert!(span.context.contains(&span.text));
            }
        }
    }

    // golden reproducibility: identical seeds yield byte-identical reports
    let fix = gate_fixture();
    let (train_set, val_set, test_set) = split(&fix.examples, 5, 13, 0);
    let render = || {
        let init = init_params(fix, 16, 16, 41);
        let run = train(init, &train_set, &val_set, &config(0.01, 6, 100, 0.90, 41)).unwrap();
        let ex = &test_set[0];
        let bundle = predict(&ex.narrative, &run.params).unwrap();
        let tokens = narrative_tokens(&ex.narrative, &fix.vocab);
        let entries =
            build_problem_list(&bundle, &tokens, &fix.space, &run.params.outcome_w, PROBLEM_LIST_K);
        render_report(&entries, &ex.stay_id, ReportFormat::Markdown)
    };
    let first = render();
    assert!(first.contains("| Problem |"));
    assert_eq!(first, render(), "report not reproducible under a fixed seed");
    pass(10, "spans verbatim, top-14 ordering exact, reports reproducible");
}

// --------------------------------------------------- 11. manifest replay

fn dynpl_bin(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_dynpl"))
        .arg("--data-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("failed to launch dynpl");
    assert!(
        out.status.success(),
        "dynpl {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn criterion_11_manifest_reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dynpl_bin(d, &["synth", "--seed", "9", "--stays", "250", "--n-problems", "6"]);
    dynpl_bin(d, &["ingest"]);
    dynpl_bin(d, &["vocab", "--min-docs", "2"]);
    dynpl_bin(d, &["labels", "--problems", "R-ICD-diag", "--min-count", "5"]);
    dynpl_bin(
        d,
        &[
            "train", "--model", "dynpl", "--embed-dim", "12", "--filter-dim", "8",
            "--max-epochs", "4", "--seed", "9",
        ],
    );
    dynpl_bin(d, &["explain", "--seed", "9", "--limit", "1"]);
    dynpl_bin(d, &["fps", "--seed", "9", "--k", "10"]);

    let report_file = std::fs::read_dir(d.join("reports"))
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .find(|p| p.extension().is_some_and(|x| x == "md"))
        .expect("no rendered report");
    let tracked = [
        d.join("checkpoint.json"),
        d.join("metrics.json"),
        d.join("reports.jsonl"),
        d.join("false_positives.jsonl"),
        report_file,
    ];
    let before: Vec<Vec<u8>> = tracked.iter().map(|p| std::fs::read(p).unwrap()).collect();

    for manifest in [
        d.join("checkpoint.json.manifest.json"),
        d.join("reports").join("explain.manifest.json"),
        d.join("false_positives.jsonl.manifest.json"),
    ] {
        dynpl_bin(d, &["rerun", "--manifest", manifest.to_str().unwrap()]);
    }
    for (path, old) in tracked.iter().zip(&before) {
        let new = std::fs::read(path).unwrap();
        assert_eq!(&new, old, "{} changed across rerun", path.display());
    }
    pass(11, "checkpoints, metrics, and reports bit-identical across manifest replay");
}
