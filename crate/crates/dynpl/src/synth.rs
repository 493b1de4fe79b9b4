//! Seeded synthetic corpora with planted token → problem → outcome structure.
//!
//! Every stay carries hidden problem indicators; each positive problem plants
//! a unique trigger n-gram in the notes and emits an ICD code. The outcome is
//! drawn from a sigmoid of a known linear rule over the true indicators, then
//! realized as timestamps the cohort builder can rediscover.

use std::io::Write as _;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::cohort::Outcome;
use crate::corpus::tables::{CodeKind, CodeRow, NoteRow, RawTables, StayRow, TIMESTAMP_FORMAT};
use crate::error::{DynplError, Result};
use crate::numerics::sigmoid;

pub const CONFOUNDER_TOKEN: &str = "gconf";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSpec {
    pub seed: u64,
    pub n_stays: usize,
    /// filler vocabulary size (alphabetic tokens, disjoint from triggers)
    pub vocab_size: usize,
    pub n_problems: usize,
    /// per-problem prevalence
    pub emission_prob: f64,
    pub notes_per_stay: (usize, usize),
    pub tokens_per_note: (usize, usize),
    /// number of leading problems that carry outcome weight
    pub risk_problems: usize,
    pub risk_weight: f64,
    pub outcome_bias: f64,
    /// threshold the rule instead of sampling from it
    pub deterministic_outcome: bool,
    /// which timestamp pattern realizes a positive outcome
    pub outcome: Outcome,
    /// extra outcome signal carried by a token pattern tied to no problem
    pub confounder_weight: Option<f64>,
    /// probability of flipping each emitted problem label
    pub label_noise: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            seed: 7,
            n_stays: 2000,
            vocab_size: 500,
            n_problems: 50,
            emission_prob: 0.12,
            notes_per_stay: (3, 6),
            tokens_per_note: (40, 70),
            risk_problems: 6,
            risk_weight: 5.0,
            outcome_bias: -8.5,
            deterministic_outcome: false,
            outcome: Outcome::Mortality30,
            confounder_weight: None,
            label_noise: 0.0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_stays == 0 {
            return Err(DynplError::Config("n_stays must be positive".into()));
        }
        if self.vocab_size == 0 || self.vocab_size > 26 * 26 * 26 {
            return Err(DynplError::Config("vocab_size out of range".into()));
        }
        if self.n_problems == 0 || self.n_problems > 675 {
            return Err(DynplError::Config(
                "n_problems must be in 1..=675 (3-char code stems)".into(),
            ));
        }
        if self.risk_problems > self.n_problems {
            return Err(DynplError::Config(
                "risk_problems exceeds n_problems".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.emission_prob)
            || !(0.0..=1.0).contains(&self.label_noise)
        {
            return Err(DynplError::Config("probabilities must be in [0,1]".into()));
        }
        if self.notes_per_stay.0 < 3 || self.notes_per_stay.0 > self.notes_per_stay.1 {
            return Err(DynplError::Config(
                "notes_per_stay must be an increasing range with min >= 3".into(),
            ));
        }
        if self.tokens_per_note.0 == 0 || self.tokens_per_note.0 > self.tokens_per_note.1 {
            return Err(DynplError::Config("tokens_per_note range invalid".into()));
        }
        Ok(())
    }

    /// The full outcome weight vector over problems, as recorded in the meta.
    pub fn outcome_weights(&self) -> Vec<f64> {
        (0..self.n_problems)
            .map(|l| if l < self.risk_problems { self.risk_weight } else { 0.0 })
            .collect()
    }

    /// ICD9 code emitted for problem `l`; stems are distinct 3-char strings
    /// so rolled-up codes never collide.
    pub fn problem_code(&self, l: usize) -> String {
        format!("{:03}0", 100 + l)
    }

    /// Trigger n-gram for problem `l`: width cycles 1,2,3; tokens are unique
    /// per problem and disjoint from the filler vocabulary.
    pub fn trigger(&self, l: usize) -> Vec<String> {
        let width = l % 3 + 1;
        (0..width).map(|p| format!("g{}{}", base26(l), letter(p))).collect()
    }
}

/// Sidecar header: everything an oracle needs to reconstruct the rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthMeta {
    pub version: u32,
    pub seed: u64,
    pub outcome: String,
    pub outcome_weights: Vec<f64>,
    pub outcome_bias: f64,
    pub deterministic_outcome: bool,
    pub problem_codes: Vec<String>,
    pub triggers: Vec<Vec<String>>,
    pub confounder_weight: Option<f64>,
    pub label_noise: f64,
}

/// Sidecar row: ground truth for one stay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthRecord {
    pub patient_id: String,
    pub stay_id: String,
    pub admission_id: String,
    /// hidden indicators driving text and outcome
    pub true_problems: Vec<u8>,
    /// indicators after label noise, as emitted in the codes table
    pub noisy_problems: Vec<u8>,
    /// problem indices whose label was flipped by noise
    pub flipped: Vec<usize>,
    pub confounder: bool,
    pub outcome_prob: f64,
    pub outcome: bool,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub tables: RawTables,
    pub meta: TruthMeta,
    pub records: Vec<TruthRecord>,
}

fn letter(i: usize) -> char {
    (b'a' + (i % 26) as u8) as char
}

fn base26(mut i: usize) -> String {
    let mut s = ['a'; 3];
    for slot in s.iter_mut().rev() {
        *slot = letter(i % 26);
        i /= 26;
    }
    s.iter().collect()
}

fn ts(base: NaiveDateTime, offset_hours: i64) -> NaiveDateTime {
    base + Duration::hours(offset_hours)
}

pub fn generate(spec: &GenSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let weights = spec.outcome_weights();
    let filler: Vec<String> = (0..spec.vocab_size).map(|i| format!("f{}", base26(i))).collect();
    let triggers: Vec<Vec<String>> = (0..spec.n_problems).map(|l| spec.trigger(l)).collect();

    let epoch = NaiveDate::from_ymd_opt(2019, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();

    let mut tables = RawTables::default();
    let mut records = Vec::with_capacity(spec.n_stays);

    for i in 0..spec.n_stays {
        let patient_id = format!("p{i:05}");
        let stay_id = format!("s{i:05}");
        let admission_id = format!("a{i:05}");
        let admit = epoch + Duration::days(i as i64 * 3);
        let icu_in = ts(admit, 24);
        let icu_out = ts(icu_in, 48);

        // hidden indicators and the outcome rule
        let true_problems: Vec<u8> = (0..spec.n_problems)
            .map(|_| u8::from(rng.gen::<f64>() < spec.emission_prob))
            .collect();
        let confounder =
            spec.confounder_weight.is_some() && rng.gen_bool(0.5);
        let mut logit = spec.outcome_bias;
        for (w, &y) in weights.iter().zip(&true_problems) {
            logit += w * f64::from(y);
        }
        if confounder {
            logit += spec.confounder_weight.unwrap_or(0.0);
        }
        let outcome_prob = sigmoid(logit);
        let outcome = if spec.deterministic_outcome {
            logit > 0.0
        } else {
            rng.gen::<f64>() < outcome_prob
        };

        // notes: filler tokens with the positive triggers planted twice each;
        // notes are segment lists so inserting one n-gram can never split
        // another planted n-gram
        let n_notes = rng.gen_range(spec.notes_per_stay.0..=spec.notes_per_stay.1);
        let mut note_segments: Vec<Vec<Vec<String>>> = (0..n_notes)
            .map(|_| {
                let len = rng.gen_range(spec.tokens_per_note.0..=spec.tokens_per_note.1);
                (0..len)
                    .map(|_| vec![filler[rng.gen_range(0..filler.len())].clone()])
                    .collect()
            })
            .collect();
        for (l, &y) in true_problems.iter().enumerate() {
            if y == 1 {
                for _ in 0..2 {
                    let note = rng.gen_range(0..n_notes);
                    let pos = rng.gen_range(0..=note_segments[note].len());
                    note_segments[note].insert(pos, triggers[l].clone());
                }
            }
        }
        if confounder {
            for _ in 0..2 {
                let note = rng.gen_range(0..n_notes);
                let pos = rng.gen_range(0..=note_segments[note].len());
                note_segments[note].insert(pos, vec![CONFOUNDER_TOKEN.to_string()]);
            }
        }
        let note_tokens: Vec<Vec<String>> = note_segments
            .into_iter()
            .map(|segments| segments.into_iter().flatten().collect())
            .collect();
        for (j, tokens) in note_tokens.iter().enumerate() {
            tables.notes.push(NoteRow {
                patient_id: patient_id.clone(),
                admission_id: admission_id.clone(),
                // all notes chart before the ICU discharge cutoff
                chart_time: ts(admit, 2 + j as i64),
                text: tokens.join(" "),
            });
        }

        // outcome realization via timestamps / extra stays
        let mut death_time = None;
        let mut hosp_disch = ts(icu_out, 48);
        let mut extra_stay = None;
        if outcome {
            match spec.outcome {
                Outcome::Mortality30 => {
                    // after discharge but inside the 30-day window
                    death_time = Some(ts(icu_out, 24 * 10));
                }
                Outcome::MortalityInhosp => {
                    death_time = Some(ts(icu_out, 24));
                }
                Outcome::Bounceback => {
                    let in2 = ts(icu_out, 12);
                    let out2 = ts(in2, 24);
                    hosp_disch = ts(out2, 24);
                    extra_stay = Some(StayRow {
                        patient_id: patient_id.clone(),
                        stay_id: format!("{stay_id}b"),
                        admission_id: admission_id.clone(),
                        hosp_admit: admit,
                        hosp_disch,
                        icu_in: Some(in2),
                        icu_out: Some(out2),
                        age_years: 0.0, // patched below
                        death_time: None,
                    });
                }
                Outcome::Readmit30 => {
                    let admit2 = ts(icu_out, 24 * 8);
                    let in2 = ts(admit2, 24);
                    extra_stay = Some(StayRow {
                        patient_id: patient_id.clone(),
                        stay_id: format!("{stay_id}b"),
                        admission_id: format!("{admission_id}b"),
                        hosp_admit: admit2,
                        hosp_disch: ts(in2, 72),
                        icu_in: Some(in2),
                        icu_out: Some(ts(in2, 48)),
                        age_years: 0.0, // patched below
                        death_time: None,
                    });
                }
            }
        }
        let age = rng.gen_range(20..=90) as f64;
        tables.stays.push(StayRow {
            patient_id: patient_id.clone(),
            stay_id: stay_id.clone(),
            admission_id: admission_id.clone(),
            hosp_admit: admit,
            hosp_disch,
            icu_in: Some(icu_in),
            icu_out: Some(icu_out),
            age_years: age,
            death_time,
        });
        if let Some(mut s) = extra_stay {
            s.age_years = age;
            tables.stays.push(s);
        }

        // emitted labels: true indicators corrupted by independent flips
        let mut noisy_problems = true_problems.clone();
        let mut flipped = Vec::new();
        if spec.label_noise > 0.0 {
            for (l, y) in noisy_problems.iter_mut().enumerate() {
                if rng.gen::<f64>() < spec.label_noise {
                    *y = 1 - *y;
                    flipped.push(l);
                }
            }
        }
        for (l, &y) in noisy_problems.iter().enumerate() {
            if y == 1 {
                tables.codes.push(CodeRow {
                    admission_id: admission_id.clone(),
                    code: spec.problem_code(l),
                    kind: CodeKind::Diagnosis,
                });
            }
        }

        records.push(TruthRecord {
            patient_id,
            stay_id,
            admission_id,
            true_problems,
            noisy_problems,
            flipped,
            confounder,
            outcome_prob,
            outcome,
        });
    }

    let meta = TruthMeta {
        version: 1,
        seed: spec.seed,
        outcome: spec.outcome.to_string(),
        outcome_weights: weights,
        outcome_bias: spec.outcome_bias,
        deterministic_outcome: spec.deterministic_outcome,
        problem_codes: (0..spec.n_problems).map(|l| spec.problem_code(l)).collect(),
        triggers,
        confounder_weight: spec.confounder_weight,
        label_noise: spec.label_noise,
    };
    Ok(SynthOutput {
        tables,
        meta,
        records,
    })
}

fn fmt_ts(t: NaiveDateTime) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

/// Write `notes.csv`, `stays.csv`, `codes.csv` in the corpus module's default
/// schema, plus the `truth.jsonl` sidecar (meta first, then one row per stay).
pub fn write_corpus(output: &SynthOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut notes = csv::Writer::from_path(dir.join("notes.csv"))?;
    notes.write_record(["patient_id", "admission_id", "chart_time", "text"])?;
    for n in &output.tables.notes {
        notes.write_record([
            n.patient_id.as_str(),
            n.admission_id.as_str(),
            &fmt_ts(n.chart_time),
            n.text.as_str(),
        ])?;
    }
    notes.flush()?;

    let mut stays = csv::Writer::from_path(dir.join("stays.csv"))?;
    stays.write_record([
        "patient_id",
        "stay_id",
        "admission_id",
        "hosp_admit",
        "hosp_disch",
        "icu_in",
        "icu_out",
        "age_years",
        "death_time",
    ])?;
    for s in &output.tables.stays {
        stays.write_record([
            s.patient_id.as_str(),
            s.stay_id.as_str(),
            s.admission_id.as_str(),
            &fmt_ts(s.hosp_admit),
            &fmt_ts(s.hosp_disch),
            &s.icu_in.map(fmt_ts).unwrap_or_default(),
            &s.icu_out.map(fmt_ts).unwrap_or_default(),
            &format!("{}", s.age_years),
            &s.death_time.map(fmt_ts).unwrap_or_default(),
        ])?;
    }
    stays.flush()?;

    let mut codes = csv::Writer::from_path(dir.join("codes.csv"))?;
    codes.write_record(["admission_id", "code", "kind"])?;
    for c in &output.tables.codes {
        let kind = match c.kind {
            CodeKind::Diagnosis => "diagnosis",
            CodeKind::Procedure => "procedure",
        };
        codes.write_record([c.admission_id.as_str(), c.code.as_str(), kind])?;
    }
    codes.flush()?;

    let mut truth = std::io::BufWriter::new(std::fs::File::create(dir.join("truth.jsonl"))?);
    serde_json::to_writer(&mut truth, &output.meta)?;
    truth.write_all(b"\n")?;
    for r in &output.records {
        serde_json::to_writer(&mut truth, r)?;
        truth.write_all(b"\n")?;
    }
    truth.flush()?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<(TruthMeta, Vec<TruthRecord>)> {
    use std::io::BufRead;
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let meta_line = lines
        .next()
        .ok_or_else(|| DynplError::Data("empty truth sidecar".into()))??;
    let meta: TruthMeta = serde_json::from_str(&meta_line)?;
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok((meta, records))
}
