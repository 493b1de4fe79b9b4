use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::corpus::tables::{CodeKind, RawTables};
use crate::error::Result;

pub const MIN_NOTES: usize = 3;
pub const ADULT_AGE: f64 = 18.0;
pub const READMIT_WINDOW_DAYS: i64 = 30;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcomes {
    pub bounceback: bool,
    pub readmit30: bool,
    pub mortality_inhosp: bool,
    pub mortality30: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Bounceback,
    Readmit30,
    MortalityInhosp,
    Mortality30,
}

impl Outcome {
    pub fn of(self, o: &Outcomes) -> bool {
        match self {
            Outcome::Bounceback => o.bounceback,
            Outcome::Readmit30 => o.readmit30,
            Outcome::MortalityInhosp => o.mortality_inhosp,
            Outcome::Mortality30 => o.mortality30,
        }
    }
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Outcome::Bounceback => "bounceback",
            Outcome::Readmit30 => "readmit30",
            Outcome::MortalityInhosp => "mortality_inhosp",
            Outcome::Mortality30 => "mortality30",
        })
    }
}

impl std::str::FromStr for Outcome {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bounceback" => Ok(Outcome::Bounceback),
            "readmit30" => Ok(Outcome::Readmit30),
            "mortality_inhosp" => Ok(Outcome::MortalityInhosp),
            "mortality30" => Ok(Outcome::Mortality30),
            other => Err(format!("unknown outcome {other:?}")),
        }
    }
}

/// One included ICU stay. `note_refs` indexes into the notes table of the
/// `RawTables` the record was built from, sorted ascending by chart time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortRecord {
    pub patient_id: String,
    pub stay_id: String,
    pub admission_id: String,
    /// ICU discharge: all model inputs are charted at or before this time.
    pub cutoff: NaiveDateTime,
    pub note_refs: Vec<usize>,
    pub outcomes: Outcomes,
    /// Raw dotless admission codes; mapped into a label space downstream.
    pub codes: Vec<(String, CodeKind)>,
    /// Sparse problem-label indices into the active label space, filled in
    /// once a label space has been built.
    #[serde(default)]
    pub problem_labels: Vec<u32>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExclusionCounts {
    pub minors: usize,
    pub died_in_icu: usize,
    pub missing_icu_times: usize,
    pub too_few_notes: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CohortReport {
    pub included_stays: usize,
    pub included_patients: usize,
    pub exclusions: ExclusionCounts,
    pub positives: HashMap<String, usize>,
}

/// Build the cohort: apply the exclusion rules and derive the four outcome
/// labels from timestamps alone. Output is ordered by (patient_id, stay_id).
pub fn build_cohort(tables: &RawTables) -> Result<(Vec<CohortRecord>, CohortReport)> {
    let mut report = CohortReport::default();

    // notes grouped by admission, codes grouped by admission
    let mut notes_by_admission: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, n) in tables.notes.iter().enumerate() {
        notes_by_admission
            .entry(n.admission_id.as_str())
            .or_default()
            .push(i);
    }
    let mut codes_by_admission: HashMap<&str, Vec<(String, CodeKind)>> = HashMap::new();
    for c in &tables.codes {
        codes_by_admission
            .entry(c.admission_id.as_str())
            .or_default()
            .push((c.code.clone(), c.kind));
    }
    let mut stays_by_patient: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, s) in tables.stays.iter().enumerate() {
        stays_by_patient
            .entry(s.patient_id.as_str())
            .or_default()
            .push(i);
    }

    let mut records = Vec::new();
    for stay in &tables.stays {
        let (icu_in, icu_out) = match (stay.icu_in, stay.icu_out) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                report.exclusions.missing_icu_times += 1;
                continue;
            }
        };
        if stay.age_years < ADULT_AGE {
            report.exclusions.minors += 1;
            continue;
        }
        if let Some(death) = stay.death_time {
            // died during (or before the end of) this ICU stay
            if death >= icu_in && death <= icu_out {
                report.exclusions.died_in_icu += 1;
                continue;
            }
        }
        let cutoff = icu_out;
        let mut note_refs: Vec<usize> = notes_by_admission
            .get(stay.admission_id.as_str())
            .map(|idxs| {
                idxs.iter()
                    .copied()
                    .filter(|&i| tables.notes[i].chart_time <= cutoff)
                    .collect()
            })
            .unwrap_or_default();
        if note_refs.len() < MIN_NOTES {
            report.exclusions.too_few_notes += 1;
            continue;
        }
        // stable sort: chart_time, then table order
        note_refs.sort_by_key(|&i| (tables.notes[i].chart_time, i));

        let window_end = cutoff + Duration::days(READMIT_WINDOW_DAYS);
        let mut outcomes = Outcomes::default();
        for &other_idx in stays_by_patient
            .get(stay.patient_id.as_str())
            .into_iter()
            .flatten()
        {
            let other = &tables.stays[other_idx];
            if other.stay_id == stay.stay_id {
                continue;
            }
            if let Some(other_in) = other.icu_in {
                if other_in > cutoff {
                    if other.admission_id == stay.admission_id {
                        outcomes.bounceback = true;
                    }
                    if other_in <= window_end {
                        outcomes.readmit30 = true;
                    }
                }
            }
        }
        if let Some(death) = stay.death_time {
            if death > cutoff {
                if death <= stay.hosp_disch {
                    outcomes.mortality_inhosp = true;
                }
                if death <= window_end {
                    outcomes.mortality30 = true;
                }
            }
        }

        records.push(CohortRecord {
            patient_id: stay.patient_id.clone(),
            stay_id: stay.stay_id.clone(),
            admission_id: stay.admission_id.clone(),
            cutoff,
            note_refs,
            outcomes,
            codes: codes_by_admission
                .get(stay.admission_id.as_str())
                .cloned()
                .unwrap_or_default(),
            problem_labels: Vec::new(),
        });
    }

    records.sort_by(|a, b| {
        (a.patient_id.as_str(), a.stay_id.as_str())
            .cmp(&(b.patient_id.as_str(), b.stay_id.as_str()))
    });

    report.included_stays = records.len();
    let mut patients: Vec<&str> = records.iter().map(|r| r.patient_id.as_str()).collect();
    patients.sort_unstable();
    patients.dedup();
    report.included_patients = patients.len();
    for (name, f) in [
        ("bounceback", Outcome::Bounceback),
        ("readmit30", Outcome::Readmit30),
        ("mortality_inhosp", Outcome::MortalityInhosp),
        ("mortality30", Outcome::Mortality30),
    ] {
        report.positives.insert(
            name.to_string(),
            records.iter().filter(|r| f.of(&r.outcomes)).count(),
        );
    }
    Ok((records, report))
}

pub fn write_cohort_jsonl(path: &Path, records: &[CohortRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_cohort_jsonl(path: &Path) -> Result<Vec<CohortRecord>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}
