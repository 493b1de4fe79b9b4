use std::collections::HashMap;
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{DynplError, Result};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeKind {
    Diagnosis,
    Procedure,
}

#[derive(Debug, Clone)]
pub struct NoteRow {
    pub patient_id: String,
    pub admission_id: String,
    pub chart_time: NaiveDateTime,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct StayRow {
    pub patient_id: String,
    pub stay_id: String,
    pub admission_id: String,
    pub hosp_admit: NaiveDateTime,
    pub hosp_disch: NaiveDateTime,
    pub icu_in: Option<NaiveDateTime>,
    pub icu_out: Option<NaiveDateTime>,
    pub age_years: f64,
    pub death_time: Option<NaiveDateTime>,
}

#[derive(Debug, Clone)]
pub struct CodeRow {
    pub admission_id: String,
    pub code: String,
    pub kind: CodeKind,
}

#[derive(Debug, Clone, Default)]
pub struct RawTables {
    pub notes: Vec<NoteRow>,
    pub stays: Vec<StayRow>,
    pub codes: Vec<CodeRow>,
}

/// Rows rejected at ingest, with one diagnostic per row.
#[derive(Debug, Clone, Default, Serialize)]
pub struct IngestReport {
    pub notes_rejected: Vec<String>,
    pub stays_rejected: Vec<String>,
    pub codes_rejected: Vec<String>,
}

/// Maps logical column names onto the headers of a concrete export. The
/// defaults match the schema written by `dynpl synth`; `ColumnMap::mimic()`
/// adapts the MIMIC-III NOTEEVENTS/ICUSTAYS/ADMISSIONS-merged export.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub note_patient_id: String,
    pub note_admission_id: String,
    pub note_chart_time: String,
    pub note_text: String,
    pub stay_patient_id: String,
    pub stay_id: String,
    pub stay_admission_id: String,
    pub stay_hosp_admit: String,
    pub stay_hosp_disch: String,
    pub stay_icu_in: String,
    pub stay_icu_out: String,
    pub stay_age_years: String,
    pub stay_death_time: String,
    pub code_admission_id: String,
    pub code_value: String,
    pub code_kind: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            note_patient_id: "patient_id".into(),
            note_admission_id: "admission_id".into(),
            note_chart_time: "chart_time".into(),
            note_text: "text".into(),
            stay_patient_id: "patient_id".into(),
            stay_id: "stay_id".into(),
            stay_admission_id: "admission_id".into(),
            stay_hosp_admit: "hosp_admit".into(),
            stay_hosp_disch: "hosp_disch".into(),
            stay_icu_in: "icu_in".into(),
            stay_icu_out: "icu_out".into(),
            stay_age_years: "age_years".into(),
            stay_death_time: "death_time".into(),
            code_admission_id: "admission_id".into(),
            code_value: "code".into(),
            code_kind: "kind".into(),
        }
    }
}

impl ColumnMap {
    /// Column names for a MIMIC-III export where ICUSTAYS has been joined
    /// with ADMISSIONS (DISCHTIME, ADMITTIME, DOD, age) into one stays table.
    pub fn mimic() -> Self {
        ColumnMap {
            note_patient_id: "SUBJECT_ID".into(),
            note_admission_id: "HADM_ID".into(),
            note_chart_time: "CHARTTIME".into(),
            note_text: "TEXT".into(),
            stay_patient_id: "SUBJECT_ID".into(),
            stay_id: "ICUSTAY_ID".into(),
            stay_admission_id: "HADM_ID".into(),
            stay_hosp_admit: "ADMITTIME".into(),
            stay_hosp_disch: "DISCHTIME".into(),
            stay_icu_in: "INTIME".into(),
            stay_icu_out: "OUTTIME".into(),
            stay_age_years: "AGE".into(),
            stay_death_time: "DOD".into(),
            code_admission_id: "HADM_ID".into(),
            code_value: "ICD9_CODE".into(),
            code_kind: "KIND".into(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn parse_ts(s: &str) -> std::result::Result<NaiveDateTime, String> {
    NaiveDateTime::parse_from_str(s.trim(), TIMESTAMP_FORMAT)
        .map_err(|e| format!("bad timestamp {s:?}: {e}"))
}

fn parse_ts_opt(s: &str) -> std::result::Result<Option<NaiveDateTime>, String> {
    if s.trim().is_empty() {
        Ok(None)
    } else {
        parse_ts(s).map(Some)
    }
}

struct HeaderIndex {
    by_name: HashMap<String, usize>,
}

impl HeaderIndex {
    fn new(headers: &csv::StringRecord) -> Self {
        let by_name = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_string(), i))
            .collect();
        HeaderIndex { by_name }
    }

    fn get<'r>(&self, record: &'r csv::StringRecord, col: &str) -> Result<&'r str> {
        let idx = self
            .by_name
            .get(col)
            .ok_or_else(|| DynplError::Data(format!("missing column {col:?}")))?;
        Ok(record.get(*idx).unwrap_or(""))
    }
}

pub fn load_notes_csv(path: &Path, map: &ColumnMap, report: &mut IngestReport) -> Result<Vec<NoteRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = HeaderIndex::new(&reader.headers()?.clone());
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let chart = match parse_ts(header.get(&rec, &map.note_chart_time)?) {
            Ok(t) => t,
            Err(e) => {
                report.notes_rejected.push(format!("row {}: {e}", line + 2));
                continue;
            }
        };
        rows.push(NoteRow {
            patient_id: header.get(&rec, &map.note_patient_id)?.to_string(),
            admission_id: header.get(&rec, &map.note_admission_id)?.to_string(),
            chart_time: chart,
            text: header.get(&rec, &map.note_text)?.to_string(),
        });
    }
    Ok(rows)
}

pub fn load_stays_csv(path: &Path, map: &ColumnMap, report: &mut IngestReport) -> Result<Vec<StayRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = HeaderIndex::new(&reader.headers()?.clone());
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parsed = (|| -> std::result::Result<StayRow, String> {
            let icu_in = parse_ts_opt(header.get(&rec, &map.stay_icu_in).map_err(|e| e.to_string())?)?;
            let icu_out =
                parse_ts_opt(header.get(&rec, &map.stay_icu_out).map_err(|e| e.to_string())?)?;
            if let (Some(a), Some(b)) = (icu_in, icu_out) {
                if a >= b {
                    return Err(format!("icu_in {a} not before icu_out {b}"));
                }
            }
            Ok(StayRow {
                patient_id: header
                    .get(&rec, &map.stay_patient_id)
                    .map_err(|e| e.to_string())?
                    .to_string(),
                stay_id: header
                    .get(&rec, &map.stay_id)
                    .map_err(|e| e.to_string())?
                    .to_string(),
                admission_id: header
                    .get(&rec, &map.stay_admission_id)
                    .map_err(|e| e.to_string())?
                    .to_string(),
                hosp_admit: parse_ts(
                    header
                        .get(&rec, &map.stay_hosp_admit)
                        .map_err(|e| e.to_string())?,
                )?,
                hosp_disch: parse_ts(
                    header
                        .get(&rec, &map.stay_hosp_disch)
                        .map_err(|e| e.to_string())?,
                )?,
                icu_in,
                icu_out,
                age_years: header
                    .get(&rec, &map.stay_age_years)
                    .map_err(|e| e.to_string())?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| format!("bad age: {e}"))?,
                death_time: parse_ts_opt(
                    header
                        .get(&rec, &map.stay_death_time)
                        .map_err(|e| e.to_string())?,
                )?,
            })
        })();
        match parsed {
            Ok(row) => rows.push(row),
            Err(e) => report.stays_rejected.push(format!("row {}: {e}", line + 2)),
        }
    }
    Ok(rows)
}

/// Loads a codes table. When `default_kind` is given the kind column is
/// optional, which covers the separate MIMIC DIAGNOSES_ICD / PROCEDURES_ICD
/// files.
pub fn load_codes_csv(
    path: &Path,
    map: &ColumnMap,
    default_kind: Option<CodeKind>,
    report: &mut IngestReport,
) -> Result<Vec<CodeRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = HeaderIndex::new(&reader.headers()?.clone());
    let has_kind = header.by_name.contains_key(&map.code_kind);
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let kind = if has_kind {
            match header.get(&rec, &map.code_kind)?.trim() {
                "diagnosis" => CodeKind::Diagnosis,
                "procedure" => CodeKind::Procedure,
                other => {
                    report
                        .codes_rejected
                        .push(format!("row {}: unknown kind {other:?}", line + 2));
                    continue;
                }
            }
        } else if let Some(k) = default_kind {
            k
        } else {
            return Err(DynplError::Data(format!(
                "codes file {} has no {:?} column and no default kind was given",
                path.display(),
                map.code_kind
            )));
        };
        let code = header.get(&rec, &map.code_value)?.trim();
        if code.is_empty() {
            report
                .codes_rejected
                .push(format!("row {}: empty code", line + 2));
            continue;
        }
        rows.push(CodeRow {
            admission_id: header.get(&rec, &map.code_admission_id)?.to_string(),
            code: code.replace('.', ""),
            kind,
        });
    }
    Ok(rows)
}

pub fn load_tables(
    notes_path: &Path,
    stays_path: &Path,
    codes_path: &Path,
    map: &ColumnMap,
) -> Result<(RawTables, IngestReport)> {
    let mut report = IngestReport::default();
    let tables = RawTables {
        notes: load_notes_csv(notes_path, map, &mut report)?,
        stays: load_stays_csv(stays_path, map, &mut report)?,
        codes: load_codes_csv(codes_path, map, None, &mut report)?,
    };
    Ok((tables, report))
}
