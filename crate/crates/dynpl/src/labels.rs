//! Problem label spaces: full/rolled ICD9 diagnosis and procedure codes and
//! phecodes, plus per-stay binary label vectors.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::cohort::CohortRecord;
use crate::corpus::tables::CodeKind;
use crate::error::{DynplError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    IcdDiag,
    IcdProc,
    Phecode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemCode {
    pub code: String,
    pub kind: ProblemKind,
    pub rolled: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub display_name: Option<String>,
}

/// Roll an ICD9 code up to its three-character stem. Codes are expected in
/// dotless form. Stems shorter than three characters come back unchanged.
pub fn rollup_icd9(code: &str) -> String {
    let chars: Vec<char> = code.chars().collect();
    if chars.len() < 3 {
        log::warn!("icd9 code {code:?} shorter than 3 characters, left unchanged");
        return code.to_string();
    }
    chars[..3].iter().collect()
}

/// Roll a phecode up by truncating at the decimal point.
pub fn rollup_phecode(code: &str) -> String {
    match code.split_once('.') {
        Some((head, _)) => head.to_string(),
        None => code.to_string(),
    }
}

/// ICD9-to-phecode mapping loaded from a `icd9,phecode` CSV.
#[derive(Debug, Clone, Default)]
pub struct PhecodeMapping {
    map: HashMap<String, Vec<String>>,
    pub unmapped_seen: std::cell::Cell<usize>,
}

impl PhecodeMapping {
    pub fn from_rows(rows: impl IntoIterator<Item = (String, String)>) -> Self {
        let mut map: HashMap<String, Vec<String>> = HashMap::new();
        for (icd, phe) in rows {
            let entry = map.entry(icd.replace('.', "")).or_default();
            if !entry.contains(&phe) {
                entry.push(phe);
            }
        }
        for v in map.values_mut() {
            v.sort();
        }
        PhecodeMapping {
            map,
            unmapped_seen: std::cell::Cell::new(0),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let icd_idx = headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case("icd9"))
            .ok_or_else(|| DynplError::Data("phecode mapping needs an icd9 column".into()))?;
        let phe_idx = headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case("phecode"))
            .ok_or_else(|| DynplError::Data("phecode mapping needs a phecode column".into()))?;
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let icd = rec.get(icd_idx).unwrap_or("").trim();
            let phe = rec.get(phe_idx).unwrap_or("").trim();
            if icd.is_empty() || phe.is_empty() {
                continue;
            }
            rows.push((icd.to_string(), phe.to_string()));
        }
        Ok(Self::from_rows(rows))
    }

    /// All phecodes mapped from an ICD9 code, empty when unmapped. With
    /// `rolled` the phecodes are truncated at the decimal point.
    pub fn map_phecode(&self, icd: &str, rolled: bool) -> Vec<String> {
        match self.map.get(&icd.replace('.', "")) {
            Some(phes) => {
                let mut out: Vec<String> = if rolled {
                    phes.iter().map(|p| rollup_phecode(p)).collect()
                } else {
                    phes.clone()
                };
                out.sort();
                out.dedup();
                out
            }
            None => {
                self.unmapped_seen.set(self.unmapped_seen.get() + 1);
                Vec::new()
            }
        }
    }
}

/// One (kind, rolled) slice of a combined problem configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindConfig {
    pub kind: ProblemKind,
    pub rolled: bool,
}

/// Problem configuration: which code kinds participate and whether each is
/// rolled. Combined configurations concatenate the per-kind spaces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub kinds: Vec<KindConfig>,
    pub min_count: u32,
}

pub const DEFAULT_MIN_COUNT: u32 = 50;

impl LabelConfig {
    pub fn new(kinds: Vec<KindConfig>, min_count: u32) -> Self {
        LabelConfig { kinds, min_count }
    }

    /// Parse one of the named problem-set selectors.
    pub fn from_selector(name: &str, min_count: u32) -> Result<Self> {
        use ProblemKind::*;
        let kinds = match name {
            "F-ICD" => vec![
                KindConfig { kind: IcdDiag, rolled: false },
                KindConfig { kind: IcdProc, rolled: false },
            ],
            "F-Phe+R-ICD-proc" => vec![
                KindConfig { kind: Phecode, rolled: false },
                KindConfig { kind: IcdProc, rolled: true },
            ],
            "R-ICD" => vec![
                KindConfig { kind: IcdDiag, rolled: true },
                KindConfig { kind: IcdProc, rolled: true },
            ],
            "R-Phe+R-ICD-proc" => vec![
                KindConfig { kind: Phecode, rolled: true },
                KindConfig { kind: IcdProc, rolled: true },
            ],
            "R-ICD-diag" => vec![KindConfig { kind: IcdDiag, rolled: true }],
            "R-ICD-proc" => vec![KindConfig { kind: IcdProc, rolled: true }],
            "R-Phe" => vec![KindConfig { kind: Phecode, rolled: true }],
            other => {
                return Err(DynplError::Config(format!(
                    "unknown problem-set selector {other:?}"
                )))
            }
        };
        Ok(LabelConfig { kinds, min_count })
    }

    pub fn selectors() -> &'static [&'static str] {
        &[
            "F-ICD",
            "F-Phe+R-ICD-proc",
            "R-ICD",
            "R-Phe+R-ICD-proc",
            "R-ICD-diag",
            "R-ICD-proc",
            "R-Phe",
        ]
    }
}

/// Ordered problem codes surviving the training-fold frequency filter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelSpace {
    pub version: u32,
    pub codes: Vec<ProblemCode>,
    pub counts: Vec<u32>,
    pub config: LabelConfig,
}

pub const LABEL_SPACE_VERSION: u32 = 1;

impl LabelSpace {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn index_of(&self, kind: ProblemKind, rolled: bool, code: &str) -> Option<usize> {
        self.codes
            .iter()
            .position(|c| c.kind == kind && c.rolled == rolled && c.code == code)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let space: LabelSpace = serde_json::from_str(&text)?;
        if space.version != LABEL_SPACE_VERSION {
            return Err(DynplError::Data(format!(
                "unsupported label-space version {}",
                space.version
            )));
        }
        Ok(space)
    }

    /// Stable content hash used to pin checkpoints to their label space.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("label space serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        hex_string(&hasher.finalize())
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Map one stay's raw admission codes through the configuration into the set
/// of problem codes it expresses, as (kind, rolled, code) triples.
fn record_problems(
    record: &CohortRecord,
    config: &LabelConfig,
    phecodes: &PhecodeMapping,
) -> Vec<(ProblemKind, bool, String)> {
    let mut out: HashSet<(ProblemKind, bool, String)> = HashSet::new();
    for kc in &config.kinds {
        for (code, code_kind) in &record.codes {
            match (kc.kind, code_kind) {
                (ProblemKind::IcdDiag, CodeKind::Diagnosis)
                | (ProblemKind::IcdProc, CodeKind::Procedure) => {
                    let value = if kc.rolled {
                        rollup_icd9(code)
                    } else {
                        code.clone()
                    };
                    out.insert((kc.kind, kc.rolled, value));
                }
                (ProblemKind::Phecode, CodeKind::Diagnosis) => {
                    for phe in phecodes.map_phecode(code, kc.rolled) {
                        out.insert((kc.kind, kc.rolled, phe));
                    }
                }
                _ => {}
            }
        }
    }
    let mut v: Vec<_> = out.into_iter().collect();
    v.sort();
    v
}

/// Build the label space from the training fold. Codes below the per-kind
/// occurrence floor are dropped; order is (kind, rolled, code) ascending so
/// identical folds produce identical serialized spaces.
pub fn build_label_space(
    cohort_train: &[CohortRecord],
    config: &LabelConfig,
    phecodes: &PhecodeMapping,
    display_names: &HashMap<String, String>,
) -> Result<LabelSpace> {
    let mut counts: HashMap<(ProblemKind, bool, String), u32> = HashMap::new();
    for record in cohort_train {
        for key in record_problems(record, config, phecodes) {
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<((ProblemKind, bool, String), u32)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= config.min_count)
        .collect();
    kept.sort();
    if kept.is_empty() {
        return Err(DynplError::Data(format!(
            "no code reaches {} training occurrences; configuration/data mismatch",
            config.min_count
        )));
    }
    let mut codes = Vec::with_capacity(kept.len());
    let mut kept_counts = Vec::with_capacity(kept.len());
    for ((kind, rolled, code), count) in kept {
        codes.push(ProblemCode {
            display_name: display_names.get(&code).cloned(),
            code,
            kind,
            rolled,
        });
        kept_counts.push(count);
    }
    Ok(LabelSpace {
        version: LABEL_SPACE_VERSION,
        codes,
        counts: kept_counts,
        config: config.clone(),
    })
}

/// Binary label vector for one stay: y[l] = 1 iff any admission code maps
/// into the space at index l. Idempotent over duplicate codes.
pub fn label_vector(
    record: &CohortRecord,
    space: &LabelSpace,
    phecodes: &PhecodeMapping,
) -> Vec<u8> {
    let mut y = vec![0u8; space.len()];
    for idx in label_indices(record, space, phecodes) {
        y[idx as usize] = 1;
    }
    y
}

/// Sparse form of `label_vector`: the sorted set indices.
pub fn label_indices(
    record: &CohortRecord,
    space: &LabelSpace,
    phecodes: &PhecodeMapping,
) -> Vec<u32> {
    let index: HashMap<(ProblemKind, bool, &str), u32> = space
        .codes
        .iter()
        .enumerate()
        .map(|(i, c)| ((c.kind, c.rolled, c.code.as_str()), i as u32))
        .collect();
    let mut out: Vec<u32> = record_problems(record, &space.config, phecodes)
        .iter()
        .filter_map(|(kind, rolled, code)| index.get(&(*kind, *rolled, code.as_str())).copied())
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::cohort::Outcomes;
    use chrono::NaiveDateTime;

    fn record(codes: Vec<(&str, CodeKind)>) -> CohortRecord {
        CohortRecord {
            patient_id: "p".into(),
            stay_id: "s".into(),
            admission_id: "a".into(),
            cutoff: NaiveDateTime::parse_from_str("2101-01-05 00:00:00", "%Y-%m-%d %H:%M:%S")
                .unwrap(),
            note_refs: vec![0, 1, 2],
            outcomes: Outcomes::default(),
            codes: codes
                .into_iter()
                .map(|(c, k)| (c.to_string(), k))
                .collect(),
            problem_labels: Vec::new(),
        }
    }

    #[test]
    fn rollup_examples() {
        assert_eq!(rollup_icd9("4280"), "428");
        assert_eq!(rollup_icd9("V4581"), "V45");
        assert_eq!(rollup_icd9("E8782"), "E87");
        assert_eq!(rollup_icd9("39"), "39"); // short procedure stem unchanged
    }

    #[test]
    fn rollup_idempotent() {
        for code in ["4280", "V4581", "E8782", "39", "428"] {
            assert_eq!(rollup_icd9(&rollup_icd9(code)), rollup_icd9(code));
        }
    }

    #[test]
    fn phecode_mapping_lookup_and_rollup() {
        let mapping =
            PhecodeMapping::from_rows([("4280".to_string(), "428.1".to_string())]);
        assert_eq!(mapping.map_phecode("4280", false), vec!["428.1"]);
        assert_eq!(mapping.map_phecode("4280", true), vec!["428"]);
        assert!(mapping.map_phecode("7999", false).is_empty());
        assert_eq!(mapping.unmapped_seen.get(), 1);
    }

    #[test]
    fn one_icd_to_two_phecodes() {
        let mapping = PhecodeMapping::from_rows([
            ("0389".to_string(), "994.2".to_string()),
            ("0389".to_string(), "38.0".to_string()),
        ]);
        let phes = mapping.map_phecode("0389", false);
        assert_eq!(phes.len(), 2);
        assert!(phes.contains(&"994.2".to_string()));
        assert!(phes.contains(&"38.0".to_string()));
    }

    #[test]
    fn occurrence_floor_boundary() {
        // code "1000" in exactly 50 records, "2000" in 49
        let mut train = Vec::new();
        for i in 0..50 {
            let mut codes = vec![("1000", CodeKind::Diagnosis)];
            if i < 49 {
                codes.push(("2000", CodeKind::Diagnosis));
            }
            train.push(record(codes));
        }
        let config = LabelConfig::from_selector("R-ICD-diag", 50).unwrap();
        let space =
            build_label_space(&train, &config, &PhecodeMapping::default(), &HashMap::new())
                .unwrap();
        assert!(space.index_of(ProblemKind::IcdDiag, true, "100").is_some());
        assert!(space.index_of(ProblemKind::IcdDiag, true, "200").is_none());
    }

    #[test]
    fn label_space_membership_against_counting_oracle() {
        let mut train = Vec::new();
        // "428x" rolls to "428" in 3 records, "4100" rolls to "410" in 2
        train.push(record(vec![("4280", CodeKind::Diagnosis), ("4100", CodeKind::Diagnosis)]));
        train.push(record(vec![("4281", CodeKind::Diagnosis), ("4100", CodeKind::Diagnosis)]));
        train.push(record(vec![("4289", CodeKind::Diagnosis)]));
        let config = LabelConfig::from_selector("R-ICD-diag", 3).unwrap();
        let space =
            build_label_space(&train, &config, &PhecodeMapping::default(), &HashMap::new())
                .unwrap();
        assert_eq!(space.len(), 1);
        assert_eq!(space.codes[0].code, "428");
        assert_eq!(space.counts[0], 3);
    }

    #[test]
    fn empty_space_is_an_error() {
        let train = vec![record(vec![("4280", CodeKind::Diagnosis)])];
        let config = LabelConfig::from_selector("R-ICD-diag", 50).unwrap();
        assert!(build_label_space(
            &train,
            &config,
            &PhecodeMapping::default(),
            &HashMap::new()
        )
        .is_err());
    }

    #[test]
    fn label_vector_examples() {
        let mut train = Vec::new();
        for _ in 0..2 {
            train.push(record(vec![
                ("4280", CodeKind::Diagnosis),
                ("9671", CodeKind::Procedure),
            ]));
        }
        let config = LabelConfig::from_selector("R-ICD", 2).unwrap();
        let space =
            build_label_space(&train, &config, &PhecodeMapping::default(), &HashMap::new())
                .unwrap();
        assert_eq!(space.len(), 2);

        // no codes -> zero vector
        let empty = record(vec![]);
        assert_eq!(
            label_vector(&empty, &space, &PhecodeMapping::default()),
            vec![0, 0]
        );

        // duplicates are idempotent, out-of-space codes ignored
        let r = record(vec![
            ("4280", CodeKind::Diagnosis),
            ("4289", CodeKind::Diagnosis),
            ("5550", CodeKind::Diagnosis),
        ]);
        let y = label_vector(&r, &space, &PhecodeMapping::default());
        let diag_idx = space.index_of(ProblemKind::IcdDiag, true, "428").unwrap();
        let proc_idx = space.index_of(ProblemKind::IcdProc, true, "967").unwrap();
        assert_eq!(y[diag_idx], 1);
        assert_eq!(y[proc_idx], 0);
        assert_eq!(y.iter().map(|&v| v as usize).sum::<usize>(), 1);
    }

    #[test]
    fn serialized_space_is_pure_function_of_fold() {
        let train = vec![
            record(vec![("4280", CodeKind::Diagnosis)]),
            record(vec![("4280", CodeKind::Diagnosis)]),
        ];
        let config = LabelConfig::from_selector("R-ICD-diag", 2).unwrap();
        let a = build_label_space(&train, &config, &PhecodeMapping::default(), &HashMap::new())
            .unwrap();
        let b = build_label_space(&train, &config, &PhecodeMapping::default(), &HashMap::new())
            .unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(a.content_hash(), b.content_hash());
    }
}
