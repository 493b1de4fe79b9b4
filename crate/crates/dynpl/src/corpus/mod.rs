//! Ingest note/stay/code tables, build the cohort, normalize text, build the
//! vocabulary, and assemble fixed-length narratives.

pub mod cohort;
pub mod narrative;
pub mod tables;
pub mod text;
pub mod vocab;

pub use cohort::{
    build_cohort, read_cohort_jsonl, write_cohort_jsonl, CohortRecord, CohortReport, Outcome,
    Outcomes,
};
pub use narrative::{
    assemble_narrative, assemble_narrative_with_len, Narrative, NARRATIVE_LEN,
};
pub use tables::{
    load_codes_csv, load_notes_csv, load_stays_csv, load_tables, CodeKind, ColumnMap,
    IngestReport, NoteRow, RawTables, StayRow,
};
pub use text::{
    normalize_text, normalize_text_with, DEID_ID, DEID_TOKEN, NUM_ID, NUM_TOKEN, PAD_ID,
    PAD_TOKEN, RESERVED_TOKENS, UNK_ID, UNK_TOKEN,
};
pub use vocab::{Vocabulary, DEFAULT_MIN_DOCS};
