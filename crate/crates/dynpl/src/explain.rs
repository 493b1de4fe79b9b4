//! Human-facing artifacts: per-stay dynamic problem lists with attended text
//! spans, global risk-factor tables across folds, false-positive export for
//! review, and deterministic report rendering.

use serde::{Deserialize, Serialize};

use crate::corpus::narrative::Narrative;
use crate::corpus::vocab::Vocabulary;
use crate::error::{DynplError, Result};
use crate::labels::LabelSpace;
use crate::metrics::aggregate;
use crate::model::checkpoint::{Checkpoint, ModelKind};
use crate::model::forward::{decode_position, PredictionBundle};

/// tokens of context kept on each side of an attended n-gram
pub const SPAN_CONTEXT: usize = 2;
pub const PROBLEM_LIST_K: usize = 14;
pub const BASELINE_SPAN_K: usize = 14;
pub const FALSE_POSITIVE_K: usize = 50;
/// a prediction only counts as a false positive above this score
pub const FALSE_POSITIVE_FLOOR: f64 = 0.5;

/// One attended n-gram decoded back to text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Span {
    /// start token index in the narrative
    pub position: usize,
    /// filter width (n-gram length)
    pub width: usize,
    pub weight: f64,
    /// the attended n-gram itself
    pub text: String,
    /// n-gram with up to SPAN_CONTEXT tokens on each side
    pub context: String,
    pub context_start: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemListEntry {
    pub label_index: usize,
    pub code: String,
    pub display: String,
    pub probability: f64,
    pub scaled_weight: f64,
    pub spans: Vec<Span>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskFactor {
    pub label_index: usize,
    pub code: String,
    pub display: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FalsePositive {
    pub stay_id: String,
    pub label_index: usize,
    pub code: String,
    pub score: f64,
    pub spans: Vec<Span>,
}

/// Everything the exporters need to know about one evaluated stay.
#[derive(Debug, Clone)]
pub struct StayPrediction {
    pub stay_id: String,
    pub bundle: PredictionBundle,
    pub labels: Vec<f64>,
    pub tokens: Vec<String>,
}

/// The narrative's active tokens as text, for span decoding.
pub fn narrative_tokens(narrative: &Narrative, vocab: &Vocabulary) -> Vec<String> {
    narrative
        .active_ids()
        .iter()
        .map(|&id| vocab.token(id).to_string())
        .collect()
}

/// Divide by the greatest magnitude so the strongest weight maps to ±1.
/// An all-zero vector comes back unchanged with a warning.
pub fn scale_weights(w: &[f64]) -> Vec<f64> {
    let max = w.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if max == 0.0 {
        log::warn!("scale_weights: all outcome weights are zero");
        return w.to_vec();
    }
    w.iter().map(|v| v / max).collect()
}

/// The `n` highest-weight attention positions decoded to text spans. The
/// three filters index the same start positions, so duplicates of one start
/// position keep only the highest-weighted width. Ties break by position,
/// then by width, ascending.
pub fn top_spans(alpha: &[f64], tokens: &[String], n: usize) -> Vec<Span> {
    let len = tokens.len();
    assert_eq!(alpha.len(), 3 * len, "attention is over 3N positions");
    // best (weight, width) per start position
    let mut best: Vec<Option<(f64, usize)>> = vec![None; len];
    for (i, &w) in alpha.iter().enumerate() {
        let (width, start) = decode_position(i, len);
        let slot = &mut best[start];
        let better = match slot {
            None => true,
            Some((bw, bk)) => w > *bw || (w == *bw && width < *bk),
        };
        if better {
            *slot = Some((w, width));
        }
    }
    let mut ranked: Vec<(usize, f64, usize)> = best
        .iter()
        .enumerate()
        .filter_map(|(pos, s)| s.map(|(w, k)| (pos, w, k)))
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.2.cmp(&b.2))
    });
    ranked
        .into_iter()
        .take(n)
        .map(|(pos, weight, width)| {
            let end = (pos + width).min(len);
            let context_start = pos.saturating_sub(SPAN_CONTEXT);
            let context_end = (end + SPAN_CONTEXT).min(len);
            Span {
                position: pos,
                width,
                weight,
                text: tokens[pos..end].join(" "),
                context: tokens[context_start..context_end].join(" "),
                context_start,
            }
        })
        .collect()
}

/// Spans for the single-head attention baseline: same decoding, no
/// per-problem structure.
pub fn baseline_spans(alpha: &[f64], tokens: &[String], n: usize) -> Vec<Span> {
    top_spans(alpha, tokens, n)
}

/// Top-k problems by extraction probability, each with its scaled outcome
/// weight and the two most attended spans.
pub fn build_problem_list(
    bundle: &PredictionBundle,
    tokens: &[String],
    space: &LabelSpace,
    outcome_w: &[f64],
    k: usize,
) -> Vec<ProblemListEntry> {
    let label_count = bundle.problem_probs.len();
    let k = if k > label_count {
        log::warn!("problem list k={k} exceeds {label_count} labels; clamping");
        label_count
    } else {
        k
    };
    let scaled = scale_weights(outcome_w);
    let mut order: Vec<usize> = (0..label_count).collect();
    order.sort_by(|&a, &b| {
        bundle.problem_probs[b]
            .partial_cmp(&bundle.problem_probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
        .into_iter()
        .take(k)
        .map(|l| {
            let code = &space.codes[l];
            ProblemListEntry {
                label_index: l,
                code: code.code.clone(),
                display: code
                    .display_name
                    .clone()
                    .unwrap_or_else(|| code.code.clone()),
                probability: bundle.problem_probs[l],
                scaled_weight: scaled[l],
                spans: top_spans(&bundle.attention[l], tokens, 2),
            }
        })
        .collect()
}

/// Mean ± std of the raw outcome weights per problem across fold
/// checkpoints, sorted by mean descending.
pub fn global_risk_factors(checkpoints: &[Checkpoint], space: &LabelSpace) -> Result<Vec<RiskFactor>> {
    if checkpoints.len() < 2 {
        return Err(DynplError::InvalidInput(
            "global risk factors need at least two fold checkpoints".into(),
        ));
    }
    let hash = space.content_hash();
    let mut weight_rows = Vec::with_capacity(checkpoints.len());
    for (i, ckpt) in checkpoints.iter().enumerate() {
        if ckpt.label_space_hash != hash {
            return Err(DynplError::Data(format!(
                "fold {i}: checkpoint label space {} does not match {}",
                ckpt.label_space_hash, hash
            )));
        }
        match &ckpt.model {
            ModelKind::Dynpl(p) => weight_rows.push(&p.outcome_w),
            other => {
                return Err(DynplError::Data(format!(
                    "fold {i}: expected dynpl checkpoint, found {}",
                    other.name()
                )))
            }
        }
    }
    let label_count = space.len();
    if weight_rows.iter().any(|w| w.len() != label_count) {
        return Err(DynplError::Data(
            "checkpoint weight length does not match label space".into(),
        ));
    }
    let mut factors: Vec<RiskFactor> = (0..label_count)
        .map(|l| {
            let values: Vec<f64> = weight_rows.iter().map(|w| w[l]).collect();
            let stats = aggregate(&values);
            let code = &space.codes[l];
            RiskFactor {
                label_index: l,
                code: code.code.clone(),
                display: code
                    .display_name
                    .clone()
                    .unwrap_or_else(|| code.code.clone()),
                mean: stats.mean,
                std: stats.std,
            }
        })
        .collect();
    factors.sort_by(|a, b| {
        b.mean
            .partial_cmp(&a.mean)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.label_index.cmp(&b.label_index))
    });
    Ok(factors)
}

/// The k most confident false positives: predictions scoring at least
/// `FALSE_POSITIVE_FLOOR` on problems the stay is not labeled with, ranked
/// by score. Fewer than k qualifying pairs exports them all.
pub fn export_false_positives(
    stays: &[StayPrediction],
    space: &LabelSpace,
    k: usize,
) -> Vec<FalsePositive> {
    let mut all: Vec<FalsePositive> = Vec::new();
    for stay in stays {
        for (l, (&prob, &label)) in stay
            .bundle
            .problem_probs
            .iter()
            .zip(&stay.labels)
            .enumerate()
        {
            if label == 0.0 && prob >= FALSE_POSITIVE_FLOOR {
                all.push(FalsePositive {
                    stay_id: stay.stay_id.clone(),
                    label_index: l,
                    code: space.codes[l].code.clone(),
                    score: prob,
                    spans: top_spans(&stay.bundle.attention[l], &stay.tokens, 2),
                });
            }
        }
    }
    all.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.stay_id.cmp(&b.stay_id))
            .then(a.label_index.cmp(&b.label_index))
    });
    all.truncate(k);
    all
}

pub fn write_false_positives(path: &std::path::Path, fps: &[FalsePositive]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for fp in fps {
        serde_json::to_writer(&mut out, fp)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Html,
}

fn bold_spans(entry_span: &Span, format: ReportFormat) -> String {
    // the attended n-gram bolded inside its context
    let core = &entry_span.text;
    let (open, close) = match format {
        ReportFormat::Markdown => ("**", "**"),
        ReportFormat::Html => ("<b>", "</b>"),
    };
    // context always contains the core once, starting at a token boundary
    match entry_span.context.find(core.as_str()) {
        Some(at) => {
            let (pre, rest) = entry_span.context.split_at(at);
            let (mid, post) = rest.split_at(core.len());
            format!("{pre}{open}{mid}{close}{post}")
        }
        None => entry_span.context.clone(),
    }
}

fn escape_html(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Deterministic per-stay report: problem, extraction probability, scaled
/// weight, and the attended spans bolded in context.
pub fn render_report(entries: &[ProblemListEntry], stay_id: &str, format: ReportFormat) -> String {
    match format {
        ReportFormat::Markdown => {
            let mut out = format!("# Problem list for stay {stay_id}\n\n");
            if entries.is_empty() {
                out.push_str("_No problems extracted._\n");
                return out;
            }
            out.push_str(
                "| Problem | Extraction Probability | Problem Weight | Top Two Spans of Attended Text |\n",
            );
            out.push_str("|---|---|---|---|\n");
            for e in entries {
                let spans: Vec<String> = e
                    .spans
                    .iter()
                    .map(|s| format!("…{}…", bold_spans(s, format)))
                    .collect();
                out.push_str(&format!(
                    "| {} | {:.2} | {:+.2} | {} |\n",
                    e.display,
                    e.probability,
                    e.scaled_weight,
                    spans.join("<br>")
                ));
            }
            out
        }
        ReportFormat::Html => {
            let mut out = String::from("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">");
            out.push_str(&format!(
                "<title>Problem list for stay {}</title></head><body>\n",
                escape_html(stay_id)
            ));
            out.push_str(&format!(
                "<h1>Problem list for stay {}</h1>\n",
                escape_html(stay_id)
            ));
            if entries.is_empty() {
                out.push_str("<p><em>No problems extracted.</em></p>\n</body></html>\n");
                return out;
            }
            out.push_str("<table>\n<tr><th>Problem</th><th>Extraction Probability</th><th>Problem Weight</th><th>Top Two Spans of Attended Text</th></tr>\n");
            for e in entries {
                let spans: Vec<String> = e
                    .spans
                    .iter()
                    .map(|s| format!("…{}…", bold_spans(s, format)))
                    .collect();
                out.push_str(&format!(
                    "<tr><td>{}</td><td>{:.2}</td><td>{:+.2}</td><td>{}</td></tr>\n",
                    escape_html(&e.display),
                    e.probability,
                    e.scaled_weight,
                    spans.join("<br>")
                ));
            }
            out.push_str("</table>\n</body></html>\n");
            out
        }
    }
}
