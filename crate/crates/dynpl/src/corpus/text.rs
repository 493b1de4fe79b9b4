use std::sync::OnceLock;

use regex::Regex;

/// Reserved token spellings. Ids are contiguous from 0 in this order.
pub const PAD_TOKEN: &str = "\u{27e8}pad\u{27e9}";
pub const UNK_TOKEN: &str = "\u{27e8}unk\u{27e9}";
pub const NUM_TOKEN: &str = "\u{27e8}num\u{27e9}";
pub const DEID_TOKEN: &str = "\u{27e8}deid\u{27e9}";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const NUM_ID: u32 = 2;
pub const DEID_ID: u32 = 3;

pub const RESERVED_TOKENS: [&str; 4] = [PAD_TOKEN, UNK_TOKEN, NUM_TOKEN, DEID_TOKEN];

/// Default de-identification pattern: the MIMIC `[** ... **]` convention.
pub const DEFAULT_DEID_PATTERN: &str = r"\[\*\*[^\]]*\*\*\]";

fn default_deid_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(DEFAULT_DEID_PATTERN).unwrap())
}

/// Normalize raw note text into a token sequence: lowercase, de-identified
/// brackets to the de-id token, digit runs to the number token, unicode
/// quotes/dashes to ASCII, punctuation split into standalone tokens with
/// repeats collapsed, whitespace tokenization. Deterministic and idempotent
/// on its own output.
pub fn normalize_text(raw: &str) -> Vec<String> {
    normalize_text_with(raw, default_deid_regex())
}

/// As `normalize_text` with a caller-supplied de-id pattern for non-MIMIC
/// exports.
pub fn normalize_text_with(raw: &str, deid: &Regex) -> Vec<String> {
    let replaced = deid.replace_all(raw, format!(" {DEID_TOKEN} "));
    let lowered = replaced.to_lowercase();
    let ascii = map_unicode_punct(&lowered);
    tokenize(&ascii)
}

fn map_unicode_punct(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\u{2018}' | '\u{2019}' | '\u{201a}' | '\u{2032}' => out.push('\''),
            '\u{201c}' | '\u{201d}' | '\u{201e}' | '\u{2033}' => out.push('"'),
            '\u{2010}' | '\u{2011}' | '\u{2012}' | '\u{2013}' | '\u{2014}' | '\u{2015}' => {
                out.push('-')
            }
            '\u{2026}' => out.push_str("..."),
            '\u{00a0}' => out.push(' '),
            _ => out.push(c),
        }
    }
    out
}

fn tokenize(s: &str) -> Vec<String> {
    let chars: Vec<char> = s.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        // reserved tokens pass through atomically (idempotence)
        if c == '\u{27e8}' {
            if let Some(tok) = match_reserved(&chars[i..]) {
                i += tok.chars().count();
                tokens.push(tok.to_string());
                continue;
            }
        }
        if c.is_ascii_digit() {
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            tokens.push(NUM_TOKEN.to_string());
        } else if c.is_alphabetic() {
            let start = i;
            while i < chars.len() && chars[i].is_alphabetic() {
                i += 1;
            }
            tokens.push(chars[start..i].iter().collect());
        } else {
            // punctuation: standalone token, runs of the same mark collapsed
            while i < chars.len() && chars[i] == c {
                i += 1;
            }
            tokens.push(c.to_string());
        }
    }
    tokens
}

fn match_reserved(chars: &[char]) -> Option<&'static str> {
    for tok in RESERVED_TOKENS {
        let tc: Vec<char> = tok.chars().collect();
        if chars.len() >= tc.len() && chars[..tc.len()] == tc[..] {
            return Some(tok);
        }
    }
    None
}
