//! Reply grammar.
//!
//! Step 2: a line `classes: <name>; <name>; ...`.
//! Step 3 and generic: one line per class,
//! `<name> | <broad> | <sub> | <attr>; <attr>; ...`.

use std::collections::BTreeMap;

use super::{RawObservedClasses, ReasonChain, ReasonerError};
use crate::vocab::normalize_class_name;

/// Strips list bullets, numbering and emphasis markers from the start of a
/// line.
fn strip_line_prefix(line: &str) -> &str {
    let mut s = line.trim_start();
    loop {
        let before = s;
        s = s.trim_start_matches(['*', '`', '>', '-', '•', '#']).trim_start();
        let digits = s.chars().take_while(char::is_ascii_digit).count();
        if digits > 0 {
            let rest = &s[digits..];
            if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
                s = r.trim_start();
            }
        }
        if s == before {
            return s;
        }
    }
}

fn clean_item(s: &str) -> &str {
    s.trim().trim_matches(['*', '`', '"', '\'']).trim().trim_end_matches('.').trim()
}

pub fn parse_observed_classes(response: &str) -> Result<RawObservedClasses, ReasonerError> {
    for line in response.lines() {
        let body = strip_line_prefix(line);
        let Some(head) = body.get(..8) else { continue };
        if !head.eq_ignore_ascii_case("classes:") {
            continue;
        }
        let mut names: Vec<String> = Vec::new();
        for item in body[8..].split(';') {
            if let Ok(n) = normalize_class_name(clean_item(item)) {
                if !names.contains(&n) {
                    names.push(n);
                }
            }
        }
        if names.is_empty() {
            return Err(ReasonerError::Parse("`classes:` line lists no names".into()));
        }
        return Ok(RawObservedClasses { names });
    }
    Err(ReasonerError::Parse("no `classes:` line in reply".into()))
}

/// One reply line, if it has the four-field shape. The chain is `Err` when the
/// fields are present but violate the chain invariants.
fn parse_chain_line(line: &str) -> Option<(String, Result<ReasonChain, ReasonerError>)> {
    let fields: Vec<&str> = strip_line_prefix(line).split('|').collect();
    if fields.len() < 4 {
        return None;
    }
    let name = normalize_class_name(clean_item(fields[0])).ok()?;
    let attributes: Vec<String> = fields[3..]
        .iter()
        .flat_map(|f| f.split(';'))
        .map(clean_item)
        .filter(|a| !a.is_empty())
        .map(str::to_string)
        .collect();
    Some((name, ReasonChain::new(clean_item(fields[1]), clean_item(fields[2]), attributes)))
}

/// Parses one chain per expected class. Lines for unexpected classes are
/// ignored; for repeated lines the first valid one wins.
pub fn parse_reason_chains<S: AsRef<str>>(
    response: &str,
    expected: &[S],
) -> Result<BTreeMap<String, ReasonChain>, ReasonerError> {
    let expected: Vec<String> = expected
        .iter()
        .filter_map(|e| normalize_class_name(e.as_ref()).ok())
        .collect();
    if expected.is_empty() {
        return Err(ReasonerError::EmptyObserved);
    }
    let mut parsed = BTreeMap::new();
    let mut invalid = Vec::new();
    for line in response.lines() {
        let Some((name, chain)) = parse_chain_line(line) else { continue };
        if !expected.contains(&name) || parsed.contains_key(&name) {
            continue;
        }
        match chain {
            Ok(c) => {
                parsed.insert(name, c);
            }
            Err(e) => invalid.push(format!("{name}: {e}")),
        }
    }
    if parsed.is_empty() {
        let detail = if invalid.is_empty() {
            "no `class | broad | sub | attributes` lines for the expected classes".to_string()
        } else {
            invalid.join("; ")
        };
        return Err(ReasonerError::Parse(detail));
    }
    let missing: Vec<String> = expected.into_iter().filter(|e| !parsed.contains_key(e)).collect();
    if !missing.is_empty() {
        return Err(ReasonerError::PartialParse { parsed, missing });
    }
    Ok(parsed)
}
