//! Rule-based static rejection of reward-hacking candidates.
//!
//! Candidates are scanned as text, not parsed. Lines whose first non-blank
//! character is `#` are ignored by every rule. Embedded kernel sources are
//! opaque text, so `//` and `/* */` comments inside them are still scanned.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Entry class a candidate must define under the default rules.
pub const DEFAULT_ENTRY_CLASS: &str = "ModelNew";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    /// Raw substring match.
    ForbiddenSubstring,
    /// Whole-token match, a token being a maximal run of `[A-Za-z0-9_]`.
    ForbiddenToken,
    /// The candidate must contain `class <pattern>`.
    RequiredMarker,
    /// A class whose body is exactly the token `pattern` (normally `pass`).
    /// In strict mode every occurrence of the token is a violation.
    PassOnlyClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuardRule {
    pub rule_id: String,
    pub kind: RuleKind,
    pub pattern: String,
    #[serde(default)]
    pub allowlist: Vec<String>,
}

impl GuardRule {
    fn new(rule_id: &str, kind: RuleKind, pattern: &str, allowlist: &[&str]) -> Self {
        Self {
            rule_id: rule_id.to_owned(),
            kind,
            pattern: pattern.to_owned(),
            allowlist: allowlist.iter().map(|s| (*s).to_owned()).collect(),
        }
    }
}

/// An ordered collection of guard rules with scan options.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSet {
    pub rules: Vec<GuardRule>,
    /// Ban every `pass` token instead of only pass-only class bodies.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub strict: bool,
    /// When false, the contents of string literals are not scanned.
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    pub scan_string_literals: bool,
}

fn default_true() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

#[derive(Debug, Error)]
pub enum RuleSetError {
    #[error("duplicate rule_id {0:?}")]
    DuplicateId(String),
    #[error("rule {0:?} has an empty pattern")]
    EmptyPattern(String),
    #[error("invalid rule set document: {0}")]
    Json(#[from] serde_json::Error),
}

impl RuleSet {
    pub fn new(rules: Vec<GuardRule>) -> Result<Self, RuleSetError> {
        let set = Self {
            rules,
            strict: false,
            scan_string_literals: true,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), RuleSetError> {
        let mut seen = HashSet::new();
        for rule in &self.rules {
            if !seen.insert(rule.rule_id.as_str()) {
                return Err(RuleSetError::DuplicateId(rule.rule_id.clone()));
            }
            if rule.pattern.is_empty() {
                return Err(RuleSetError::EmptyPattern(rule.rule_id.clone()));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, RuleSetError> {
        let set: RuleSet = serde_json::from_str(text)?;
        set.validate()?;
        Ok(set)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rule sets always serialize")
    }

    /// The same rules minus every rule of `kind`.
    pub fn without_kind(&self, kind: RuleKind) -> Self {
        Self {
            rules: self
                .rules
                .iter()
                .filter(|r| r.kind != kind)
                .cloned()
                .collect(),
            ..self.clone()
        }
    }
}

/// The documented hack-prevention rules, requiring `ModelNew` as entry class.
pub fn default_rules() -> RuleSet {
    default_rules_for_entry(DEFAULT_ENTRY_CLASS)
}

pub fn default_rules_for_entry(entry_class: &str) -> RuleSet {
    RuleSet::new(vec![
        GuardRule::new(
            "torch_nn",
            RuleKind::ForbiddenSubstring,
            "torch.nn.",
            &["torch.nn.Parameter", "torch.nn.init", "torch.nn.Module"],
        ),
        GuardRule::new(
            "torch_nn_functional",
            RuleKind::ForbiddenSubstring,
            "torch.nn.functional",
            &[],
        ),
        GuardRule::new("try_token", RuleKind::ForbiddenToken, "try", &[]),
        GuardRule::new("except_token", RuleKind::ForbiddenToken, "except", &[]),
        GuardRule::new("pass_only_class", RuleKind::PassOnlyClass, "pass", &[]),
        GuardRule::new("entry_class", RuleKind::RequiredMarker, entry_class, &[]),
    ])
    .expect("default rules are valid")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule_id: String,
    /// Byte range `[start, end)` in the original source. Missing required
    /// markers report the empty span `(0, 0)`.
    pub span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardVerdict {
    pub accepted: bool,
    pub violations: Vec<Violation>,
}

impl GuardVerdict {
    /// Distinct violated rule ids in first-seen order.
    pub fn violated_rules(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for v in &self.violations {
            if !out.contains(&v.rule_id.as_str()) {
                out.push(&v.rule_id);
            }
        }
        out
    }

    /// One-line description, used as the error message of a rejected turn.
    pub fn summary(&self) -> String {
        if self.accepted {
            "accepted".to_owned()
        } else {
            format!("guard rule violated: {}", self.violated_rules().join(", "))
        }
    }
}

/// Checks `source` against every rule. Violations are listed in rule order,
/// then by position.
pub fn check_candidate(source: &str, rules: &RuleSet) -> GuardVerdict {
    let masked = mask(source, rules.scan_string_literals);
    let mut violations = Vec::new();
    for rule in &rules.rules {
        let spans = match rule.kind {
            RuleKind::ForbiddenSubstring => substring_hits(&masked, &rule.pattern, &rule.allowlist),
            RuleKind::ForbiddenToken => token_hits(&masked, &rule.pattern, &rule.allowlist),
            RuleKind::RequiredMarker => {
                if has_class_decl(&masked, &rule.pattern) {
                    Vec::new()
                } else {
                    vec![(0, 0)]
                }
            }
            RuleKind::PassOnlyClass => {
                if rules.strict {
                    token_hits(&masked, &rule.pattern, &rule.allowlist)
                } else {
                    pass_only_class_hits(&masked, &rule.pattern)
                }
            }
        };
        violations.extend(spans.into_iter().map(|span| Violation {
            rule_id: rule.rule_id.clone(),
            span,
        }));
    }
    GuardVerdict {
        accepted: violations.is_empty(),
        violations,
    }
}

fn is_ident_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

/// Blanks comment lines (and optionally string-literal contents) with spaces,
/// preserving byte offsets and newlines.
fn mask(source: &str, scan_strings: bool) -> String {
    let mut bytes = source.as_bytes().to_vec();
    let mut line_start = 0;
    while line_start < bytes.len() {
        let line_end = bytes[line_start..]
            .iter()
            .position(|&b| b == b'\n')
            .map_or(bytes.len(), |p| line_start + p);
        let first = bytes[line_start..line_end]
            .iter()
            .position(|b| !b.is_ascii_whitespace());
        if let Some(off) = first {
            if bytes[line_start + off] == b'#' {
                bytes[line_start + off..line_end].fill(b' ');
            }
        }
        line_start = line_end + 1;
    }
    if !scan_strings {
        blank_string_literals(&mut bytes);
    }
    // Only whole UTF-8 sequences were replaced by ASCII spaces.
    String::from_utf8(bytes).expect("masking preserves utf-8")
}

fn blank_string_literals(bytes: &mut [u8]) {
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if b == b'\'' || b == b'"' {
            let triple = bytes.len() >= i + 3 && bytes[i + 1] == b && bytes[i + 2] == b;
            let open = if triple { 3 } else { 1 };
            let mut j = i + open;
            let mut close = None;
            while j < bytes.len() {
                if bytes[j] == b'\\' {
                    j += 2;
                    continue;
                }
                if !triple && bytes[j] == b'\n' {
                    break;
                }
                if bytes[j] == b
                    && (!triple || (j + 2 < bytes.len() && bytes[j + 1] == b && bytes[j + 2] == b))
                {
                    close = Some(j);
                    break;
                }
                j += 1;
            }
            let end = close.unwrap_or(j.min(bytes.len()));
            for c in &mut bytes[i + open..end] {
                if *c != b'\n' {
                    *c = b' ';
                }
            }
            i = close.map_or(end, |c| c + open);
        } else {
            i += 1;
        }
    }
}

fn allowlisted(text: &str, at: usize, allowlist: &[String]) -> bool {
    allowlist.iter().any(|a| text[at..].starts_with(a.as_str()))
}

fn substring_hits(text: &str, pattern: &str, allowlist: &[String]) -> Vec<(usize, usize)> {
    text.match_indices(pattern)
        .filter(|(at, _)| !allowlisted(text, *at, allowlist))
        .map(|(at, m)| (at, at + m.len()))
        .collect()
}

fn tokens(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let bytes = text.as_bytes();
    let mut i = 0;
    std::iter::from_fn(move || {
        while i < bytes.len() && !is_ident_byte(bytes[i]) {
            i += 1;
        }
        if i >= bytes.len() {
            return None;
        }
        let start = i;
        while i < bytes.len() && is_ident_byte(bytes[i]) {
            i += 1;
        }
        Some((start, &text[start..i]))
    })
}

fn token_hits(text: &str, pattern: &str, allowlist: &[String]) -> Vec<(usize, usize)> {
    tokens(text)
        .filter(|(at, tok)| *tok == pattern && !allowlisted(text, *at, allowlist))
        .map(|(at, tok)| (at, at + tok.len()))
        .collect()
}

fn has_class_decl(text: &str, name: &str) -> bool {
    let mut prev: Option<&str> = None;
    for (_, tok) in tokens(text) {
        if prev == Some("class") && tok == name {
            return true;
        }
        prev = Some(tok);
    }
    false
}

fn indent_of(line: &str) -> usize {
    line.len() - line.trim_start().len()
}

/// Class declarations whose body is exactly one `token` statement.
/// `line` up to a `#` that is outside quotes.
fn strip_trailing_comment(line: &str) -> &str {
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for (i, c) in line.char_indices() {
        match quote {
            Some(q) => {
                if escaped {
                    escaped = false;
                } else if c == '\\' {
                    escaped = true;
                } else if c == q {
                    quote = None;
                }
            }
            None if c == '#' => return &line[..i],
            None if c == '"' || c == '\'' => quote = Some(c),
            None => {}
        }
    }
    line
}

fn pass_only_class_hits(text: &str, token: &str) -> Vec<(usize, usize)> {
    let mut lines = Vec::new();
    let mut offset = 0;
    for line in text.split('\n') {
        lines.push((offset, line));
        offset += line.len() + 1;
    }
    let mut hits = Vec::new();
    for (idx, &(start, line)) in lines.iter().enumerate() {
        let trimmed = line.trim();
        if !(trimmed.starts_with("class ") || trimmed.starts_with("class\t")) {
            continue;
        }
        let code = strip_trailing_comment(line);
        let Some(colon) = code.rfind(':') else {
            continue;
        };
        let inline = code[colon + 1..].trim();
        if !inline.is_empty() {
            if inline == token {
                let at = start + colon + 1 + line[colon + 1..].find(token).unwrap_or(0);
                hits.push((at, at + token.len()));
            }
            continue;
        }
        let class_indent = indent_of(line);
        let mut body = Vec::new();
        for &(bstart, bline) in &lines[idx + 1..] {
            if bline.trim().is_empty() {
                continue;
            }
            if indent_of(bline) <= class_indent {
                break;
            }
            body.push((bstart, bline));
            if body.len() > 1 {
                break;
            }
        }
        if let [(bstart, bline)] = body[..] {
            if strip_trailing_comment(bline).trim() == token {
                let at = bstart + indent_of(bline);
                hits.push((at, at + token.len()));
            }
        }
    }
    hits
}
