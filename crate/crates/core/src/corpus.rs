//! MCQ corpus ingestion.
//!
//! Corpora arrive as JSON arrays (or JSONL streams) of question objects with
//! the fields `question`, `options` and `answer`. `options` is either an
//! object keyed by identifier (`"a".."d"` or `"A".."D"`) or, in the
//! identifier-free condition, a plain array in generation order. `answer` is
//! an identifier or the full text of one option.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::metrics::Table2x2;

/// Default number of options per question.
pub const DEFAULT_K: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorpusError {
    #[error("malformed JSON at byte {offset}: {message}")]
    Json { offset: usize, message: String },
    #[error("schema error in item {item}: {message}")]
    Schema { item: usize, message: String },
    #[error("validation error in item {item}: {message}")]
    Validation { item: usize, message: String },
    #[error("item {item}: answer {answer:?} is ambiguous between positions {candidates:?}")]
    AmbiguousAnswer {
        item: usize,
        answer: String,
        candidates: Vec<usize>,
    },
    #[error("item {item}: answer {answer:?} matches no option")]
    UnresolvedAnswer { item: usize, answer: String },
    #[error("empty selection: {0}")]
    EmptySelection(String),
    #[error("unknown group {dimension}/{name}")]
    UnknownGroup { dimension: String, name: String },
    #[error("invalid corpus: {0}")]
    Invalid(String),
}

/// Which generation task a corpus came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Task {
    #[serde(rename = "K-MCQ")]
    KnowledgeMcq,
    #[serde(rename = "RC-MCQ")]
    ReadingMcq,
    #[serde(rename = "VL-MCQ")]
    VisualMcq,
    #[serde(rename = "synthetic")]
    Synthetic,
}

/// Prompting condition under which a corpus was generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Standard,
    Balanced,
    IdentifierFree,
    StandardIdentifierFree,
    BalancedIdentifierFree,
}

impl Condition {
    pub fn is_identifier_free(self) -> bool {
        matches!(
            self,
            Condition::IdentifierFree
                | Condition::StandardIdentifierFree
                | Condition::BalancedIdentifierFree
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Standard => "standard",
            Condition::Balanced => "balanced",
            Condition::IdentifierFree => "identifier_free",
            Condition::StandardIdentifierFree => "standard_identifier_free",
            Condition::BalancedIdentifierFree => "balanced_identifier_free",
        }
    }
}

/// Input schema selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    /// Lowercase identifiers, answer given as option text.
    Task1,
    /// Lowercase identifiers, answer given as identifier.
    Task2,
    /// Uppercase identifiers.
    Task3,
    Auto,
}

/// One generated multiple-choice question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqItem {
    pub stem: String,
    pub options: Vec<String>,
    pub option_ids: Option<Vec<String>>,
    pub answer: String,
    pub source_index: usize,
}

/// Trim and collapse internal whitespace runs to a single space.
pub fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl McqItem {
    /// Builds an item and checks the option and answer invariants for `k` options.
    pub fn new(
        stem: impl Into<String>,
        options: Vec<String>,
        option_ids: Option<Vec<String>>,
        answer: impl Into<String>,
        source_index: usize,
        k: usize,
    ) -> Result<Self, CorpusError> {
        let item = McqItem {
            stem: stem.into(),
            options,
            option_ids,
            answer: answer.into(),
            source_index,
        };
        item.validate(k)?;
        Ok(item)
    }

    pub fn k(&self) -> usize {
        self.options.len()
    }

    fn validate(&self, k: usize) -> Result<(), CorpusError> {
        let idx = self.source_index;
        if self.options.len() != k {
            return Err(CorpusError::Schema {
                item: idx,
                message: format!("expected {k} options, found {}", self.options.len()),
            });
        }
        if let Some(ids) = &self.option_ids {
            if ids.len() != k {
                return Err(CorpusError::Schema {
                    item: idx,
                    message: format!("expected {k} identifiers, found {}", ids.len()),
                });
            }
        }
        let normalized: Vec<String> = self.options.iter().map(|o| normalize_ws(o)).collect();
        for (i, o) in normalized.iter().enumerate() {
            if o.is_empty() {
                return Err(CorpusError::Validation {
                    item: idx,
                    message: format!("option {} is empty", i + 1),
                });
            }
            if normalized[..i].contains(o) {
                return Err(CorpusError::Validation {
                    item: idx,
                    message: format!("option {} duplicates an earlier option", i + 1),
                });
            }
        }
        resolve_answer_position(self).map(|_| ())
    }

    /// 1-based position of the correct option.
    pub fn answer_position(&self) -> Result<usize, CorpusError> {
        resolve_answer_position(self)
    }
}

/// Resolves an item's answer to a 1-based option position.
///
/// Resolution order: identifier match (case-insensitive), exact option text
/// after whitespace normalization, then a unique option-text prefix.
pub fn resolve_answer_position(item: &McqItem) -> Result<usize, CorpusError> {
    let answer = normalize_ws(&item.answer);
    let idx = item.source_index;
    if answer.is_empty() {
        return Err(CorpusError::UnresolvedAnswer {
            item: idx,
            answer: item.answer.clone(),
        });
    }
    let pick = |candidates: Vec<usize>| -> Option<Result<usize, CorpusError>> {
        match candidates.len() {
            0 => None,
            1 => Some(Ok(candidates[0] + 1)),
            _ => Some(Err(CorpusError::AmbiguousAnswer {
                item: idx,
                answer: item.answer.clone(),
                candidates: candidates.iter().map(|c| c + 1).collect(),
            })),
        }
    };

    if let Some(ids) = &item.option_ids {
        let hits = ids
            .iter()
            .enumerate()
            .filter(|(_, id)| normalize_ws(id).eq_ignore_ascii_case(&answer))
            .map(|(i, _)| i)
            .collect();
        if let Some(r) = pick(hits) {
            return r;
        }
    }
    let normalized: Vec<String> = item.options.iter().map(|o| normalize_ws(o)).collect();
    let exact = normalized
        .iter()
        .enumerate()
        .filter(|(_, o)| **o == answer)
        .map(|(i, _)| i)
        .collect();
    if let Some(r) = pick(exact) {
        return r;
    }
    let prefix = normalized
        .iter()
        .enumerate()
        .filter(|(_, o)| o.starts_with(&answer))
        .map(|(i, _)| i)
        .collect();
    pick(prefix).unwrap_or_else(|| {
        Err(CorpusError::UnresolvedAnswer {
            item: idx,
            answer: item.answer.clone(),
        })
    })
}

/// Half-open item index range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRange {
    pub start: usize,
    pub end: usize,
}

impl ItemRange {
    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Corpus-level metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub task: Task,
    pub model_name: String,
    pub condition: Condition,
    /// Grouping dimension (e.g. `discipline`) to named item ranges.
    #[serde(default)]
    pub group_keys: BTreeMap<String, BTreeMap<String, ItemRange>>,
}

impl Default for CorpusMeta {
    fn default() -> Self {
        CorpusMeta {
            task: Task::KnowledgeMcq,
            model_name: String::new(),
            condition: Condition::Standard,
            group_keys: BTreeMap::new(),
        }
    }
}

/// Selects one named group within a grouping dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSelector {
    pub dimension: String,
    pub name: String,
}

/// A validated, immutable collection of items sharing the same K.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    items: Vec<McqItem>,
    meta: CorpusMeta,
    k: usize,
}

impl Corpus {
    pub fn new(items: Vec<McqItem>, meta: CorpusMeta) -> Result<Self, CorpusError> {
        let k = items.first().map_or(DEFAULT_K, McqItem::k);
        Self::with_k(items, meta, k)
    }

    pub fn with_k(items: Vec<McqItem>, meta: CorpusMeta, k: usize) -> Result<Self, CorpusError> {
        for item in &items {
            item.validate(k)?;
        }
        check_groups(&meta, items.len())?;
        Ok(Corpus { items, meta, k })
    }

    pub fn items(&self) -> &[McqItem] {
        &self.items
    }

    pub fn meta(&self) -> &CorpusMeta {
        &self.meta
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Returns a copy with replaced metadata; group ranges are re-checked.
    pub fn with_meta(&self, meta: CorpusMeta) -> Result<Self, CorpusError> {
        check_groups(&meta, self.items.len())?;
        Ok(Corpus {
            items: self.items.clone(),
            meta,
            k: self.k,
        })
    }

    /// Resolved 1-based answer positions in item order.
    pub fn positions(&self) -> Result<Vec<usize>, CorpusError> {
        self.items.iter().map(resolve_answer_position).collect()
    }

    /// Canonical JSONL dump: one object per line, fields in prompt order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            out.push_str("{\"question\":");
            out.push_str(&json_string(&item.stem));
            out.push_str(",\"options\":");
            match &item.option_ids {
                Some(ids) => {
                    out.push('{');
                    for (i, (id, opt)) in ids.iter().zip(&item.options).enumerate() {
                        if i > 0 {
                            out.push(',');
                        }
                        let _ = write!(out, "{}:{}", json_string(id), json_string(opt));
                    }
                    out.push('}');
                }
                None => {
                    out.push('[');
                    for (i, opt) in item.options.iter().enumerate() {
                        if i > 0 {
                            out.push(',');
                        }
                        out.push_str(&json_string(opt));
                    }
                    out.push(']');
                }
            }
            out.push_str(",\"answer\":");
            out.push_str(&json_string(&item.answer));
            out.push_str("}\n");
        }
        out
    }

    /// A corpus whose answer positions reproduce `counts` exactly.
    ///
    /// Positions are interleaved round-robin so every prefix is spread over
    /// all positions that still have budget.
    pub fn planted(counts: &[u64], condition: Condition) -> Result<Self, CorpusError> {
        let k = counts.len();
        if k < 2 {
            return Err(CorpusError::Invalid("need at least two positions".into()));
        }
        let mut remaining = counts.to_vec();
        let total: u64 = counts.iter().sum();
        let mut items = Vec::with_capacity(total as usize);
        let ids: Vec<String> = (0..k).map(|i| identifier(i, false)).collect();
        let mut cursor = 0usize;
        while items.len() < total as usize {
            while remaining[cursor % k] == 0 {
                cursor += 1;
            }
            let pos = cursor % k;
            remaining[pos] -= 1;
            cursor += 1;
            let n = items.len();
            let options: Vec<String> = (0..k).map(|j| format!("option {} of item {n}", j + 1)).collect();
            let (option_ids, answer) = if condition.is_identifier_free() {
                (None, options[pos].clone())
            } else {
                (Some(ids.clone()), ids[pos].clone())
            };
            items.push(McqItem::new(
                format!("synthetic item {n}"),
                options,
                option_ids,
                answer,
                n,
                k,
            )?);
        }
        let meta = CorpusMeta {
            task: Task::Synthetic,
            model_name: "planted".into(),
            condition,
            group_keys: BTreeMap::new(),
        };
        Corpus::with_k(items, meta, k)
    }
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

/// Identifier label for a 0-based position (`a`, `b`, ... or `A`, `B`, ...).
pub fn identifier(pos: usize, uppercase: bool) -> String {
    let base = if uppercase { b'A' } else { b'a' };
    char::from(base + pos as u8).to_string()
}

fn check_groups(meta: &CorpusMeta, n: usize) -> Result<(), CorpusError> {
    for (dim, groups) in &meta.group_keys {
        let mut ranges: Vec<(&String, &ItemRange)> = groups.iter().collect();
        ranges.sort_by_key(|(_, r)| (r.start, r.end));
        for (name, r) in &ranges {
            if r.start > r.end || r.end > n {
                return Err(CorpusError::Invalid(format!(
                    "group {dim}/{name} range {}..{} outside 0..{n}",
                    r.start, r.end
                )));
            }
        }
        for pair in ranges.windows(2) {
            if pair[1].1.start < pair[0].1.end {
                return Err(CorpusError::Invalid(format!(
                    "groups {dim}/{} and {dim}/{} overlap",
                    pair[0].0, pair[1].0
                )));
            }
        }
    }
    Ok(())
}

/// Counts of correct-answer positions over K options.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionDistribution {
    pub counts: Vec<u64>,
}

impl PositionDistribution {
    pub fn new(counts: Vec<u64>) -> Self {
        PositionDistribution { counts }
    }

    /// Tallies 1-based positions into `k` bins.
    pub fn from_positions(k: usize, positions: impl IntoIterator<Item = usize>) -> Self {
        let mut counts = vec![0u64; k];
        for p in positions {
            counts[p - 1] += 1;
        }
        PositionDistribution { counts }
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn proportions(&self) -> Vec<f64> {
        let total = self.total() as f64;
        self.counts.iter().map(|&c| c as f64 / total).collect()
    }
}

/// Answer-position distribution over the whole corpus or one group.
pub fn distribution(
    corpus: &Corpus,
    group: Option<&GroupSelector>,
) -> Result<PositionDistribution, CorpusError> {
    let items = match group {
        None => corpus.items(),
        Some(sel) => {
            let range = corpus
                .meta
                .group_keys
                .get(&sel.dimension)
                .and_then(|g| g.get(&sel.name))
                .ok_or_else(|| CorpusError::UnknownGroup {
                    dimension: sel.dimension.clone(),
                    name: sel.name.clone(),
                })?;
            &corpus.items[range.start..range.end]
        }
    };
    if items.is_empty() {
        return Err(CorpusError::EmptySelection(match group {
            None => "corpus has no items".into(),
            Some(sel) => format!("group {}/{} has no items", sel.dimension, sel.name),
        }));
    }
    let positions = items
        .iter()
        .map(resolve_answer_position)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PositionDistribution::from_positions(corpus.k(), positions))
}

/// First-position counts per condition: rows `[first, otherwise]` for
/// `corpus_a` then `corpus_b`.
pub fn first_position_table(corpus_a: &Corpus, corpus_b: &Corpus) -> Result<Table2x2, CorpusError> {
    let row = |c: &Corpus| -> Result<[u64; 2], CorpusError> {
        if c.is_empty() {
            return Err(CorpusError::EmptySelection("corpus has no items".into()));
        }
        let first = c.positions()?.iter().filter(|&&p| p == 1).count() as u64;
        Ok([first, c.len() as u64 - first])
    };
    Ok(Table2x2::new([row(corpus_a)?, row(corpus_b)?]))
}

/// Parses a corpus with the default K of 4.
pub fn parse_corpus(raw: &str, schema: Schema) -> Result<Corpus, CorpusError> {
    parse_corpus_k(raw, schema, DEFAULT_K)
}

/// Parses a corpus with `k` options per item; the first invalid item aborts.
pub fn parse_corpus_k(raw: &str, schema: Schema, k: usize) -> Result<Corpus, CorpusError> {
    let (values, _) = decode_values(raw)?;
    let mut items = Vec::with_capacity(values.len());
    let mut shape = None;
    for (i, v) in values.iter().enumerate() {
        items.push(decode_item(v, i, schema, k, &mut shape)?);
    }
    Corpus::with_k(items, meta_for(schema, shape), k)
}

/// Parses a corpus, dropping items that fail schema or answer validation.
///
/// Malformed JSON is still fatal. Dropped items are returned with their
/// errors so the caller can log them.
pub fn parse_corpus_lenient(
    raw: &str,
    schema: Schema,
    k: usize,
) -> Result<(Corpus, Vec<CorpusError>), CorpusError> {
    let (values, _) = decode_values(raw)?;
    let mut items = Vec::new();
    let mut dropped = Vec::new();
    let mut shape = None;
    for (i, v) in values.iter().enumerate() {
        match decode_item(v, i, schema, k, &mut shape) {
            Ok(item) => items.push(item),
            Err(e) => dropped.push(e),
        }
    }
    Ok((Corpus::with_k(items, meta_for(schema, shape), k)?, dropped))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OptionShape {
    Lower,
    Upper,
    Other,
    Array,
}

fn meta_for(schema: Schema, shape: Option<OptionShape>) -> CorpusMeta {
    let task = match (schema, shape) {
        (Schema::Task2, _) => Task::ReadingMcq,
        (Schema::Task3, _) | (Schema::Auto, Some(OptionShape::Upper)) => Task::VisualMcq,
        _ => Task::KnowledgeMcq,
    };
    let condition = if shape == Some(OptionShape::Array) {
        Condition::IdentifierFree
    } else {
        Condition::Standard
    };
    CorpusMeta {
        task,
        condition,
        ..CorpusMeta::default()
    }
}

/// Decodes a JSON array or a JSONL stream into raw values.
fn decode_values(raw: &str) -> Result<(Vec<Value>, bool), CorpusError> {
    let trimmed = raw.trim_start();
    if trimmed.starts_with('[') {
        let v: Value = serde_json::from_str(raw).map_err(|e| json_error(raw, 0, &e))?;
        match v {
            Value::Array(a) => Ok((a, false)),
            _ => unreachable!("input starts with '['"),
        }
    } else {
        let mut out = Vec::new();
        let mut offset = 0usize;
        for line in raw.split_inclusive('\n') {
            if !line.trim().is_empty() {
                let v: Value =
                    serde_json::from_str(line).map_err(|e| json_error(line, offset, &e))?;
                out.push(v);
            }
            offset += line.len();
        }
        Ok((out, true))
    }
}

fn json_error(text: &str, base: usize, e: &serde_json::Error) -> CorpusError {
    let line = e.line().max(1);
    let col = e.column();
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    CorpusError::Json {
        offset: base + line_start + col.saturating_sub(1),
        message: e.to_string(),
    }
}

fn decode_item(
    v: &Value,
    index: usize,
    schema: Schema,
    k: usize,
    shape: &mut Option<OptionShape>,
) -> Result<McqItem, CorpusError> {
    let schema_err = |message: String| CorpusError::Schema {
        item: index,
        message,
    };
    let obj = v
        .as_object()
        .ok_or_else(|| schema_err("item is not an object".into()))?;
    let text_field = |name: &str| -> Result<String, CorpusError> {
        match obj.get(name) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(schema_err(format!("field {name:?} is not a string"))),
            None => Err(schema_err(format!("missing field {name:?}"))),
        }
    };
    let stem = text_field("question")?;
    let answer = text_field("answer")?;
    let (options, ids, this_shape) = match obj.get("options") {
        Some(Value::Array(arr)) => {
            let opts = arr
                .iter()
                .map(|o| {
                    o.as_str()
                        .map(str::to_owned)
                        .ok_or_else(|| schema_err("option is not a string".into()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            (opts, None, OptionShape::Array)
        }
        Some(Value::Object(map)) => {
            let mut ids = Vec::with_capacity(map.len());
            let mut opts = Vec::with_capacity(map.len());
            for (key, val) in map {
                let s = val
                    .as_str()
                    .ok_or_else(|| schema_err(format!("option {key:?} is not a string")))?;
                ids.push(key.clone());
                opts.push(s.to_owned());
            }
            let lower: Vec<String> = (0..k).map(|i| identifier(i, false)).collect();
            let upper: Vec<String> = (0..k).map(|i| identifier(i, true)).collect();
            let s = if ids == lower {
                OptionShape::Lower
            } else if ids == upper {
                OptionShape::Upper
            } else {
                OptionShape::Other
            };
            (opts, Some(ids), s)
        }
        Some(_) => return Err(schema_err("field \"options\" must be an object or array".into())),
        None => return Err(schema_err("missing field \"options\"".into())),
    };
    if options.len() != k {
        return Err(schema_err(format!(
            "expected {k} options, found {}",
            options.len()
        )));
    }
    let expected = match schema {
        Schema::Task1 | Schema::Task2 => Some(OptionShape::Lower),
        Schema::Task3 => Some(OptionShape::Upper),
        Schema::Auto => None,
    };
    if let Some(exp) = expected {
        if this_shape != exp && this_shape != OptionShape::Array {
            return Err(schema_err(format!(
                "option identifiers {:?} do not match the selected schema",
                ids.as_deref().unwrap_or(&[])
            )));
        }
    }
    match shape {
        None => *shape = Some(this_shape),
        Some(prev) if (*prev == OptionShape::Array) != (this_shape == OptionShape::Array) => {
            return Err(schema_err(
                "mixes identifier-free and identifier-keyed options".into(),
            ))
        }
        _ => {}
    }
    McqItem::new(stem, options, ids, answer, index, k)
}
