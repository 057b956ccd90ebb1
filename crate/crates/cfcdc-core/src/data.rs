//! Table schemas, examples, candidate serialization, and tokenization.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::sql::{AggOp, CondOp};

pub const MAX_WHERE_NUM: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Text,
    Real,
}

impl ColumnType {
    /// The word prepended to the candidate serialization.
    pub fn word(self) -> &'static str {
        match self {
            ColumnType::Text => "text",
            ColumnType::Real => "real",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub index: usize,
    pub name: String,
    pub ctype: ColumnType,
}

/// One cell of a table row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Real(f64),
    Text(String),
}

impl Cell {
    pub fn as_text(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Real(v) => format_real(*v),
        }
    }

    pub fn as_real(&self) -> Option<f64> {
        match self {
            Cell::Real(v) => Some(*v),
            Cell::Text(s) => parse_real(s),
        }
    }
}

/// Render a real so that integral values print without a trailing ".0".
pub fn format_real(v: f64) -> String {
    if v == libm::trunc(v) && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

pub fn parse_real(s: &str) -> Option<f64> {
    let t = s.trim();
    if t.is_empty() {
        return None;
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableSchema {
    pub table_id: String,
    pub columns: Vec<ColumnSpec>,
    pub rows: Vec<Vec<Cell>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataError {
    BadColumnIndex { index: usize, n_columns: usize },
    BadRowWidth { row: usize, width: usize, n_columns: usize },
    BadRealCell { row: usize, col: usize },
    EmptyColumnName { index: usize },
    DuplicateColumnIndex { index: usize },
    EmptyQuestion,
    TooManyConds { n: usize },
}

impl core::fmt::Display for DataError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DataError::BadColumnIndex { index, n_columns } => {
                write!(f, "column index {index} out of range for {n_columns} columns")
            }
            DataError::BadRowWidth { row, width, n_columns } => {
                write!(f, "row {row} has {width} cells, expected {n_columns}")
            }
            DataError::BadRealCell { row, col } => {
                write!(f, "row {row} col {col}: REAL cell does not parse as a finite number")
            }
            DataError::EmptyColumnName { index } => write!(f, "column {index} has an empty name"),
            DataError::DuplicateColumnIndex { index } => {
                write!(f, "duplicate column index {index}")
            }
            DataError::EmptyQuestion => write!(f, "question is empty"),
            DataError::TooManyConds { n } => {
                write!(f, "{n} conditions exceed max_where_num {MAX_WHERE_NUM}")
            }
        }
    }
}

impl TableSchema {
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = BTreeSet::new();
        for c in &self.columns {
            if c.name.is_empty() {
                return Err(DataError::EmptyColumnName { index: c.index });
            }
            if !seen.insert(c.index) {
                return Err(DataError::DuplicateColumnIndex { index: c.index });
            }
        }
        for (r, row) in self.rows.iter().enumerate() {
            if row.len() != self.columns.len() {
                return Err(DataError::BadRowWidth {
                    row: r,
                    width: row.len(),
                    n_columns: self.columns.len(),
                });
            }
            for (c, cell) in row.iter().enumerate() {
                if self.columns[c].ctype == ColumnType::Real && cell.as_real().is_none() {
                    return Err(DataError::BadRealCell { row: r, col: c });
                }
            }
        }
        Ok(())
    }
}

pub type TableStore = BTreeMap<String, TableSchema>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SqlLabel {
    pub sel_col: usize,
    pub agg: AggOp,
    pub conds: Vec<(usize, CondOp, String)>,
}

impl SqlLabel {
    pub fn validate(&self, schema: &TableSchema) -> Result<(), DataError> {
        let n = schema.columns.len();
        if self.sel_col >= n {
            return Err(DataError::BadColumnIndex { index: self.sel_col, n_columns: n });
        }
        if self.conds.len() > MAX_WHERE_NUM {
            return Err(DataError::TooManyConds { n: self.conds.len() });
        }
        for &(col, _, _) in &self.conds {
            if col >= n {
                return Err(DataError::BadColumnIndex { index: col, n_columns: n });
            }
        }
        Ok(())
    }

    /// Columns appearing in the WHERE clause.
    pub fn where_cols(&self) -> BTreeSet<usize> {
        self.conds.iter().map(|&(c, _, _)| c).collect()
    }

    /// Union of SELECT and WHERE columns.
    pub fn sw_cols(&self) -> BTreeSet<usize> {
        let mut s = self.where_cols();
        s.insert(self.sel_col);
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlExample {
    pub question: String,
    pub table_id: String,
    pub label: SqlLabel,
}

impl NlExample {
    pub fn validate(&self, schema: &TableSchema) -> Result<(), DataError> {
        if self.question.trim().is_empty() {
            return Err(DataError::EmptyQuestion);
        }
        self.label.validate(schema)
    }
}

/// One (column, question) pair serialized for column-wise ranking.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateInput {
    pub column: ColumnSpec,
    pub question: String,
    pub serialized: String,
}

fn normalize_ws(s: &str) -> String {
    let mut out = String::new();
    for w in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(w);
    }
    out
}

/// Serialize a (column, question) pair with the fixed template
/// `<ctype-word> <name> : <question>`, lowercased and whitespace-normalized.
pub fn build_candidate_input(column: &ColumnSpec, question: &str) -> CandidateInput {
    let serialized = format!(
        "{} {} : {}",
        column.ctype.word(),
        normalize_ws(&column.name).to_lowercase(),
        normalize_ws(question).to_lowercase()
    );
    CandidateInput {
        column: column.clone(),
        question: question.to_string(),
        serialized,
    }
}

fn is_token_punct(c: char) -> bool {
    c.is_ascii_punctuation()
}

/// Split text into lowercase tokens with byte spans into the original text.
/// Punctuation characters become single-character tokens.
pub fn word_tokenize(text: &str) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push((text[s..i].to_lowercase(), s, i));
            }
        } else if is_token_punct(c) {
            if let Some(s) = start.take() {
                out.push((text[s..i].to_lowercase(), s, i));
            }
            out.push((c.to_string(), i, i + c.len_utf8()));
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((text[s..].to_lowercase(), s, text.len()));
    }
    out
}

/// Locate a condition value inside a question as a token span.
/// Returns inclusive (start, end) indices into the question's token list
/// for the first contiguous match, comparing lowercased tokens.
pub fn find_value_token_span(question: &str, value: &str) -> Option<(usize, usize)> {
    let q: Vec<String> = word_tokenize(question).into_iter().map(|(w, _, _)| w).collect();
    let v: Vec<String> = word_tokenize(value).into_iter().map(|(w, _, _)| w).collect();
    if v.is_empty() || v.len() > q.len() {
        return None;
    }
    (0..=q.len() - v.len())
        .find(|&i| q[i..i + v.len()] == v[..])
        .map(|i| (i, i + v.len() - 1))
}

pub const UNK_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Build from an iterator of texts; word ids are assigned in sorted
    /// order so vocabulary construction is independent of input order.
    pub fn build<'a>(texts: impl Iterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            for (w, _, _) in word_tokenize(t) {
                set.insert(w);
            }
        }
        let words: Vec<String> = set.into_iter().collect();
        let mut v = Vocabulary { words, index: BTreeMap::new() };
        v.rebuild_index();
        v
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32 + 3))
            .collect();
    }

    pub fn id(&self, word: &str) -> u32 {
        *self.index.get(word).unwrap_or(&UNK_ID)
    }

    /// Total id space, special tokens included.
    pub fn size(&self) -> usize {
        self.words.len() + 3
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Tokenized candidate in `[CLS] column [SEP] question [SEP]` layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizedInput {
    pub token_ids: Vec<u32>,
    /// 1 on question tokens, 0 on [CLS], both [SEP]s, and column tokens.
    pub segment_mask: Vec<u8>,
    /// 1 on non-special tokens whose word also occurs in the other segment
    /// (column name word appearing in the question, or vice versa). Gives
    /// the encoder an explicit lexical-overlap signal, standing in for the
    /// pretrained co-occurrence knowledge a large language model would have.
    pub match_mask: Vec<u8>,
    pub column_index: usize,
    /// Sequence position of the first question token.
    pub question_start: usize,
    /// Byte spans of retained question tokens into the original question.
    pub question_spans: Vec<(usize, usize)>,
}

impl TokenizedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn n_question_tokens(&self) -> usize {
        self.question_spans.len()
    }
}

/// Tokenize a candidate. Truncation trims question-tail tokens first and
/// never reduces the column segment below one token.
pub fn tokenize(candidate: &CandidateInput, vocab: &Vocabulary, max_seq_len: usize) -> TokenizedInput {
    debug_assert!(max_seq_len >= 8);
    let col_text = format!(
        "{} {}",
        candidate.column.ctype.word(),
        normalize_ws(&candidate.column.name).to_lowercase()
    );
    let mut col_tokens: Vec<u32> = word_tokenize(&col_text)
        .into_iter()
        .map(|(w, _, _)| vocab.id(&w))
        .collect();
    let q_tokens = word_tokenize(&candidate.question);

    // Overhead: [CLS] + [SEP] + [SEP].
    let budget = max_seq_len - 3;
    let mut keep_q = q_tokens.len().min(budget.saturating_sub(col_tokens.len()));
    if col_tokens.len() > budget {
        col_tokens.truncate(budget.max(1));
        keep_q = 0;
    }

    let q_ids: Vec<u32> = q_tokens
        .iter()
        .take(keep_q)
        .map(|(w, _, _)| vocab.id(w))
        .collect();
    let in_question: BTreeSet<u32> = q_ids.iter().copied().filter(|&id| id != UNK_ID).collect();
    let in_column: BTreeSet<u32> = col_tokens.iter().copied().filter(|&id| id != UNK_ID).collect();

    let mut token_ids = Vec::with_capacity(col_tokens.len() + keep_q + 3);
    let mut segment_mask = Vec::with_capacity(col_tokens.len() + keep_q + 3);
    let mut match_mask = Vec::with_capacity(col_tokens.len() + keep_q + 3);
    token_ids.push(CLS_ID);
    segment_mask.push(0);
    match_mask.push(0);
    for id in &col_tokens {
        token_ids.push(*id);
        segment_mask.push(0);
        match_mask.push(in_question.contains(id) as u8);
    }
    token_ids.push(SEP_ID);
    segment_mask.push(0);
    match_mask.push(0);
    let question_start = token_ids.len();
    let mut question_spans = Vec::with_capacity(keep_q);
    for (id, (_, s, e)) in q_ids.iter().zip(q_tokens.into_iter().take(keep_q)) {
        token_ids.push(*id);
        segment_mask.push(1);
        match_mask.push(in_column.contains(id) as u8);
        question_spans.push((s, e));
    }
    token_ids.push(SEP_ID);
    segment_mask.push(0);
    match_mask.push(0);

    TokenizedInput {
        token_ids,
        segment_mask,
        match_mask,
        column_index: candidate.column.index,
        question_start,
        question_spans,
    }
}
