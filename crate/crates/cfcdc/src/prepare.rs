//! Dataset preparation: build the vocabulary from the training split,
//! tokenize every (example, column) candidate, attach per-role training
//! targets, and persist the whole cache as a directory of JSON files.

use std::path::{Path, PathBuf};

use cfcdc_core::cfcd::Targets;
use cfcdc_core::data::{
    build_candidate_input, find_value_token_span, tokenize, TokenizedInput, Vocabulary,
    MAX_WHERE_NUM,
};
use cfcdc_core::{ClauseRole, NlExample, TableStore};
use serde::{Deserialize, Serialize};

use crate::ingest;

#[derive(Debug, thiserror::Error)]
pub enum PrepareError {
    #[error(transparent)]
    Ingest(#[from] ingest::IngestError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedCandidate {
    pub tokens: TokenizedInput,
    pub select: Targets,
    pub whr: Targets,
    pub sw: Targets,
}

impl PreparedCandidate {
    pub fn targets(&self, role: ClauseRole) -> &Targets {
        match role {
            ClauseRole::Select => &self.select,
            ClauseRole::Where => &self.whr,
            ClauseRole::SelectWhere => &self.sw,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedExample {
    /// Index into the raw example list this candidate set was built from.
    pub example: usize,
    pub candidates: Vec<PreparedCandidate>,
}

pub struct Dataset {
    pub tables: TableStore,
    pub train: Vec<NlExample>,
    pub dev: Vec<NlExample>,
    pub vocab: Vocabulary,
    pub train_prep: Vec<PreparedExample>,
    pub dev_prep: Vec<PreparedExample>,
}

/// Build the vocabulary from training questions and column serializations.
pub fn build_vocab(tables: &TableStore, train: &[NlExample]) -> Vocabulary {
    let mut texts: Vec<String> = Vec::new();
    for ex in train {
        texts.push(ex.question.to_lowercase());
    }
    for schema in tables.values() {
        for col in &schema.columns {
            texts.push(build_candidate_input(col, "").serialized);
        }
    }
    Vocabulary::build(texts.iter().map(|s| s.as_str()))
}

/// Per-role targets for one (example, column) candidate.
fn candidate_targets(ex: &NlExample, tokens: &TokenizedInput, col: usize) -> PreparedCandidate {
    let label = &ex.label;
    let select = Targets {
        relevant: col == label.sel_col,
        num: Some(1),
        agg: (col == label.sel_col).then(|| label.agg.code() as usize),
        op: None,
        span: None,
    };

    let cond = label.conds.iter().find(|(c, _, _)| *c == col);
    let n_question = tokens.question_spans.len();
    let span = cond.and_then(|(_, _, value)| {
        // spans are over the untruncated question; drop any that got cut
        find_value_token_span(&ex.question, value).filter(|&(_, e)| e < n_question)
    });
    let whr = Targets {
        relevant: cond.is_some(),
        num: Some(label.conds.len()),
        agg: None,
        op: cond.map(|(_, op, _)| op.code() as usize),
        span,
    };

    let sw_cols = label.sw_cols();
    let sw = Targets {
        relevant: sw_cols.contains(&col),
        num: Some(sw_cols.len().min(MAX_WHERE_NUM)),
        agg: None,
        op: None,
        span: None,
    };

    PreparedCandidate { tokens: tokens.clone(), select, whr, sw }
}

pub fn prepare_examples(
    tables: &TableStore,
    examples: &[NlExample],
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Vec<PreparedExample> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let schema = &tables[&ex.table_id];
            let candidates = schema
                .columns
                .iter()
                .map(|col| {
                    let input = build_candidate_input(col, &ex.question);
                    let tokens = tokenize(&input, vocab, max_seq_len);
                    candidate_targets(ex, &tokens, col.index)
                })
                .collect();
            PreparedExample { example: i, candidates }
        })
        .collect()
}

pub fn build_dataset(
    tables: TableStore,
    train: Vec<NlExample>,
    dev: Vec<NlExample>,
    max_seq_len: usize,
) -> Dataset {
    let vocab = build_vocab(&tables, &train);
    let train_prep = prepare_examples(&tables, &train, &vocab, max_seq_len);
    let dev_prep = prepare_examples(&tables, &dev, &vocab, max_seq_len);
    Dataset { tables, train, dev, vocab, train_prep, dev_prep }
}

fn cache_paths(dir: &Path) -> [PathBuf; 6] {
    [
        dir.join("tables.jsonl"),
        dir.join("train.jsonl"),
        dir.join("dev.jsonl"),
        dir.join("vocab.json"),
        dir.join("train.cache.json"),
        dir.join("dev.cache.json"),
    ]
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<(), PrepareError> {
    std::fs::create_dir_all(dir).map_err(|source| PrepareError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let [tp, trp, dp, vp, tcp, dcp] = cache_paths(dir);
    ingest::write_tables(&tp, &ds.tables)?;
    ingest::write_examples(&trp, &ds.train)?;
    ingest::write_examples(&dp, &ds.dev)?;
    write_json(&vp, &ds.vocab)?;
    write_json(&tcp, &ds.train_prep)?;
    write_json(&dcp, &ds.dev_prep)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, PrepareError> {
    let [tp, trp, dp, vp, tcp, dcp] = cache_paths(dir);
    let tables = ingest::load_tables(&tp)?;
    let train = ingest::load_examples(&trp, &tables)?;
    let dev = ingest::load_examples(&dp, &tables)?;
    let mut vocab: Vocabulary = read_json(&vp)?;
    vocab.rebuild_index();
    let train_prep: Vec<PreparedExample> = read_json(&tcp)?;
    let dev_prep: Vec<PreparedExample> = read_json(&dcp)?;
    Ok(Dataset { tables, train, dev, vocab, train_prep, dev_prep })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PrepareError> {
    let bytes = serde_json::to_vec(value).map_err(|e| PrepareError::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    std::fs::write(path, bytes).map_err(|source| PrepareError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PrepareError> {
    let bytes = std::fs::read(path).map_err(|source| PrepareError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| PrepareError::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}
