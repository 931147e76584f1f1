//! Document-side word features for cloze-style reading comprehension: relative
//! in-document frequency and occurrence count in the query, concatenated to
//! the word embeddings before the bidirectional encoder.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::recurrent::{run_bidirectional, CellVars};
use crate::tensor::Tensor;

/// Number of feature columns appended to each document embedding.
pub const FEATURE_WIDTH: usize = 2;

/// A ⟨document, query, answer⟩ triple whose answer is one document word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClozeSample {
    pub document: Vec<String>,
    pub query: Vec<String>,
    pub answer: String,
}

impl ClozeSample {
    pub fn new(document: Vec<String>, query: Vec<String>, answer: String) -> Result<Self> {
        if document.is_empty() || query.is_empty() {
            return Err(Error::Contract(
                "document and query must be non-empty".into(),
            ));
        }
        if !document.contains(&answer) {
            return Err(Error::Contract(format!(
                "answer `{answer}` does not occur in the document"
            )));
        }
        Ok(ClozeSample {
            document,
            query,
            answer,
        })
    }
}

fn counts<S: AsRef<str>>(tokens: &[S]) -> HashMap<&str, usize> {
    let mut out = HashMap::new();
    for t in tokens {
        *out.entry(t.as_ref()).or_insert(0) += 1;
    }
    out
}

/// `count(token in D) / |D|` at every document position.
pub fn doc_word_freq<S: AsRef<str>>(document: &[S]) -> Result<Vec<f64>> {
    if document.is_empty() {
        return Err(Error::Contract("document must be non-empty".into()));
    }
    let c = counts(document);
    let n = document.len() as f64;
    Ok(document.iter().map(|t| c[t.as_ref()] as f64 / n).collect())
}

/// Occurrences of each document token in the query (a count, not an indicator).
pub fn count_of_query_word<S: AsRef<str>, Q: AsRef<str>>(
    document: &[S],
    query: &[Q],
) -> Vec<usize> {
    let c = counts(query);
    document
        .iter()
        .map(|t| c.get(t.as_ref()).copied().unwrap_or(0))
        .collect()
}

/// Base embeddings with their two feature columns.
#[derive(Clone, Debug, PartialEq)]
pub struct EnrichedEmbedding {
    /// `[n×d]`
    pub base: Tensor,
    /// `[n×1]`, entries in (0, 1].
    pub freq: Tensor,
    /// `[n×1]`, non-negative integers.
    pub coq: Tensor,
}

impl EnrichedEmbedding {
    /// `[n×(d+2)]`: each row is `[base ; freq ; coq]`.
    pub fn concatenated(&self) -> Tensor {
        let (n, d) = (self.base.rows(), self.base.row_len());
        let mut data = Vec::with_capacity(n * (d + FEATURE_WIDTH));
        for t in 0..n {
            data.extend_from_slice(self.base.row(t));
            data.push(self.freq.data()[t]);
            data.push(self.coq.data()[t]);
        }
        Tensor::new(vec![n, d + FEATURE_WIDTH], data).expect("enriched shape")
    }
}

fn feature_columns<S: AsRef<str>, Q: AsRef<str>>(document: &[S], query: &[Q]) -> Result<Tensor> {
    let freq = doc_word_freq(document)?;
    let coq = count_of_query_word(document, query);
    let data = freq
        .iter()
        .zip(&coq)
        .flat_map(|(f, c)| [*f, *c as f64])
        .collect();
    Tensor::new(vec![document.len(), FEATURE_WIDTH], data)
}

pub fn enrich_embeddings<S: AsRef<str>, Q: AsRef<str>>(
    base: &Tensor,
    document: &[S],
    query: &[Q],
) -> Result<EnrichedEmbedding> {
    if base.rank() != 2 || base.rows() != document.len() {
        return Err(Error::shape(
            "enrich_embeddings",
            base.shape(),
            &[document.len()],
        ));
    }
    let freq = doc_word_freq(document)?;
    let coq = count_of_query_word(document, query);
    let n = document.len();
    Ok(EnrichedEmbedding {
        base: base.clone(),
        freq: Tensor::new(vec![n, 1], freq)?,
        coq: Tensor::new(vec![n, 1], coq.into_iter().map(|c| c as f64).collect())?,
    })
}

/// Tape version: the feature columns enter as constants, so gradients reach
/// only `base`.
pub fn enrich_on_tape<S: AsRef<str>, Q: AsRef<str>>(
    tape: &mut Tape<'_>,
    base: Var,
    document: &[S],
    query: &[Q],
) -> Result<Var> {
    let shape = tape.shape(base).to_vec();
    if shape.len() != 2 || shape[0] != document.len() {
        return Err(Error::shape("enrich_on_tape", &shape, &[document.len()]));
    }
    let features = tape.constant(feature_columns(document, query)?);
    tape.concat_cols(base, features)
}

/// Per-position `[forward ; backward]` states of the enriched document, `[n×2d_h]`.
pub fn encode_bidirectional_enriched(
    tape: &mut Tape<'_>,
    fwd: &CellVars,
    bwd: &CellVars,
    enriched: Var,
    hidden: usize,
) -> Result<Var> {
    let shape = tape.shape(enriched).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("encode_bidirectional_enriched", &shape, &[]));
    }
    let mask = vec![true; shape[0]];
    Ok(run_bidirectional(tape, fwd, bwd, enriched, &mask, hidden)?.states)
}

/// `token\tfreq\tcoq` lines with a header, one per document position.
pub fn features_tsv<S: AsRef<str>, Q: AsRef<str>>(document: &[S], query: &[Q]) -> Result<String> {
    let freq = doc_word_freq(document)?;
    let coq = count_of_query_word(document, query);
    let mut out = String::from("token\tfreq\tcoq\n");
    for ((t, f), c) in document.iter().zip(freq).zip(coq) {
        writeln!(out, "{}\t{f}\t{c}", t.as_ref()).expect("write to string");
    }
    Ok(out)
}
