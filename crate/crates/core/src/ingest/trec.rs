//! Run-file and qrels parsers.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;

use crate::error::{Error, Result};

/// One row of a run file: `qid Q0 docid rank score tag`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub query_id: String,
    pub doc_id: String,
    pub rank: u32,
    pub score: f64,
    pub tag: String,
}

/// Run entries grouped by query id, each group sorted by rank.
pub type Run = BTreeMap<String, Vec<RunEntry>>;

/// Judgements grouped by query id: doc id to relevance grade.
pub type Qrels = BTreeMap<String, BTreeMap<String, i32>>;

/// Parses a whitespace-separated run file.
///
/// Blank lines are skipped. Repeated `(qid, docid)` pairs and repeated ranks
/// within a query are rejected.
pub fn parse_run<R: BufRead>(source: R) -> Result<Run> {
    let mut run: Run = BTreeMap::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut ranks: HashSet<(String, u32)> = HashSet::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 6 {
            return Err(Error::parse(
                line_no,
                format!("expected 6 fields (qid Q0 docid rank score tag), got {}", fields.len()),
            ));
        }
        if fields[1] != "Q0" {
            return Err(Error::parse(
                line_no,
                format!("second field must be Q0, got {:?}", fields[1]),
            ));
        }
        let rank: u32 = fields[3]
            .parse()
            .ok()
            .filter(|&r| r > 0)
            .ok_or_else(|| Error::parse(line_no, format!("invalid rank {:?}", fields[3])))?;
        let score: f64 = fields[4]
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or_else(|| Error::parse(line_no, format!("invalid score {:?}", fields[4])))?;
        let query_id = fields[0].to_string();
        let doc_id = fields[2].to_string();
        if !seen.insert((query_id.clone(), doc_id.clone())) {
            return Err(Error::Duplicate { query_id, doc_id });
        }
        if !ranks.insert((query_id.clone(), rank)) {
            return Err(Error::parse(
                line_no,
                format!("rank {rank} repeated for query {query_id}"),
            ));
        }
        run.entry(query_id.clone()).or_default().push(RunEntry {
            query_id,
            doc_id,
            rank,
            score,
            tag: fields[5].to_string(),
        });
    }
    for entries in run.values_mut() {
        entries.sort_by_key(|e| e.rank);
    }
    Ok(run)
}

/// Parses a four-column qrels file: `qid iter docid rel`.
pub fn parse_qrels<R: BufRead>(source: R) -> Result<Qrels> {
    let mut qrels: Qrels = BTreeMap::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(Error::parse(
                line_no,
                format!("expected 4 fields (qid iter docid rel), got {}", fields.len()),
            ));
        }
        let rel: i32 = fields[3]
            .parse()
            .map_err(|_| Error::parse(line_no, format!("invalid relevance {:?}", fields[3])))?;
        match qrels
            .entry(fields[0].to_string())
            .or_default()
            .entry(fields[2].to_string())
        {
            Entry::Occupied(_) => {
                return Err(Error::Duplicate {
                    query_id: fields[0].to_string(),
                    doc_id: fields[2].to_string(),
                })
            }
            Entry::Vacant(v) => {
                v.insert(rel);
            }
        }
    }
    Ok(qrels)
}

/// Relevant documents of a query, binarized at grade >= 1.
pub fn gold_ids<'a>(qrels: &'a Qrels, query_id: &str) -> impl Iterator<Item = &'a str> {
    qrels
        .get(query_id)
        .into_iter()
        .flat_map(|docs| docs.iter().filter(|(_, &rel)| rel >= 1).map(|(d, _)| d.as_str()))
}
