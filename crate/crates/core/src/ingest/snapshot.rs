//! Line-delimited dataset snapshots.
//!
//! Line 1 is a JSON header:
//!
//! ```text
//! {"format":"prunecert-dataset","version":1,"meta":{...}}
//! ```
//!
//! Every following non-empty line is one query:
//!
//! ```text
//! {"id":"q1","gold":["d7"],"candidates":[["d7",12.5,0.93,3.1,null],...]}
//! ```
//!
//! Candidate tuples are `[doc_id, retriever, calibrated, reranker, fused]`;
//! `reranker` is `null` when the reranker run had no entry. `fused` is `null`
//! before fusion (no `beta` in the header) and for candidates fused to `-inf`.
//! Floats are written in shortest round-trip form.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Candidate, Dataset, DatasetMeta, DocId, QueryRecord};

pub const FORMAT: &str = "prunecert-dataset";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    meta: DatasetMeta,
}

type Row = (String, f64, f64, Option<f64>, Option<f64>);

#[derive(Serialize, Deserialize)]
struct Line {
    id: String,
    gold: Vec<String>,
    candidates: Vec<Row>,
}

pub fn write_snapshot<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    let header = Header {
        format: FORMAT.to_string(),
        version: VERSION,
        meta: dataset.meta.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for r in dataset.records() {
        let line = Line {
            id: r.query_id().to_string(),
            gold: r.gold_ids().iter().map(|g| g.to_string()).collect(),
            candidates: r
                .candidates()
                .iter()
                .map(|c| {
                    (
                        c.doc_id.to_string(),
                        c.retriever_score,
                        c.calibrated_score,
                        (!c.reranker_missing()).then_some(c.reranker_score),
                        c.fused_score.filter(|f| f.is_finite()),
                    )
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_snapshot<R: BufRead>(source: R) -> Result<Dataset> {
    let mut lines = source.lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            None => return Err(Error::parse(1, "missing snapshot header")),
            Some((_, l)) => {
                let l = l?;
                if l.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&l).map_err(|e| Error::parse(1, e.to_string()))?;
            }
        }
    };
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::parse(
            1,
            format!(
                "unsupported snapshot {} v{}; expected {FORMAT} v{VERSION}",
                header.format, header.version
            ),
        ));
    }
    let fused = header.meta.beta.is_some();
    let mut records = Vec::new();
    for (idx, l) in lines {
        let l = l?;
        if l.trim().is_empty() {
            continue;
        }
        let line: Line =
            serde_json::from_str(&l).map_err(|e| Error::parse(idx + 1, e.to_string()))?;
        let gold: BTreeSet<DocId> = line.gold.into_iter().map(DocId::from).collect();
        let candidates = line
            .candidates
            .into_iter()
            .map(|(doc, retr, cal, rer, f)| Candidate {
                doc_id: doc.into(),
                retriever_score: retr,
                calibrated_score: cal,
                reranker_score: rer.unwrap_or(f64::NEG_INFINITY),
                fused_score: if fused {
                    Some(f.unwrap_or(f64::NEG_INFINITY))
                } else {
                    None
                },
            })
            .collect();
        records.push(QueryRecord::new(line.id, candidates, gold)?);
    }
    Dataset::new(records, header.meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_version() {
        let text = "{\"format\":\"prunecert-dataset\",\"version\":9,\"meta\":{\"sources\":[],\"pool_size\":0,\"platt\":null,\"reranker_norm\":null,\"beta\":null}}\n";
        assert!(read_snapshot(text.as_bytes()).is_err());
        assert!(read_snapshot("".as_bytes()).is_err());
    }

    #[test]
    fn round_trip_preserves_sentinels() {
        let mut c = Candidate::new("d1", 1.25, f64::NEG_INFINITY);
        c.fused_score = None;
        let gold: BTreeSet<DocId> = ["d1".into()].into_iter().collect();
        let rec = QueryRecord::new("q", vec![c, Candidate::new("d2", 0.1, 3.0)], gold).unwrap();
        let ds = Dataset::new(vec![rec], DatasetMeta::default()).unwrap();
        let mut buf = Vec::new();
        write_snapshot(&ds, &mut buf).unwrap();
        let back = read_snapshot(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        assert!(back.records()[0].candidates()[0].reranker_missing());
    }
}
