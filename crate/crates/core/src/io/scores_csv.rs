//! Per-sample score dump: `path,true_label,pred_label,score`.
//!
//! Labels are known-class indices or −1 for unknown; `pred_label` is the
//! threshold-free argmax. Scores are written with nine significant digits,
//! which round-trips every `f32`; negative zero is written as zero.

use std::path::Path;

use super::{read_bytes, write_atomic};
use crate::{Result, StanError};

pub const HEADER: [&str; 4] = ["path", "true_label", "pred_label", "score"];

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub path: String,
    pub true_label: i64,
    pub pred_label: i64,
    pub score: f32,
}

pub fn format_score(score: f32) -> String {
    let s = if score == 0.0 { 0.0 } else { score };
    format!("{s:.8e}")
}

pub fn encode(rows: &[ScoreRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let csv_err = |e: csv::Error| StanError::Data(format!("score csv: {e}"));
    w.write_record(HEADER).map_err(csv_err)?;
    for r in rows {
        if !r.score.is_finite() {
            return Err(StanError::Numerical(format!("non-finite score for {}", r.path)));
        }
        w.write_record([
            r.path.clone(),
            r.true_label.to_string(),
            r.pred_label.to_string(),
            format_score(r.score),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| StanError::Data(format!("score csv: {e}")))
}

pub fn decode(bytes: &[u8], what: &str) -> Result<Vec<ScoreRow>> {
    let bad = |m: String| StanError::format(what, m);
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = r.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().ne(HEADER) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |j: usize| rec.get(j).ok_or_else(|| bad(format!("row {} is short", i + 1)));
        let int = |j: usize| -> Result<i64> {
            field(j)?.parse().map_err(|_| bad(format!("row {}: bad integer", i + 1)))
        };
        let score: f32 = field(3)?.parse().map_err(|_| bad(format!("row {}: bad score", i + 1)))?;
        rows.push(ScoreRow {
            path: field(0)?.to_string(),
            true_label: int(1)?,
            pred_label: int(2)?,
            score: if score == 0.0 { 0.0 } else { score },
        });
    }
    Ok(rows)
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    write_atomic(path, &encode(rows)?)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    decode(&read_bytes(path)?, &path.display().to_string())
}
