//! Score and decision files: tab-separated text with comment headers.
//!
//! Score files carry an orientation header so a set of numbers is never
//! interpreted with the wrong polarity; readers refuse files without it.
//! All floats are written with Rust's shortest round-trip formatting, so
//! write-read cycles are exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{ScoreRecord, ScoreSet, TrialLabel};

/// The only orientation this repo produces: higher score = more bonafide.
pub const ORIENTATION: &str = "bonafide-high";

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::format(path.display().to_string(), msg)
}

/// Write `utt_id<TAB>score<TAB>label` lines under the orientation header.
pub fn write_score_file(path: &Path, s: &ScoreSet) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("#orientation={ORIENTATION}\n"));
    for r in &s.records {
        out.push_str(&format!("{}\t{}\t{}\n", r.utt_id, r.score, r.label.as_str()));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a score file, enforcing the orientation header before any record.
pub fn read_score_file(path: &Path) -> Result<ScoreSet> {
    let body = fs::read_to_string(path)?;
    let mut oriented = false;
    let mut records = Vec::new();
    for (ln, raw) in body.lines().enumerate() {
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(v) = rest.strip_prefix("orientation=") {
                if v != ORIENTATION {
                    return Err(format_err(path, format!("unknown orientation {v:?}")));
                }
                oriented = true;
            }
            continue;
        }
        if !oriented {
            return Err(format_err(
                path,
                "records before the #orientation header (or header missing)",
            ));
        }
        let mut parts = line.split('\t');
        let (utt, score, label) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(u), Some(s), Some(l), None) => (u, s, l),
            _ => {
                return Err(format_err(path, format!("line {}: expected 3 fields", ln + 1)));
            }
        };
        let score: f64 = score
            .parse()
            .map_err(|_| format_err(path, format!("line {}: bad score {score:?}", ln + 1)))?;
        records.push(ScoreRecord {
            utt_id: utt.to_string(),
            score,
            label: TrialLabel::parse(label)?,
        });
    }
    if !oriented {
        return Err(format_err(path, "missing #orientation header"));
    }
    ScoreSet::new(records)
}

/// One open-set tracing outcome for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRecord {
    pub utt_id: String,
    pub true_api: String,
    pub pred_api: String,
    pub max_prob: f64,
}

/// Write `utt_id<TAB>true_api<TAB>pred_api<TAB>max_prob` lines.
pub fn write_decisions(path: &Path, decisions: &[DecisionRecord]) -> Result<()> {
    let mut out = String::from("#columns=utt_id\ttrue_api\tpred_api\tmax_prob\n");
    for d in decisions {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            d.utt_id, d.true_api, d.pred_api, d.max_prob
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_decisions(path: &Path) -> Result<Vec<DecisionRecord>> {
    let body = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, raw) in body.lines().enumerate() {
        let line = raw.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(format_err(path, format!("line {}: expected 4 fields", ln + 1)));
        }
        let max_prob: f64 = parts[3]
            .parse()
            .map_err(|_| format_err(path, format!("line {}: bad probability", ln + 1)))?;
        if !(0.0..=1.0).contains(&max_prob) {
            return Err(format_err(path, format!("line {}: probability out of [0,1]", ln + 1)));
        }
        out.push(DecisionRecord {
            utt_id: parts[0].to_string(),
            true_api: parts[1].to_string(),
            pred_api: parts[2].to_string(),
            max_prob,
        });
    }
    Ok(out)
}
