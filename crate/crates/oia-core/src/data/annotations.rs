//! Tab-separated annotation files: one scene per line as
//! `scene_id <TAB> 4-char action mask <TAB> 21-char explanation mask`.

use crate::error::{OiaError, Result};
use crate::labels::{ActionLabel, ExplanationLabel};
use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

pub type Annotation = (String, ActionLabel, ExplanationLabel);

/// Write annotations in line order.
pub fn save_annotations(path: &Path, annotations: &[Annotation]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for (id, a, e) in annotations {
        writeln!(out, "{id}\t{}\t{}", a.mask(), e.mask())?;
    }
    out.flush()?;
    Ok(())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> OiaError {
    OiaError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Parse an annotation file, reporting 1-based line numbers on failure.
/// Duplicate scene ids are rejected.
pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let text = fs::read_to_string(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.is_empty() {
            return Err(parse_err(path, line_no, "empty line"));
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected 3 tab-separated fields, got {}", fields.len()),
            ));
        }
        let id = fields[0];
        if id.is_empty() {
            return Err(parse_err(path, line_no, "empty scene id"));
        }
        let action = ActionLabel::from_mask(fields[1])
            .map_err(|e| parse_err(path, line_no, format!("action mask: {e}")))?;
        let explanation = ExplanationLabel::from_mask(fields[2])
            .map_err(|e| parse_err(path, line_no, format!("explanation mask: {e}")))?;
        if !seen.insert(id.to_string()) {
            return Err(parse_err(path, line_no, format!("duplicate scene id {id:?}")));
        }
        out.push((id.to_string(), action, explanation));
    }
    Ok(out)
}
