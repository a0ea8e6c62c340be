use std::io::BufRead;

use serde_json::Value;

use super::{Sketch, Stroke};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct ParseOutcome {
    pub sketches: Vec<Sketch>,
    pub errors: Vec<RecordError>,
    /// Lines whose drawing held no points.
    pub skipped: usize,
}

/// Reads newline-delimited sketch records.
///
/// Accepts the public QuickDraw export (`word` plus `drawing`, each stroke
/// `[[x…], [y…], …]` in absolute coordinates) and the internal
/// `{"class", "points"}` form. The drawing is translated so that it starts at
/// the origin. Bad lines are collected and parsing continues.
pub fn parse_ndjson<R: BufRead>(reader: R) -> Result<ParseOutcome> {
    let mut out = ParseOutcome::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(&line) {
            Ok(Some(s)) => out.sketches.push(s),
            Ok(None) => {
                log::warn!("line {line_no}: empty drawing skipped");
                out.skipped += 1;
            }
            Err(message) => out.errors.push(RecordError { line: line_no, message }),
        }
    }
    Ok(out)
}

fn parse_record(line: &str) -> std::result::Result<Option<Sketch>, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if value.get("points").is_some() {
        let s: Sketch = serde_json::from_value(value).map_err(|e| e.to_string())?;
        return Ok(Some(s));
    }
    let class = match value.get("word") {
        None | Some(Value::Null) => None,
        Some(Value::String(w)) => Some(w.clone()),
        Some(other) => return Err(format!("`word` must be a string, got {other}")),
    };
    let drawing = value
        .get("drawing")
        .and_then(Value::as_array)
        .ok_or("missing `drawing` array")?;
    let mut strokes: Vec<Stroke> = Vec::with_capacity(drawing.len());
    for (si, stroke) in drawing.iter().enumerate() {
        let arrays = stroke
            .as_array()
            .filter(|a| a.len() >= 2)
            .ok_or_else(|| format!("stroke {si} is not an [x[], y[]] pair"))?;
        let xs = numbers(&arrays[0]).ok_or_else(|| format!("stroke {si}: bad x array"))?;
        let ys = numbers(&arrays[1]).ok_or_else(|| format!("stroke {si}: bad y array"))?;
        if xs.len() != ys.len() {
            return Err(format!("stroke {si}: {} x values but {} y values", xs.len(), ys.len()));
        }
        strokes.push(xs.into_iter().zip(ys).collect());
    }
    let Some(&(ox, oy)) = strokes.iter().flatten().next() else {
        return Ok(None);
    };
    for s in &mut strokes {
        for p in s.iter_mut() {
            *p = (p.0 - ox, p.1 - oy);
        }
    }
    Sketch::from_strokes(&strokes, class).map(Some).map_err(|e| e.to_string())
}

fn numbers(v: &Value) -> Option<Vec<f64>> {
    v.as_array()?
        .iter()
        .map(|x| x.as_f64().filter(|f| f.is_finite()))
        .collect()
}

/// Serialises a sketch as one QuickDraw-format line with absolute coordinates.
pub fn to_quickdraw_line(sketch: &Sketch) -> String {
    let drawing: Vec<[Vec<f64>; 2]> = sketch
        .strokes()
        .iter()
        .map(|s| [s.iter().map(|p| p.0).collect(), s.iter().map(|p| p.1).collect()])
        .collect();
    serde_json::json!({ "word": sketch.class(), "drawing": drawing }).to_string()
}
