//! Plain-text export of generated tracks.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::Result;

/// CSV with a header `t,<prefix>0,<prefix>1,...` and one row per frame.
pub fn frames_to_csv(frames: &Array2<f64>, prefix: &str) -> String {
    let mut out = String::from("t");
    for j in 0..frames.ncols() {
        write!(out, ",{prefix}{j}").unwrap();
    }
    out.push('\n');
    for (t, row) in frames.rows().into_iter().enumerate() {
        write!(out, "{t}").unwrap();
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_csv(path: &Path, frames: &Array2<f64>, prefix: &str) -> Result<()> {
    Ok(std::fs::write(path, frames_to_csv(frames, prefix))?)
}
