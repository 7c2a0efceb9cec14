//! Nearest-code quantization.

use ndarray::{Array2, ArrayView2};
use talkflow_core::{Error, Result, Scalar};

/// Squared Euclidean distance, accumulated in `f64`.
fn dist2<T: Scalar>(a: ndarray::ArrayView1<T>, b: ndarray::ArrayView1<T>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).f64().powi(2))
        .sum()
}

/// Index of the nearest code for every row of `z`; ties go to the lowest index.
pub fn nearest_codes<T: Scalar>(z: ArrayView2<T>, codebook: ArrayView2<T>) -> Result<Vec<usize>> {
    if z.ncols() != codebook.ncols() {
        return Err(Error::argument(format!(
            "cell width {} != code width {}",
            z.ncols(),
            codebook.ncols()
        )));
    }
    if codebook.nrows() == 0 {
        return Err(Error::argument("empty codebook"));
    }
    Ok(z.rows()
        .into_iter()
        .map(|cell| {
            let mut best = (f64::INFINITY, 0);
            for (k, code) in codebook.rows().into_iter().enumerate() {
                let d = dist2(cell, code);
                if d < best.0 {
                    best = (d, k);
                }
            }
            best.1
        })
        .collect())
}

/// Rows of the codebook at `indices`.
pub fn lookup<T: Scalar>(codebook: ArrayView2<T>, indices: &[usize]) -> Result<Array2<T>> {
    let mut out = Array2::zeros((indices.len(), codebook.ncols()));
    for (r, &k) in indices.iter().enumerate() {
        if k >= codebook.nrows() {
            return Err(Error::argument(format!(
                "code index {k} >= codebook size {}",
                codebook.nrows()
            )));
        }
        out.row_mut(r).assign(&codebook.row(k));
    }
    Ok(out)
}

/// `(z_c, s)`: each cell replaced by its nearest code, plus the index map.
pub fn quantize<T: Scalar>(
    z: ArrayView2<T>,
    codebook: ArrayView2<T>,
) -> Result<(Array2<T>, Vec<usize>)> {
    let idx = nearest_codes(z, codebook)?;
    Ok((lookup(codebook, &idx)?, idx))
}

/// Fraction of codes selected at least once.
pub fn usage(indices: &[usize], size: usize) -> f64 {
    let mut seen = vec![false; size];
    for &i in indices {
        if i < size {
            seen[i] = true;
        }
    }
    seen.iter().filter(|&&s| s).count() as f64 / size.max(1) as f64
}

pub fn validate_codebook<T: Scalar>(codebook: ArrayView2<T>) -> Result<()> {
    if codebook.nrows() < 2 {
        return Err(Error::config("codebook needs at least two entries"));
    }
    if codebook.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("codebook has non-finite entries"));
    }
    Ok(())
}

/// Index map as CSV: one grid row per line.
pub fn index_map_csv(indices: &[usize], grid_w: usize) -> String {
    let mut out = String::new();
    for row in indices.chunks(grid_w) {
        let line: Vec<String> = row.iter().map(|i| i.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}
