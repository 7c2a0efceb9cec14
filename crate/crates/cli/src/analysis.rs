//! Statistics shared by evaluation and the subcommands.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use talkflow_core::context::CoeffSequence;
use talkflow_core::{Error, Result};

/// Pearson correlation; NaN when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "pearson inputs differ in length");
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va * vb).sqrt()
}

/// Mean Frobenius distance over all unordered pairs.
pub fn mean_pairwise_l2(seqs: &[Array2<f64>]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..seqs.len() {
        for j in i + 1..seqs.len() {
            total += (&seqs[i] - &seqs[j]).mapv(|v| v * v).sum().sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Variance across sequences of each listed coordinate, averaged over frames and coordinates.
pub fn across_seed_variance(seqs: &[Array2<f64>], coords: &[usize]) -> f64 {
    let n = seqs.len() as f64;
    let frames = seqs[0].nrows();
    let mut total = 0.0;
    for t in 0..frames {
        for &c in coords {
            let mean = seqs.iter().map(|s| s[[t, c]]).sum::<f64>() / n;
            total += seqs.iter().map(|s| (s[[t, c]] - mean).powi(2)).sum::<f64>() / n;
        }
    }
    total / (frames * coords.len()) as f64
}

/// Per-frame trace of the across-sequence covariance, averaged over frames.
pub fn trace_spread(seqs: &[Array2<f64>]) -> f64 {
    let coords: Vec<usize> = (0..seqs[0].ncols()).collect();
    across_seed_variance(seqs, &coords) * coords.len() as f64
}

/// Unbiased covariance trace of the rows of each class (NaN for classes with < 2 rows).
pub fn class_covariance_traces(
    z: ArrayView2<f64>,
    classes: &[usize],
    n_classes: usize,
) -> Vec<f64> {
    (0..n_classes)
        .map(|c| {
            let rows: Vec<usize> = (0..z.nrows()).filter(|&i| classes[i] == c).collect();
            if rows.len() < 2 {
                return f64::NAN;
            }
            let sub = z.select(Axis(0), &rows);
            let mean = sub.mean_axis(Axis(0)).unwrap();
            let ss: f64 = sub
                .rows()
                .into_iter()
                .map(|r| (&r - &mean).mapv(|v| v * v).sum())
                .sum();
            ss / (rows.len() - 1) as f64
        })
        .collect()
}

pub fn nearest_centroid_accuracy(
    z: ArrayView2<f64>,
    classes: &[usize],
    centroids: ArrayView2<f64>,
) -> f64 {
    let hits = z
        .rows()
        .into_iter()
        .zip(classes)
        .filter(|(row, &c)| {
            let best = centroids
                .rows()
                .into_iter()
                .enumerate()
                .map(|(k, m)| (k, (&m - row).mapv(|v| v * v).sum()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k);
            best == Some(c)
        })
        .count();
    hits as f64 / z.nrows().max(1) as f64
}

pub fn lip_signal(frames: &Array2<f64>, lip: &[usize]) -> Vec<f64> {
    frames
        .rows()
        .into_iter()
        .map(|r| lip.iter().map(|&i| r[i]).sum::<f64>() / lip.len() as f64)
        .collect()
}

/// Frame-to-frame step length, starting at frame 1.
pub fn step_lengths(frames: &Array2<f64>) -> Vec<f64> {
    (1..frames.nrows())
        .map(|t| {
            (&frames.row(t) - &frames.row(t - 1))
                .mapv(|v| v * v)
                .sum()
                .sqrt()
        })
        .collect()
}

/// Leading principal directions found by power iteration with deflation.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Array1<f64>,
    /// One unit-length direction per row.
    pub components: Array2<f64>,
    pub eigenvalues: Vec<f64>,
}

pub fn covariance(x: ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let mean = x.mean_axis(Axis(0)).expect("nonempty rows");
    let c = &x - &mean;
    let cov = c.t().dot(&c) / (x.nrows().max(2) - 1) as f64;
    (mean, cov)
}

pub fn pca(x: ArrayView2<f64>, k: usize, seed: u64) -> Result<Pca> {
    if x.nrows() < 2 || k == 0 || k > x.ncols() {
        return Err(Error::argument(format!(
            "pca of {:?} with {k} components",
            x.dim()
        )));
    }
    let (mean, mut cov) = covariance(x);
    let d = x.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut components = Array2::zeros((k, d));
    let mut eigenvalues = Vec::with_capacity(k);
    for j in 0..k {
        let mut v: Array1<f64> = Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
        v /= v.dot(&v).sqrt();
        for _ in 0..10_000 {
            let mut w = cov.dot(&v);
            let norm = w.dot(&w).sqrt();
            if norm == 0.0 {
                break;
            }
            w /= norm;
            let delta = (&w - &v)
                .mapv(f64::abs)
                .sum()
                .min((&w + &v).mapv(f64::abs).sum());
            v = w;
            if delta < 1e-13 {
                break;
            }
        }
        let lambda = v.dot(&cov.dot(&v));
        // sign fixed so the largest-magnitude entry is positive
        let big = v
            .iter()
            .cloned()
            .fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if big < 0.0 {
            v.mapv_inplace(|a| -a);
        }
        for r in 0..d {
            for c in 0..d {
                cov[[r, c]] -= lambda * v[r] * v[c];
            }
        }
        components.row_mut(j).assign(&v);
        eigenvalues.push(lambda);
    }
    Ok(Pca {
        mean,
        components,
        eigenvalues,
    })
}

impl Pca {
    pub fn project(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean).dot(&self.components.t())
    }
}

/// Softmax regression on standardized per-sequence coefficient means,
/// trained on ground-truth synthetic sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleClassifier {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

pub fn sequence_features(coeffs: &Array2<f64>) -> Array1<f64> {
    coeffs.mean_axis(Axis(0)).expect("nonempty sequence")
}

impl OracleClassifier {
    pub fn train(seqs: &[CoeffSequence], classes: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::data("oracle classifier needs training sequences"));
        }
        let feats: Vec<Array1<f64>> = seqs.iter().map(|s| sequence_features(&s.coeffs)).collect();
        let d = feats[0].len();
        let x = Array2::from_shape_fn((feats.len(), d), |(i, j)| feats[i][j]);
        let mean = x.mean_axis(Axis(0)).unwrap();
        let scale = x
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 1e-12 { s } else { 1.0 });
        let xs = (&x - &mean) / &scale;
        let n = xs.nrows() as f64;
        let mut weights = Array2::<f64>::zeros((d, classes));
        let mut bias = Array1::<f64>::zeros(classes);
        let (lr, l2) = (0.5, 1e-3);
        for _ in 0..500 {
            let mut p = xs.dot(&weights) + &bias;
            softmax_rows(&mut p);
            for (i, s) in seqs.iter().enumerate() {
                p[[i, s.class]] -= 1.0;
            }
            let gw = xs.t().dot(&p) / n + &weights * l2;
            let gb = p.sum_axis(Axis(0)) / n;
            weights -= &(gw * lr);
            bias -= &(gb * lr);
        }
        Ok(Self {
            mean,
            scale,
            weights,
            bias,
        })
    }

    pub fn predict(&self, coeffs: &Array2<f64>) -> usize {
        let f = (sequence_features(coeffs) - &self.mean) / &self.scale;
        let logits = f.dot(&self.weights) + &self.bias;
        let mut best = 0;
        for (k, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = k;
            }
        }
        best
    }

    pub fn accuracy(&self, seqs: &[CoeffSequence]) -> f64 {
        let hits = seqs
            .iter()
            .filter(|s| self.predict(&s.coeffs) == s.class)
            .count();
        hits as f64 / seqs.len().max(1) as f64
    }
}

fn softmax_rows(p: &mut Array2<f64>) {
    for mut row in p.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}
