//! Latent codes harvested from the training set and the projection of
//! sampled latents onto their span.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};

use super::expflow::{all_frames, ExpFlowModel};
use crate::context::CoeffSequence;
use crate::error::{Error, Result};
use crate::numerics::{constrained_lsq_weights, reconstruct, DEFAULT_RIDGE};
use crate::scalar::Scalar;

pub const BANK_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"TFLB";
pub const DEFAULT_K_PROJ: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentBank<T> {
    pub latents: Array2<T>,
    pub classes: Vec<usize>,
    pub k_proj: usize,
    pub ridge: f64,
}

impl<T: Scalar> LatentBank<T> {
    pub fn new(latents: Array2<T>, classes: Vec<usize>, k_proj: usize, ridge: f64) -> Result<Self> {
        let bank = Self {
            latents,
            classes,
            k_proj,
            ridge,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.latents.nrows();
        if self.classes.len() != n {
            return Err(Error::data("bank labels do not match its rows"));
        }
        if self.k_proj == 0 || n < self.k_proj {
            return Err(Error::data(format!(
                "bank needs N >= K_proj >= 1, got N={n}, K_proj={}",
                self.k_proj
            )));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::data("ridge must be nonnegative"));
        }
        if self.latents.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("bank contains non-finite latents"));
        }
        Ok(())
    }

    /// Forward-passes every frame of `data` with teacher-forced contexts.
    pub fn build(model: &ExpFlowModel<T>, data: &[CoeffSequence], k_proj: usize) -> Result<Self> {
        let items = all_frames(data);
        let latents = model.encode_frames(data, &items)?;
        let classes = items.iter().map(|&(s, _)| data[s].class).collect();
        Self::new(latents, classes, k_proj, DEFAULT_RIDGE)
    }

    pub fn len(&self) -> usize {
        self.latents.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.latents.ncols()
    }

    /// Row indices of the `k` nearest rows, nearest first; equal distances keep the lower index first.
    pub fn nearest(&self, z: ArrayView1<T>, k: usize) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = self
            .latents
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                let dist = row
                    .iter()
                    .zip(z.iter())
                    .map(|(&a, &b)| (a - b).f64().powi(2))
                    .sum::<f64>();
                (dist, i)
            })
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.truncate(k.min(d.len()));
        d.into_iter().map(|(_, i)| i).collect()
    }

    /// Replaces `z` by the constrained least-squares combination of its
    /// `k_proj` nearest bank rows.
    pub fn project(&self, z: ArrayView1<T>) -> Result<Array1<T>> {
        if self.is_empty() {
            return Err(Error::argument("empty latent bank"));
        }
        if z.len() != self.dim() {
            return Err(Error::argument(format!(
                "latent width {} != bank width {}",
                z.len(),
                self.dim()
            )));
        }
        let idx = self.nearest(z, self.k_proj);
        let rows: Vec<Vec<T>> = idx.iter().map(|&i| self.latents.row(i).to_vec()).collect();
        let refs: Vec<&[T]> = rows.iter().map(|r| r.as_slice()).collect();
        let target = z.to_vec();
        let w = constrained_lsq_weights(&target, &refs, T::c(self.ridge))?;
        Ok(Array1::from(reconstruct(&refs, &w)))
    }

    pub fn centroids(&self, classes: usize) -> Array2<f64> {
        let mut sum = Array2::<f64>::zeros((classes, self.dim()));
        let mut count = vec![0usize; classes];
        for (row, &c) in self.latents.rows().into_iter().zip(&self.classes) {
            if c < classes {
                sum.row_mut(c).zip_mut_with(&row, |s, &v| *s += v.f64());
                count[c] += 1;
            }
        }
        for (mut row, &n) in sum.rows_mut().into_iter().zip(&count) {
            if n > 0 {
                row /= n as f64;
            }
        }
        sum
    }

    /// Little-endian: magic `TFLB`, u32 version, u32 rows, u32 dim, u32 K_proj,
    /// f64 ridge, u32 class per row, then f64 latents row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.len() * (4 + 8 * self.dim()));
        out.extend_from_slice(MAGIC);
        for v in [
            BANK_VERSION,
            self.len() as u32,
            self.dim() as u32,
            self.k_proj as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.ridge.to_le_bytes());
        for &c in &self.classes {
            out.extend_from_slice(&(c as u32).to_le_bytes());
        }
        for v in self.latents.iter() {
            out.extend_from_slice(&v.f64().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut at = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(at..at + n)
                .ok_or_else(|| Error::data("truncated latent bank"))?;
            at += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(Error::data("not a latent bank file"));
        }
        let mut header = [0u32; 4];
        for h in header.iter_mut() {
            *h = u32::from_le_bytes(take(4)?.try_into().unwrap());
        }
        let [version, rows, dim, k_proj] = header;
        if version != BANK_VERSION {
            return Err(Error::data(format!(
                "unsupported latent bank version {version}"
            )));
        }
        let ridge = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let (rows, dim) = (rows as usize, dim as usize);
        let mut classes = Vec::with_capacity(rows);
        for _ in 0..rows {
            classes.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let raw = take(rows * dim * 8)?;
        let values: Vec<T> = raw
            .chunks_exact(8)
            .map(|c| T::c(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        if at != bytes.len() {
            return Err(Error::data("trailing bytes in latent bank"));
        }
        let latents =
            Array2::from_shape_vec((rows, dim), values).map_err(|e| Error::data(e.to_string()))?;
        Self::new(latents, classes, k_proj as usize, ridge)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
