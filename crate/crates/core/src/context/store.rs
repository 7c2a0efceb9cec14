//! Dataset directories: `manifest.json` plus one binary record per sequence.
//!
//! Record layout (little endian): magic `TFSQ`, u32 version, u32 class,
//! u32 frames, u32 coefficient dim, u32 pose dim, then f64 coefficients
//! (row-major), f64 pose (row-major), f64 audio.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::synth::{CoeffSequence, SceneSpec};
use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"TFSQ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub count: usize,
    pub spec: SceneSpec,
    pub files: Vec<String>,
}

fn record_name(i: usize) -> String {
    format!("seq_{i:05}.bin")
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::data(format!("truncated record: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::data(format!("truncated record: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn encode_sequence(seq: &CoeffSequence) -> Result<Vec<u8>> {
    seq.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [
        DATASET_VERSION,
        seq.class as u32,
        seq.len() as u32,
        seq.coeffs.ncols() as u32,
        seq.pose.ncols() as u32,
    ] {
        write_u32(&mut out, v)?;
    }
    for v in seq
        .coeffs
        .iter()
        .chain(seq.pose.iter())
        .chain(seq.audio.iter())
    {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_sequence(bytes: &[u8]) -> Result<CoeffSequence> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::data("record too short"))?;
    if &magic != MAGIC {
        return Err(Error::data("not a sequence record"));
    }
    let version = read_u32(&mut r)?;
    if version != DATASET_VERSION {
        return Err(Error::data(format!(
            "sequence record version {version}, expected {DATASET_VERSION}"
        )));
    }
    let class = read_u32(&mut r)? as usize;
    let t = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let p = read_u32(&mut r)? as usize;
    let coeffs = Array2::from_shape_vec((t, d), read_f64s(&mut r, t * d)?).unwrap();
    let pose = Array2::from_shape_vec((t, p), read_f64s(&mut r, t * p)?).unwrap();
    let audio = Array1::from(read_f64s(&mut r, t)?);
    if !r.is_empty() {
        return Err(Error::data("trailing bytes in sequence record"));
    }
    Ok(CoeffSequence {
        class,
        coeffs,
        pose,
        audio,
    })
}

pub fn save_dataset(dir: &Path, spec: &SceneSpec, seed: u64, seqs: &[CoeffSequence]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let files: Vec<String> = (0..seqs.len()).map(record_name).collect();
    for (seq, name) in seqs.iter().zip(&files) {
        fs::write(dir.join(name), encode_sequence(seq)?)?;
    }
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        seed,
        count: seqs.len(),
        spec: spec.clone(),
        files,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<CoeffSequence>)> {
    let text = fs::read_to_string(dir.join("manifest.json")).map_err(|e| {
        Error::data(format!(
            "reading {}: {e}",
            dir.join("manifest.json").display()
        ))
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format_version != DATASET_VERSION {
        return Err(Error::data(format!(
            "dataset version {}, expected {DATASET_VERSION}",
            manifest.format_version
        )));
    }
    if manifest.files.len() != manifest.count {
        return Err(Error::data("manifest count does not match its file list"));
    }
    let seqs = manifest
        .files
        .iter()
        .map(|f| decode_sequence(&fs::read(dir.join(f))?))
        .collect::<Result<Vec<_>>>()?;
    for s in &seqs {
        if s.class >= manifest.spec.classes || s.coeffs.ncols() != manifest.spec.dim {
            return Err(Error::data(
                "sequence does not match the manifest's scene spec",
            ));
        }
    }
    Ok((manifest, seqs))
}
