//! Synthetic emotional-scene coefficient tracks.
//!
//! Lip coordinates are an affine function of a 1-D driving signal, blink
//! coordinates carry sparse pulses, every other coordinate is a class offset
//! plus a slow oscillation with a per-sequence phase. Pose follows a damped
//! random walk whose step size grows with the driving signal's energy.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub classes: usize,
    pub dim: usize,
    pub pose_dim: usize,
    pub seq_len: usize,
    pub frame_rate: f64,
    pub lip: Vec<usize>,
    pub blink: Vec<usize>,
    /// One gain per lip coordinate.
    pub lip_gain: Vec<f64>,
    /// `classes × dim` base offsets.
    pub offsets: Vec<Vec<f64>>,
    /// `classes × dim` oscillation amplitudes.
    pub amplitudes: Vec<Vec<f64>>,
    /// Oscillation frequency per class, in Hz.
    pub frequencies: Vec<f64>,
    pub noise: f64,
    /// Per-frame probability that a blink starts.
    pub blink_rate: f64,
    pub blink_height: f64,
    pub pose_decay: f64,
    pub pose_base_step: f64,
    pub pose_energy_gain: f64,
    /// Radius of the window used for audio energy.
    pub energy_radius: usize,
}

/// Blink profile over consecutive frames.
const BLINK_SHAPE: [f64; 3] = [0.5, 1.0, 0.5];

impl SceneSpec {
    /// Default scene with `classes` classes; class-dependent tables come from `seed`.
    pub fn generate(classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 64;
        let lip: Vec<usize> = (0..8).collect();
        let blink: Vec<usize> = (8..12).collect();
        let lip_gain = lip.iter().map(|_| rng.random_range(0.8..1.5)).collect();
        let offsets = (0..classes)
            .map(|_| {
                (0..dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let amplitudes = (0..classes)
            .map(|_| {
                (0..dim)
                    .map(|j| {
                        if j < 12 {
                            0.0
                        } else {
                            rng.random_range(0.0..0.3)
                        }
                    })
                    .collect()
            })
            .collect();
        let frequencies = (0..classes).map(|_| rng.random_range(0.3..1.0)).collect();
        Self {
            classes,
            dim,
            pose_dim: 6,
            seq_len: 50,
            frame_rate: 25.0,
            lip,
            blink,
            lip_gain,
            offsets,
            amplitudes,
            frequencies,
            noise: 0.05,
            blink_rate: 0.06,
            blink_height: 1.5,
            pose_decay: 0.95,
            pose_base_step: 0.005,
            pose_energy_gain: 0.1,
            energy_radius: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.classes == 0 || self.dim == 0 || self.pose_dim == 0 || self.seq_len < 2 {
            return bad("scene needs classes, dimensions and at least two frames".into());
        }
        if self.lip.iter().chain(&self.blink).any(|&i| i >= self.dim) {
            return bad("lip/blink index out of range".into());
        }
        if self.lip.iter().any(|i| self.blink.contains(i)) {
            return bad("lip and blink index sets overlap".into());
        }
        if self.lip_gain.len() != self.lip.len() {
            return bad("one lip gain per lip coordinate".into());
        }
        let table_ok =
            |t: &Vec<Vec<f64>>| t.len() == self.classes && t.iter().all(|r| r.len() == self.dim);
        if !table_ok(&self.offsets)
            || !table_ok(&self.amplitudes)
            || self.frequencies.len() != self.classes
        {
            return bad("per-class tables do not match classes × dim".into());
        }
        if self.amplitudes.iter().flatten().any(|&a| a < 0.0) {
            return bad("oscillation amplitudes must be nonnegative".into());
        }
        for i in 0..self.classes {
            for j in 0..i {
                if self.offsets[i] == self.offsets[j] {
                    return bad(format!("classes {i} and {j} share an offset vector"));
                }
            }
        }
        if self.noise < 0.0 || !(0.0..=1.0).contains(&self.blink_rate) || self.frame_rate <= 0.0 {
            return bad("noise, blink rate or frame rate out of range".into());
        }
        Ok(())
    }

    /// Coordinates that are neither lip nor blink.
    pub fn other(&self) -> Vec<usize> {
        (0..self.dim)
            .filter(|i| !self.lip.contains(i) && !self.blink.contains(i))
            .collect()
    }
}

/// One synthetic clip.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffSequence {
    pub class: usize,
    /// `T × 64` expression coefficients.
    pub coeffs: Array2<f64>,
    /// `T × 6` pose coefficients.
    pub pose: Array2<f64>,
    /// Driving signal, one value per frame.
    pub audio: Array1<f64>,
}

impl CoeffSequence {
    pub fn len(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.nrows() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.coeffs.nrows();
        if self.pose.nrows() != t || self.audio.len() != t {
            return Err(Error::data("sequence channels have different lengths"));
        }
        Ok(())
    }
}

/// Two sinusoids under a slow envelope plus smoothed noise.
pub fn synth_audio<R: Rng + ?Sized>(len: usize, frame_rate: f64, rng: &mut R) -> Array1<f64> {
    let f1 = rng.random_range(2.0..4.0);
    let f2 = rng.random_range(5.0..8.0);
    let fe = rng.random_range(0.3..0.6);
    let (p1, p2, pe) = (
        rng.random_range(0.0..2.0 * PI),
        rng.random_range(0.0..2.0 * PI),
        rng.random_range(0.0..2.0 * PI),
    );
    let white: Vec<f64> = (0..len + 2)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Array1::from_shape_fn(len, |t| {
        let s = t as f64 / frame_rate;
        let env = 0.15 + 0.85 * (0.5 + 0.5 * (2.0 * PI * fe * s + pe).sin());
        let noise = (white[t] + white[t + 1] + white[t + 2]) / 3.0;
        env * ((2.0 * PI * f1 * s + p1).sin() + 0.4 * (2.0 * PI * f2 * s + p2).sin()) + 0.1 * noise
    })
}

/// Mean of `a²` over a clamped window of radius `r` around `t`.
pub fn audio_energy(audio: &Array1<f64>, t: usize, r: usize) -> f64 {
    let w = clamped_window(audio, t, r);
    w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64
}

/// `2r + 1` values centred on `t`, repeating the edge frames.
pub fn clamped_window(audio: &Array1<f64>, t: usize, r: usize) -> Vec<f64> {
    let n = audio.len() as isize;
    (-(r as isize)..=r as isize)
        .map(|k| audio[(t as isize + k).clamp(0, n - 1) as usize])
        .collect()
}

fn synth_sequence(spec: &SceneSpec, class: usize, rng: &mut ChaCha8Rng) -> CoeffSequence {
    let t_len = spec.seq_len;
    let audio = synth_audio(t_len, spec.frame_rate, rng);
    let phases: Vec<f64> = (0..spec.dim)
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();
    let mut blink = vec![0.0; t_len];
    let mut t = 0;
    while t < t_len {
        if rng.random::<f64>() < spec.blink_rate {
            for (k, &h) in BLINK_SHAPE.iter().enumerate() {
                if t + k < t_len {
                    blink[t + k] = h * spec.blink_height;
                }
            }
            t += BLINK_SHAPE.len() + 1;
        } else {
            t += 1;
        }
    }
    let off = &spec.offsets[class];
    let amp = &spec.amplitudes[class];
    let freq = spec.frequencies[class];
    let mut coeffs = Array2::zeros((t_len, spec.dim));
    for t in 0..t_len {
        let s = t as f64 / spec.frame_rate;
        for j in 0..spec.dim {
            let noise = spec.noise * rng.sample::<f64, _>(StandardNormal);
            coeffs[[t, j]] = off[j] + noise + amp[j] * (2.0 * PI * freq * s + phases[j]).sin();
        }
        for (k, &j) in spec.lip.iter().enumerate() {
            coeffs[[t, j]] += spec.lip_gain[k] * audio[t];
        }
        for &j in &spec.blink {
            coeffs[[t, j]] += blink[t];
        }
    }
    let mut pose = Array2::zeros((t_len, spec.pose_dim));
    for t in 1..t_len {
        let step = spec.pose_base_step
            + spec.pose_energy_gain * audio_energy(&audio, t, spec.energy_radius);
        for j in 0..spec.pose_dim {
            pose[[t, j]] =
                spec.pose_decay * pose[[t - 1, j]] + step * rng.sample::<f64, _>(StandardNormal);
        }
    }
    CoeffSequence {
        class,
        coeffs,
        pose,
        audio,
    }
}

/// `n` sequences with uniformly drawn classes. Each sequence has its own
/// stream derived from `seed`, so the result does not depend on generation order.
pub fn synth_dataset(spec: &SceneSpec, n: usize, seed: u64) -> Result<Vec<CoeffSequence>> {
    spec.validate()?;
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let class = rng.random_range(0..spec.classes);
            synth_sequence(spec, class, &mut rng)
        })
        .collect())
}

/// Source of per-frame audio features.
pub trait AudioFeatureProvider {
    fn len(&self) -> usize;
    fn frame(&self, t: usize) -> f64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `2r + 1` features centred on `t`, repeating the edge frames.
    fn window(&self, t: usize, r: usize) -> Vec<f64> {
        let n = self.len() as isize;
        (-(r as isize)..=r as isize)
            .map(|k| self.frame((t as isize + k).clamp(0, n - 1) as usize))
            .collect()
    }
}

/// In-memory driving signal (the synthetic default).
#[derive(Debug, Clone, PartialEq)]
pub struct SignalAudio(pub Array1<f64>);

impl AudioFeatureProvider for SignalAudio {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn frame(&self, t: usize) -> f64 {
        self.0[t]
    }
}

/// Precomputed per-frame features read from a text file, one value per line.
#[derive(Debug, Clone, PartialEq)]
pub struct FileAudio {
    values: Vec<f64>,
}

impl FileAudio {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let values = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .enumerate()
            .map(|(i, l)| {
                l.parse::<f64>()
                    .map_err(|e| Error::data(format!("audio feature line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() {
            return Err(Error::data("audio feature file is empty"));
        }
        Ok(Self { values })
    }

    pub fn into_signal(self) -> SignalAudio {
        SignalAudio(Array1::from(self.values))
    }
}

impl AudioFeatureProvider for FileAudio {
    fn len(&self) -> usize {
        self.values.len()
    }

    fn frame(&self, t: usize) -> f64 {
        self.values[t]
    }
}
