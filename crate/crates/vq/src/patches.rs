//! Procedural face-like patches: a gradient background, a skin ellipse,
//! eyes, brows, a mouth with tooth stripes, and class-keyed wrinkle lines.
//! Motion (head shift, mouth opening, eye closure) is driven by expression
//! and pose coefficients.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct FaceIdentity {
    pub bg_top: [f64; 3],
    pub bg_bottom: [f64; 3],
    pub skin: [f64; 3],
    pub feature: [f64; 3],
    pub face_rx: f64,
    pub face_ry: f64,
    pub stripe_freq: f64,
}

impl FaceIdentity {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut color = |lo: f64, hi: f64| {
            [
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
            ]
        };
        let bg_top = color(0.0, 0.5);
        let bg_bottom = color(0.0, 0.5);
        let skin = color(0.55, 0.95);
        let feature = color(0.05, 0.3);
        Self {
            bg_top,
            bg_bottom,
            skin,
            feature,
            face_rx: rng.random_range(0.55..0.68),
            face_ry: rng.random_range(0.68..0.8),
            stripe_freq: rng.random_range(25.0..40.0),
        }
    }
}

/// Geometric state of one rendering, in normalized image units (the image spans `[-1, 1]`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Motion {
    pub dx: f64,
    pub dy: f64,
    /// Mouth half-height.
    pub mouth: f64,
    /// Eye half-height.
    pub eye: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Motion {
    pub fn from_coeffs(beta: &[f64], rho: &[f64]) -> Self {
        let mean = |s: &[f64]| {
            if s.is_empty() {
                0.0
            } else {
                s.iter().sum::<f64>() / s.len() as f64
            }
        };
        let lip = mean(&beta[..beta.len().min(8)]);
        let blink = if beta.len() > 8 {
            mean(&beta[8..beta.len().min(12)])
        } else {
            0.0
        };
        let r = |i: usize| rho.get(i).copied().unwrap_or(0.0);
        Self {
            dx: 0.15 * r(0).tanh(),
            dy: 0.15 * r(1).tanh(),
            mouth: 0.04 + 0.16 * sigmoid(2.0 * lip),
            eye: 0.02 + 0.1 * (1.0 - sigmoid(2.0 * blink)),
        }
    }

    pub fn neutral() -> Self {
        Self::from_coeffs(&[0.0; 12], &[0.0; 6])
    }
}

/// Soft inside-indicator of the ellipse, one pixel wide at the edge.
fn ellipse(u: f64, v: f64, cu: f64, cv: f64, ru: f64, rv: f64, px: f64) -> f64 {
    let du = (u - cu) / ru;
    let dv = (v - cv) / rv;
    let r = (du * du + dv * dv).sqrt();
    let d = (r - 1.0) * ru.min(rv);
    (0.5 - d / px).clamp(0.0, 1.0)
}

fn line(dist: f64, half: f64, px: f64) -> f64 {
    (0.5 - (dist.abs() - half) / px).clamp(0.0, 1.0)
}

fn blend(c: &mut [f64; 3], to: [f64; 3], a: f64) {
    for k in 0..3 {
        c[k] += (to[k] - c[k]) * a;
    }
}

/// `size·size` pixel rows, RGB columns in `[0, 1]`.
pub fn render(id: &FaceIdentity, m: &Motion, class: usize, size: usize) -> Array2<f64> {
    let px = 2.0 / size as f64;
    let mut out = Array2::zeros((size * size, 3));
    let teeth = [0.95, 0.95, 0.9];
    let wrinkle = [id.skin[0] * 0.55, id.skin[1] * 0.5, id.skin[2] * 0.5];
    for y in 0..size {
        let v = (y as f64 + 0.5) * px - 1.0;
        for x in 0..size {
            let u = (x as f64 + 0.5) * px - 1.0;
            let t = (v + 1.0) / 2.0;
            let mut c = [0.0; 3];
            for k in 0..3 {
                c[k] = id.bg_top[k] * (1.0 - t) + id.bg_bottom[k] * t;
            }
            let face = ellipse(u, v, m.dx, m.dy, id.face_rx, id.face_ry, px);
            blend(&mut c, id.skin, face);
            let (fu, fv) = (u - m.dx, v - m.dy);

            // class-keyed wrinkles; each bit of the class id adds one family
            let mut w: f64 = 0.0;
            if class & 1 == 1 {
                for i in 0..3 {
                    w = w.max(
                        line(
                            fv + 0.45 + 0.09 * i as f64 + 0.04 * (3.0 * fu).cos(),
                            0.012,
                            px,
                        ) * (fu.abs() < 0.35) as u8 as f64,
                    );
                }
            }
            if class & 2 == 2 {
                for s in [-1.0, 1.0] {
                    let cu = fu - s * 0.42;
                    for i in 0..2 {
                        let d = fv + 0.2 - 0.6 * s * cu + 0.07 * i as f64;
                        w = w.max(line(d, 0.012, px) * (cu.abs() < 0.1) as u8 as f64);
                    }
                }
            }
            if class & 4 == 4 {
                for s in [-1.0, 1.0] {
                    let d = fu - s * (0.28 + 0.25 * (fv - 0.1));
                    w = w.max(line(d, 0.012, px) * ((0.05..0.45).contains(&fv)) as u8 as f64);
                }
            }
            blend(&mut c, wrinkle, w * face);

            for s in [-1.0, 1.0] {
                let brow = fv + 0.38 - 0.06 * ((fu - s * 0.25) * 6.0).cos();
                let a = line(brow, 0.025, px) * ((fu - s * 0.25).abs() < 0.16) as u8 as f64;
                blend(&mut c, id.feature, a * face);
                blend(
                    &mut c,
                    id.feature,
                    ellipse(fu, fv, s * 0.25, -0.2, 0.12, m.eye, px) * face,
                );
            }
            let mouth = ellipse(fu, fv, 0.0, 0.35, 0.25, m.mouth, px);
            blend(&mut c, id.feature, mouth * face);
            let upper = (fv < 0.35) as u8 as f64;
            let stripe = ((id.stripe_freq * fu).sin() > 0.0) as u8 as f64;
            blend(&mut c, teeth, mouth * face * upper * stripe * 0.8);
            for k in 0..3 {
                out[[y * size + x, k]] = c[k].clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Random coefficients `(β, ρ)` used to drive target renderings.
pub fn random_coeffs<R: Rng + ?Sized>(
    rng: &mut R,
    beta_dim: usize,
    pose_dim: usize,
) -> (Vec<f64>, Vec<f64>) {
    let n = Normal::new(0.0, 0.6).unwrap();
    let beta = (0..beta_dim)
        .map(|i| if i < 12 { n.sample(rng) } else { 0.0 })
        .collect();
    let rho = (0..pose_dim).map(|_| n.sample(rng)).collect();
    (beta, rho)
}

/// Stacks images into one pixel-row batch.
pub fn stack_images(images: &[Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = images.iter().map(|a| a.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("images share a channel count")
}

/// `n` independent patches with random identity, motion and class.
pub fn patch_corpus(n: usize, size: usize, classes: usize, seed: u64) -> Vec<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let id = FaceIdentity::sample(&mut rng);
            let (beta, rho) = random_coeffs(&mut rng, 12, 6);
            let class = rng.random_range(0..classes.max(1));
            render(&id, &Motion::from_coeffs(&beta, &rho), class, size)
        })
        .collect()
}

/// Source (neutral) and target (coefficient-driven) renderings of one identity.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub source: Array2<f64>,
    pub target: Array2<f64>,
    pub beta: Vec<f64>,
    pub rho: Vec<f64>,
    pub class: usize,
}

pub fn pair_corpus(
    n: usize,
    size: usize,
    classes: usize,
    beta_dim: usize,
    pose_dim: usize,
    seed: u64,
) -> Vec<PatchPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let id = FaceIdentity::sample(&mut rng);
            let class = rng.random_range(0..classes.max(1));
            let (beta, rho) = random_coeffs(&mut rng, beta_dim, pose_dim);
            PatchPair {
                source: render(&id, &Motion::neutral(), class, size),
                target: render(&id, &Motion::from_coeffs(&beta, &rho), class, size),
                beta,
                rho,
                class,
            }
        })
        .collect()
}
