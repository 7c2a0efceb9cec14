//! Convolutions on pixel-row tensors.
//!
//! A batch of images is an `Array2` with one row per pixel, ordered
//! `(batch, y, x)`, and one column per channel. Convolutions gather patches
//! into columns and multiply by a `(k·k·c_in, c_out)` weight.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use talkflow_core::nn::Init;
use talkflow_core::numerics::{Bound, ParamSet, Tape, Var, PAD};
use talkflow_core::Scalar;

type Key = (usize, usize, usize, usize, usize, usize, usize);

thread_local! {
    static IM2COL: RefCell<HashMap<Key, Rc<Vec<usize>>>> = RefCell::new(HashMap::new());
    static UPSAMPLE: RefCell<HashMap<(usize, usize, usize), Rc<Vec<usize>>>> = RefCell::new(HashMap::new());
}

pub fn out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Flat gather indices turning `(batch·h·w, cin)` into
/// `(batch·ho·wo, k·k·cin)`; out-of-image taps read zero.
pub fn im2col_index(
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Rc<Vec<usize>> {
    let key = (batch, h, w, cin, k, stride, pad);
    if let Some(hit) = IM2COL.with(|c| c.borrow().get(&key).cloned()) {
        return hit;
    }
    let (ho, wo) = (out_size(h, k, stride, pad), out_size(w, k, stride, pad));
    let mut idx = Vec::with_capacity(batch * ho * wo * k * k * cin);
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..k {
                    for kx in 0..k {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        let x = (ox * stride + kx) as isize - pad as isize;
                        let inside = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
                        for c in 0..cin {
                            idx.push(if inside {
                                ((b * h + y as usize) * w + x as usize) * cin + c
                            } else {
                                PAD
                            });
                        }
                    }
                }
            }
        }
    }
    let idx = Rc::new(idx);
    IM2COL.with(|c| c.borrow_mut().insert(key, idx.clone()));
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(prefix: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            weight: format!("{prefix}.w"),
            bias: format!("{prefix}.b"),
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        let fan_in = self.k * self.k * self.cin;
        params.insert(
            self.weight.clone(),
            Init::Normal((1.0 / fan_in as f64).sqrt()).sample(fan_in, self.cout, rng),
        );
        params.insert(self.bias.clone(), Array2::zeros((1, self.cout)));
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            out_size(h, self.k, self.stride, self.pad),
            out_size(w, self.k, self.stride, self.pad),
        )
    }

    /// Returns the output and its spatial size.
    pub fn forward<T: Scalar>(
        &self,
        b: &Bound<'_, T>,
        x: Var,
        batch: usize,
        h: usize,
        w: usize,
    ) -> (Var, usize, usize) {
        let g = b.tape;
        debug_assert_eq!(g.shape(x), (batch * h * w, self.cin));
        let (ho, wo) = self.out_hw(h, w);
        let cols = if self.k == 1 && self.stride == 1 && self.pad == 0 {
            x
        } else {
            let idx = im2col_index(batch, h, w, self.cin, self.k, self.stride, self.pad);
            g.gather(x, idx, (batch * ho * wo, self.k * self.k * self.cin))
        };
        let y = g.add(g.matmul(cols, b.p(&self.weight)), b.p(&self.bias));
        (y, ho, wo)
    }
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Scalar>(g: &Tape<T>, x: Var, batch: usize, h: usize, w: usize) -> Var {
    let key = (batch, h, w);
    let idx = UPSAMPLE
        .with(|c| c.borrow().get(&key).cloned())
        .unwrap_or_else(|| {
            let mut rows = Vec::with_capacity(batch * 4 * h * w);
            for b in 0..batch {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        rows.push((b * h + y / 2) * w + x / 2);
                    }
                }
            }
            let rows = Rc::new(rows);
            UPSAMPLE.with(|c| c.borrow_mut().insert(key, rows.clone()));
            rows
        });
    g.gather_rows(x, &idx)
}

/// `(dst·dst, src·src)` matrix of bilinear weights with aligned corners.
pub fn bilinear_matrix(src: usize, dst: usize) -> Array2<f64> {
    let mut m = Array2::zeros((dst * dst, src * src));
    let scale = if dst > 1 {
        (src - 1) as f64 / (dst - 1) as f64
    } else {
        0.0
    };
    let taps = |p: usize| {
        let s = p as f64 * scale;
        let i0 = (s.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, s - i0 as f64)
    };
    for y in 0..dst {
        let (y0, y1, fy) = taps(y);
        for x in 0..dst {
            let (x0, x1, fx) = taps(x);
            let row = y * dst + x;
            m[[row, y0 * src + x0]] += (1.0 - fy) * (1.0 - fx);
            m[[row, y0 * src + x1]] += (1.0 - fy) * fx;
            m[[row, y1 * src + x0]] += fy * (1.0 - fx);
            m[[row, y1 * src + x1]] += fy * fx;
        }
    }
    m
}

/// Tiles `a` (`rows × c`) `times` times vertically.
pub fn tile_rows<T: Scalar>(g: &Tape<T>, a: Var, times: usize) -> Var {
    let rows = g.shape(a).0;
    let idx: Vec<usize> = (0..times).flat_map(|_| 0..rows).collect();
    g.gather_rows(a, &idx)
}
