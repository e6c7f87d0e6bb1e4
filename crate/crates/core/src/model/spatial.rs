//! Index maps for spatial operations on channel-last `[h*w, c]` feature maps.

use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tape::{RowMix, GATHER_NONE};

/// `[c, h, w]` → `[h*w, c]`.
pub fn chw_to_hwc<T: Copy>(data: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(data[(ch * h + y) * w + x]);
            }
        }
    }
    out
}

/// Non-overlapping `p × p` patches of an `h × w × c` map, flattened per patch
/// in `(dy, dx, c)` order: `[(h/p)*(w/p), p*p*c]`.
pub fn patchify_index(h: usize, w: usize, c: usize, p: usize) -> Arc<[u32]> {
    let (hp, wp) = (h / p, w / p);
    let mut idx = Vec::with_capacity(h * w * c);
    for py in 0..hp {
        for px in 0..wp {
            for dy in 0..p {
                for dx in 0..p {
                    let pix = (py * p + dy) * w + px * p + dx;
                    for ch in 0..c {
                        idx.push((pix * c + ch) as u32);
                    }
                }
            }
        }
    }
    idx.into()
}

/// Inverse of [`patchify_index`]: `[hp*wp, p*p*c]` → `[(hp*p)*(wp*p), c]`.
pub fn unpatchify_index(hp: usize, wp: usize, c: usize, p: usize) -> Arc<[u32]> {
    let (h, w) = (hp * p, wp * p);
    let mut idx = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let patch = (y / p) * wp + x / p;
            let within = (y % p) * p + x % p;
            for ch in 0..c {
                idx.push((patch * p * p * c + within * c + ch) as u32);
            }
        }
    }
    idx.into()
}

/// 3×3 neighbourhoods with zero padding: `[h*w, 9*c]`, taps in `(dy, dx, c)` order.
pub fn im2col3x3_index(h: usize, w: usize, c: usize) -> Arc<[u32]> {
    let mut idx = Vec::with_capacity(h * w * 9 * c);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (sy, sx) = (y + dy, x + dx);
                    let inside = sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize;
                    for ch in 0..c {
                        idx.push(if inside {
                            ((sy as usize * w + sx as usize) * c + ch) as u32
                        } else {
                            GATHER_NONE
                        });
                    }
                }
            }
        }
    }
    idx.into()
}

/// Contiguous rows `[start, start + len)` of a `[rows, c]` matrix.
pub fn rows_index(start: usize, len: usize, c: usize) -> Arc<[u32]> {
    ((start * c) as u32..((start + len) * c) as u32)
        .collect::<Vec<_>>()
        .into()
}

/// Source taps of 1-D linear interpolation with half-pixel centers.
fn linear_taps(n_in: usize, n_out: usize) -> Vec<[(usize, f64); 2]> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = if i0 + 1 < n_in { i0 + 1 } else { i0 };
            let l1 = src - i0 as f64;
            [(i0, 1.0 - l1), (i1, l1)]
        })
        .collect()
}

/// Bilinear resampling of an `h_in × w_in` grid to `h_out × w_out` as a row mix.
pub fn bilinear<T: Scalar>(h_in: usize, w_in: usize, h_out: usize, w_out: usize) -> RowMix<T> {
    let ty = linear_taps(h_in, h_out);
    let tx = linear_taps(w_in, w_out);
    let mut b = RowMix::builder(h_in * w_in);
    for ys in &ty {
        for xs in &tx {
            for &(sy, wy) in ys {
                for &(sx, wx) in xs {
                    let wgt = wy * wx;
                    if wgt != 0.0 {
                        b.push(sy * w_in + sx, T::lit(wgt));
                    }
                }
            }
            b.end_row();
        }
    }
    b.build()
}

/// Reads a `[hp*wp, n]` pixel-major map into `[n, h, w]`, cropping padding.
pub fn crop_transpose_index(hp: usize, wp: usize, n: usize, h: usize, w: usize) -> Arc<[u32]> {
    debug_assert!(h <= hp && w <= wp);
    let mut idx = Vec::with_capacity(n * h * w);
    for q in 0..n {
        for y in 0..h {
            for x in 0..w {
                idx.push(((y * wp + x) * n + q) as u32);
            }
        }
    }
    idx.into()
}
