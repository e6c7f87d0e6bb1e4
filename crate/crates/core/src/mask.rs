//! Binary masks and the pixel-level geometry used by click placement and metrics.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::scalar::{sigmoid, Scalar};

/// Binarization threshold applied to mask probabilities everywhere (`p >= 0.5`).
pub const MASK_THRESHOLD: f64 = 0.5;

/// Row-major binary `height × width` grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskGrid {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl MaskGrid {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width * height, "mask size");
        Self {
            width,
            height,
            bits,
        }
    }

    /// `f(x, y)` for every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    /// Thresholds probabilities at 0.5 (inclusive).
    pub fn from_probs<T: Scalar>(width: usize, height: usize, probs: &[T]) -> Self {
        let t = T::lit(MASK_THRESHOLD);
        Self::from_bits(width, height, probs.iter().map(|p| *p >= t).collect())
    }

    /// Thresholds logits: `sigmoid(l) >= 0.5`.
    pub fn from_logits<T: Scalar>(width: usize, height: usize, logits: &[T]) -> Self {
        let t = T::lit(MASK_THRESHOLD);
        Self::from_bits(width, height, logits.iter().map(|l| sigmoid(*l) >= t).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn same_shape(&self, other: &MaskGrid) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn zip_with(&self, other: &MaskGrid, f: impl Fn(bool, bool) -> bool) -> MaskGrid {
        assert!(self.same_shape(other), "mask shapes differ");
        MaskGrid {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    pub fn and(&self, other: &MaskGrid) -> MaskGrid {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn or(&self, other: &MaskGrid) -> MaskGrid {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn xor(&self, other: &MaskGrid) -> MaskGrid {
        self.zip_with(other, |a, b| a != b)
    }

    pub fn not(&self) -> MaskGrid {
        MaskGrid {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &MaskGrid) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    /// Set pixels as `(x, y)` in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(i, _)| (i % w, i / w))
    }

    /// Values as 0/1 scalars.
    pub fn to_values<T: Scalar>(&self) -> Vec<T> {
        self.bits
            .iter()
            .map(|b| if *b { T::one() } else { T::zero() })
            .collect()
    }

    pub fn flip_horizontal(&self) -> MaskGrid {
        MaskGrid::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }
}

/// Intersection over union. Two empty masks are defined to have IoU 1.
pub fn iou(a: &MaskGrid, b: &MaskGrid) -> f64 {
    assert!(a.same_shape(b), "iou: mask shapes differ");
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.bits.iter().zip(&b.bits) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// 4-connected component labelling. Labels are assigned in row-major order
/// of each component's first pixel.
#[derive(Debug, Clone)]
pub struct Components {
    /// `None` for background, else the component index.
    pub labels: Vec<Option<usize>>,
    pub sizes: Vec<usize>,
    pub width: usize,
    pub height: usize,
}

impl Components {
    pub fn of(mask: &MaskGrid) -> Self {
        let (w, h) = (mask.width, mask.height);
        let mut labels = vec![None; w * h];
        let mut sizes = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..w * h {
            if !mask.bits[start] || labels[start].is_some() {
                continue;
            }
            let id = sizes.len();
            let mut size = 0;
            labels[start] = Some(id);
            queue.push_back(start);
            while let Some(p) = queue.pop_front() {
                size += 1;
                let (x, y) = (p % w, p / w);
                let mut visit = |q: usize| {
                    if mask.bits[q] && labels[q].is_none() {
                        labels[q] = Some(id);
                        queue.push_back(q);
                    }
                };
                if x > 0 {
                    visit(p - 1);
                }
                if x + 1 < w {
                    visit(p + 1);
                }
                if y > 0 {
                    visit(p - w);
                }
                if y + 1 < h {
                    visit(p + w);
                }
            }
            sizes.push(size);
        }
        Self {
            labels,
            sizes,
            width: w,
            height: h,
        }
    }

    /// Index of the largest component; ties go to the lower label.
    pub fn largest(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, s) in self.sizes.iter().enumerate() {
            if best.map_or(true, |b| *s > self.sizes[b]) {
                best = Some(i);
            }
        }
        best
    }

    pub fn mask_of(&self, label: usize) -> MaskGrid {
        MaskGrid::from_bits(
            self.width,
            self.height,
            self.labels.iter().map(|l| *l == Some(label)).collect(),
        )
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest pixel
/// outside the mask. Pixels beyond the image border count as outside, so a
/// mask touching the border has distance 1 there. Background pixels get 0.
pub fn squared_distance_to_boundary(mask: &MaskGrid) -> Vec<u64> {
    // work on a grid padded by one background pixel on every side
    let (w, h) = (mask.width + 2, mask.height + 2);
    let inf = ((w * w + h * h) as f64) * 4.0;
    let mut grid = vec![0.0f64; w * h];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                grid[(y + 1) * w + x + 1] = inf;
            }
        }
    }
    let mut col = vec![0.0; h.max(w)];
    let mut out = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        lower_envelope(&col[..h], &mut out[..h]);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        col[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        lower_envelope(&col[..w], &mut out[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    let mut d = Vec::with_capacity(mask.width * mask.height);
    for y in 0..mask.height {
        for x in 0..mask.width {
            d.push(grid[(y + 1) * w + x + 1].round() as u64);
        }
    }
    d
}

/// One-dimensional squared distance transform of a sampled function
/// (lower envelope of parabolas rooted at each sample).
fn lower_envelope(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates from -inf
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
}

/// Pixel of maximal distance to the mask boundary; ties broken by lowest `(y, x)`.
pub fn deepest_point(mask: &MaskGrid) -> Option<(usize, usize)> {
    let d = squared_distance_to_boundary(mask);
    let mut best: Option<(usize, u64)> = None;
    for (i, v) in d.iter().enumerate() {
        if mask.bits[i] && best.map_or(true, |(_, b)| *v > b) {
            best = Some((i, *v));
        }
    }
    best.map(|(i, _)| (i % mask.width, i / mask.width))
}
