//! Training samples and the synthetic nested-shape corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::MaskGrid;
use crate::tensor::Tensor;

/// An image with every annotated instance mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub masks: Vec<MaskGrid>,
    /// One stable identifier per mask.
    pub ids: Vec<u64>,
}

impl TrainingSample {
    pub fn new(image: Tensor<f32>, masks: Vec<MaskGrid>, ids: Vec<u64>) -> Result<Self> {
        let s = Self { image, masks, ids };
        s.validate()?;
        Ok(s)
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.image.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::InvalidSample(format!("image shape {shape:?} is not [3, H, W]")));
        }
        if self.masks.is_empty() {
            return Err(Error::InvalidSample("no masks".into()));
        }
        if self.ids.len() != self.masks.len() {
            return Err(Error::InvalidSample(format!(
                "{} ids for {} masks",
                self.ids.len(),
                self.masks.len()
            )));
        }
        for (k, m) in self.masks.iter().enumerate() {
            if m.width() != shape[2] || m.height() != shape[1] {
                return Err(Error::InvalidSample(format!(
                    "mask {k} is {}×{}, image is {}×{}",
                    m.width(),
                    m.height(),
                    shape[2],
                    shape[1]
                )));
            }
            if m.is_empty() {
                return Err(Error::InvalidSample(format!("mask {k} is empty")));
            }
        }
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidSample("image values outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Index of the enclosing shape and of the shape nested in it; every synthetic
/// sample stores them first.
pub const SYNTH_OUTER: usize = 0;
pub const SYNTH_INNER: usize = 1;

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Rect {
    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Per-sample stream so sample `i` is the same whatever `n` is.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)]
}

/// Redraws until the colour is at least `min_dist` (L1) from all of `avoid`.
fn distinct_color(rng: &mut ChaCha8Rng, avoid: &[[f32; 3]], min_dist: f32) -> [f32; 3] {
    loop {
        let c = color(rng);
        let far = avoid
            .iter()
            .all(|a| a.iter().zip(&c).map(|(p, q)| (p - q).abs()).sum::<f32>() >= min_dist);
        if far {
            return c;
        }
    }
}

/// Pattern with values in `[-1, 1]`.
#[derive(Debug, Clone, Copy)]
enum Texture {
    Stripes { period: f64, angle: f64 },
    Checker { cell: usize },
    Dots { period: usize },
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        match rng.gen_range(0..3) {
            0 => Texture::Stripes {
                period: rng.gen_range(4.0..9.0),
                angle: rng.gen_range(0.0..std::f64::consts::PI),
            },
            1 => Texture::Checker {
                cell: rng.gen_range(2..5),
            },
            _ => Texture::Dots {
                period: rng.gen_range(3..6),
            },
        }
    }

    fn at(&self, x: usize, y: usize) -> f32 {
        match *self {
            Texture::Stripes { period, angle } => {
                let t = x as f64 * angle.cos() + y as f64 * angle.sin();
                (2.0 * std::f64::consts::PI * t / period).sin() as f32
            }
            Texture::Checker { cell } => {
                if (x / cell + y / cell) % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Texture::Dots { period } => {
                if x % period == 0 && y % period == 0 {
                    1.0
                } else {
                    -0.3
                }
            }
        }
    }
}

struct Painter {
    size: usize,
    pixels: Vec<[f32; 3]>,
}

impl Painter {
    fn fill(&mut self, mask: &MaskGrid, base: [f32; 3], texture: Texture, amp: f32) {
        for (x, y) in mask.pixels() {
            let t = texture.at(x, y) * amp;
            let px = &mut self.pixels[y * self.size + x];
            for c in 0..3 {
                px[c] = base[c] + t;
            }
        }
    }

    fn into_image(self, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let hw = self.size * self.size;
        let mut data = vec![0.0f32; 3 * hw];
        for (i, px) in self.pixels.iter().enumerate() {
            for c in 0..3 {
                let noise: f32 = rng.gen_range(-0.03..0.03);
                data[c * hw + i] = (px[c] + noise).clamp(0.0, 1.0);
            }
        }
        Tensor::new(vec![3, self.size, self.size], data)
    }
}

/// Ellipse with a rectangle strictly inside it, kept off the ellipse centre so
/// a click at the centre of the ellipse is unambiguous.
fn nested_pair(rng: &mut ChaCha8Rng, size: usize) -> (Ellipse, Rect) {
    let s = size as f64;
    loop {
        let rx = rng.gen_range(0.26 * s..0.40 * s);
        let ry = rng.gen_range(0.26 * s..0.40 * s);
        let cx = rng.gen_range(rx + 1.0..s - rx - 1.0);
        let cy = rng.gen_range(ry + 1.0..s - ry - 1.0);
        let outer = Ellipse { cx, cy, rx, ry };
        let w = rng.gen_range(0.16 * s..0.26 * s).round() as usize;
        let h = rng.gen_range(0.16 * s..0.26 * s).round() as usize;
        let x0 = rng.gen_range((cx - rx).max(0.0) as usize..(cx + rx) as usize);
        let y0 = rng.gen_range((cy - ry).max(0.0) as usize..(cy + ry) as usize);
        let rect = Rect {
            x0,
            y0,
            x1: x0 + w,
            y1: y0 + h,
        };
        // Strictly inside: every pixel centre of the rectangle plus a 1-pixel
        // ring is inside the ellipse.
        let inside = (rect.y0.saturating_sub(1)..rect.y1 + 1).all(|y| {
            (rect.x0.saturating_sub(1)..rect.x1 + 1)
                .all(|x| outer.contains(x as f64 + 0.5, y as f64 + 0.5))
        }) && rect.x0 > 0
            && rect.y0 > 0;
        let margin = 0.08 * s;
        let centre_clear = !(cx > rect.x0 as f64 - margin
            && cx < rect.x1 as f64 + margin
            && cy > rect.y0 as f64 - margin
            && cy < rect.y1 as f64 + margin);
        if inside && centre_clear {
            return (outer, rect);
        }
    }
}

fn synth_sample(index: usize, size: usize, seed: u64) -> TrainingSample {
    let mut rng = sample_rng(seed, index);
    let (outer, rect) = nested_pair(&mut rng, size);
    let outer_mask = MaskGrid::from_fn(size, size, |x, y| outer.contains(x as f64 + 0.5, y as f64 + 0.5));
    let inner_mask = MaskGrid::from_fn(size, size, |x, y| rect.contains(x, y));

    let bg = color(&mut rng);
    let outer_col = distinct_color(&mut rng, &[bg], 0.6);
    let inner_col = distinct_color(&mut rng, &[bg, outer_col], 0.6);
    let mut painter = Painter {
        size,
        pixels: vec![bg; size * size],
    };
    let bg_tex = Texture::random(&mut rng);
    painter.fill(&MaskGrid::full(size, size), bg, bg_tex, 0.05);

    // Extra shapes sit outside the enclosing ellipse (they may touch each
    // other; later ones occlude earlier ones).
    let n_extra = rng.gen_range(0..=2);
    let mut extras: Vec<MaskGrid> = Vec::new();
    let mut occupied = outer_mask.clone();
    let mut palette = vec![bg, outer_col, inner_col];
    for _ in 0..n_extra {
        for _attempt in 0..20 {
            let s = size as f64;
            let shape = if rng.gen_bool(0.5) {
                let e = Ellipse {
                    cx: rng.gen_range(0.0..s),
                    cy: rng.gen_range(0.0..s),
                    rx: rng.gen_range(0.08 * s..0.18 * s),
                    ry: rng.gen_range(0.08 * s..0.18 * s),
                };
                MaskGrid::from_fn(size, size, |x, y| e.contains(x as f64 + 0.5, y as f64 + 0.5))
            } else {
                let w = rng.gen_range(size / 8..size / 4);
                let h = rng.gen_range(size / 8..size / 4);
                let r = Rect {
                    x0: rng.gen_range(0..size - w),
                    y0: rng.gen_range(0..size - h),
                    x1: 0,
                    y1: 0,
                };
                let r = Rect {
                    x1: r.x0 + w,
                    y1: r.y0 + h,
                    ..r
                };
                MaskGrid::from_fn(size, size, |x, y| r.contains(x, y))
            };
            let visible = shape.and(&outer_mask.not());
            if visible.count() < size * size / 100 || visible.and(&occupied).count() > 0 {
                continue;
            }
            let c = distinct_color(&mut rng, &palette, 0.5);
            palette.push(c);
            let tex = Texture::random(&mut rng);
            painter.fill(&visible, c, tex, 0.08);
            occupied = occupied.or(&visible);
            extras.push(visible);
            break;
        }
    }

    let outer_tex = Texture::random(&mut rng);
    painter.fill(&outer_mask, outer_col, outer_tex, 0.08);
    let inner_tex = Texture::random(&mut rng);
    painter.fill(&inner_mask, inner_col, inner_tex, 0.08);
    let image = painter.into_image(&mut rng);

    let mut masks = vec![outer_mask, inner_mask];
    masks.extend(extras);
    let ids = (0..masks.len() as u64).map(|k| ((index as u64) << 8) | k).collect();
    TrainingSample { image, masks, ids }
}

/// `n` deterministic `size × size` scenes. Each has an ellipse (mask
/// [`SYNTH_OUTER`]) strictly containing a rectangle (mask [`SYNTH_INNER`]), so a
/// click on the rectangle is ambiguous, plus up to two other shapes.
pub fn synth_ambiguity_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<TrainingSample>> {
    if size < 32 {
        return Err(Error::Config(format!("synthetic image size {size} is below 32")));
    }
    Ok((0..n).map(|i| synth_sample(i, size, seed)).collect())
}
