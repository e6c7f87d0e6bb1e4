//! User clicks and their two encodings: binary disk maps and sinusoidal
//! position-aware embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::MaskGrid;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn is_positive(self) -> bool {
        matches!(self, Polarity::Positive)
    }

    pub fn from_flag(positive: bool) -> Self {
        if positive {
            Polarity::Positive
        } else {
            Polarity::Negative
        }
    }
}

/// A click at pixel column `x`, row `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Click {
    pub x: usize,
    pub y: usize,
    pub polarity: Polarity,
    pub order: usize,
}

impl Click {
    pub fn positive(x: usize, y: usize, order: usize) -> Self {
        Self {
            x,
            y,
            polarity: Polarity::Positive,
            order,
        }
    }

    pub fn negative(x: usize, y: usize, order: usize) -> Self {
        Self {
            x,
            y,
            polarity: Polarity::Negative,
            order,
        }
    }

    pub fn in_bounds(&self, width: usize, height: usize) -> bool {
        self.x < width && self.y < height
    }
}

/// Checks bounds and that `order` strictly increases along the list.
pub fn validate_clicks(clicks: &[Click], width: usize, height: usize) -> Result<()> {
    for c in clicks {
        if !c.in_bounds(width, height) {
            return Err(Error::ClickOutOfBounds {
                order: c.order,
                x: c.x,
                y: c.y,
                width,
                height,
            });
        }
    }
    for pair in clicks.windows(2) {
        if pair[1].order <= pair[0].order {
            return Err(Error::InvalidInput(format!(
                "click order must strictly increase, got {} then {}",
                pair[0].order, pair[1].order
            )));
        }
    }
    Ok(())
}

/// Two-channel binary map: disks of `radius` around positive and negative clicks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiskMap {
    pub positive: MaskGrid,
    pub negative: MaskGrid,
    pub radius: usize,
}

impl DiskMap {
    pub fn width(&self) -> usize {
        self.positive.width()
    }

    pub fn height(&self) -> usize {
        self.positive.height()
    }

    /// Channel-major `2 × H × W` values.
    pub fn to_values<T: Scalar>(&self) -> Vec<T> {
        let mut v = self.positive.to_values();
        v.extend(self.negative.to_values::<T>());
        v
    }
}

pub fn encode_clicks_disk(
    clicks: &[Click],
    height: usize,
    width: usize,
    radius: usize,
) -> Result<DiskMap> {
    if radius == 0 {
        return Err(Error::Config("disk radius must be at least 1".into()));
    }
    for c in clicks {
        if !c.in_bounds(width, height) {
            return Err(Error::ClickOutOfBounds {
                order: c.order,
                x: c.x,
                y: c.y,
                width,
                height,
            });
        }
    }
    let mut positive = MaskGrid::empty(width, height);
    let mut negative = MaskGrid::empty(width, height);
    let r2 = (radius * radius) as i64;
    for c in clicks {
        let target = if c.polarity.is_positive() {
            &mut positive
        } else {
            &mut negative
        };
        let y0 = c.y.saturating_sub(radius);
        let y1 = (c.y + radius).min(height - 1);
        let x0 = c.x.saturating_sub(radius);
        let x1 = (c.x + radius).min(width - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as i64 - c.x as i64;
                let dy = y as i64 - c.y as i64;
                if dx * dx + dy * dy <= r2 {
                    target.set(x, y, true);
                }
            }
        }
    }
    Ok(DiskMap {
        positive,
        negative,
        radius,
    })
}

const PE_TEMPERATURE: f64 = 10_000.0;

/// Sinusoidal encoding of one normalized coordinate into `len` interleaved
/// sine/cosine entries.
fn encode_axis<T: Scalar>(pos: f64, extent: usize, len: usize, out: &mut [T]) {
    let angle = pos / extent as f64 * std::f64::consts::TAU;
    for (j, o) in out.iter_mut().take(len).enumerate() {
        let exponent = (2 * (j / 2)) as f64 / len as f64;
        let v = angle / PE_TEMPERATURE.powf(exponent);
        *o = T::lit(if j % 2 == 0 { v.sin() } else { v.cos() });
    }
}

/// Position encoding of pixel `(x, y)`: the first `dim/2` entries encode `x`,
/// the rest `y`. Coordinates are scaled to `[0, 2π)` by the image size.
pub fn positional_encoding<T: Scalar>(
    x: usize,
    y: usize,
    height: usize,
    width: usize,
    dim: usize,
) -> Result<Vec<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("encoding width must be even, got {dim}")));
    }
    if x >= width || y >= height {
        return Err(Error::InvalidInput(format!(
            "position ({x}, {y}) outside {width}x{height}"
        )));
    }
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    encode_axis(x as f64, width, half, &mut out[..half]);
    encode_axis(y as f64, height, half, &mut out[half..]);
    Ok(out)
}

/// Encodings for every cell of an `h × w` grid, `[h*w, dim]`.
pub(crate) fn grid_encoding<T: Scalar>(h: usize, w: usize, dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(h * w * dim);
    for y in 0..h {
        for x in 0..w {
            data.extend(positional_encoding::<T>(x, y, h, w, dim).expect("valid grid"));
        }
    }
    Tensor::new(vec![h * w, dim], data)
}

/// Per-click embeddings `[C, D]`: `PE(x, y) + E_p` for positive clicks and
/// `PE(x, y) + E_n` for negative ones.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickEmbeddings<T> {
    pub matrix: Tensor<T>,
}

pub fn encode_clicks_embed<T: Scalar>(
    clicks: &[Click],
    height: usize,
    width: usize,
    positive: &[T],
    negative: &[T],
) -> Result<ClickEmbeddings<T>> {
    let dim = positive.len();
    if negative.len() != dim {
        return Err(Error::Shape(format!(
            "type embeddings differ in width: {} vs {}",
            dim,
            negative.len()
        )));
    }
    validate_clicks(clicks, width, height)?;
    let mut data = Vec::with_capacity(clicks.len() * dim);
    for c in clicks {
        let pe = positional_encoding::<T>(c.x, c.y, height, width, dim)?;
        let ty = if c.polarity.is_positive() {
            positive
        } else {
            negative
        };
        data.extend(pe.iter().zip(ty).map(|(a, b)| *a + *b));
    }
    Ok(ClickEmbeddings {
        matrix: Tensor::new(vec![clicks.len(), dim], data),
    })
}
