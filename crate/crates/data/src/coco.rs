//! COCO instance annotations: document types, RLE codecs and polygon fill.

use serde::{Deserialize, Deserializer, Serialize};

use piclick_core::MaskGrid;

use crate::DataError;

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
pub struct Document {
    #[serde(default)]
    pub images: Vec<Image>,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
    #[serde(default)]
    pub categories: Vec<Category>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct Image {
    pub id: u64,
    pub file_name: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    #[serde(default)]
    pub category_id: u64,
    pub segmentation: Segmentation,
    #[serde(default, deserialize_with = "int_or_bool")]
    pub iscrowd: bool,
}

fn int_or_bool<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Flag {
        Bool(bool),
        Int(u8),
    }
    Ok(match Flag::deserialize(d)? {
        Flag::Bool(b) => b,
        Flag::Int(i) => i != 0,
    })
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum Segmentation {
    /// Flat `[x0, y0, x1, y1, ...]` rings in pixel units.
    Polygons(Vec<Vec<f64>>),
    Rle(Rle),
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct Rle {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: RleCounts,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum RleCounts {
    Raw(Vec<u64>),
    Compressed(String),
}

/// Decodes the compact ASCII form: each count is split into 5-bit groups
/// (low first, bit 5 = continuation, bit 4 of the last group = sign),
/// offset by 48; counts after the third are stored as differences to the
/// count two places back.
pub fn decode_counts(s: &str) -> Result<Vec<u64>, DataError> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            let c = bytes[p]
                .checked_sub(48)
                .filter(|c| *c < 64)
                .ok_or_else(|| DataError::Malformed(format!("invalid RLE character {:?}", bytes[p] as char)))?
                as i64;
            if k >= 13 {
                return Err(DataError::Malformed("RLE count overflows".into()));
            }
            x |= (c & 0x1f) << (5 * k);
            p += 1;
            k += 1;
            let more = c & 0x20 != 0;
            if !more {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
            if p == bytes.len() {
                return Err(DataError::Malformed("truncated RLE string".into()));
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        if x < 0 {
            return Err(DataError::Malformed("negative RLE count".into()));
        }
        counts.push(x);
    }
    Ok(counts.into_iter().map(|c| c as u64).collect())
}

pub fn encode_counts(counts: &[u64]) -> String {
    let mut out = String::new();
    for (i, &c) in counts.iter().enumerate() {
        let mut x = c as i64;
        if i > 2 {
            x -= counts[i - 2] as i64;
        }
        loop {
            let mut c = x & 0x1f;
            x >>= 5;
            let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                c |= 0x20;
            }
            out.push((c as u8 + 48) as char);
            if !more {
                break;
            }
        }
    }
    out
}

impl Rle {
    pub fn counts(&self) -> Result<Vec<u64>, DataError> {
        match &self.counts {
            RleCounts::Raw(c) => Ok(c.clone()),
            RleCounts::Compressed(s) => decode_counts(s),
        }
    }

    /// Runs alternate background/foreground starting with background, over
    /// pixels in column-major order.
    pub fn decode(&self) -> Result<MaskGrid, DataError> {
        let [h, w] = self.size;
        let counts = self.counts()?;
        let total: u64 = counts.iter().sum();
        if total != (h * w) as u64 {
            return Err(DataError::Malformed(format!(
                "RLE covers {total} pixels, image has {}",
                h * w
            )));
        }
        let mut mask = MaskGrid::empty(w, h);
        let mut i = 0usize;
        for (k, c) in counts.iter().enumerate() {
            let fg = k % 2 == 1;
            for j in i..i + *c as usize {
                if fg {
                    mask.set(j / h, j % h, true);
                }
            }
            i += *c as usize;
        }
        Ok(mask)
    }

    pub fn encode(mask: &MaskGrid, compressed: bool) -> Self {
        let (w, h) = (mask.width(), mask.height());
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for x in 0..w {
            for y in 0..h {
                if mask.get(x, y) != current {
                    counts.push(run);
                    run = 0;
                    current = !current;
                }
                run += 1;
            }
        }
        counts.push(run);
        Self {
            size: [h, w],
            counts: if compressed {
                RleCounts::Compressed(encode_counts(&counts))
            } else {
                RleCounts::Raw(counts)
            },
        }
    }
}

/// Even-odd fill of the rings: a pixel is set when its centre
/// `(x + 0.5, y + 0.5)` is inside. Edges count a crossing when one endpoint is
/// strictly above the scanline and the other at or below it.
pub fn rasterize_polygons(rings: &[Vec<f64>], width: usize, height: usize) -> Result<MaskGrid, DataError> {
    let mut edges = Vec::new();
    for ring in rings {
        if ring.len() % 2 != 0 || ring.len() < 6 {
            return Err(DataError::Malformed(format!(
                "polygon ring with {} coordinates",
                ring.len()
            )));
        }
        if ring.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Malformed("non-finite polygon coordinate".into()));
        }
        let pts: Vec<(f64, f64)> = ring.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        for i in 0..pts.len() {
            edges.push((pts[i], pts[(i + 1) % pts.len()]));
        }
    }
    let mut mask = MaskGrid::empty(width, height);
    let mut xs = Vec::new();
    for y in 0..height {
        let cy = y as f64 + 0.5;
        xs.clear();
        for &((x0, y0), (x1, y1)) in &edges {
            if (y0 > cy) != (y1 > cy) {
                xs.push(x0 + (cy - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        xs.sort_by(f64::total_cmp);
        for span in xs.chunks_exact(2) {
            // Pixel centres strictly left of the right crossing and at or
            // right of the left one.
            let start = (span[0] - 0.5).ceil().max(0.0) as usize;
            let end = ((span[1] - 0.5).ceil().max(0.0) as usize).min(width);
            for x in start..end {
                mask.set(x, y, true);
            }
        }
    }
    Ok(mask)
}

impl Segmentation {
    pub fn rasterize(&self, width: usize, height: usize) -> Result<MaskGrid, DataError> {
        match self {
            Segmentation::Polygons(rings) => rasterize_polygons(rings, width, height),
            Segmentation::Rle(rle) => {
                if rle.size != [height, width] {
                    return Err(DataError::Malformed(format!(
                        "RLE size {:?} does not match image {height}×{width}",
                        rle.size
                    )));
                }
                rle.decode()
            }
        }
    }
}
