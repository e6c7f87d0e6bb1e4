//! Instance-mask dataset loaders.
//!
//! Two on-disk layouts are understood:
//!
//! * **COCO** — `root/annotations.json` holding `images`, `annotations` and
//!   (optionally) `categories`. Image files are looked up as
//!   `root/<file_name>`, then `root/images/<file_name>`. Segmentations may be
//!   polygon lists or RLE (`{"size": [h, w], "counts": [...] | "..."}`,
//!   column-major, background run first). Crowd annotations are ignored.
//! * **Folder** — `stem.png` next to `stem.mask_0.png`, `stem.mask_1.png`, …
//!   Masks are 8-bit grayscale (or anything `image` can decode); a pixel is
//!   inside when its luma is nonzero.
//!
//! Broken records are skipped with a warning and counted in
//! [`LoadReport::skipped`]; only an unreadable root is fatal.

pub mod coco;
mod folder;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use piclick_core::{MaskGrid, Tensor, TrainingSample};

pub use folder::{load_folder, save_folder};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("annotation document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error(transparent)]
    Core(#[from] piclick_core::Error),
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    CocoJson,
    FolderPngs,
}

impl std::str::FromStr for Format {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coco" | "coco_json" => Ok(Format::CocoJson),
            "folder" | "folder_pngs" => Ok(Format::FolderPngs),
            other => Err(DataError::Malformed(format!("unknown dataset format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skipped {
    /// Image file name or stem.
    pub item: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: usize,
    pub skipped: Vec<Skipped>,
    /// Individual annotations dropped from otherwise usable images.
    pub dropped_annotations: usize,
}

impl LoadReport {
    fn skip(&mut self, item: impl Into<String>, reason: impl std::fmt::Display) {
        let item = item.into();
        log::warn!("skipping {item}: {reason}");
        self.skipped.push(Skipped {
            item,
            reason: reason.to_string(),
        });
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<TrainingSample>,
    pub report: LoadReport,
}

pub fn load_dataset(root: &Path, format: Format) -> Result<Dataset, DataError> {
    match format {
        Format::CocoJson => load_coco(root),
        Format::FolderPngs => load_folder(root),
    }
}

/// Decodes any supported raster into `[3, H, W]` values in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>, DataError> {
    let img = image::open(path)
        .map_err(|source| DataError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &image::RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn tensor_to_rgb(image: &Tensor<f32>) -> image::RgbImage {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| (d[c * h * w + y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([at(0), at(1), at(2)])
    })
}

pub fn read_mask(path: &Path) -> Result<MaskGrid, DataError> {
    let img = image::open(path)
        .map_err(|source| DataError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(MaskGrid::from_bits(w, h, img.pixels().map(|p| p[0] != 0).collect()))
}

fn load_coco(root: &Path) -> Result<Dataset, DataError> {
    let doc_path = root.join("annotations.json");
    let text = std::fs::read_to_string(&doc_path).map_err(|e| DataError::io(&doc_path, e))?;
    let doc: coco::Document = serde_json::from_str(&text)?;

    let mut by_image: BTreeMap<u64, Vec<&coco::Annotation>> = BTreeMap::new();
    for a in &doc.annotations {
        by_image.entry(a.image_id).or_default().push(a);
    }
    let mut out = Dataset::default();
    for img in &doc.images {
        let anns: Vec<&coco::Annotation> = by_image
            .get(&img.id)
            .map(|v| v.iter().copied().filter(|a| !a.iscrowd).collect())
            .unwrap_or_default();
        if anns.is_empty() {
            out.report.skip(&img.file_name, "no annotations");
            continue;
        }
        let path = [root.join(&img.file_name), root.join("images").join(&img.file_name)]
            .into_iter()
            .find(|p| p.is_file());
        let Some(path) = path else {
            out.report.skip(&img.file_name, "image file not found");
            continue;
        };
        let image = match read_image(&path) {
            Ok(t) => t,
            Err(e) => {
                out.report.skip(&img.file_name, e);
                continue;
            }
        };
        if image.shape()[1] != img.height || image.shape()[2] != img.width {
            out.report.skip(
                &img.file_name,
                format!(
                    "file is {}×{}, document says {}×{}",
                    image.shape()[2],
                    image.shape()[1],
                    img.width,
                    img.height
                ),
            );
            continue;
        }
        let mut masks = Vec::new();
        let mut ids = Vec::new();
        for a in anns {
            match a.segmentation.rasterize(img.width, img.height) {
                Ok(m) if !m.is_empty() => {
                    masks.push(m);
                    ids.push(a.id);
                }
                Ok(_) => {
                    log::warn!("annotation {} on {} rasterizes to nothing", a.id, img.file_name);
                    out.report.dropped_annotations += 1;
                }
                Err(e) => {
                    log::warn!("annotation {} on {}: {e}", a.id, img.file_name);
                    out.report.dropped_annotations += 1;
                }
            }
        }
        if masks.is_empty() {
            out.report.skip(&img.file_name, "no usable annotations");
            continue;
        }
        match TrainingSample::new(image, masks, ids) {
            Ok(s) => out.samples.push(s),
            Err(e) => out.report.skip(&img.file_name, e),
        }
    }
    out.report.loaded = out.samples.len();
    Ok(out)
}
