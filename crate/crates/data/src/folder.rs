use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use piclick_core::TrainingSample;

use crate::{read_image, read_mask, tensor_to_rgb, DataError, Dataset};

/// Splits `stem.mask_<k>.png` into `(stem, k)`.
fn mask_name(file: &str) -> Option<(&str, u64)> {
    let base = file.strip_suffix(".png")?;
    let (stem, k) = base.rsplit_once(".mask_")?;
    Some((stem, k.parse().ok()?))
}

pub fn load_folder(root: &Path) -> Result<Dataset, DataError> {
    let entries = fs::read_dir(root).map_err(|e| DataError::io(root, e))?;
    let mut images: BTreeMap<String, ()> = BTreeMap::new();
    let mut masks: BTreeMap<String, BTreeMap<u64, String>> = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| DataError::io(root, e))?;
        let Ok(name) = entry.file_name().into_string() else {
            continue;
        };
        if let Some((stem, k)) = mask_name(&name) {
            masks.entry(stem.to_string()).or_default().insert(k, name);
        } else if let Some(stem) = name.strip_suffix(".png") {
            images.insert(stem.to_string(), ());
        }
    }

    let mut out = Dataset::default();
    for stem in masks.keys().filter(|s| !images.contains_key(*s)) {
        out.report.skip(stem, "mask files without an image");
    }
    for stem in images.keys() {
        let Some(files) = masks.get(stem) else {
            out.report.skip(stem, "no mask files");
            continue;
        };
        let image = match read_image(&root.join(format!("{stem}.png"))) {
            Ok(t) => t,
            Err(e) => {
                out.report.skip(stem, e);
                continue;
            }
        };
        let loaded: Result<Vec<_>, _> = files.values().map(|f| read_mask(&root.join(f))).collect();
        let sample = loaded
            .map_err(|e| e.to_string())
            .and_then(|m| TrainingSample::new(image, m, files.keys().copied().collect()).map_err(|e| e.to_string()));
        match sample {
            Ok(s) => out.samples.push(s),
            Err(e) => out.report.skip(stem, e),
        }
    }
    out.report.loaded = out.samples.len();
    Ok(out)
}

/// Writes `sample_<i>.png` plus one `sample_<i>.mask_<k>.png` per mask
/// (0 outside, 255 inside). Image values are quantized to 8 bits.
pub fn save_folder(samples: &[TrainingSample], root: &Path) -> Result<(), DataError> {
    fs::create_dir_all(root).map_err(|e| DataError::io(root, e))?;
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("sample_{i:05}");
        let path = root.join(format!("{stem}.png"));
        tensor_to_rgb(&s.image)
            .save(&path)
            .map_err(|source| DataError::Image { path, source })?;
        for (k, m) in s.masks.iter().enumerate() {
            let img = image::GrayImage::from_fn(m.width() as u32, m.height() as u32, |x, y| {
                image::Luma([if m.get(x as usize, y as usize) { 255 } else { 0 }])
            });
            let path = root.join(format!("{stem}.mask_{k}.png"));
            img.save(&path).map_err(|source| DataError::Image { path, source })?;
        }
    }
    Ok(())
}
