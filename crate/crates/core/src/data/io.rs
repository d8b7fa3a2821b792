//! On-disk datasets.
//!
//! ```text
//! root/
//!   manifest.txt      one stem per line (optional; otherwise images/ is scanned)
//!   images/<stem>.png 8-bit grayscale
//!   masks/<stem>.png  8-bit grayscale, foreground where value >= 128
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, GrayImage, ImageReader};

use super::SegSample;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

const MANIFEST: &str = "manifest.txt";
const MASK_THRESHOLD: u8 = 128;

/// Reads an 8-bit grayscale PNG as `(height, width, bytes)`.
pub fn load_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let fmt = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader.with_guessed_format().map_err(|e| Error::io(path, e))?.decode().map_err(|e| fmt(e.to_string()))?;
    if img.color() != ColorType::L8 {
        return Err(fmt(format!("expected 8-bit grayscale, found {:?}", img.color())));
    }
    let g = img.into_luma8();
    let (w, h) = g.dimensions();
    Ok((h as usize, w as usize, g.into_raw()))
}

/// Reads an 8-bit grayscale PNG as a `[1, h, w]` tensor scaled to [0, 1].
pub fn load_image(path: &Path) -> Result<Tensor> {
    let (h, w, bytes) = load_gray_png(path)?;
    Ok(Tensor::new(&[1, h, w], bytes.iter().map(|&b| b as f64 / 255.0).collect())?)
}

fn write_png(path: &Path, h: usize, w: usize, bytes: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches extents");
    img.save(path).map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn save_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = mask.dims();
    write_png(path, h, w, mask.data().iter().map(|&m| if m { 255 } else { 0 }).collect())
}

fn save_image_png(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::Format { path: path.to_path_buf(), reason: format!("cannot store image of shape {s:?}") });
    }
    let bytes = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_png(path, s[1], s[2], bytes)
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes images, masks and a manifest under `root`. Intensities are
/// quantized to 8 bits.
pub fn save_dataset(root: &Path, samples: &[SegSample]) -> Result<()> {
    let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
    create_dir(&img_dir)?;
    create_dir(&mask_dir)?;
    let mut manifest = String::new();
    for s in samples {
        save_image_png(&img_dir.join(format!("{}.png", s.id)), &s.image)?;
        save_mask_png(&mask_dir.join(format!("{}.png", s.id)), &s.mask)?;
        manifest.push_str(&s.id);
        manifest.push('\n');
    }
    let mpath = root.join(MANIFEST);
    fs::write(&mpath, manifest).map_err(|e| Error::io(mpath, e))
}

fn list_stems(root: &Path) -> Result<Vec<String>> {
    let mpath = root.join(MANIFEST);
    if mpath.exists() {
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        return Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect());
    }
    let dir = root.join("images");
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path: PathBuf = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

pub fn load_dataset(root: &Path) -> Result<Vec<SegSample>> {
    list_stems(root)?
        .into_iter()
        .map(|stem| {
            let ip = root.join("images").join(format!("{stem}.png"));
            let mp = root.join("masks").join(format!("{stem}.png"));
            for (p, what) in [(&ip, "image"), (&mp, "mask")] {
                if !p.exists() {
                    return Err(Error::MissingPair { stem: stem.clone(), reason: format!("{what} {} not found", p.display()) });
                }
            }
            let image = load_image(&ip)?;
            let (h, w) = (image.shape()[1], image.shape()[2]);
            let (mh, mw, m) = load_gray_png(&mp)?;
            if (h, w) != (mh, mw) {
                return Err(Error::MissingPair {
                    stem,
                    reason: format!("image is {h}x{w} but mask is {mh}x{mw}"),
                });
            }
            let mask = BinaryMask::new(h, w, m.iter().map(|&b| b >= MASK_THRESHOLD).collect())?;
            Ok(SegSample::new(stem, image, mask))
        })
        .collect()
}
