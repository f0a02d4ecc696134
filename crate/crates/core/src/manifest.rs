//! JSON manifests plus PNG rasters on disk.
//!
//! ```json
//! {"task": "cross_organ",
//!  "samples": [{"id": "s1", "image": "images/s1.png", "mask": "masks/s1.png",
//!               "domain": "organ-0", "seen": true}]}
//! ```
//!
//! Paths are relative to the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BinaryMask, DomainLabel, ImagePatch, Sample, Task, TaskDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub domain: String,
    pub seen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: Task,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::MalformedManifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Loads a manifest and every raster it references. Sample order follows
/// the manifest.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<TaskDataset> {
    let path = path.as_ref();
    let manifest = Manifest::read(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut ids = HashSet::new();
    for entry in &manifest.samples {
        if entry.id.is_empty() {
            return Err(Error::MalformedManifest {
                path: path.to_path_buf(),
                message: "sample with empty id".into(),
            });
        }
        if !ids.insert(entry.id.as_str()) {
            return Err(Error::DuplicateId(entry.id.clone()));
        }
    }

    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let patch = read_image(&entry.id, &base.join(&entry.image))?;
        let mask = read_mask(&entry.id, &base.join(&entry.mask))?;
        if mask.shape() != (patch.height, patch.width) {
            return Err(Error::DimensionMismatch {
                id: entry.id.clone(),
                image_h: patch.height,
                image_w: patch.width,
                mask_h: mask.height,
                mask_w: mask.width,
            });
        }
        samples.push(Sample {
            patch,
            mask,
            domain: DomainLabel {
                task: manifest.task,
                domain_name: entry.domain.clone(),
                seen: entry.seen,
            },
        });
    }
    TaskDataset::new(manifest.task, samples, path)
}

fn decode(id: &str, path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("raster for sample {id:?} not found")),
        ));
    }
    image::open(path).map_err(|e| Error::Image {
        id: id.to_string(),
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn read_image(id: &str, path: &Path) -> Result<ImagePatch> {
    let rgb = decode(id, path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = h * w;
    let mut pixels = vec![0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            pixels[c * plane + i] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(ImagePatch::new(id, h, w, pixels))
}

fn read_mask(id: &str, path: &Path) -> Result<BinaryMask> {
    let gray = decode(id, path)?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let raw = gray.as_raw();
    if raw.iter().any(|&v| v != 0 && v != 255) {
        log::warn!("sample {id:?}: mask {} is not binary, thresholding at 0.5", path.display());
    }
    Ok(BinaryMask::from_bools(
        h,
        w,
        raw.iter().map(|&v| v as f32 / 255.0 >= 0.5),
    ))
}

fn file_stem_for(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the dataset's rasters under `dir/images` and `dir/masks` and its
/// manifest at `dir/<name>.json`. Returns the manifest path.
pub fn save_dataset(dataset: &TaskDataset, dir: impl AsRef<Path>, name: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(dataset.len());
    for sample in &dataset.samples {
        let stem = file_stem_for(sample.id());
        let image_rel = format!("images/{stem}.png");
        let mask_rel = format!("masks/{stem}.png");

        let p = &sample.patch;
        let plane = p.height * p.width;
        let mut rgb = RgbImage::new(p.width as u32, p.height as u32);
        for (i, px) in rgb.pixels_mut().enumerate() {
            px.0 = [to_u8(p.pixels[i]), to_u8(p.pixels[plane + i]), to_u8(p.pixels[2 * plane + i])];
        }
        let image_path = dir.join(&image_rel);
        rgb.save(&image_path).map_err(|e| Error::Image {
            id: sample.id().to_string(),
            path: image_path.clone(),
            message: e.to_string(),
        })?;

        let m = &sample.mask;
        let gray = GrayImage::from_raw(
            m.width as u32,
            m.height as u32,
            m.values.iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect(),
        )
        .expect("mask buffer matches its dimensions");
        let mask_path = dir.join(&mask_rel);
        gray.save(&mask_path).map_err(|e| Error::Image {
            id: sample.id().to_string(),
            path: mask_path.clone(),
            message: e.to_string(),
        })?;

        entries.push(ManifestEntry {
            id: sample.id().to_string(),
            image: image_rel,
            mask: mask_rel,
            domain: sample.domain.domain_name.clone(),
            seen: sample.domain.seen,
        });
    }
    let manifest = Manifest {
        task: dataset.task,
        samples: entries,
    };
    let path = dir.join(format!("{name}.json"));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
