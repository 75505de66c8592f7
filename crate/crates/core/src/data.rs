//! Dataset layout and encodings shared by every other module.
//!
//! A patient is a directory: `slices/0000.png, 0001.png, ...` as 16-bit
//! grayscale with stored = HU + 1024, plus an optional `masks/` directory of
//! 8-bit images where any nonzero pixel means lesion. Slice indices start at
//! 0 and must be contiguous.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::Array2;
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::nn::{seeded_rng, Scalar};

pub const HU_MIN: i16 = -1024;
pub const HU_MAX: i16 = 3071;

/// One CT slice in Hounsfield units, `[-1024, 3071]`.
pub type HuSlice = Array2<i16>;
/// Per-pixel lesion labels, values exactly 0 or 1.
pub type BinaryMask = Array2<u8>;

#[derive(Debug, Clone, PartialEq)]
pub struct PatientVolume {
    pub patient_id: String,
    pub slices: Vec<HuSlice>,
    /// Absent for unlabeled patients.
    pub masks: Option<Vec<BinaryMask>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing slice index {index} in {dir}")]
    MissingSlices { dir: String, index: usize },
    #[error("shape mismatch in {path}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        path: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("corrupt or unsupported image {path}: {reason}")]
    CorruptImage { path: String, reason: String },
    #[error("invalid window: lo {lo} must be < hi {hi}")]
    InvalidWindow { lo: i16, hi: i16 },
    #[error("split counts {requested} do not sum to the {available} available ids")]
    CountMismatch { requested: usize, available: usize },
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Collects `NNNN.png` files under `dir` keyed by index; non-matching names
/// are ignored. Indices must then be contiguous from 0.
fn indexed_pngs(dir: &Path) -> Result<Vec<std::path::PathBuf>, DataError> {
    let mut found = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        if let Ok(idx) = stem.parse::<usize>() {
            found.insert(idx, path);
        }
    }
    let mut out = Vec::with_capacity(found.len());
    for i in 0..found.len() {
        match found.remove(&i) {
            Some(p) => out.push(p),
            None => {
                return Err(DataError::MissingSlices {
                    dir: dir.display().to_string(),
                    index: i,
                })
            }
        }
    }
    Ok(out)
}

fn decode_slice(path: &Path) -> Result<HuSlice, DataError> {
    let img = image::open(path).map_err(|e| DataError::CorruptImage {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let DynamicImage::ImageLuma16(buf) = img else {
        return Err(DataError::CorruptImage {
            path: path.display().to_string(),
            reason: "expected 16-bit grayscale".into(),
        });
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let mut out = Array2::<i16>::zeros((h, w));
    for (x, y, p) in buf.enumerate_pixels() {
        let stored = p.0[0];
        if stored > 4095 {
            return Err(DataError::CorruptImage {
                path: path.display().to_string(),
                reason: format!("stored value {stored} outside CT range"),
            });
        }
        out[(y as usize, x as usize)] = stored as i16 - 1024;
    }
    Ok(out)
}

fn decode_mask(path: &Path) -> Result<BinaryMask, DataError> {
    let img = image::open(path).map_err(|e| DataError::CorruptImage {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let buf = img.to_luma8();
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let mut out = Array2::<u8>::zeros((h, w));
    for (x, y, p) in buf.enumerate_pixels() {
        out[(y as usize, x as usize)] = (p.0[0] > 0) as u8;
    }
    Ok(out)
}

pub fn load_volume(dir: &Path) -> Result<PatientVolume, DataError> {
    let patient_id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let slice_paths = indexed_pngs(&dir.join("slices"))?;
    let mut slices = Vec::with_capacity(slice_paths.len());
    for p in &slice_paths {
        slices.push(decode_slice(p)?);
    }

    let masks_dir = dir.join("masks");
    let masks = if masks_dir.is_dir() {
        let mask_paths = indexed_pngs(&masks_dir)?;
        if mask_paths.len() != slices.len() {
            return Err(DataError::MissingSlices {
                dir: masks_dir.display().to_string(),
                index: mask_paths.len().min(slices.len()),
            });
        }
        let mut masks = Vec::with_capacity(mask_paths.len());
        for (i, p) in mask_paths.iter().enumerate() {
            let m = decode_mask(p)?;
            if m.dim() != slices[i].dim() {
                return Err(DataError::ShapeMismatch {
                    path: p.display().to_string(),
                    expected: slices[i].dim(),
                    got: m.dim(),
                });
            }
            masks.push(m);
        }
        Some(masks)
    } else {
        None
    };

    Ok(PatientVolume {
        patient_id,
        slices,
        masks,
    })
}

pub fn save_volume(volume: &PatientVolume, dir: &Path) -> Result<(), DataError> {
    let slices_dir = dir.join("slices");
    fs::create_dir_all(&slices_dir)?;
    for (i, s) in volume.slices.iter().enumerate() {
        let (h, w) = s.dim();
        let mut buf = ImageBuffer::<Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
        for (x, y, p) in buf.enumerate_pixels_mut() {
            let hu = s[(y as usize, x as usize)].clamp(HU_MIN, HU_MAX);
            p.0[0] = (hu as i32 + 1024) as u16;
        }
        let path = slices_dir.join(format!("{i:04}.png"));
        buf.save(&path).map_err(|e| DataError::CorruptImage {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    }
    if let Some(masks) = &volume.masks {
        save_masks(masks, &dir.join("masks"))?;
    }
    Ok(())
}

/// Writes `dir/NNNN.png` 8-bit grayscale masks (0 background, 255 foreground).
pub fn save_masks(masks: &[BinaryMask], dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    for (i, m) in masks.iter().enumerate() {
        let (h, w) = m.dim();
        let mut buf = ImageBuffer::<Luma<u8>, Vec<u8>>::new(w as u32, h as u32);
        for (x, y, p) in buf.enumerate_pixels_mut() {
            p.0[0] = if m[(y as usize, x as usize)] > 0 { 255 } else { 0 };
        }
        let path = dir.join(format!("{i:04}.png"));
        buf.save(&path).map_err(|e| DataError::CorruptImage {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    }
    Ok(())
}

/// Reads a directory of `NNNN.png` masks back as binary arrays.
pub fn load_masks(dir: &Path) -> Result<Vec<BinaryMask>, DataError> {
    let paths = indexed_pngs(dir)?;
    let mut out = Vec::with_capacity(paths.len());
    for p in &paths {
        out.push(decode_mask(p)?);
    }
    Ok(out)
}

/// Maps HU to `clamp((v - lo)/(hi - lo), 0, 1)`.
pub fn window_normalize<T: Scalar>(
    slice: &HuSlice,
    lo: i16,
    hi: i16,
) -> Result<Array2<T>, DataError> {
    if lo >= hi {
        return Err(DataError::InvalidWindow { lo, hi });
    }
    let lo_t = T::fl(lo as f64);
    let span = T::fl((hi - lo) as f64);
    Ok(slice.mapv(|v| ((T::fl(v as f64) - lo_t) / span).max(T::zero()).min(T::one())))
}

/// Deterministic patient-level split: shuffle by seed, partition by counts.
pub fn split_patients(
    patient_ids: &[String],
    counts: (usize, usize, usize),
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    let (n_train, n_val, n_test) = counts;
    if n_train + n_val + n_test != patient_ids.len() {
        return Err(DataError::CountMismatch {
            requested: n_train + n_val + n_test,
            available: patient_ids.len(),
        });
    }
    let mut ids = patient_ids.to_vec();
    let mut rng = seeded_rng(seed, "patient-split");
    ids.shuffle(&mut rng);
    let val = ids.split_off(n_train + n_val);
    let test = val; // split_off returns the tail
    let val = ids.split_off(n_train);
    Ok(DatasetSplit {
        train: ids,
        val,
        test,
    })
}
