//! Anatomical cleanup of predicted masks: threshold the slice into
//! tissue/air, grow the lung field(s) from spiral-found seeds, keep only
//! predictions inside the lungs, then clip to the lungs' vertical extent.

use std::collections::VecDeque;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BinaryMask, HuSlice};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum SeedSearch {
    #[default]
    SpiralFromCenter,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub hu_threshold: i16,
    pub connectivity: Connectivity,
    pub seed_search: SeedSearch,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            hu_threshold: -160,
            connectivity: Connectivity::Four,
            seed_search: SeedSearch::SpiralFromCenter,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PostprocessError {
    #[error("no zero-valued pixel exists to seed region growing")]
    NoLungCandidate,
    #[error("region-growing seed ({y},{x}) is on a foreground pixel")]
    SeedInvalid { y: usize, x: usize },
    #[error("shape mismatch: {expected:?} vs {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
}

/// Tissue/air split: 1 where HU >= threshold (soft tissue, contrast),
/// 0 below (air, lung parenchyma, emboli at lung-window thresholds).
pub fn binarize_hu(slice: &HuSlice, threshold: i16) -> BinaryMask {
    slice.mapv(|v| (v >= threshold) as u8)
}

/// All grid coordinates in outward-spiral order from the center,
/// starting at `(h/2, w/2)` and stepping right first.
pub fn spiral_order(h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(h * w);
    let (cy, cx) = (h as isize / 2, w as isize / 2);
    let (mut y, mut x) = (cy, cx);
    let push_if_valid = |out: &mut Vec<(usize, usize)>, y: isize, x: isize| {
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            out.push((y as usize, x as usize));
        }
    };
    push_if_valid(&mut out, y, x);
    // Right, down, left, up with run lengths 1,1,2,2,3,3,...
    let dirs = [(0isize, 1isize), (1, 0), (0, -1), (-1, 0)];
    let mut run = 1usize;
    let mut dir = 0usize;
    while out.len() < h * w {
        for _ in 0..2 {
            let (dy, dx) = dirs[dir];
            for _ in 0..run {
                y += dy;
                x += dx;
                push_if_valid(&mut out, y, x);
            }
            dir = (dir + 1) % 4;
        }
        run += 1;
        // The spiral has left the grid entirely once the run dwarfs it.
        if run > 2 * (h + w) {
            break;
        }
    }
    out
}

/// First 0-valued pixel along the outward spiral from the center.
pub fn find_seed(binary: &BinaryMask) -> Result<(usize, usize), PostprocessError> {
    let (h, w) = binary.dim();
    spiral_order(h, w)
        .into_iter()
        .find(|&(y, x)| binary[(y, x)] == 0)
        .ok_or(PostprocessError::NoLungCandidate)
}

/// Flood-fills the connected component of 0-valued pixels containing the
/// seed and returns it as a 1-mask.
pub fn region_grow(
    binary: &BinaryMask,
    seed: (usize, usize),
    connectivity: Connectivity,
) -> Result<BinaryMask, PostprocessError> {
    let (h, w) = binary.dim();
    if binary[seed] != 0 {
        return Err(PostprocessError::SeedInvalid {
            y: seed.0,
            x: seed.1,
        });
    }
    let mut region = Array2::<u8>::zeros((h, w));
    let mut queue = VecDeque::new();
    region[seed] = 1;
    queue.push_back(seed);
    let neighbors: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(0, 1), (1, 0), (0, -1), (-1, 0)],
        Connectivity::Eight => &[
            (0, 1),
            (1, 0),
            (0, -1),
            (-1, 0),
            (1, 1),
            (1, -1),
            (-1, 1),
            (-1, -1),
        ],
    };
    while let Some((y, x)) = queue.pop_front() {
        for &(dy, dx) in neighbors {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            if ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w {
                continue;
            }
            let p = (ny as usize, nx as usize);
            if binary[p] == 0 && region[p] == 0 {
                region[p] = 1;
                queue.push_back(p);
            }
        }
    }
    Ok(region)
}

fn check_shapes(a: &BinaryMask, b: &BinaryMask) -> Result<(), PostprocessError> {
    if a.dim() != b.dim() {
        return Err(PostprocessError::ShapeMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

/// Pixelwise AND of the prediction with the lung mask.
pub fn lung_mask_filter(pred: &BinaryMask, lung: &BinaryMask) -> Result<BinaryMask, PostprocessError> {
    check_shapes(pred, lung)?;
    Ok(ndarray::Zip::from(pred).and(lung).map_collect(|&p, &l| p & l))
}

/// Zeroes prediction rows outside the lung mask's [top, bottom] row span.
pub fn boundary_lines_filter(
    pred: &BinaryMask,
    lung: &BinaryMask,
) -> Result<BinaryMask, PostprocessError> {
    check_shapes(pred, lung)?;
    let rows: Vec<usize> = lung
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(_, r)| r.iter().any(|&v| v == 1))
        .map(|(i, _)| i)
        .collect();
    let Some((&top, &bot)) = rows.first().zip(rows.last()) else {
        return Ok(Array2::zeros(pred.dim()));
    };
    let mut out = pred.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        if i < top || i > bot {
            row.fill(0);
        }
    }
    Ok(out)
}

/// Full pipeline: binarize, grow the lung field from up to two spiral
/// seeds, intersect, clip rows. Falls back to the unmodified prediction
/// (with a warning) when no lung candidate pixel exists.
pub fn postprocess_prediction(
    pred: &BinaryMask,
    slice: &HuSlice,
    config: &PostprocessConfig,
) -> Result<BinaryMask, PostprocessError> {
    if pred.dim() != slice.dim() {
        return Err(PostprocessError::ShapeMismatch {
            expected: slice.dim(),
            got: pred.dim(),
        });
    }
    let binary = binarize_hu(slice, config.hu_threshold);
    let Ok(seed) = find_seed(&binary) else {
        log::warn!("post-processing found no lung candidate; returning prediction unchanged");
        return Ok(pred.clone());
    };
    let mut lung = region_grow(&binary, seed, config.connectivity)?;
    // A second grow catches the other lung when the two fields are not
    // connected through low-HU background.
    let (h, w) = binary.dim();
    let second = spiral_order(h, w)
        .into_iter()
        .find(|&p| binary[p] == 0 && lung[p] == 0);
    if let Some(seed2) = second {
        let extra = region_grow(&binary, seed2, config.connectivity)?;
        ndarray::Zip::from(&mut lung).and(&extra).for_each(|l, &e| *l |= e);
    }
    let filtered = lung_mask_filter(pred, &lung)?;
    boundary_lines_filter(&filtered, &lung)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_patient, PhantomSpec};
    use proptest::prelude::*;

    #[test]
    fn binarize_rules() {
        let s = Array2::from_shape_vec((1, 3), vec![-1000i16, 40, -160]).unwrap();
        let b = binarize_hu(&s, -160);
        assert_eq!(b.as_slice().unwrap(), &[0, 1, 1]);
    }

    #[test]
    fn spiral_visits_every_pixel_once_and_starts_center_right() {
        for (h, w) in [(5usize, 5usize), (4, 6), (7, 3), (1, 1), (2, 2)] {
            let order = spiral_order(h, w);
            assert_eq!(order.len(), h * w, "{h}x{w}");
            let mut seen = std::collections::HashSet::new();
            assert!(order.iter().all(|p| seen.insert(*p)));
            assert_eq!(order[0], (h / 2, w / 2));
            if w / 2 + 1 < w {
                assert_eq!(order[1], (h / 2, w / 2 + 1), "right neighbor first");
            }
        }
    }

    #[test]
    fn find_seed_rules() {
        let zeros = Array2::<u8>::zeros((6, 8));
        assert_eq!(find_seed(&zeros).unwrap(), (3, 4));

        let mut b = Array2::<u8>::zeros((5, 5));
        b[(2, 2)] = 1;
        assert_eq!(find_seed(&b).unwrap(), (2, 3));

        let ones = Array2::<u8>::ones((4, 4));
        assert_eq!(find_seed(&ones), Err(PostprocessError::NoLungCandidate));
    }

    #[test]
    fn region_grow_component_rules() {
        let zeros = Array2::<u8>::zeros((3, 3));
        let grown = region_grow(&zeros, (1, 1), Connectivity::Four).unwrap();
        assert!(grown.iter().all(|&v| v == 1));

        let mut wall = Array2::<u8>::zeros((3, 3));
        for y in 0..3 {
            wall[(y, 1)] = 1;
        }
        let left = region_grow(&wall, (1, 0), Connectivity::Four).unwrap();
        assert_eq!(left.iter().map(|&v| v as usize).sum::<usize>(), 3);
        for y in 0..3 {
            assert_eq!(left[(y, 0)], 1);
            assert_eq!(left[(y, 2)], 0);
        }

        assert_eq!(
            region_grow(&wall, (0, 1), Connectivity::Four),
            Err(PostprocessError::SeedInvalid { y: 0, x: 1 })
        );
    }

    #[test]
    fn eight_connectivity_leaks_through_diagonals() {
        // Corner sealed off by (0,1) and (1,0): 4-connectivity stays inside,
        // 8-connectivity escapes through the diagonal gap at (1,1).
        let mut b = Array2::<u8>::zeros((3, 3));
        b[(0, 1)] = 1;
        b[(1, 0)] = 1;
        let four = region_grow(&b, (0, 0), Connectivity::Four).unwrap();
        assert_eq!(four.iter().map(|&v| v as usize).sum::<usize>(), 1);
        let eight = region_grow(&b, (0, 0), Connectivity::Eight).unwrap();
        assert_eq!(eight.iter().map(|&v| v as usize).sum::<usize>(), 7);
    }

    #[test]
    fn lung_filter_is_intersection() {
        let mut pred = Array2::<u8>::zeros((6, 6));
        pred[(0, 0)] = 1;
        pred[(5, 5)] = 1;
        let ones = Array2::<u8>::ones((6, 6));
        let zeros = Array2::<u8>::zeros((6, 6));
        assert_eq!(lung_mask_filter(&pred, &ones).unwrap(), pred);
        assert_eq!(lung_mask_filter(&pred, &zeros).unwrap(), zeros);
        let mut lung = Array2::<u8>::zeros((6, 6));
        lung[(5, 5)] = 1;
        let out = lung_mask_filter(&pred, &lung).unwrap();
        assert_eq!(out.iter().map(|&v| v as usize).sum::<usize>(), 1);
        assert_eq!(out[(5, 5)], 1);
        let small = Array2::<u8>::zeros((3, 3));
        assert!(matches!(
            lung_mask_filter(&pred, &small),
            Err(PostprocessError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn boundary_lines_clip_rows() {
        let mut lung = Array2::<u8>::zeros((60, 10));
        lung[(10, 3)] = 1;
        lung[(50, 7)] = 1;
        let mut pred = Array2::<u8>::zeros((60, 10));
        pred[(5, 0)] = 1;
        pred[(30, 5)] = 1;
        let out = boundary_lines_filter(&pred, &lung).unwrap();
        assert_eq!(out[(5, 0)], 0);
        assert_eq!(out[(30, 5)], 1);

        let inside = {
            let mut p = Array2::<u8>::zeros((60, 10));
            p[(20, 2)] = 1;
            p
        };
        assert_eq!(boundary_lines_filter(&inside, &lung).unwrap(), inside);

        let empty = Array2::<u8>::zeros((60, 10));
        assert!(boundary_lines_filter(&pred, &empty)
            .unwrap()
            .iter()
            .all(|&v| v == 0));
    }

    #[test]
    fn lesions_survive_and_outside_predictions_die_on_phantom() {
        let spec = PhantomSpec::default();
        let vol = generate_patient(&spec, 3).unwrap();
        let cfg = PostprocessConfig::default();
        let slice = &vol.slices[0];
        let gt = &vol.masks.as_ref().unwrap()[0];
        assert!(gt.iter().any(|&v| v == 1), "phantom slice has a lesion");

        // The ground-truth lesion itself must survive the pipeline.
        let kept = postprocess_prediction(gt, slice, &cfg).unwrap();
        assert_eq!(&kept, gt, "in-lung lesion pixels must survive");

        // A prediction entirely outside the lungs must vanish: corner blob.
        let mut outside = Array2::<u8>::zeros(slice.dim());
        outside[(0, 0)] = 1;
        outside[(1, 1)] = 1;
        let cleaned = postprocess_prediction(&outside, slice, &cfg).unwrap();
        assert!(cleaned.iter().all(|&v| v == 0));
    }

    #[test]
    fn no_lung_candidate_falls_back_to_unchanged() {
        let slice = Array2::<i16>::from_elem((8, 8), 500); // all tissue
        let mut pred = Array2::<u8>::zeros((8, 8));
        pred[(2, 2)] = 1;
        let out = postprocess_prediction(&pred, &slice, &PostprocessConfig::default()).unwrap();
        assert_eq!(out, pred);
    }

    proptest! {
        #[test]
        fn postprocess_shrinks_and_is_idempotent(bits in proptest::collection::vec(0u8..=1, 64 * 64), seed in 0u64..20) {
            let spec = PhantomSpec { image_size: 64, n_slices_per_patient: 1, lesion_radius_range: (3, 8), ..Default::default() };
            let vol = generate_patient(&spec, seed).unwrap();
            let slice = &vol.slices[0];
            let pred = Array2::from_shape_vec((64, 64), bits).unwrap();
            let cfg = PostprocessConfig::default();
            let once = postprocess_prediction(&pred, slice, &cfg).unwrap();
            for (a, b) in once.iter().zip(pred.iter()) {
                prop_assert!(a <= b, "post-processing must only remove pixels");
            }
            let twice = postprocess_prediction(&once, slice, &cfg).unwrap();
            prop_assert_eq!(&twice, &once);
        }
    }
}
