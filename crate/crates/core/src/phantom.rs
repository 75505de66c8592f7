//! Synthetic chest-slice generator: two elliptical lungs in a tissue body,
//! bright vessel curves, and dark lesion discs strictly inside the lungs.
//! Masks mark the lesion discs. A parameterized domain shift (offset,
//! contrast scale about the lung mean, extra noise) stands in for
//! cross-site scanner differences.

use ndarray::Array2;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BinaryMask, HuSlice, PatientVolume, HU_MAX, HU_MIN};
use crate::nn::seeded_rng;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DomainShift {
    pub hu_offset: i16,
    pub contrast_scale: f64,
    pub extra_noise_sigma: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        DomainShift {
            hu_offset: 0,
            contrast_scale: 1.0,
            extra_noise_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    /// Square slice side in pixels.
    pub image_size: usize,
    pub n_slices_per_patient: usize,
    pub lesion_count_range: (usize, usize),
    pub lesion_radius_range: (usize, usize),
    pub lung_hu_mean: i16,
    pub tissue_hu_mean: i16,
    pub vessel_hu_mean: i16,
    pub lesion_hu_mean: i16,
    pub noise_sigma: f64,
    pub domain_shift: DomainShift,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            image_size: 128,
            n_slices_per_patient: 8,
            lesion_count_range: (1, 3),
            lesion_radius_range: (3, 8),
            lung_hu_mean: -850,
            tissue_hu_mean: 40,
            vessel_hu_mean: 300,
            // Emboli are filling defects: darker than contrast-bright
            // vessels, brighter than aerated lung, and below the lung-window
            // binarization threshold so post-processing keeps them.
            lesion_hu_mean: -300,
            noise_sigma: 20.0,
            domain_shift: DomainShift::default(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("could not place {requested} lesions of radius up to {radius} inside the lungs")]
    InfeasibleSpec { requested: usize, radius: usize },
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let (r_min, r_max) = self.lesion_radius_range;
        let (c_min, c_max) = self.lesion_count_range;
        if self.image_size < 32 {
            return Err(PhantomError::InvalidSpec("image_size must be >= 32".into()));
        }
        if self.n_slices_per_patient == 0 {
            return Err(PhantomError::InvalidSpec("need at least one slice".into()));
        }
        if r_min < 1 || r_max < r_min || r_max > self.image_size / 8 {
            return Err(PhantomError::InvalidSpec(format!(
                "lesion radii must satisfy 1 <= {r_min} <= {r_max} <= image_size/8"
            )));
        }
        if c_max < c_min {
            return Err(PhantomError::InvalidSpec(
                "lesion count range is inverted".into(),
            ));
        }
        if self.domain_shift.contrast_scale <= 0.0 {
            return Err(PhantomError::InvalidSpec(
                "contrast_scale must be positive".into(),
            ));
        }
        if self.noise_sigma < 0.0 || self.domain_shift.extra_noise_sigma < 0.0 {
            return Err(PhantomError::InvalidSpec(
                "noise sigmas must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
}

impl Ellipse {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }

    /// True when the whole disc of radius `margin` around the point fits
    /// inside (conservative inscribed-ellipse test).
    fn contains_with_margin(&self, y: f64, x: f64, margin: f64) -> bool {
        let ry = self.ry - margin;
        let rx = self.rx - margin;
        if ry <= 0.0 || rx <= 0.0 {
            return false;
        }
        let dy = (y - self.cy) / ry;
        let dx = (x - self.cx) / rx;
        dy * dy + dx * dx <= 1.0
    }
}

/// Per-patient anatomy, deterministic in (spec, seed).
#[derive(Debug, Clone, PartialEq)]
pub struct LungGeometry {
    pub body: Ellipse,
    pub lungs: [Ellipse; 2],
}

pub fn patient_geometry(spec: &PhantomSpec, seed: u64) -> LungGeometry {
    let s = spec.image_size as f64;
    let mut rng = seeded_rng(seed, "phantom-geometry");
    let mut jitter = |scale: f64| rng.random_range(-scale..scale) * s;
    let c = s / 2.0;
    let body = Ellipse {
        cy: c,
        cx: c,
        ry: 0.46 * s,
        rx: 0.46 * s,
    };
    let mut lung = |side: f64| Ellipse {
        cy: c + jitter(0.02),
        cx: c + side * (0.21 * s + jitter(0.015)),
        ry: 0.30 * s + jitter(0.02),
        rx: 0.16 * s + jitter(0.015),
    };
    LungGeometry {
        body,
        lungs: [lung(-1.0), lung(1.0)],
    }
}

struct Lesion {
    cy: f64,
    cx: f64,
    r: f64,
}

fn paint_ellipse(canvas: &mut Array2<i16>, e: &Ellipse, hu: i16) {
    let (h, w) = canvas.dim();
    for y in 0..h {
        for x in 0..w {
            if e.contains(y as f64, x as f64) {
                canvas[(y, x)] = hu;
            }
        }
    }
}

fn paint_disc(canvas: &mut Array2<i16>, cy: f64, cx: f64, r: f64, hu: i16) {
    let (h, w) = canvas.dim();
    let y0 = (cy - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil() as usize).min(h - 1);
    let x0 = (cx - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil() as usize).min(w - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            if dy * dy + dx * dx <= r * r {
                canvas[(y, x)] = hu;
            }
        }
    }
}

fn draw_vessels(canvas: &mut Array2<i16>, lung: &Ellipse, rng: &mut ChaCha8Rng, hu: i16) {
    let n_vessels = rng.random_range(2..=4usize);
    for _ in 0..n_vessels {
        let mut y = lung.cy + rng.random_range(-0.3..0.3) * lung.ry;
        let mut x = lung.cx + rng.random_range(-0.3..0.3) * lung.rx;
        let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
        let steps = (lung.ry + lung.rx) as usize;
        for _ in 0..steps {
            if lung.contains_with_margin(y, x, 2.0) {
                paint_disc(canvas, y, x, 1.2, hu);
            }
            angle += rng.random_range(-0.35..0.35);
            y += angle.sin();
            x += angle.cos();
        }
    }
}

fn place_lesions(
    spec: &PhantomSpec,
    geo: &LungGeometry,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Lesion>, PhantomError> {
    let (c_min, c_max) = spec.lesion_count_range;
    let (r_min, r_max) = spec.lesion_radius_range;
    let n = rng.random_range(c_min..=c_max);
    let mut lesions: Vec<Lesion> = Vec::with_capacity(n);
    for _ in 0..n {
        let r = rng.random_range(r_min..=r_max) as f64;
        let mut placed = false;
        for _attempt in 0..500 {
            let lung = &geo.lungs[rng.random_range(0..2usize)];
            let cy = lung.cy + rng.random_range(-1.0..1.0) * lung.ry;
            let cx = lung.cx + rng.random_range(-1.0..1.0) * lung.rx;
            if !lung.contains_with_margin(cy, cx, r + 1.0) {
                continue;
            }
            let overlaps = lesions.iter().any(|l| {
                let d2 = (l.cy - cy).powi(2) + (l.cx - cx).powi(2);
                d2 <= (l.r + r + 1.0).powi(2)
            });
            if overlaps {
                continue;
            }
            lesions.push(Lesion { cy, cx, r });
            placed = true;
            break;
        }
        if !placed {
            return Err(PhantomError::InfeasibleSpec {
                requested: n,
                radius: r_max,
            });
        }
    }
    Ok(lesions)
}

/// Generates one labeled patient, a pure function of (spec, seed).
pub fn generate_patient(spec: &PhantomSpec, seed: u64) -> Result<PatientVolume, PhantomError> {
    spec.validate()?;
    let s = spec.image_size;
    let geo = patient_geometry(spec, seed);
    let mut slices = Vec::with_capacity(spec.n_slices_per_patient);
    let mut masks = Vec::with_capacity(spec.n_slices_per_patient);

    for slice_idx in 0..spec.n_slices_per_patient {
        let mut rng = seeded_rng(seed, &format!("phantom-slice-{slice_idx}"));
        let mut canvas = Array2::<i16>::from_elem((s, s), -1000);
        paint_ellipse(&mut canvas, &geo.body, spec.tissue_hu_mean);
        for lung in &geo.lungs {
            paint_ellipse(&mut canvas, lung, spec.lung_hu_mean);
        }
        for lung in &geo.lungs {
            draw_vessels(&mut canvas, lung, &mut rng, spec.vessel_hu_mean);
        }
        let lesions = place_lesions(spec, &geo, &mut rng)?;
        let mut mask: BinaryMask = Array2::zeros((s, s));
        for l in &lesions {
            paint_disc(&mut canvas, l.cy, l.cx, l.r, spec.lesion_hu_mean);
            paint_disc_mask(&mut mask, l.cy, l.cx, l.r);
        }
        if spec.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, spec.noise_sigma).unwrap();
            canvas.mapv_inplace(|hu| {
                let shifted = hu as f64 + normal.sample(&mut rng);
                (shifted.round() as i32).clamp(HU_MIN as i32, HU_MAX as i32) as i16
            });
        }
        slices.push(canvas);
        masks.push(mask);
    }

    Ok(PatientVolume {
        patient_id: format!("phantom-{seed:04}"),
        slices,
        masks: Some(masks),
    })
}

fn paint_disc_mask(mask: &mut BinaryMask, cy: f64, cx: f64, r: f64) {
    let (h, w) = mask.dim();
    let y0 = (cy - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil() as usize).min(h - 1);
    let x0 = (cx - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil() as usize).min(w - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            if dy * dy + dx * dx <= r * r {
                mask[(y, x)] = 1;
            }
        }
    }
}

/// Re-images a volume under different acquisition characteristics:
/// `HU' = clamp(scale*(HU - pivot) + pivot + offset + noise)`, where the
/// pivot is the spec's lung mean. Masks are untouched. The seed only
/// matters when extra noise is enabled.
pub fn apply_domain_shift(
    volume: &PatientVolume,
    shift: &DomainShift,
    pivot_lung_mean: i16,
    seed: u64,
) -> PatientVolume {
    let pivot = pivot_lung_mean as f64;
    let mut slices = Vec::with_capacity(volume.slices.len());
    for (idx, s) in volume.slices.iter().enumerate() {
        let mut rng = seeded_rng(seed, &format!("domain-shift-{idx}"));
        let normal = (shift.extra_noise_sigma > 0.0)
            .then(|| Normal::new(0.0, shift.extra_noise_sigma).unwrap());
        let shifted: HuSlice = s.mapv(|hu| {
            let noise = normal.as_ref().map_or(0.0, |n| n.sample(&mut rng));
            let v = shift.contrast_scale * (hu as f64 - pivot)
                + pivot
                + shift.hu_offset as f64
                + noise;
            (v.round() as i32).clamp(HU_MIN as i32, HU_MAX as i32) as i16
        });
        slices.push(shifted);
    }
    PatientVolume {
        patient_id: volume.patient_id.clone(),
        slices,
        masks: volume.masks.clone(),
    }
}
