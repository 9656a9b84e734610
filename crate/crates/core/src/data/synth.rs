//! Paired RGB/thermal scenes with modality-exclusive objects.
//!
//! Each object is visible in the RGB image, the thermal image, or both. Where
//! an object is hidden from a modality, that modality's pixels are exactly the
//! empty-scene pixels, so a single-modality detector cannot recover it. Night
//! scenes darken the RGB image and add sensor noise.

use crate::error::{CftError, Result};
use crate::geometry::{BBox, GroundTruth};
use crate::rng::Rng;

use super::pnm::Image8;
use super::PairSample;

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["person", "car", "bicycle"];

/// Lattice spacing of the background value noise, in pixels.
const NOISE_CELL: usize = 16;
const NIGHT_GAIN: f64 = 0.35;
const NIGHT_NOISE_SIGMA: f64 = 8.0;
const DAY_NOISE_SIGMA: f64 = 3.0;
const THERMAL_NOISE_SIGMA: f64 = 3.0;
/// Minimum free gap between object boxes.
const PLACEMENT_GAP: f64 = 2.0;
const NOISE_STREAM_SALT: u64 = 0x6e6f_6973_655f_7374;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Visibility {
    RgbOnly,
    ThermalOnly,
    Both,
}

impl Visibility {
    pub const ALL: [Visibility; 3] = [Visibility::RgbOnly, Visibility::ThermalOnly, Visibility::Both];

    pub fn in_rgb(self) -> bool {
        matches!(self, Visibility::RgbOnly | Visibility::Both)
    }

    pub fn in_thermal(self) -> bool {
        matches!(self, Visibility::ThermalOnly | Visibility::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            Visibility::RgbOnly => "rgb_only",
            Visibility::ThermalOnly => "thermal_only",
            Visibility::Both => "both",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub class_id: usize,
    pub bbox: BBox,
    pub visibility: Visibility,
    /// RGB brightness offset from the scene base color (signed).
    pub rgb_contrast: f64,
    /// Thermal intensity above the scene base.
    pub thermal_contrast: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probabilities of (rgb_only, thermal_only, both).
    pub visibility_probs: [f64; 3],
    pub night_fraction: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            size: 64,
            min_objects: 1,
            max_objects: 4,
            visibility_probs: [0.35, 0.35, 0.30],
            night_fraction: 0.5,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.visibility_probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.visibility_probs.iter().any(|&p| p < 0.0) {
            return Err(CftError::Config(format!(
                "visibility probabilities {:?} must be non-negative and sum to 1",
                self.visibility_probs
            )));
        }
        if !(0.0..=1.0).contains(&self.night_fraction) {
            return Err(CftError::Config("night_fraction must lie in [0, 1]".into()));
        }
        if self.size < 32 {
            return Err(CftError::Config("image size must be at least 32".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(CftError::Config("need 1 <= min_objects <= max_objects".into()));
        }
        Ok(())
    }
}

/// A generated pair plus everything needed to audit it.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub sample: PairSample,
    pub objects: Vec<ObjectSpec>,
    pub night: bool,
    /// The same scene rendered without any objects (same noise).
    pub rgb_background: Image8,
    pub thermal_background: Image8,
}

/// Side lengths `(w, h)` for a class.
fn draw_extent(class_id: usize, rng: &mut Rng) -> (i64, i64) {
    match class_id {
        // person: tall and narrow
        0 => (rng.int_range(5, 8), rng.int_range(13, 20)),
        // car: wide and low
        1 => (rng.int_range(14, 22), rng.int_range(7, 10)),
        // bicycle: small, roughly square
        _ => (rng.int_range(6, 9), rng.int_range(6, 9)),
    }
}

fn place_objects(params: &SynthParams, rng: &mut Rng) -> Vec<(usize, BBox)> {
    let n = rng.int_range(params.min_objects as i64, params.max_objects as i64) as usize;
    let size = params.size as i64;
    let mut placed: Vec<(usize, BBox)> = Vec::with_capacity(n);
    for _ in 0..n {
        let class_id = rng.below(NUM_CLASSES);
        let (w, h) = draw_extent(class_id, rng);
        for _attempt in 0..64 {
            let x1 = rng.int_range(1, size - w - 1);
            let y1 = rng.int_range(1, size - h - 1);
            let b = BBox::new(x1 as f64, y1 as f64, (x1 + w) as f64, (y1 + h) as f64);
            let padded = BBox::new(
                b.x1 - PLACEMENT_GAP,
                b.y1 - PLACEMENT_GAP,
                b.x2 + PLACEMENT_GAP,
                b.y2 + PLACEMENT_GAP,
            );
            if placed.iter().all(|(_, o)| padded.intersection(o) == 0.0) {
                placed.push((class_id, b));
                break;
            }
        }
    }
    placed
}

/// Smooth random field in roughly [-1, 1] on a `size x size` grid.
fn value_noise(size: usize, rng: &mut Rng) -> Vec<f64> {
    let cells = size.div_ceil(NOISE_CELL) + 1;
    let lattice: Vec<f64> = (0..cells * cells).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let gy = y as f64 / NOISE_CELL as f64;
        let (iy, fy) = (gy.floor() as usize, smooth(gy.fract()));
        for x in 0..size {
            let gx = x as f64 / NOISE_CELL as f64;
            let (ix, fx) = (gx.floor() as usize, smooth(gx.fract()));
            let at = |cx: usize, cy: usize| lattice[cy * cells + cx];
            let top = at(ix, iy) * (1.0 - fx) + at(ix + 1, iy) * fx;
            let bot = at(ix, iy + 1) * (1.0 - fx) + at(ix + 1, iy + 1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn fill(buf: &mut [f64], size: usize, b: &BBox, value: f64) {
    for y in b.y1 as usize..b.y2 as usize {
        for x in b.x1 as usize..b.x2 as usize {
            buf[y * size + x] = value;
        }
    }
}

/// Render pair `index` of the dataset seeded with `seed`. Pure in its arguments.
pub fn synthesize(seed: u64, index: u64, params: &SynthParams) -> Result<SynthScene> {
    params.validate()?;
    let size = params.size;
    let mut rng = Rng::derive(seed, index);
    let night = rng.uniform() < params.night_fraction;

    let boxes = place_objects(params, &mut rng);
    let rgb_base: [f64; 3] = std::array::from_fn(|_| rng.uniform_range(70.0, 180.0));
    let thermal_base = rng.uniform_range(40.0, 90.0);
    let objects: Vec<ObjectSpec> = boxes
        .into_iter()
        .map(|(class_id, bbox)| {
            let visibility = Visibility::ALL[rng.categorical(&params.visibility_probs)];
            let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            ObjectSpec {
                class_id,
                bbox,
                visibility,
                rgb_contrast: sign * rng.uniform_range(55.0, 80.0),
                thermal_contrast: rng.uniform_range(70.0, 120.0),
            }
        })
        .collect();

    // background fields: three RGB planes, one thermal plane
    let rgb_fields: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            value_noise(size, &mut rng)
                .into_iter()
                .map(|v| rgb_base[c] + 30.0 * v)
                .collect()
        })
        .collect();
    let thermal_field: Vec<f64> = value_noise(size, &mut rng)
        .into_iter()
        .map(|v| thermal_base + 20.0 * v)
        .collect();

    // object layers over the clean fields
    let mut rgb_obj = rgb_fields.clone();
    let mut thermal_obj = thermal_field.clone();
    for o in &objects {
        if o.visibility.in_rgb() {
            for (c, plane) in rgb_obj.iter_mut().enumerate() {
                fill(plane, size, &o.bbox, rgb_base[c] + o.rgb_contrast);
            }
        }
        if o.visibility.in_thermal() {
            fill(&mut thermal_obj, size, &o.bbox, thermal_base + o.thermal_contrast);
        }
    }

    // sensor model shared by the scene and its empty-scene twin
    let mut noise_rng = Rng::derive(seed ^ NOISE_STREAM_SALT, index);
    let (gain, rgb_sigma) = if night {
        (NIGHT_GAIN, NIGHT_NOISE_SIGMA)
    } else {
        (1.0, DAY_NOISE_SIGMA)
    };
    let rgb_noise: Vec<f64> = (0..3 * size * size)
        .map(|_| rgb_sigma * noise_rng.normal())
        .collect();
    let thermal_noise: Vec<f64> = (0..size * size)
        .map(|_| THERMAL_NOISE_SIGMA * noise_rng.normal())
        .collect();

    let render_rgb = |planes: &[Vec<f64>]| {
        let mut img = Image8::new(size, size, 3);
        for y in 0..size {
            for x in 0..size {
                for c in 0..3 {
                    let i = y * size + x;
                    let v = planes[c][i] * gain + rgb_noise[c * size * size + i];
                    img.set(x, y, c, to_u8(v));
                }
            }
        }
        img
    };
    let render_thermal = |plane: &[f64]| {
        let px = plane.iter().zip(&thermal_noise).map(|(v, n)| to_u8(v + n)).collect();
        Image8::from_pixels(size, size, 1, px).expect("extent matches")
    };

    let sample = PairSample {
        rgb: render_rgb(&rgb_obj),
        thermal: render_thermal(&thermal_obj),
        annotations: objects
            .iter()
            .map(|o| GroundTruth {
                bbox: o.bbox,
                class_id: o.class_id,
            })
            .collect(),
    };
    Ok(SynthScene {
        sample,
        objects,
        night,
        rgb_background: render_rgb(&rgb_fields),
        thermal_background: render_thermal(&thermal_field),
    })
}
