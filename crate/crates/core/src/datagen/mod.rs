//! Procedural multi-domain "cardiac-like" segmentation data.
//!
//! Labels come from a nested-ellipse anatomy (cavity, ring, adjacent crescent);
//! images are a smooth base rendering passed through a per-domain appearance
//! transform. Anatomy and appearance draw from independent random streams so
//! that domains differing only in appearance share label grids sample-for-sample.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod container;
mod stream;

pub use container::{
    load_split_set, read_pgm, step_name, write_stream, EvalSet, Manifest, SampleRecord, Splits, StreamLayout,
    StreamReader,
};
pub use stream::{build_stream, DomainStream, StepData, StepEntry, StreamConfig};

pub const NUM_CLASSES: usize = 4;

/// Inclusive-exclusive sampling interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub min: f64,
    pub max: f64,
}

impl Interval {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..self.max)
        } else {
            self.min
        }
    }
}

/// Geometry of the synthetic anatomy. Radii are fractions of the image size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnatomyParams {
    pub center_jitter: f64,
    pub inner_radius: Interval,
    pub outer_radius: Interval,
    pub crescent_radius: Interval,
    /// Axis ratio of the nested ellipses.
    pub aspect: Interval,
}

impl Default for AnatomyParams {
    fn default() -> Self {
        Self {
            center_jitter: 0.06,
            inner_radius: Interval::new(0.10, 0.14),
            outer_radius: Interval::new(0.18, 0.23),
            crescent_radius: Interval::new(0.15, 0.20),
            aspect: Interval::new(0.85, 1.15),
        }
    }
}

impl AnatomyParams {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("inner_radius", self.inner_radius),
            ("outer_radius", self.outer_radius),
            ("crescent_radius", self.crescent_radius),
            ("aspect", self.aspect),
        ];
        for (name, r) in ranges {
            if !(r.min > 0.0 && r.max >= r.min && r.max.is_finite()) {
                return Err(Error::Parameter(format!("{name} range {r:?} is not positive and ordered")));
            }
        }
        if self.outer_radius.min <= self.inner_radius.max {
            return Err(Error::Parameter(format!(
                "outer radius {:?} must exceed inner radius {:?}",
                self.outer_radius, self.inner_radius
            )));
        }
        if !(0.0..0.25).contains(&self.center_jitter) {
            return Err(Error::Parameter(format!("center jitter {} outside [0, 0.25)", self.center_jitter)));
        }
        if self.outer_radius.max + self.center_jitter >= 0.45 {
            return Err(Error::Parameter("anatomy does not fit inside the image".into()));
        }
        Ok(())
    }
}

/// Scanner-like appearance of a domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppearanceParams {
    pub gamma: f64,
    pub contrast: f64,
    pub bias_amplitude: f64,
    pub noise_amplitude: f64,
    #[serde(default)]
    pub invert: bool,
}

impl Default for AppearanceParams {
    fn default() -> Self {
        Self { gamma: 1.0, contrast: 1.0, bias_amplitude: 0.0, noise_amplitude: 0.03, invert: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    #[serde(default)]
    pub anatomy: AnatomyParams,
    #[serde(default)]
    pub appearance: AppearanceParams,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        self.anatomy.validate()?;
        let a = &self.appearance;
        if !(a.gamma > 0.0 && a.contrast > 0.0 && a.bias_amplitude >= 0.0 && a.noise_amplitude >= 0.0) {
            return Err(Error::Parameter(format!("appearance of domain {} out of range", self.name)));
        }
        Ok(())
    }
}

/// One grayscale image with its per-pixel class map.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub size: usize,
    /// Row-major intensities in `[0, 1]`.
    pub image: Vec<f32>,
    /// Row-major class indices in `0..NUM_CLASSES`.
    pub label: Vec<u8>,
    /// Metadata only; never consumed by the learner.
    pub domain_id: usize,
    pub seed: u64,
}

impl LabeledSample {
    pub fn class_count(&self, class: u8) -> usize {
        self.label.iter().filter(|&&c| c == class).count()
    }
}

/// SplitMix64 finalizer; mixes a counter path into an independent seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut s = master;
    for &p in path {
        s = splitmix(s ^ splitmix(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    s
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const ANATOMY_STREAM: u64 = 1;
const TEXTURE_STREAM: u64 = 2;
const APPEARANCE_STREAM: u64 = 3;

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn level(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.rx;
        let v = (-dx * self.sin + dy * self.cos) / self.ry;
        u * u + v * v
    }

    fn scaled(&self, f: f64) -> Ellipse {
        Ellipse { rx: self.rx * f, ry: self.ry * f, ..*self }
    }
}

struct Anatomy {
    cavity: Ellipse,
    wall: Ellipse,
    wall_margin: Ellipse,
    crescent: Ellipse,
}

impl Anatomy {
    fn sample(p: &AnatomyParams, size: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = size as f64;
        let cx = s / 2.0 + p.center_jitter * s * rng.random_range(-1.0..1.0);
        let cy = s / 2.0 + p.center_jitter * s * rng.random_range(-1.0..1.0);
        let aspect = p.aspect.sample(rng);
        let theta = rng.random_range(0.0..PI);
        let (sin, cos) = theta.sin_cos();
        let inner = p.inner_radius.sample(rng) * s;
        let outer = p.outer_radius.sample(rng) * s;
        let cavity = Ellipse { cx, cy, rx: inner * aspect, ry: inner / aspect, cos, sin };
        let wall = Ellipse { cx, cy, rx: outer * aspect, ry: outer / aspect, cos, sin };
        let wall_margin = wall.scaled(1.08);
        let rc = p.crescent_radius.sample(rng) * s;
        let phi = PI + rng.random_range(-0.5..0.5);
        let dist = outer * rng.random_range(0.75..0.95);
        let crescent = Ellipse {
            cx: cx + dist * phi.cos(),
            cy: cy + dist * phi.sin(),
            rx: rc * 1.25,
            ry: rc,
            cos: phi.cos(),
            sin: phi.sin(),
        };
        Self { cavity, wall, wall_margin, crescent }
    }

    fn class_at(&self, x: f64, y: f64) -> u8 {
        if self.cavity.level(x, y) <= 1.0 {
            1
        } else if self.wall.level(x, y) <= 1.0 {
            2
        } else if self.crescent.level(x, y) <= 1.0 && self.wall_margin.level(x, y) > 1.0 {
            3
        } else {
            0
        }
    }
}

/// Intensity of each class in the base rendering, before appearance.
const CLASS_INTENSITY: [f64; NUM_CLASSES] = [0.22, 0.82, 0.36, 0.70];

fn base_render(anatomy: &Anatomy, size: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let s = size as f64;
    let body = Ellipse {
        cx: s * rng.random_range(0.45..0.55),
        cy: s * rng.random_range(0.45..0.55),
        rx: s * rng.random_range(0.40..0.46),
        ry: s * rng.random_range(0.34..0.40),
        cos: 1.0,
        sin: 0.0,
    };
    let (fx, fy, phase) = (
        rng.random_range(1.0..3.0) * 2.0 * PI / s,
        rng.random_range(1.0..3.0) * 2.0 * PI / s,
        rng.random_range(0.0..2.0 * PI),
    );
    let mut image = vec![0.0; size * size];
    let mut label = vec![0u8; size * size];
    for py in 0..size {
        for px in 0..size {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            label[py * size + px] = anatomy.class_at(x, y);
            // 2x2 supersampling softens class boundaries.
            let mut acc = 0.0;
            for (ox, oy) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
                let (sx, sy) = (x + ox, y + oy);
                let class = anatomy.class_at(sx, sy) as usize;
                let mut v = CLASS_INTENSITY[class];
                if class == 0 {
                    let inside = if body.level(sx, sy) <= 1.0 { 1.0 } else { 0.35 };
                    v *= inside;
                    v += 0.06 * inside * (fx * sx + phase).sin() * (fy * sy).cos();
                }
                acc += v;
            }
            image[py * size + px] = acc / 4.0;
        }
    }
    for v in image.iter_mut() {
        *v += 0.02 * rng.sample::<f64, _>(StandardNormal);
    }
    (image, label)
}

/// Appearance pipeline in fixed order: gamma, contrast, bias field, noise,
/// optional inversion, clamp.
fn style_transform(base: &[f64], size: usize, a: &AppearanceParams, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let phi = rng.random_range(0.0..2.0 * PI);
    let (dir_x, dir_y) = (phi.cos(), phi.sin());
    let s = size as f64;
    base.iter()
        .enumerate()
        .map(|(i, &b)| {
            let (px, py) = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
            let mut v = b.clamp(0.0, 1.0).powf(a.gamma);
            v = (v - 0.5) * a.contrast + 0.5;
            let (u, w) = (2.0 * px / s - 1.0, 2.0 * py / s - 1.0);
            v += a.bias_amplitude * (dir_x * u + dir_y * w);
            v += a.noise_amplitude * rng.sample::<f64, _>(StandardNormal);
            if a.invert {
                v = 1.0 - v;
            }
            v.clamp(0.0, 1.0) as f32
        })
        .collect()
}

/// Deterministically renders one sample of `spec` at `size x size`.
pub fn synth_sample(spec: &DomainSpec, size: usize, domain_id: usize, seed: u64) -> Result<LabeledSample> {
    if size < 16 {
        return Err(Error::Parameter(format!("image size {size} below 16")));
    }
    spec.validate()?;
    let anatomy = Anatomy::sample(&spec.anatomy, size, &mut stream_rng(seed, ANATOMY_STREAM));
    let (base, label) = base_render(&anatomy, size, &mut stream_rng(seed, TEXTURE_STREAM));
    let image = style_transform(&base, size, &spec.appearance, &mut stream_rng(seed, APPEARANCE_STREAM));
    Ok(LabeledSample { size, image, label, domain_id, seed })
}

/// The four appearance presets used by the built-in streams (A..D).
pub fn preset_domains() -> Vec<DomainSpec> {
    let anatomy = AnatomyParams::default();
    let domain = |name: &str, gamma, contrast, bias_amplitude, noise_amplitude, invert| DomainSpec {
        name: name.to_string(),
        anatomy: anatomy.clone(),
        appearance: AppearanceParams { gamma, contrast, bias_amplitude, noise_amplitude, invert },
    };
    vec![
        domain("A", 1.0, 1.0, 0.0, 0.03, false),
        domain("B", 0.7, 0.6, 0.12, 0.05, true),
        domain("C", 1.6, 1.3, 0.20, 0.06, true),
        domain("D", 0.55, 0.8, 0.25, 0.08, false),
    ]
}
