//! Parameterized chest-phantom renderer with controllable findings and
//! ground-truth regions.
//!
//! Rendering draws every random quantity (anatomy, texture lattice and the
//! geometry of *every* vocabulary finding) in a fixed order before anything is
//! composited, so the random stream consumed never depends on which findings
//! are active. Each active finding is composited strictly inside its returned
//! region, which makes renders of the same state differ only there.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::findings::{FindingVector, Vocabulary};
use crate::image::{BBox, Image};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn draw(&self, rng: &mut Rng) -> f64 {
        // always consume exactly one draw, degenerate or not
        let t: f64 = rng.random();
        self.min + t * (self.max - self.min)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min <= self.max) {
            return Err(Error::invalid(format!("range {what} is degenerate: [{}, {}]", self.min, self.max)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    Cardiomegaly,
    SupportDevice,
    LungOpacity,
    Effusion,
    Atelectasis,
}

impl FindingKind {
    pub const ALL: [FindingKind; 5] = [
        FindingKind::Cardiomegaly,
        FindingKind::SupportDevice,
        FindingKind::LungOpacity,
        FindingKind::Effusion,
        FindingKind::Atelectasis,
    ];

    pub fn default_name(self) -> &'static str {
        match self {
            FindingKind::Cardiomegaly => "cardiomegaly",
            FindingKind::SupportDevice => "support_device",
            FindingKind::LungOpacity => "lung_opacity",
            FindingKind::Effusion => "effusion",
            FindingKind::Atelectasis => "atelectasis",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindingSpec {
    pub name: String,
    pub kind: FindingKind,
}

/// Geometry ranges, all in unit image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Geometry {
    pub heart_radius: Range,
    pub enlarged_heart_radius: Range,
    pub tube_start_u: Range,
    pub tube_tip_u: Range,
    pub tube_tip_v: Range,
    pub tube_half_width: Range,
    pub tube_intensity: Range,
    pub opacity_center_u: Range,
    pub opacity_center_v: Range,
    pub opacity_radius: Range,
    pub opacity_amplitude: Range,
    pub effusion_level_v: Range,
    pub effusion_amplitude: Range,
    pub atelectasis_center_v: Range,
    pub atelectasis_slope: Range,
    pub atelectasis_half_thickness: Range,
    pub atelectasis_amplitude: Range,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            heart_radius: Range::new(0.115, 0.145),
            enlarged_heart_radius: Range::new(0.175, 0.215),
            tube_start_u: Range::new(0.47, 0.53),
            tube_tip_u: Range::new(0.44, 0.56),
            tube_tip_v: Range::new(0.30, 0.42),
            tube_half_width: Range::new(0.018, 0.026),
            tube_intensity: Range::new(0.9, 1.0),
            opacity_center_u: Range::new(0.24, 0.32),
            opacity_center_v: Range::new(0.24, 0.32),
            opacity_radius: Range::new(0.06, 0.08),
            opacity_amplitude: Range::new(0.35, 0.5),
            effusion_level_v: Range::new(0.60, 0.66),
            effusion_amplitude: Range::new(0.25, 0.45),
            atelectasis_center_v: Range::new(0.46, 0.52),
            atelectasis_slope: Range::new(-0.15, 0.15),
            atelectasis_half_thickness: Range::new(0.02, 0.03),
            atelectasis_amplitude: Range::new(0.28, 0.4),
        }
    }
}

impl Geometry {
    fn validate(&self) -> Result<()> {
        let all = [
            ("heart_radius", &self.heart_radius),
            ("enlarged_heart_radius", &self.enlarged_heart_radius),
            ("tube_start_u", &self.tube_start_u),
            ("tube_tip_u", &self.tube_tip_u),
            ("tube_tip_v", &self.tube_tip_v),
            ("tube_half_width", &self.tube_half_width),
            ("tube_intensity", &self.tube_intensity),
            ("opacity_center_u", &self.opacity_center_u),
            ("opacity_center_v", &self.opacity_center_v),
            ("opacity_radius", &self.opacity_radius),
            ("opacity_amplitude", &self.opacity_amplitude),
            ("effusion_level_v", &self.effusion_level_v),
            ("effusion_amplitude", &self.effusion_amplitude),
            ("atelectasis_center_v", &self.atelectasis_center_v),
            ("atelectasis_slope", &self.atelectasis_slope),
            ("atelectasis_half_thickness", &self.atelectasis_half_thickness),
            ("atelectasis_amplitude", &self.atelectasis_amplitude),
        ];
        for (name, r) in all {
            r.validate(name)?;
        }
        if self.enlarged_heart_radius.min < self.heart_radius.max {
            return Err(Error::invalid("enlarged heart radius must not undercut the normal heart radius"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub image_size: usize,
    pub findings: Vec<FindingSpec>,
    pub geometry: Geometry,
    pub texture_amplitude: f64,
    /// Lattice cells per side of the value-noise texture.
    pub texture_cells: usize,
    pub rng_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            findings: FindingKind::ALL
                .iter()
                .map(|&kind| FindingSpec { name: kind.default_name().to_string(), kind })
                .collect(),
            geometry: Geometry::default(),
            texture_amplitude: 0.02,
            texture_cells: 8,
            rng_seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::invalid(format!("image_size {} is below 16", self.image_size)));
        }
        self.vocabulary()?;
        self.geometry.validate()?;
        if !(self.texture_amplitude.is_finite() && self.texture_amplitude >= 0.0) {
            return Err(Error::invalid("texture_amplitude must be finite and non-negative"));
        }
        if self.texture_cells == 0 {
            return Err(Error::invalid("texture_cells must be positive"));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.findings.iter().map(|f| f.name.clone()))
    }

    /// Index of the first vocabulary entry of `kind`.
    pub fn index_of_kind(&self, kind: FindingKind) -> Option<usize> {
        self.findings.iter().position(|f| f.kind == kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub image: Image,
    pub gt_findings: FindingVector,
    /// Vocabulary index → region holding that finding's pixels.
    pub gt_regions: BTreeMap<usize, BBox>,
}

// ---------------------------------------------------------------------------
// anatomy

const BACKGROUND: f64 = 0.05;
const TORSO: (f64, f64, f64, f64, f64) = (0.5, 0.55, 0.46, 0.52, 0.32);
const SPINE_HALF_WIDTH: f64 = 0.04;
const SPINE: f64 = 0.42;
const LUNG_RADII: (f64, f64) = (0.15, 0.30);
const LEFT_LUNG: (f64, f64) = (0.30, 0.46);
const RIGHT_LUNG: (f64, f64) = (0.70, 0.46);
const LUNG: f64 = 0.12;
const HEART_CENTER: (f64, f64) = (0.57, 0.62);
const HEART_ASPECT: f64 = 0.82;
const HEART: f64 = 0.62;
const EFFUSION_RAMP: f64 = 0.05;

/// Per-finding parameters drawn for one render.
#[derive(Debug, Clone, Copy)]
struct Draws {
    heart_radius: f64,
    enlarged_heart_radius: f64,
    tube: (f64, f64, f64, f64, f64),
    opacity: (f64, f64, f64, f64),
    effusion: (f64, f64),
    atelectasis: (f64, f64, f64, f64),
}

impl Draws {
    fn sample(g: &Geometry, rng: &mut Rng) -> Self {
        Self {
            heart_radius: g.heart_radius.draw(rng),
            enlarged_heart_radius: g.enlarged_heart_radius.draw(rng),
            tube: (
                g.tube_start_u.draw(rng),
                g.tube_tip_u.draw(rng),
                g.tube_tip_v.draw(rng),
                g.tube_half_width.draw(rng),
                g.tube_intensity.draw(rng),
            ),
            opacity: (
                g.opacity_center_u.draw(rng),
                g.opacity_center_v.draw(rng),
                g.opacity_radius.draw(rng),
                g.opacity_amplitude.draw(rng),
            ),
            effusion: (g.effusion_level_v.draw(rng), g.effusion_amplitude.draw(rng)),
            atelectasis: (
                g.atelectasis_center_v.draw(rng),
                g.atelectasis_slope.draw(rng),
                g.atelectasis_half_thickness.draw(rng),
                g.atelectasis_amplitude.draw(rng),
            ),
        }
    }
}

/// Anti-aliased coverage of an axis-aligned ellipse, sampled at pixel centres.
fn ellipse_coverage(u: f64, v: f64, c: (f64, f64), r: (f64, f64), px: f64) -> f64 {
    let du = (u - c.0) / r.0;
    let dv = (v - c.1) / r.1;
    let q = (du * du + dv * dv).sqrt();
    let signed = (q - 1.0) * r.0.min(r.1);
    (0.5 - signed / px).clamp(0.0, 1.0)
}

fn in_lung(u: f64, v: f64, centre: (f64, f64), px: f64) -> f64 {
    ellipse_coverage(u, v, centre, LUNG_RADII, px)
}

fn base_value(u: f64, v: f64, heart_radius: f64, px: f64) -> f64 {
    let blend = |acc: f64, a: f64, val: f64| acc * (1.0 - a) + val * a;
    let mut val = BACKGROUND;
    let torso = ellipse_coverage(u, v, (TORSO.0, TORSO.1), (TORSO.2, TORSO.3), px);
    val = blend(val, torso, TORSO.4);
    let spine = ((SPINE_HALF_WIDTH - (u - 0.5).abs()) / px + 0.5).clamp(0.0, 1.0) * torso;
    val = blend(val, spine, SPINE);
    val = blend(val, in_lung(u, v, LEFT_LUNG, px), LUNG);
    val = blend(val, in_lung(u, v, RIGHT_LUNG, px), LUNG);
    let heart = ellipse_coverage(u, v, HEART_CENTER, (heart_radius, heart_radius * HEART_ASPECT), px);
    blend(val, heart, HEART)
}

/// Distance from a point to a segment.
fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// A finding layer: given base value and pixel-centre coords, the new value.
/// Returns `None` where the layer has no support.
fn finding_layer(kind: FindingKind, d: &Draws, u: f64, v: f64, base: f64, px: f64) -> Option<f64> {
    match kind {
        FindingKind::Cardiomegaly => {
            let r = d.enlarged_heart_radius;
            let a = ellipse_coverage(u, v, HEART_CENTER, (r, r * HEART_ASPECT), px);
            // enlarged heart contains the normal one; only the rim changes
            (a > 0.0).then(|| base.max(base * (1.0 - a) + HEART * a))
        }
        FindingKind::SupportDevice => {
            let (su, tu, tv, hw, intensity) = d.tube;
            let dist = segment_distance((u, v), (su, 0.0), (tu, tv));
            let a = ((hw - dist) / px + 0.5).clamp(0.0, 1.0);
            (a > 0.0).then_some(base * (1.0 - a) + intensity * a)
        }
        FindingKind::LungOpacity => {
            let (cu, cv, r, amp) = d.opacity;
            let q = ((u - cu).powi(2) + (v - cv).powi(2)).sqrt() / r;
            (q < 1.0).then(|| base + amp * (1.0 - q * q).powi(2) * in_lung(u, v, LEFT_LUNG, px))
        }
        FindingKind::Effusion => {
            let (level, amp) = d.effusion;
            let lung = in_lung(u, v, LEFT_LUNG, px);
            (lung > 0.0 && v > level).then(|| base + amp * ((v - level) / EFFUSION_RAMP).min(1.0) * lung)
        }
        FindingKind::Atelectasis => {
            let (cv, slope, ht, amp) = d.atelectasis;
            let off = (v - cv - slope * (u - LEFT_LUNG.0)).abs();
            let lung = in_lung(u, v, LEFT_LUNG, px);
            (lung > 0.0 && off < ht).then(|| {
                let s = 1.0 - off / ht;
                base + amp * (s * s * (3.0 - 2.0 * s)) * lung
            })
        }
    }
}

/// Smoothly interpolated lattice noise in `[-1, 1]`.
struct ValueNoise {
    cells: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn sample(cells: usize, rng: &mut Rng) -> Self {
        let n = (cells + 1) * (cells + 1);
        Self { cells, lattice: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let gx = (u * self.cells as f64).clamp(0.0, self.cells as f64 - 1e-9);
        let gy = (v * self.cells as f64).clamp(0.0, self.cells as f64 - 1e-9);
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let (fx, fy) = (s(gx - ix as f64), s(gy - iy as f64));
        let w = self.cells + 1;
        let l = |x: usize, y: usize| self.lattice[y * w + x];
        let top = l(ix, iy) * (1.0 - fx) + l(ix + 1, iy) * fx;
        let bottom = l(ix, iy + 1) * (1.0 - fx) + l(ix + 1, iy + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Renders one phantom. `rng` is consumed identically whatever `findings` holds.
pub fn render(config: &WorldConfig, findings: &FindingVector, rng: &mut Rng) -> Result<PhantomSample> {
    if findings.len() != config.findings.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} findings", config.findings.len()),
            got: format!("{} findings", findings.len()),
        });
    }
    let n = config.image_size;
    let px = 1.0 / n as f64;
    let draws = Draws::sample(&config.geometry, rng);
    let noise = ValueNoise::sample(config.texture_cells, rng);

    let mut image = Image::from_fn(n, n, |x, y| {
        let (u, v) = ((x as f64 + 0.5) * px, (y as f64 + 0.5) * px);
        base_value(u, v, draws.heart_radius, px)
    });

    let mut gt_regions = BTreeMap::new();
    for (idx, spec) in config.findings.iter().enumerate() {
        if !findings.get(idx) {
            continue;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..n {
            for x in 0..n {
                let (u, v) = ((x as f64 + 0.5) * px, (y as f64 + 0.5) * px);
                let base = image.get(x, y);
                if let Some(val) = finding_layer(spec.kind, &draws, u, v, base, px) {
                    image.set(x, y, val);
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        if x0 == usize::MAX {
            // degenerate geometry: anchor a one-pixel region at the layer's nominal position
            let (u, v) = nominal_position(spec.kind, &draws);
            let (x, y) = (((u * n as f64) as usize).min(n - 1), ((v * n as f64) as usize).min(n - 1));
            (x0, y0, x1, y1) = (x, y, x + 1, y + 1);
        }
        gt_regions.insert(idx, BBox::new(x0, y0, x1, y1));
    }

    let amp = config.texture_amplitude;
    for y in 0..n {
        for x in 0..n {
            let (u, v) = ((x as f64 + 0.5) * px, (y as f64 + 0.5) * px);
            let val = image.get(x, y) + amp * noise.at(u, v);
            image.set(x, y, val.clamp(0.0, 1.0));
        }
    }

    Ok(PhantomSample { image, gt_findings: findings.clone(), gt_regions })
}

fn nominal_position(kind: FindingKind, d: &Draws) -> (f64, f64) {
    match kind {
        FindingKind::Cardiomegaly => HEART_CENTER,
        FindingKind::SupportDevice => (d.tube.1, d.tube.2),
        FindingKind::LungOpacity => (d.opacity.0, d.opacity.1),
        FindingKind::Effusion => (LEFT_LUNG.0, d.effusion.0),
        FindingKind::Atelectasis => (LEFT_LUNG.0, d.atelectasis.0),
    }
}

/// Per-finding rate giving about 1.5 active findings per image with five findings.
pub const DEFAULT_PREVALENCE: f64 = 0.3;

/// Per-finding prevalence, in vocabulary order.
pub fn validate_prevalence(config: &WorldConfig, prevalence: &[f64]) -> Result<()> {
    if prevalence.len() != config.findings.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} prevalences", config.findings.len()),
            got: format!("{} prevalences", prevalence.len()),
        });
    }
    if let Some(p) = prevalence.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("prevalence {p} outside [0, 1]")));
    }
    Ok(())
}

/// Draws sample `index` of the dataset stream: findings first, then the render.
pub fn sample_one(config: &WorldConfig, prevalence: &[f64], index: usize) -> Result<PhantomSample> {
    let mut rng = rng::indexed(config.rng_seed, "world", index as u64);
    let flags = prevalence.iter().map(|&p| rng.random::<f64>() < p).collect();
    render(config, &FindingVector::from_bools(flags), &mut rng)
}

/// `n` samples with findings drawn independently per finding. Sample `i`
/// depends only on `(config, prevalence, i)`.
pub fn sample_dataset(config: &WorldConfig, n: usize, prevalence: &[f64]) -> Result<Vec<PhantomSample>> {
    config.validate()?;
    validate_prevalence(config, prevalence)?;
    if n == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    use rayon::prelude::*;
    (0..n).into_par_iter().map(|i| sample_one(config, prevalence, i)).collect()
}
