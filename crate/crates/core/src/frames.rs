//! Difference frames: absolute difference on a byte scale, Gaussian blur,
//! threshold, connected components, and the K largest component boxes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BBox, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[default]
    #[serde(rename = "8")]
    Eight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameConfig {
    /// Odd side of the square blur kernel.
    pub blur_size: usize,
    pub blur_sigma: f64,
    /// Level `L` on the 0..=255 difference scale; pixels strictly above survive.
    pub threshold: f64,
    /// Per-finding overrides of `threshold`, keyed by finding name.
    pub finding_thresholds: BTreeMap<String, f64>,
    pub k: usize,
    pub connectivity: Connectivity,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            blur_size: 5,
            blur_sigma: 1.0,
            threshold: 95.0,
            finding_thresholds: BTreeMap::new(),
            k: 5,
            connectivity: Connectivity::Eight,
        }
    }
}

impl FrameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blur_size == 0 || self.blur_size.is_multiple_of(2) {
            return Err(Error::invalid(format!("blur size {} must be odd", self.blur_size)));
        }
        if !(self.blur_sigma > 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::invalid(format!("blur sigma {} must be positive", self.blur_sigma)));
        }
        for (name, l) in std::iter::once(("default", &self.threshold))
            .chain(self.finding_thresholds.iter().map(|(k, v)| (k.as_str(), v)))
        {
            if !(0.0..=255.0).contains(l) {
                return Err(Error::invalid(format!("threshold {l} for {name} outside [0, 255]")));
            }
        }
        if self.k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        Ok(())
    }

    pub fn threshold_for(&self, finding: Option<&str>) -> f64 {
        finding.and_then(|f| self.finding_thresholds.get(f)).copied().unwrap_or(self.threshold)
    }
}

/// `|a - b| * 255`, so identical images give 0 and a 0/1 pair gives 255.
pub fn abs_diff(a: &Image, b: &Image) -> Result<Image> {
    a.ensure_same_shape(b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() * 255.0).collect();
    Image::from_vec(a.width(), a.height(), data)
}

/// Normalized 1-D Gaussian taps of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Mirror index without repeating the edge sample: `-1 -> 1`, `n -> n - 2`.
fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_blur(img: &Image, size: usize, sigma: f64) -> Image {
    let kernel = gaussian_kernel(size, sigma);
    let r = (size / 2) as isize;
    let (w, h) = (img.width(), img.height());
    let mut rows = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let v = kernel
                .iter()
                .enumerate()
                .map(|(k, t)| t * img.get(reflect101(x as isize + k as isize - r, w), y))
                .sum();
            rows.set(x, y, v);
        }
    }
    let mut out = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let v = kernel
                .iter()
                .enumerate()
                .map(|(k, t)| t * rows.get(x, reflect101(y as isize + k as isize - r, h)))
                .sum();
            out.set(x, y, v);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(x, y);
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

/// Pixels strictly brighter than `level`.
pub fn threshold_mask(img: &Image, level: f64) -> Mask {
    Mask::from_fn(img.width(), img.height(), |x, y| img.get(x, y) > level)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    /// Member pixels in raster order.
    pub pixels: Vec<(usize, usize)>,
    pub bbox: BBox,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Maximal connected groups of set pixels, ordered by their first pixel in
/// raster order. Two-pass labeling with union-find.
pub fn connected_components(mask: &Mask, connectivity: Connectivity) -> Vec<Component> {
    let (w, h) = (mask.width, mask.height);
    let mut parent: Vec<usize> = (0..w * h).collect();
    let back: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (0, -1)],
        Connectivity::Eight => &[(-1, 0), (-1, -1), (0, -1), (1, -1)],
    };
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            for &(dx, dy) in back {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || !mask.get(nx as usize, ny as usize) {
                    continue;
                }
                let a = find(&mut parent, y * w + x);
                let b = find(&mut parent, ny as usize * w + nx as usize);
                if a != b {
                    let (lo, hi) = (a.min(b), a.max(b));
                    parent[hi] = lo;
                }
            }
        }
    }
    let mut slot_of_root = vec![usize::MAX; w * h];
    let mut components: Vec<Component> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let root = find(&mut parent, y * w + x);
            if slot_of_root[root] == usize::MAX {
                slot_of_root[root] = components.len();
                components.push(Component { pixels: Vec::new(), bbox: BBox::new(x, y, x + 1, y + 1) });
            }
            let c = &mut components[slot_of_root[root]];
            c.pixels.push((x, y));
            c.bbox = BBox::new(c.bbox.x0.min(x), c.bbox.y0.min(y), c.bbox.x1.max(x + 1), c.bbox.y1.max(y + 1));
        }
    }
    components
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "[usize; 5]", from = "[usize; 5]")]
pub struct FrameBox {
    pub bbox: BBox,
    pub area: usize,
}

impl From<FrameBox> for [usize; 5] {
    fn from(b: FrameBox) -> Self {
        [b.bbox.x0, b.bbox.y0, b.bbox.x1, b.bbox.y1, b.area]
    }
}

impl From<[usize; 5]> for FrameBox {
    fn from(v: [usize; 5]) -> Self {
        Self { bbox: BBox::new(v[0], v[1], v[2], v[3]), area: v[4] }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DiffFrame {
    pub boxes: Vec<FrameBox>,
}

/// The `k` largest components, by area descending then top-left `y`, `x`.
pub fn top_k_frames(components: &[Component], k: usize) -> DiffFrame {
    let mut boxes: Vec<FrameBox> = components.iter().map(|c| FrameBox { bbox: c.bbox, area: c.area() }).collect();
    boxes.sort_by(|a, b| b.area.cmp(&a.area).then(a.bbox.y0.cmp(&b.bbox.y0)).then(a.bbox.x0.cmp(&b.bbox.x0)));
    boxes.truncate(k);
    DiffFrame { boxes }
}

/// Blurred byte-scale difference map, the input to thresholding.
pub fn difference_map(query: &Image, counterfactual: &Image, cfg: &FrameConfig) -> Result<Image> {
    cfg.validate()?;
    Ok(gaussian_blur(&abs_diff(query, counterfactual)?, cfg.blur_size, cfg.blur_sigma))
}

/// Frames for the evidence of `finding` (which selects its threshold).
pub fn frame_pipeline(
    query: &Image,
    counterfactual: &Image,
    cfg: &FrameConfig,
    finding: Option<&str>,
) -> Result<DiffFrame> {
    let map = difference_map(query, counterfactual, cfg)?;
    let mask = threshold_mask(&map, cfg.threshold_for(finding));
    Ok(top_k_frames(&connected_components(&mask, cfg.connectivity), cfg.k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub level: f64,
    pub mask_area: usize,
    pub components: usize,
}

/// Mask area and component count at each level, for choosing `L` per finding.
pub fn sweep_threshold(
    query: &Image,
    counterfactual: &Image,
    cfg: &FrameConfig,
    levels: &[f64],
) -> Result<Vec<SweepRow>> {
    let map = difference_map(query, counterfactual, cfg)?;
    Ok(levels
        .iter()
        .map(|&level| {
            let mask = threshold_mask(&map, level);
            SweepRow { level, mask_area: mask.count(), components: connected_components(&mask, cfg.connectivity).len() }
        })
        .collect())
}

/// One-pixel outlines of each box at `intensity`.
pub fn draw_boxes(img: &Image, frame: &DiffFrame, intensity: f64) -> Image {
    let mut out = img.clone();
    for b in &frame.boxes {
        let bb = b.bbox.clip(img.width(), img.height());
        if bb.is_empty() {
            continue;
        }
        for x in bb.x0..bb.x1 {
            out.set(x, bb.y0, intensity);
            out.set(x, bb.y1 - 1, intensity);
        }
        for y in bb.y0..bb.y1 {
            out.set(bb.x0, y, intensity);
            out.set(bb.x1 - 1, y, intensity);
        }
    }
    out
}
