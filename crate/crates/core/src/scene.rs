//! Synthetic aerial-style scenes: colored geometric regions over a
//! background, with exact ground truth and seeded texture noise.
//!
//! Rotated shapes are included on purpose: with positional embeddings on,
//! the frozen backbone is rotation-sensitive, which is the condition the
//! geometric consensus has to repair.

use crate::error::{Error, Result};
use crate::maps::LabelMap;
use crate::numerics::{RandomStream, Tensor};

/// Fixed palette of category names and their base colors (RGB in [0, 1]).
const PALETTE: [(&str, [f64; 3]); 8] = [
    ("background", [0.45, 0.42, 0.38]),
    ("water", [0.10, 0.30, 0.75]),
    ("building", [0.80, 0.15, 0.10]),
    ("vegetation", [0.10, 0.65, 0.20]),
    ("road", [0.25, 0.25, 0.28]),
    ("vehicle", [0.95, 0.80, 0.10]),
    ("bare soil", [0.70, 0.50, 0.25]),
    ("parking lot", [0.55, 0.20, 0.65]),
];

/// Five curated synonyms per palette category, mirroring the offline
/// synonym-library format.
const SYNONYMS: [(&str, [&str; 5]); 8] = [
    (
        "background",
        ["backdrop", "terrain", "ground", "surroundings", "open land"],
    ),
    ("water", ["lake", "river", "pond", "reservoir", "stream"]),
    (
        "building",
        ["house", "structure", "rooftop", "facility", "construction"],
    ),
    (
        "vegetation",
        ["forest", "grass", "trees", "greenery", "shrubs"],
    ),
    ("road", ["street", "highway", "pavement", "lane", "asphalt"]),
    ("vehicle", ["car", "truck", "automobile", "van", "bus"]),
    ("bare soil", ["dirt", "sand", "earth", "mud", "gravel"]),
    (
        "parking lot",
        ["car park", "parking area", "lot", "parking space", "garage"],
    ),
];

pub fn max_classes() -> usize {
    PALETTE.len()
}

/// Category names for a class count, background first.
pub fn category_names(classes: usize) -> Result<Vec<String>> {
    if classes < 2 || classes > PALETTE.len() {
        return Err(Error::ConfigError(format!(
            "class count {classes} outside 2..={}",
            PALETTE.len()
        )));
    }
    Ok(PALETTE[..classes]
        .iter()
        .map(|(name, _)| name.to_string())
        .collect())
}

/// Synonym-library text for the given categories with exactly `z`
/// synonyms each. Curated entries cover the palette; counts other than
/// five truncate or extend with deterministic variants.
pub fn default_synonyms(categories: &[String], z: usize) -> Result<String> {
    if z == 0 {
        return Err(Error::ConfigError(
            "synonym count must be at least 1".into(),
        ));
    }
    let mut out = String::from("# generated synonym library\n");
    for name in categories {
        let curated = SYNONYMS
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, syns)| syns.iter().map(|s| s.to_string()).collect::<Vec<_>>())
            .unwrap_or_default();
        let mut syns = curated;
        let mut k = 1;
        while syns.len() < z {
            syns.push(format!("{name} variant {k}"));
            k += 1;
        }
        syns.truncate(z);
        out.push_str(&format!("{name}: {}\n", syns.join(", ")));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Rect,
    RotatedRect,
    Disc,
}

/// One placed region with exact membership and analytic area.
#[derive(Debug, Clone, Copy)]
pub struct ShapeSpec {
    pub class: usize,
    pub kind: ShapeKind,
    pub center_y: f64,
    pub center_x: f64,
    /// Half-extents for rectangles; radius in `half_h` for discs.
    pub half_h: f64,
    pub half_w: f64,
    /// Counterclockwise rotation, zero except for rotated rectangles.
    pub angle: f64,
}

impl ShapeSpec {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let dy = y - self.center_y;
        let dx = x - self.center_x;
        match self.kind {
            ShapeKind::Rect => dy.abs() <= self.half_h && dx.abs() <= self.half_w,
            ShapeKind::RotatedRect => {
                let (sin, cos) = self.angle.sin_cos();
                let u = cos * dy + sin * dx;
                let v = -sin * dy + cos * dx;
                u.abs() <= self.half_h && v.abs() <= self.half_w
            }
            ShapeKind::Disc => dy * dy + dx * dx <= self.half_h * self.half_h,
        }
    }

    pub fn area(&self) -> f64 {
        match self.kind {
            ShapeKind::Rect | ShapeKind::RotatedRect => 4.0 * self.half_h * self.half_w,
            ShapeKind::Disc => std::f64::consts::PI * self.half_h * self.half_h,
        }
    }

    pub fn perimeter(&self) -> f64 {
        match self.kind {
            ShapeKind::Rect | ShapeKind::RotatedRect => 4.0 * (self.half_h + self.half_w),
            ShapeKind::Disc => 2.0 * std::f64::consts::PI * self.half_h,
        }
    }
}

/// Deterministic scene: image, exact ground truth, class count, seed.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub image: Tensor,
    pub gt: LabelMap,
    pub classes: usize,
    pub seed: u64,
}

/// Generates a scene and returns the placed shapes for analytic checks.
pub fn gen_scene_with_shapes(
    seed: u64,
    height: usize,
    width: usize,
    classes: usize,
    texture_noise: f64,
) -> Result<(SyntheticScene, Vec<ShapeSpec>)> {
    if classes < 2 {
        return Err(Error::ConfigError(format!(
            "scene needs at least 2 classes, got {classes}"
        )));
    }
    if classes > PALETTE.len() {
        return Err(Error::ConfigError(format!(
            "class count {classes} exceeds the palette size {}",
            PALETTE.len()
        )));
    }
    if height < 224 || width < 224 {
        return Err(Error::ConfigError(format!(
            "scene extent {height}x{width} below the 224 minimum"
        )));
    }
    if !(0.0..=1.0).contains(&texture_noise) {
        return Err(Error::ConfigError(format!(
            "texture noise {texture_noise} outside [0, 1]"
        )));
    }

    let mut rng = RandomStream::new(seed);
    let dim = height.min(width) as f64;

    // one region per foreground class, placed in class order so later
    // classes overwrite earlier ones
    let mut shapes = Vec::with_capacity(classes - 1);
    for class in 1..classes {
        let kind = match rng.next_index(3) {
            0 => ShapeKind::Rect,
            1 => ShapeKind::RotatedRect,
            _ => ShapeKind::Disc,
        };
        let center_y = rng.next_range(0.25, 0.75) * height as f64;
        let center_x = rng.next_range(0.25, 0.75) * width as f64;
        let half_h = rng.next_range(dim / 10.0, dim / 5.0);
        let half_w = rng.next_range(dim / 10.0, dim / 5.0);
        let angle = if kind == ShapeKind::RotatedRect {
            rng.next_range(0.0, std::f64::consts::FRAC_PI_2)
        } else {
            0.0
        };
        shapes.push(ShapeSpec {
            class,
            kind,
            center_y,
            center_x,
            half_h,
            half_w,
            angle,
        });
    }

    let mut pixels = vec![0.0f64; height * width * 3];
    let mut gt = vec![0u8; height * width];
    for y in 0..height {
        for x in 0..width {
            let py = y as f64 + 0.5;
            let px = x as f64 + 0.5;
            let mut class = 0usize;
            for shape in &shapes {
                if shape.contains(py, px) {
                    class = shape.class;
                }
            }
            gt[y * width + x] = class as u8;
            let color = PALETTE[class].1;
            let base = (y * width + x) * 3;
            pixels[base..base + 3].copy_from_slice(&color);
        }
    }
    if texture_noise > 0.0 {
        for v in pixels.iter_mut() {
            *v = (*v + texture_noise * (2.0 * rng.next_uniform() - 1.0)).clamp(0.0, 1.0);
        }
    }

    Ok((
        SyntheticScene {
            image: Tensor::new(vec![height, width, 3], pixels),
            gt: LabelMap::new(height, width, gt)?,
            classes,
            seed,
        },
        shapes,
    ))
}

pub fn gen_scene(
    seed: u64,
    height: usize,
    width: usize,
    classes: usize,
    texture_noise: f64,
) -> Result<SyntheticScene> {
    gen_scene_with_shapes(seed, height, width, classes, texture_noise).map(|(scene, _)| scene)
}
