//! Synthetic scenes: an analytic raycaster and an oracle predictor that
//! stands in for a perfectly trained network.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, TAU};

use rand::Rng;
use rayon::prelude::*;

use crate::codec::{encode_box, AnchorMap, PredictionMap};
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Box3D, ObjectClass, Point3};
use crate::io::text::{format_box_fields, parse_box_fields};
use crate::io::data_lines;
use crate::range_image::{RangeImage, SensorSpec};

/// Rays travel at most this far (meters).
pub const MAX_RANGE: f64 = 200.0;

/// Ground height below the sensor used by the scene generator.
pub const DEFAULT_GROUND_Z: f64 = -1.73;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub boxes: Vec<Box3D>,
    /// Height of a horizontal ground plane; `None` for no ground.
    pub ground_z: Option<f64>,
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        for b in &self.boxes {
            b.validate()?;
            if let Some(g) = self.ground_z {
                if b.bottom() < g - 1e-9 {
                    return Err(Error::InvalidInput(format!("box at {:?} extends below the ground", b.center)));
                }
            }
        }
        if self.ground_z.is_some_and(|g| !g.is_finite()) {
            return Err(Error::NonFinite("ground height".into()));
        }
        Ok(())
    }

    /// Scene text: `class x y z l w h yaw` per box and an optional `ground z` line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut boxes = Vec::new();
        let mut ground_z = None;
        for (line, f) in data_lines(text) {
            if f[0] == "ground" {
                if f.len() != 2 {
                    return Err(Error::parse(line, "expected `ground z`"));
                }
                ground_z = Some(crate::io::parse_f64(f[1], line, "ground")?);
                continue;
            }
            if f.len() != 8 {
                return Err(Error::parse(line, format!("expected 8 fields, found {}", f.len())));
            }
            boxes.push(parse_box_fields(&f, line)?);
        }
        let scene = Self { boxes, ground_z };
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(g) = self.ground_z {
            s.push_str(&format!("ground {g}\n"));
        }
        for b in &self.boxes {
            s.push_str(&format_box_fields(b));
            s.push('\n');
        }
        s
    }

    /// The scene rotated about the sensor's vertical axis.
    pub fn rotated(&self, angle: f64) -> Self {
        Self {
            boxes: self
                .boxes
                .iter()
                .map(|b| Box3D {
                    center: b.center.rotate_z(angle),
                    yaw: normalize_angle(b.yaw + angle),
                    ..*b
                })
                .collect(),
            ground_z: self.ground_z,
        }
    }
}

/// Distance along the unit ray `dir` from the origin to the first face of
/// `b`, or the exit face when the origin is inside.
pub fn ray_box_distance(dir: &Point3, b: &Box3D) -> Option<f64> {
    let o = b.to_local(&Point3::ORIGIN);
    let (s, c) = b.yaw.sin_cos();
    let d = [c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z];
    let o = [o.x, o.y, o.z];
    let half = [b.length / 2.0, b.width / 2.0, b.height / 2.0];
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if d[k] == 0.0 {
            if o[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let a = (-half[k] - o[k]) / d[k];
        let bb = (half[k] - o[k]) / d[k];
        t0 = t0.max(a.min(bb));
        t1 = t1.min(a.max(bb));
    }
    if t1 < t0 || t1 <= 0.0 {
        return None;
    }
    Some(if t0 > 0.0 { t0 } else { t1 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raycast {
    pub image: RangeImage,
    /// Index of the box hit by each cell's ray.
    pub membership: Vec<Option<usize>>,
}

impl Raycast {
    pub fn hits(&self, box_index: usize) -> usize {
        self.membership.iter().filter(|m| **m == Some(box_index)).count()
    }
}

/// Casts one ray per cell and keeps the nearest box or ground hit.
pub fn raycast(scene: &SyntheticScene, spec: &SensorSpec) -> Result<Raycast> {
    scene.validate()?;
    spec.validate()?;
    let cols = spec.cols();
    let cells: Vec<(Option<f64>, Option<usize>)> = (0..spec.rows())
        .into_par_iter()
        .flat_map_iter(|r| {
            (0..cols).map(move |c| {
                let dir = spec.direction(r, c);
                let mut best: (Option<f64>, Option<usize>) = (None, None);
                let mut consider = |t: f64, who: Option<usize>| {
                    if t > 0.0 && t <= MAX_RANGE && best.0.is_none_or(|b| t < b) {
                        best = (Some(t), who);
                    }
                };
                if let Some(g) = scene.ground_z {
                    if dir.z < 0.0 && g < 0.0 {
                        consider(g / dir.z, None);
                    }
                }
                for (k, b) in scene.boxes.iter().enumerate() {
                    if let Some(t) = ray_box_distance(&dir, b) {
                        consider(t, Some(k));
                    }
                }
                best
            })
        })
        .collect();
    let mut image = RangeImage::empty(spec.clone());
    let mut membership = vec![None; cells.len()];
    for (i, (t, who)) in cells.into_iter().enumerate() {
        if let Some(t) = t {
            image.set(i / cols, i % cols, t, None);
            membership[i] = who;
        }
    }
    Ok(Raycast { image, membership })
}

/// The exact training target of a raycast scene, as a prediction map.
pub fn oracle_predict(cast: &Raycast, boxes: &[Box3D]) -> Result<PredictionMap> {
    let img = &cast.image;
    let mut map = AnchorMap::zeros(img.rows(), img.cols());
    for r in 0..img.rows() {
        for c in 0..img.cols() {
            let Some(k) = cast.membership[img.index(r, c)] else { continue };
            let b = boxes
                .get(k)
                .ok_or_else(|| Error::OutOfRange(format!("membership references box {k}")))?;
            let Some(p) = img.cell_point(r, c) else { continue };
            let e = encode_box(&p, b)?;
            map.set_anchor(r, c, e.anchor, 1.0, &e.values);
        }
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub min_boxes: usize,
    pub max_boxes: usize,
    /// Horizontal distance range of box centers (meters).
    pub min_distance: f64,
    pub max_distance: f64,
    pub ground_z: f64,
    pub vehicle_fraction: f64,
    /// Keep every box's relative heading this far (radians) from an
    /// orientation-bin boundary across its whole angular extent.
    pub bin_margin: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            min_boxes: 1,
            max_boxes: 10,
            min_distance: 6.0,
            max_distance: 18.0,
            ground_z: DEFAULT_GROUND_Z,
            vehicle_fraction: 0.6,
            bin_margin: 0.05,
        }
    }
}

/// Half-width of the azimuth interval a box occupies as seen from the origin.
fn angular_half_extent(b: &Box3D) -> f64 {
    let az = b.center.azimuth();
    b.corners()
        .iter()
        .map(|p| normalize_angle(p.azimuth() - az).abs())
        .fold(0.0, f64::max)
}

/// Random scene of upright boxes on the ground, each alone in its own azimuth
/// sector so that no box occludes another, with every hit on a box falling
/// into a single orientation bin.
pub fn random_scene<R: Rng + ?Sized>(rng: &mut R, params: &SceneParams) -> SyntheticScene {
    let n = rng.random_range(params.min_boxes..=params.max_boxes.max(params.min_boxes));
    let offset = rng.random_range(0.0..TAU);
    let sector = TAU / n.max(1) as f64;
    let mut boxes = Vec::with_capacity(n);
    for k in 0..n {
        let center_az = offset + (k as f64 + 0.5) * sector;
        for attempt in 0.. {
            let vehicle = rng.random_bool(params.vehicle_fraction);
            let (l, w, h) = if vehicle {
                (rng.random_range(3.5..4.8), rng.random_range(1.6..2.0), rng.random_range(1.4..1.8))
            } else {
                (rng.random_range(0.5..1.8), rng.random_range(0.5..0.8), rng.random_range(1.5..1.9))
            };
            let dist = rng.random_range(params.min_distance..params.max_distance);
            let az = center_az + rng.random_range(-0.1..0.1) * sector;
            let bin = rng.random_range(0..4) as f64 * FRAC_PI_2;
            let rel = bin + rng.random_range(-FRAC_PI_4..FRAC_PI_4) * 0.5;
            let class = if vehicle { ObjectClass::Vehicle } else { ObjectClass::VulnerableRoadUser };
            let center = Point3::new(dist * az.cos(), dist * az.sin(), params.ground_z + h / 2.0);
            let b = Box3D::new(center, l, w, h, az + rel, class).expect("positive sizes");
            let spread = angular_half_extent(&b);
            let fits_sector = normalize_angle(az - center_az).abs() + spread < 0.45 * sector;
            let fits_bin = (rel - bin).abs() + spread < FRAC_PI_4 - params.bin_margin;
            if (fits_sector && fits_bin) || attempt > 1000 {
                boxes.push(b);
                break;
            }
        }
    }
    SyntheticScene {
        boxes,
        ground_z: Some(params.ground_z),
    }
}
