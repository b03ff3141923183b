//! Pixel-wise box targets in sight-aligned coordinates.
//!
//! Every range-image pixel predicts, for each class and each of four relative
//! orientation bins, nine values: objectness, the box-center offset from the
//! pixel's point (x/y in the frame whose x axis points along the horizontal
//! line of sight, z unrotated), the relative orientation as a 2D vector, and
//! the box size. Expressing position and heading relative to the line of sight
//! makes the targets invariant to rotations of the scene about the sensor.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, TAU};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Aabb2D, Box3D, CameraCalibration, ObjectClass, Point3};
use crate::range_image::{RangeImage, SensorSpec};

/// Channel layout of prediction and target maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorLayout;

impl AnchorLayout {
    pub const N_CLASSES: usize = 2;
    pub const N_ORIENTATION_ANCHORS: usize = 4;
    pub const CHANNELS_PER_ANCHOR: usize = 9;
    pub const N_ANCHORS: usize = Self::N_CLASSES * Self::N_ORIENTATION_ANCHORS;
    pub const TOTAL_CHANNELS: usize = Self::N_ANCHORS * Self::CHANNELS_PER_ANCHOR;
    pub const REGRESSION_CHANNELS: usize = Self::CHANNELS_PER_ANCHOR - 1;

    pub const OBJECTNESS: usize = 0;
    pub const OFFSET: usize = 1;
    pub const ORIENTATION: usize = 4;
    pub const SIZE: usize = 6;

    /// Absolute channel of component `k` (0..9) of `anchor`.
    #[inline]
    pub const fn channel(anchor: usize, k: usize) -> usize {
        anchor * Self::CHANNELS_PER_ANCHOR + k
    }

    pub fn class_of(anchor: usize) -> Option<ObjectClass> {
        ObjectClass::from_index(anchor / Self::N_ORIENTATION_ANCHORS)
    }
}

/// Dense rows x cols x 72 map, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorMap {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

pub type TargetMap = AnchorMap;
pub type PredictionMap = AnchorMap;

impl AnchorMap {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols * AnchorLayout::TOTAL_CHANNELS],
        }
    }

    pub fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols * AnchorLayout::TOTAL_CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols}x{} map",
                data.len(),
                AnchorLayout::TOTAL_CHANNELS
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    fn offset(&self, row: usize, col: usize) -> usize {
        (row * self.cols + col) * AnchorLayout::TOTAL_CHANNELS
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let o = self.offset(row, col);
        &self.data[o..o + AnchorLayout::TOTAL_CHANNELS]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let o = self.offset(row, col);
        &mut self.data[o..o + AnchorLayout::TOTAL_CHANNELS]
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[self.offset(row, col) + channel]
    }

    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        let o = self.offset(row, col);
        self.data[o + channel] = value;
    }

    pub fn objectness(&self, row: usize, col: usize, anchor: usize) -> f64 {
        self.get(row, col, AnchorLayout::channel(anchor, AnchorLayout::OBJECTNESS))
    }

    pub fn regression(&self, row: usize, col: usize, anchor: usize) -> [f64; 8] {
        let base = self.offset(row, col) + AnchorLayout::channel(anchor, 1);
        let mut out = [0.0; 8];
        out.copy_from_slice(&self.data[base..base + 8]);
        out
    }

    /// Writes a full anchor slot (objectness + regression).
    pub fn set_anchor(&mut self, row: usize, col: usize, anchor: usize, objectness: f64, values: &[f64; 8]) {
        let base = self.offset(row, col) + AnchorLayout::channel(anchor, 0);
        self.data[base] = objectness;
        self.data[base + 1..base + 9].copy_from_slice(values);
    }
}

/// Supervision masks for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMasks {
    pub rows: usize,
    pub cols: usize,
    pub classification: Vec<bool>,
    /// rows x cols x 8 anchors.
    pub regression: Vec<bool>,
}

impl LossMasks {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            classification: vec![false; rows * cols],
            regression: vec![false; rows * cols * AnchorLayout::N_ANCHORS],
        }
    }

    pub fn classification_at(&self, row: usize, col: usize) -> bool {
        self.classification[row * self.cols + col]
    }

    pub fn regression_at(&self, row: usize, col: usize, anchor: usize) -> bool {
        self.regression[(row * self.cols + col) * AnchorLayout::N_ANCHORS + anchor]
    }

    pub fn regression_count(&self) -> usize {
        self.regression.iter().filter(|m| **m).count()
    }
}

/// Horizontal frame aligned with the line of sight to a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SightFrame {
    pub azimuth: f64,
    cos: f64,
    sin: f64,
}

impl SightFrame {
    pub fn from_azimuth(azimuth: f64) -> Self {
        let (sin, cos) = azimuth.sin_cos();
        Self { azimuth, cos, sin }
    }

    /// World (x, y) vector into sight coordinates.
    pub fn to_sight(&self, x: f64, y: f64) -> (f64, f64) {
        (self.cos * x + self.sin * y, -self.sin * x + self.cos * y)
    }

    /// Sight coordinates back to a world (x, y) vector.
    pub fn to_world(&self, u: f64, v: f64) -> (f64, f64) {
        (self.cos * u - self.sin * v, self.sin * u + self.cos * v)
    }
}

pub fn sight_frame(point: &Point3) -> Result<SightFrame> {
    if !point.is_finite() {
        return Err(Error::NonFinite("sight point".into()));
    }
    if point.norm() == 0.0 {
        return Err(Error::InvalidInput("point at the sensor origin".into()));
    }
    Ok(SightFrame::from_azimuth(point.azimuth()))
}

/// Orientation bin of a relative yaw: bins are centered on multiples of 90
/// degrees with lower-inclusive boundaries at odd multiples of 45 degrees.
pub fn orientation_bin(relative_yaw: f64) -> usize {
    let shifted = (normalize_angle(relative_yaw) + FRAC_PI_4).rem_euclid(TAU);
    ((shifted / FRAC_PI_2).floor() as usize).min(AnchorLayout::N_ORIENTATION_ANCHORS - 1)
}

pub fn anchor_index(box_yaw: f64, azimuth: f64, class: ObjectClass) -> usize {
    class.index() * AnchorLayout::N_ORIENTATION_ANCHORS + orientation_bin(box_yaw - azimuth)
}

/// One box encoded at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodedBox {
    pub anchor: usize,
    /// dx, dy, dz, cos, sin, width, length, height.
    pub values: [f64; 8],
}

pub fn encode_box(point: &Point3, b: &Box3D) -> Result<EncodedBox> {
    let frame = sight_frame(point)?;
    let (dx, dy) = frame.to_sight(b.center.x - point.x, b.center.y - point.y);
    let dz = b.center.z - point.z;
    let rel = b.yaw - frame.azimuth;
    let (s, c) = rel.sin_cos();
    Ok(EncodedBox {
        anchor: anchor_index(b.yaw, frame.azimuth, b.class),
        values: [dx, dy, dz, c, s, b.width, b.length, b.height],
    })
}

/// Inverse of [`encode_box`] given the point the prediction belongs to.
pub fn decode_at_point(point: &Point3, anchor: usize, values: &[f64; 8]) -> Result<Box3D> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("regression values {values:?}")));
    }
    let class = AnchorLayout::class_of(anchor)
        .ok_or_else(|| Error::OutOfRange(format!("anchor {anchor}")))?;
    let frame = sight_frame(point)?;
    let [dx, dy, dz, c, s, width, length, height] = *values;
    let (wx, wy) = frame.to_world(dx, dy);
    let center = Point3::new(point.x + wx, point.y + wy, point.z + dz);
    Box3D::new(center, length, width, height, frame.azimuth + s.atan2(c), class)
}

pub fn decode_box(
    row: usize,
    col: usize,
    range: f64,
    anchor: usize,
    values: &[f64; 8],
    spec: &SensorSpec,
) -> Result<Box3D> {
    if row >= spec.rows() || col >= spec.cols() {
        return Err(Error::OutOfRange(format!("cell ({row}, {col})")));
    }
    if !(range.is_finite() && range > 0.0) {
        return Err(Error::InvalidInput(format!("range {range}")));
    }
    decode_at_point(&spec.point_at(row, col, range), anchor, values)
}

/// Points closer than this (meters) to a box face still count as inside.
pub const CONTAINMENT_EPS: f64 = 1e-6;

/// Where the classification loss is applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SupervisionWindow {
    All,
    /// Azimuths within `half_width` of `center` (radians).
    Azimuth { center: f64, half_width: f64 },
    /// Points that project into the camera image.
    CameraFov,
}

impl SupervisionWindow {
    /// The 180 degree area in front of the vehicle.
    pub const FRONT_180: SupervisionWindow = SupervisionWindow::Azimuth {
        center: 0.0,
        half_width: FRAC_PI_2,
    };

    fn contains(&self, p: &Point3, calib: Option<&CameraCalibration>) -> bool {
        match *self {
            SupervisionWindow::All => true,
            SupervisionWindow::Azimuth { center, half_width } => {
                normalize_angle(p.azimuth() - center).abs() <= half_width
            }
            SupervisionWindow::CameraFov => calib
                .and_then(|c| c.project_point(p).map(|(u, v)| c.in_image(u, v)))
                .unwrap_or(false),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterizedTargets {
    pub targets: TargetMap,
    pub masks: LossMasks,
    /// Boxes ignored because they have no volume or a non-finite pose.
    pub skipped_boxes: usize,
}

/// Builds per-pixel targets and loss masks for one frame.
///
/// A valid pixel whose point lies inside a box gets objectness 1 on the box's
/// anchor and the encoded regression values there; a point inside several
/// boxes goes to the one with the nearest center. The classification mask
/// keeps valid pixels inside `window` that do not project into a don't-care
/// region; regression supervision is restricted to classification-masked pixels.
pub fn rasterize_targets(
    img: &RangeImage,
    boxes: &[Box3D],
    dontcare: &[Aabb2D],
    calib: Option<&CameraCalibration>,
    window: SupervisionWindow,
) -> Result<RasterizedTargets> {
    if window == SupervisionWindow::CameraFov && calib.is_none() {
        return Err(Error::InvalidInput(
            "camera field-of-view window needs a calibration".into(),
        ));
    }
    let usable: Vec<&Box3D> = boxes.iter().filter(|b| b.validate().is_ok()).collect();
    let skipped_boxes = boxes.len() - usable.len();
    let (rows, cols) = (img.rows(), img.cols());
    let mut targets = AnchorMap::zeros(rows, cols);
    let mut masks = LossMasks::empty(rows, cols);

    for row in 0..rows {
        for col in 0..cols {
            let Some(p) = img.cell_point(row, col) else {
                continue;
            };
            let mut supervised = window.contains(&p, calib);
            if supervised && !dontcare.is_empty() {
                if let Some((u, v)) = calib.and_then(|c| c.project_point(&p)) {
                    supervised = !dontcare.iter().any(|d| d.contains(u, v));
                }
            }
            let pix = row * cols + col;
            masks.classification[pix] = supervised;

            let owner = usable
                .iter()
                .filter(|b| b.contains(&p, CONTAINMENT_EPS))
                .min_by(|a, b| a.center.distance(&p).total_cmp(&b.center.distance(&p)));
            let Some(owner) = owner else {
                continue;
            };
            let Ok(enc) = encode_box(&p, owner) else {
                continue;
            };
            targets.set_anchor(row, col, enc.anchor, 1.0, &enc.values);
            if supervised {
                masks.regression[pix * AnchorLayout::N_ANCHORS + enc.anchor] = true;
            }
        }
    }
    Ok(RasterizedTargets {
        targets,
        masks,
        skipped_boxes,
    })
}

fn check_shapes(pred: &AnchorMap, target: &AnchorMap, masks: &LossMasks) -> Result<()> {
    if pred.rows != target.rows
        || pred.cols != target.cols
        || masks.rows != pred.rows
        || masks.cols != pred.cols
        || pred.data.len() != target.data.len()
    {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{}, target {}x{}, masks {}x{}",
            pred.rows, pred.cols, target.rows, target.cols, masks.rows, masks.cols
        )));
    }
    Ok(())
}

/// Quadratic objectness loss averaged over masked pixels and all anchors.
pub fn classification_loss(pred: &PredictionMap, target: &TargetMap, masks: &LossMasks) -> Result<f64> {
    check_shapes(pred, target, masks)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (pix, _) in masks.classification.iter().enumerate().filter(|(_, m)| **m) {
        let base = pix * AnchorLayout::TOTAL_CHANNELS;
        for a in 0..AnchorLayout::N_ANCHORS {
            let ch = base + AnchorLayout::channel(a, AnchorLayout::OBJECTNESS);
            let d = pred.data[ch] - target.data[ch];
            sum += d * d;
        }
        n += AnchorLayout::N_ANCHORS;
    }
    if n == 0 {
        log::warn!("classification loss over an empty mask");
        return Ok(0.0);
    }
    Ok(sum / n as f64)
}

/// Per-anchor regression MSE, summed over anchors.
pub fn regression_loss(pred: &PredictionMap, target: &TargetMap, masks: &LossMasks) -> Result<f64> {
    check_shapes(pred, target, masks)?;
    let mut sums = [0.0; AnchorLayout::N_ANCHORS];
    let mut counts = [0usize; AnchorLayout::N_ANCHORS];
    for (i, _) in masks.regression.iter().enumerate().filter(|(_, m)| **m) {
        let pix = i / AnchorLayout::N_ANCHORS;
        let a = i % AnchorLayout::N_ANCHORS;
        let base = pix * AnchorLayout::TOTAL_CHANNELS + AnchorLayout::channel(a, 1);
        for k in 0..AnchorLayout::REGRESSION_CHANNELS {
            let d = pred.data[base + k] - target.data[base + k];
            sums[a] += d * d;
        }
        counts[a] += 1;
    }
    Ok(sums
        .iter()
        .zip(counts)
        .filter(|(_, c)| *c > 0)
        .map(|(s, c)| s / (c * AnchorLayout::REGRESSION_CHANNELS) as f64)
        .sum())
}

pub fn total_loss(pred: &PredictionMap, target: &TargetMap, masks: &LossMasks) -> Result<f64> {
    Ok(classification_loss(pred, target, masks)? + regression_loss(pred, target, masks)?)
}
