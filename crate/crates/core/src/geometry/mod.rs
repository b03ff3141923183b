//! Oriented boxes, footprint polygons and the overlap measures used for
//! target assignment, suppression and evaluation.
//!
//! Frame convention: x forward, y left, z up. Yaw is counter-clockwise about
//! +z with 0 facing +x. A box's `length` runs along its heading and `width`
//! across it; `center` is the volumetric center.

mod camera;
mod polygon;

use std::f64::consts::{PI, TAU};
use std::fmt;

pub use camera::{iou_2d, project_box_to_image, Aabb2D, CameraCalibration, KITTI_IMAGE_SIZE};
pub use polygon::{clip_convex, polygon_area, MERGE_EPS};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn horizontal_norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Horizontal bearing from the sensor origin.
    pub fn azimuth(&self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn elevation(&self) -> f64 {
        self.z.atan2(self.horizontal_norm())
    }

    pub fn sub(&self, other: &Point3) -> Point3 {
        Point3::new(self.x - other.x, self.y - other.y, self.z - other.z)
    }

    pub fn add(&self, other: &Point3) -> Point3 {
        Point3::new(self.x + other.x, self.y + other.y, self.z + other.z)
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        self.sub(other).norm()
    }

    /// Rotates about the z axis through the origin.
    pub fn rotate_z(&self, angle: f64) -> Point3 {
        let (s, c) = angle.sin_cos();
        Point3::new(c * self.x - s * self.y, s * self.x + c * self.y, self.z)
    }
}

/// The two detector classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectClass {
    Vehicle,
    VulnerableRoadUser,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 2] = [ObjectClass::Vehicle, ObjectClass::VulnerableRoadUser];

    pub fn index(self) -> usize {
        match self {
            ObjectClass::Vehicle => 0,
            ObjectClass::VulnerableRoadUser => 1,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        match index {
            0 => Some(ObjectClass::Vehicle),
            1 => Some(ObjectClass::VulnerableRoadUser),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Vehicle => "vehicle",
            ObjectClass::VulnerableRoadUser => "vulnerable_road_user",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "vehicle" | "car" => Some(ObjectClass::Vehicle),
            "vulnerable_road_user" | "vru" | "pedestrian" => Some(ObjectClass::VulnerableRoadUser),
            _ => None,
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
pub(crate) fn camera_test_calib() -> CameraCalibration {
    camera::tests::simple_calib(700.0, 620.0, 187.0, 1242.0, 375.0)
}

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(angle: f64) -> f64 {
    let r = angle.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Upright oriented 3D box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: Point3,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub yaw: f64,
    pub class: ObjectClass,
}

impl Box3D {
    pub fn new(
        center: Point3,
        length: f64,
        width: f64,
        height: f64,
        yaw: f64,
        class: ObjectClass,
    ) -> Result<Self> {
        let b = Box3D {
            center,
            length,
            width,
            height,
            yaw: normalize_angle(yaw),
            class,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.center.is_finite() || !self.yaw.is_finite() {
            return Err(Error::NonFinite(format!("box pose {:?}", self)));
        }
        for (name, v) in [
            ("length", self.length),
            ("width", self.width),
            ("height", self.height),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::DegenerateBox(format!("{name} = {v}")));
            }
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.length * self.width * self.height
    }

    pub fn bottom(&self) -> f64 {
        self.center.z - 0.5 * self.height
    }

    pub fn top(&self) -> f64 {
        self.center.z + 0.5 * self.height
    }

    /// Expresses a world point in the box frame (origin at the center, x along the heading).
    pub fn to_local(&self, p: &Point3) -> Point3 {
        p.sub(&self.center).rotate_z(-self.yaw)
    }

    /// Containment test with a symmetric slack of `eps` meters on every face.
    pub fn contains(&self, p: &Point3, eps: f64) -> bool {
        let l = self.to_local(p);
        l.x.abs() <= 0.5 * self.length + eps
            && l.y.abs() <= 0.5 * self.width + eps
            && l.z.abs() <= 0.5 * self.height + eps
    }

    pub fn corners(&self) -> [Point3; 8] {
        let f = bev_corners(self);
        let (lo, hi) = (self.bottom(), self.top());
        [
            Point3::new(f[0][0], f[0][1], lo),
            Point3::new(f[1][0], f[1][1], lo),
            Point3::new(f[2][0], f[2][1], lo),
            Point3::new(f[3][0], f[3][1], lo),
            Point3::new(f[0][0], f[0][1], hi),
            Point3::new(f[1][0], f[1][1], hi),
            Point3::new(f[2][0], f[2][1], hi),
            Point3::new(f[3][0], f[3][1], hi),
        ]
    }
}

/// Footprint corners, counter-clockwise, starting at the front-right corner.
pub fn bev_corners(b: &Box3D) -> [[f64; 2]; 4] {
    let (s, c) = b.yaw.sin_cos();
    let hl = 0.5 * b.length;
    let hw = 0.5 * b.width;
    let local = [[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]];
    local.map(|[u, v]| [b.center.x + c * u - s * v, b.center.y + s * u + c * v])
}

fn footprint_area(b: &Box3D) -> Result<f64> {
    let area = b.length * b.width;
    if !(area.is_finite() && area > MERGE_EPS * MERGE_EPS) || !b.center.is_finite() {
        return Err(Error::DegenerateBox(format!(
            "footprint {}x{} has no area",
            b.length, b.width
        )));
    }
    Ok(area)
}

// Total order used to make the clipping direction independent of argument order.
fn canonical_order<'a>(a: &'a Box3D, b: &'a Box3D) -> (&'a Box3D, &'a Box3D) {
    let key = |x: &Box3D| [x.center.x, x.center.y, x.length, x.width, x.yaw];
    let (ka, kb) = (key(a), key(b));
    for (u, v) in ka.iter().zip(kb.iter()) {
        match u.total_cmp(v) {
            std::cmp::Ordering::Less => return (a, b),
            std::cmp::Ordering::Greater => return (b, a),
            std::cmp::Ordering::Equal => {}
        }
    }
    (a, b)
}

/// Area of the intersection of the two footprints.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let reach = 0.5 * (a.length.hypot(a.width) + b.length.hypot(b.width));
    let dx = a.center.x - b.center.x;
    let dy = a.center.y - b.center.y;
    if dx * dx + dy * dy > reach * reach {
        return 0.0;
    }
    let (first, second) = canonical_order(a, b);
    let clipped = clip_convex(&bev_corners(first), &bev_corners(second));
    polygon_area(&clipped).max(0.0)
}

pub fn iou_bev(a: &Box3D, b: &Box3D) -> Result<f64> {
    let area_a = footprint_area(a)?;
    let area_b = footprint_area(b)?;
    let inter = bev_intersection_area(a, b);
    let union = area_a + area_b - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Volumetric IoU of two upright boxes.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> Result<f64> {
    let area_a = footprint_area(a)?;
    let area_b = footprint_area(b)?;
    for h in [a.height, b.height] {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::DegenerateBox(format!("height {h}")));
        }
    }
    let overlap_z = (a.top().min(b.top()) - a.bottom().max(b.bottom())).max(0.0);
    if overlap_z == 0.0 {
        return Ok(0.0);
    }
    let inter = bev_intersection_area(a, b) * overlap_z;
    let union = area_a * a.height + area_b * b.height - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn unit(x: f64, y: f64, z: f64, yaw: f64) -> Box3D {
        Box3D::new(Point3::new(x, y, z), 1.0, 1.0, 1.0, yaw, ObjectClass::Vehicle).unwrap()
    }

    fn sorted(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
        pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
        pts
    }

    #[test]
    fn normalize_angle_range() {
        assert_eq!(normalize_angle(PI), PI);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-15);
        assert!((normalize_angle(3.0 * PI / 2.0) + FRAC_PI_2).abs() < 1e-15);
        assert_eq!(normalize_angle(0.25), 0.25);
    }

    #[test]
    fn rejects_non_positive_size() {
        let r = Box3D::new(Point3::ORIGIN, 0.0, 1.0, 1.0, 0.0, ObjectClass::Vehicle);
        assert!(matches!(r, Err(Error::DegenerateBox(_))));
        let r = Box3D::new(Point3::ORIGIN, 1.0, -1.0, 1.0, 0.0, ObjectClass::Vehicle);
        assert!(r.is_err());
    }

    #[test]
    fn corners_identity() {
        let c = bev_corners(&unit(0.0, 0.0, 0.0, 0.0));
        assert_eq!(c, [[0.5, -0.5], [0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5]]);
        assert!(polygon_area(&c) > 0.0, "counter-clockwise");
    }

    #[test]
    fn corners_quarter_turn_same_set() {
        let a = bev_corners(&unit(0.0, 0.0, 0.0, 0.0));
        let b = bev_corners(&unit(0.0, 0.0, 0.0, FRAC_PI_2));
        let round = |v: [[f64; 2]; 4]| {
            sorted(
                v.iter()
                    .map(|p| [(p[0] * 1e9).round() / 1e9, (p[1] * 1e9).round() / 1e9])
                    .collect(),
            )
        };
        assert_eq!(round(a), round(b));
        // labeling rotates: front-right of the turned box is the old back-right
        assert!((b[0][0] - 0.5).abs() < 1e-12 && (b[0][1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn corners_rotated_rectangle_hand_computed() {
        let b = Box3D::new(
            Point3::new(10.0, 0.0, 0.0),
            4.0,
            2.0,
            1.5,
            FRAC_PI_4,
            ObjectClass::Vehicle,
        )
        .unwrap();
        let c = bev_corners(&b);
        // R(pi/4) applied to (2,-1),(2,1),(-2,1),(-2,-1)
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let expected = [
            [10.0 + r * (2.0 + 1.0), r * (2.0 - 1.0)],
            [10.0 + r * (2.0 - 1.0), r * (2.0 + 1.0)],
            [10.0 + r * (-2.0 - 1.0), r * (-2.0 + 1.0)],
            [10.0 + r * (-2.0 + 1.0), r * (-2.0 - 1.0)],
        ];
        for (got, want) in c.iter().zip(expected.iter()) {
            assert!((got[0] - want[0]).abs() < 1e-12, "{got:?} vs {want:?}");
            assert!((got[1] - want[1]).abs() < 1e-12, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn iou_bev_basic_cases() {
        let a = unit(0.0, 0.0, 0.0, 0.3);
        assert!((iou_bev(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let far = unit(3.0, 0.0, 0.0, 1.0);
        assert_eq!(iou_bev(&a, &far).unwrap(), 0.0);
        let b = unit(0.0, 0.0, 0.0, 0.0);
        let c = unit(0.5, 0.0, 0.0, 0.0);
        assert!((iou_bev(&b, &c).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_bev_rotated_square_in_square() {
        // a unit square rotated by 45 deg inside a 2x2 square: inter = 1, union = 4
        let big = Box3D::new(Point3::ORIGIN, 2.0, 2.0, 1.0, 0.0, ObjectClass::Vehicle).unwrap();
        let small = unit(0.0, 0.0, 0.0, FRAC_PI_4);
        assert!((iou_bev(&big, &small).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn iou_bev_degenerate_is_error() {
        let a = unit(0.0, 0.0, 0.0, 0.0);
        let mut d = a;
        d.width = 0.0;
        assert!(matches!(iou_bev(&a, &d), Err(Error::DegenerateBox(_))));
        assert!(iou_3d(&d, &a).is_err());
    }

    #[test]
    fn iou_3d_cases() {
        let a = unit(0.0, 0.0, 0.0, 0.0);
        assert!((iou_3d(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let up = unit(0.0, 0.0, 1.0, 0.0);
        assert_eq!(iou_3d(&a, &up).unwrap(), 0.0);
        let half = unit(0.0, 0.0, 0.5, 0.0);
        assert!((iou_3d(&a, &half).unwrap() - 0.5 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn contains_uses_box_frame() {
        let b = Box3D::new(
            Point3::new(5.0, 5.0, 0.0),
            4.0,
            1.0,
            2.0,
            FRAC_PI_2,
            ObjectClass::Vehicle,
        )
        .unwrap();
        assert!(b.contains(&Point3::new(5.0, 6.9, 0.0), 0.0));
        assert!(!b.contains(&Point3::new(6.9, 5.0, 0.0), 0.0));
        assert!(b.contains(&Point3::new(5.5, 7.0, 1.0), 1e-9));
    }
}
