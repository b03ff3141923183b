//! KITTI object-detection inputs: velodyne scans, label_2 files and calibration.

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3};

use super::{data_lines, parse_f64};
use crate::error::{Error, Result};
use crate::evaluation::{FrameGroundTruth, GroundTruth};
use crate::geometry::{normalize_angle, Aabb2D, Box3D, CameraCalibration, ObjectClass, Point3, KITTI_IMAGE_SIZE};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    /// Parsed for completeness; the detector ignores reflectivity.
    pub intensity: Vec<f32>,
    /// Records dropped for non-finite coordinates.
    pub dropped_non_finite: usize,
}

/// Parses a velodyne scan of (x, y, z, intensity) f32 records.
pub fn parse_point_cloud(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % 16 != 0 {
        return Err(Error::Format(format!(
            "point cloud of {} bytes is not a whole number of 16-byte records",
            bytes.len()
        )));
    }
    let mut cloud = PointCloud::default();
    for rec in bytes.chunks_exact(16) {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().expect("4 bytes"));
        let p = Point3::new(f64::from(f(0)), f64::from(f(1)), f64::from(f(2)));
        if !p.is_finite() {
            cloud.dropped_non_finite += 1;
            continue;
        }
        cloud.points.push(p);
        cloud.intensity.push(f(3));
    }
    if cloud.dropped_non_finite > 0 {
        log::warn!("dropped {} non-finite points", cloud.dropped_non_finite);
    }
    Ok(cloud)
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    parse_point_cloud(&fs::read(path)?)
}

/// Coordinates are stored as f32.
pub fn encode_point_cloud(points: &[Point3], intensity: Option<&[f32]>) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * 16);
    for (i, p) in points.iter().enumerate() {
        for v in [p.x as f32, p.y as f32, p.z as f32, intensity.map_or(0.0, |s| s[i])] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KittiClass {
    Car,
    Van,
    Truck,
    Pedestrian,
    PersonSitting,
    Cyclist,
    Tram,
    Misc,
    DontCare,
}

impl KittiClass {
    pub const ALL: [KittiClass; 9] = [
        KittiClass::Car,
        KittiClass::Van,
        KittiClass::Truck,
        KittiClass::Pedestrian,
        KittiClass::PersonSitting,
        KittiClass::Cyclist,
        KittiClass::Tram,
        KittiClass::Misc,
        KittiClass::DontCare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KittiClass::Car => "Car",
            KittiClass::Van => "Van",
            KittiClass::Truck => "Truck",
            KittiClass::Pedestrian => "Pedestrian",
            KittiClass::PersonSitting => "Person_sitting",
            KittiClass::Cyclist => "Cyclist",
            KittiClass::Tram => "Tram",
            KittiClass::Misc => "Misc",
            KittiClass::DontCare => "DontCare",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Detector class trained for this label class, if any.
    pub fn detector_class(self) -> Option<ObjectClass> {
        match self {
            KittiClass::Car | KittiClass::Van => Some(ObjectClass::Vehicle),
            KittiClass::Pedestrian | KittiClass::PersonSitting | KittiClass::Cyclist => {
                Some(ObjectClass::VulnerableRoadUser)
            }
            _ => None,
        }
    }
}

impl fmt::Display for KittiClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One label_2 row, in the rectified camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct KittiObject {
    pub class: KittiClass,
    pub truncation: f64,
    /// 0 fully visible .. 3 unknown; -1 for DontCare rows.
    pub occlusion: i8,
    pub alpha: f64,
    pub bbox: Aabb2D,
    /// Height, width, length in meters.
    pub dimensions: [f64; 3],
    /// Bottom center of the box.
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl KittiObject {
    /// The box in the LiDAR frame with yaw counter-clockwise from +x.
    pub fn to_box3d(&self, calib: &CameraCalibration) -> Result<Box3D> {
        let [h, w, l] = self.dimensions;
        let [x, y, z] = self.location;
        let center = calib.rect_to_lidar(&Vector3::new(x, y - h / 2.0, z));
        let (s, c) = self.rotation_y.sin_cos();
        let heading = calib.rect_dir_to_lidar(&Vector3::new(c, 0.0, -s));
        let class = self.class.detector_class().unwrap_or(ObjectClass::Vehicle);
        Box3D::new(center, l, w, h, heading.y.atan2(heading.x), class)
    }

    /// Inverse of [`KittiObject::to_box3d`] for upright boxes; the image box
    /// is the projection of the box when it is visible.
    pub fn from_box3d(b: &Box3D, class: KittiClass, calib: &CameraCalibration) -> Self {
        let c = calib.lidar_to_rect(&b.center);
        let d = calib.lidar_dir_to_rect(&Vector3::new(b.yaw.cos(), b.yaw.sin(), 0.0));
        let rotation_y = normalize_angle((-d.z).atan2(d.x));
        let bbox = crate::geometry::project_box_to_image(b, calib)
            .unwrap_or(Aabb2D { min_u: 0.0, min_v: 0.0, max_u: 0.0, max_v: 0.0 });
        Self {
            class,
            truncation: 0.0,
            occlusion: 0,
            alpha: normalize_angle(rotation_y - c.x.atan2(c.z)),
            bbox,
            dimensions: [b.height, b.width, b.length],
            location: [c.x, c.y + b.height / 2.0, c.z],
            rotation_y,
            score: None,
        }
    }
}

/// Parses label_2 text. Rows have 15 fields, or 16 with a trailing score.
pub fn parse_labels(text: &str) -> Result<Vec<KittiObject>> {
    let mut out = Vec::new();
    for (line, f) in data_lines(text) {
        if f.len() != 15 && f.len() != 16 {
            return Err(Error::parse(line, format!("expected 15 or 16 fields, found {}", f.len())));
        }
        let class = KittiClass::from_name(f[0]).ok_or_else(|| Error::parse(line, format!("unknown class {:?}", f[0])))?;
        let num = |k: usize, what: &str| parse_f64(f[k], line, what);
        let occlusion: i8 = f[2]
            .parse()
            .ok()
            .filter(|o| (-1..=3).contains(o))
            .ok_or_else(|| Error::parse(line, format!("occlusion {:?} not in -1..=3", f[2])))?;
        let bbox = Aabb2D::new(num(4, "bbox")?, num(5, "bbox")?, num(6, "bbox")?, num(7, "bbox")?)
            .map_err(|e| Error::parse(line, e.to_string()))?;
        let dimensions = [num(8, "height")?, num(9, "width")?, num(10, "length")?];
        if class != KittiClass::DontCare && dimensions.iter().any(|d| *d <= 0.0) {
            return Err(Error::parse(line, "non-positive box dimension"));
        }
        out.push(KittiObject {
            class,
            truncation: num(1, "truncation")?,
            occlusion,
            alpha: num(3, "alpha")?,
            bbox,
            dimensions,
            location: [num(11, "x")?, num(12, "y")?, num(13, "z")?],
            rotation_y: num(14, "rotation_y")?,
            score: if f.len() == 16 { Some(num(15, "score")?) } else { None },
        });
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<KittiObject>> {
    parse_labels(&fs::read_to_string(path)?)
}

pub fn serialize_labels(objects: &[KittiObject]) -> String {
    let mut s = String::new();
    for o in objects {
        let b = &o.bbox;
        s.push_str(&format!(
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            o.class,
            o.truncation,
            o.occlusion,
            o.alpha,
            b.min_u,
            b.min_v,
            b.max_u,
            b.max_v,
            o.dimensions[0],
            o.dimensions[1],
            o.dimensions[2],
            o.location[0],
            o.location[1],
            o.location[2],
            o.rotation_y
        ));
        if let Some(score) = o.score {
            s.push_str(&format!(" {score}"));
        }
        s.push('\n');
    }
    s
}

/// Training view of a frame's labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameLabels {
    /// Boxes of classes the detector is trained on.
    pub boxes: Vec<Box3D>,
    pub dontcare: Vec<Aabb2D>,
}

pub fn frame_labels(objects: &[KittiObject], calib: &CameraCalibration) -> Result<FrameLabels> {
    let mut out = FrameLabels::default();
    for o in objects {
        if o.class == KittiClass::DontCare {
            out.dontcare.push(o.bbox);
        } else if o.class.detector_class().is_some() {
            out.boxes.push(o.to_box3d(calib)?);
        }
    }
    Ok(out)
}

pub fn frame_ground_truth(objects: &[KittiObject], calib: &CameraCalibration) -> Result<FrameGroundTruth> {
    let mut out = FrameGroundTruth::default();
    for o in objects {
        if o.class == KittiClass::DontCare {
            out.dontcare.push(o.bbox);
            continue;
        }
        out.objects.push(GroundTruth {
            class: o.class,
            bbox: o.bbox,
            box3d: o.to_box3d(calib)?,
            occlusion: o.occlusion.max(0) as u8,
            truncation: o.truncation,
        });
    }
    Ok(out)
}

/// Parses a KITTI object calib file (P2, R0_rect, Tr_velo_to_cam).
pub fn parse_calib(text: &str) -> Result<CameraCalibration> {
    let mut p2 = None;
    let mut r0 = None;
    let mut tr = None;
    for (i, line) in text.lines().enumerate() {
        let Some((key, rest)) = line.split_once(':') else { continue };
        let key = key.trim();
        let slot = match key {
            "P2" => &mut p2,
            "R0_rect" | "R_rect" => &mut r0,
            "Tr_velo_to_cam" | "Tr_velo_cam" => &mut tr,
            _ => continue,
        };
        let values = rest
            .split_whitespace()
            .map(|v| parse_f64(v, i + 1, key))
            .collect::<Result<Vec<f64>>>()?;
        *slot = Some((i + 1, values));
    }
    let take = |slot: Option<(usize, Vec<f64>)>, key: &str, n: usize| -> Result<Vec<f64>> {
        let (line, v) = slot.ok_or_else(|| Error::Format(format!("calibration lacks {key}")))?;
        if v.len() != n {
            return Err(Error::parse(line, format!("{key} needs {n} values, found {}", v.len())));
        }
        Ok(v)
    };
    let p2 = take(p2, "P2", 12)?;
    let r0 = take(r0, "R0_rect", 9)?;
    let tr = take(tr, "Tr_velo_to_cam", 12)?;
    let mut tr4 = Matrix4::identity();
    for r in 0..3 {
        for c in 0..4 {
            tr4[(r, c)] = tr[r * 4 + c];
        }
    }
    CameraCalibration::new(
        Matrix3x4::from_row_slice(&p2),
        Matrix3::from_row_slice(&r0),
        tr4,
        KITTI_IMAGE_SIZE,
    )
}

pub fn read_calib(path: &Path) -> Result<CameraCalibration> {
    parse_calib(&fs::read_to_string(path)?)
}

pub fn format_calib(calib: &CameraCalibration) -> String {
    let join = |v: Vec<f64>| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    let p: Vec<f64> = (0..3).flat_map(|r| (0..4).map(move |c| (r, c))).map(|(r, c)| calib.projection[(r, c)]).collect();
    let r0: Vec<f64> = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).map(|(r, c)| calib.rectification[(r, c)]).collect();
    let tr: Vec<f64> = (0..3).flat_map(|r| (0..4).map(move |c| (r, c))).map(|(r, c)| calib.lidar_to_camera[(r, c)]).collect();
    format!("P2: {}\nR0_rect: {}\nTr_velo_to_cam: {}\n", join(p), join(r0), join(tr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    /// Rounded KITTI-like calibration with an axis-permutation extrinsic.
    const CALIB: &str = "P0: 700 0 600 0 0 700 180 0 0 0 1 0
P2: 700 0 600 45 0 700 180 0 0 0 1 0
R0_rect: 1 0 0 0 1 0 0 0 1
Tr_velo_to_cam: 0 -1 0 0 0 0 -1 -0.08 1 0 0 -0.27
Tr_imu_to_velo: 1 0 0 0 0 1 0 0 0 0 1 0
";

    #[test]
    fn point_cloud_examples() {
        assert!(parse_point_cloud(&[]).unwrap().points.is_empty());
        assert!(parse_point_cloud(&[0u8; 17]).is_err());
        let mut bytes = Vec::new();
        for v in [1.5f32, -2.0, 0.25, 0.7, 10.0, 20.0, -1.0, 0.1] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let c = parse_point_cloud(&bytes).unwrap();
        assert_eq!(c.points, vec![Point3::new(1.5, -2.0, 0.25), Point3::new(10.0, 20.0, -1.0)]);
        assert_eq!(c.intensity, vec![0.7, 0.1]);
        bytes[0..4].copy_from_slice(&f32::NAN.to_le_bytes());
        let c = parse_point_cloud(&bytes).unwrap();
        assert_eq!((c.points.len(), c.dropped_non_finite), (1, 1));
        assert_eq!(parse_point_cloud(&encode_point_cloud(&c.points, Some(&c.intensity))).unwrap(), {
            let mut d = c.clone();
            d.dropped_non_finite = 0;
            d
        });
    }

    #[test]
    fn car_label_conversion() {
        let calib = parse_calib(CALIB).unwrap();
        let objs = parse_labels("Car 0.00 0 -1.57 600 150 700 250 1.5 1.6 3.9 1.0 1.7 10.0 0.0\n").unwrap();
        let b = objs[0].to_box3d(&calib).unwrap();
        // Camera (x, y - h/2, z) = (1.0, 0.95, 10.0); lidar x = z_cam + 0.27,
        // y = -x_cam, z = -(y_cam + 0.08).
        assert!((b.center.x - 10.27).abs() < 1e-12);
        assert!((b.center.y + 1.0).abs() < 1e-12);
        assert!((b.center.z + 1.03).abs() < 1e-12);
        // rotation_y 0 faces camera +x, i.e. lidar -y.
        assert!((b.yaw + FRAC_PI_2).abs() < 1e-12);
        assert_eq!((b.length, b.width, b.height), (3.9, 1.6, 1.5));
        assert_eq!(b.class, ObjectClass::Vehicle);

        let ry = 0.4;
        let o = KittiObject { rotation_y: ry, ..objs[0].clone() };
        assert!((o.to_box3d(&calib).unwrap().yaw - normalize_angle(-ry - FRAC_PI_2)).abs() < 1e-12);
    }

    #[test]
    fn box_to_label_round_trip() {
        let calib = parse_calib(CALIB).unwrap();
        for yaw in [-3.0, -1.0, 0.0, 0.5, PI] {
            let b = Box3D::new(Point3::new(15.0, 2.0, -0.8), 4.2, 1.7, 1.6, yaw, ObjectClass::Vehicle).unwrap();
            let back = KittiObject::from_box3d(&b, KittiClass::Car, &calib).to_box3d(&calib).unwrap();
            assert!(back.center.distance(&b.center) < 1e-12);
            assert!(normalize_angle(back.yaw - b.yaw).abs() < 1e-12);
        }
    }

    #[test]
    fn labels_parse_and_serialize() {
        assert!(parse_labels("").unwrap().is_empty());
        let text = "Car 0.1 1 -1.5 10 20 110 90 1.5 1.6 3.9 1 1.7 10 0.25\n\
                    DontCare -1 -1 -10 500 150 560 190 -1 -1 -1 -1000 -1000 -1000 -10\n\
                    Pedestrian 0 0 0.2 300 100 330 180 1.8 0.6 0.8 -3 1.6 12 1.1 0.75\n";
        let objs = parse_labels(text).unwrap();
        assert_eq!(objs.len(), 3);
        assert_eq!(objs[1].class, KittiClass::DontCare);
        assert_eq!(objs[2].score, Some(0.75));
        assert_eq!(parse_labels(&serialize_labels(&objs)).unwrap(), objs);

        let calib = parse_calib(CALIB).unwrap();
        let fl = frame_labels(&objs, &calib).unwrap();
        assert_eq!((fl.boxes.len(), fl.dontcare.len()), (2, 1));
        assert_eq!(fl.boxes[1].class, ObjectClass::VulnerableRoadUser);
        let gt = frame_ground_truth(&objs, &calib).unwrap();
        assert_eq!((gt.objects.len(), gt.dontcare.len()), (2, 1));
    }

    #[test]
    fn label_errors_carry_line_numbers() {
        let err = parse_labels("Car 0 0 0 1 2 3 4 1 1 1 0 0 0 0\nCar 0 0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(matches!(parse_labels("Plane 0 0 0 1 2 3 4 1 1 1 0 0 0 0").unwrap_err(), Error::Parse { line: 1, .. }));
        assert!(parse_labels("Car 0 7 0 1 2 3 4 1 1 1 0 0 0 0").is_err());
    }

    #[test]
    fn calib_round_trip_and_errors() {
        let calib = parse_calib(CALIB).unwrap();
        assert_eq!(parse_calib(&format_calib(&calib)).unwrap(), calib);
        assert!(parse_calib("P2: 1 2 3\nR0_rect: 1 0 0 0 1 0 0 0 1\n").is_err());
        let skew = CALIB.replace("Tr_velo_to_cam: 0 -1 0", "Tr_velo_to_cam: 0 -2 0");
        assert!(parse_calib(&skew).is_err());
    }
}
