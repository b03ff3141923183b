use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};

use super::{Box3D, Point3};
use crate::error::{Error, Result};

/// Corners closer to the image plane than this (meters, rectified camera z)
/// are clipped before projection.
const NEAR_PLANE: f64 = 0.1;

/// Default KITTI color-camera resolution.
pub const KITTI_IMAGE_SIZE: (f64, f64) = (1242.0, 375.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb2D {
    pub min_u: f64,
    pub min_v: f64,
    pub max_u: f64,
    pub max_v: f64,
}

impl Aabb2D {
    pub fn new(min_u: f64, min_v: f64, max_u: f64, max_v: f64) -> Result<Self> {
        if !(min_u <= max_u && min_v <= max_v) {
            return Err(Error::InvalidInput(format!(
                "aabb min > max: ({min_u}, {min_v}) .. ({max_u}, {max_v})"
            )));
        }
        Ok(Self {
            min_u,
            min_v,
            max_u,
            max_v,
        })
    }

    pub fn width(&self) -> f64 {
        self.max_u - self.min_u
    }

    pub fn height(&self) -> f64 {
        self.max_v - self.min_v
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.min_u && u <= self.max_u && v >= self.min_v && v <= self.max_v
    }

    pub fn intersection_area(&self, other: &Aabb2D) -> f64 {
        let w = self.max_u.min(other.max_u) - self.min_u.max(other.min_u);
        let h = self.max_v.min(other.max_v) - self.min_v.max(other.min_v);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

pub fn iou_2d(a: &Aabb2D, b: &Aabb2D) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Camera model of one frame: LiDAR -> reference camera -> rectified camera -> pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraCalibration {
    pub projection: Matrix3x4<f64>,
    pub rectification: Matrix3<f64>,
    pub lidar_to_camera: Matrix4<f64>,
    pub image_width: f64,
    pub image_height: f64,
}

impl CameraCalibration {
    pub fn new(
        projection: Matrix3x4<f64>,
        rectification: Matrix3<f64>,
        lidar_to_camera: Matrix4<f64>,
        image_size: (f64, f64),
    ) -> Result<Self> {
        let calib = Self {
            projection,
            rectification,
            lidar_to_camera,
            image_width: image_size.0,
            image_height: image_size.1,
        };
        calib.validate()?;
        Ok(calib)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.lidar_to_camera.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        // KITTI stores the extrinsics with ~7 significant digits
        if ortho > 1e-4 || (r.determinant() - 1.0).abs() > 1e-4 {
            return Err(Error::InvalidInput(
                "lidar_to_camera is not a rigid transform".into(),
            ));
        }
        let bottom = self.lidar_to_camera.fixed_view::<1, 4>(3, 0);
        if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
            return Err(Error::InvalidInput(
                "lidar_to_camera last row must be [0 0 0 1]".into(),
            ));
        }
        if self.rectification.try_inverse().is_none() {
            return Err(Error::InvalidInput("rectification is singular".into()));
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return Err(Error::InvalidInput("image size must be positive".into()));
        }
        Ok(())
    }

    /// LiDAR frame -> rectified camera frame.
    pub fn lidar_to_rect(&self, p: &Point3) -> Vector3<f64> {
        let cam = self.lidar_to_camera * Vector4::new(p.x, p.y, p.z, 1.0);
        self.rectification * Vector3::new(cam.x, cam.y, cam.z)
    }

    /// Rectified camera frame -> LiDAR frame.
    pub fn rect_to_lidar(&self, p: &Vector3<f64>) -> Point3 {
        let r0_inv = self
            .rectification
            .try_inverse()
            .expect("validated rectification");
        let cam = r0_inv * p;
        let rot = self.lidar_to_camera.fixed_view::<3, 3>(0, 0).into_owned();
        let t = self.lidar_to_camera.fixed_view::<3, 1>(0, 3).into_owned();
        let v = rot.transpose() * (cam - t);
        Point3::new(v.x, v.y, v.z)
    }

    /// Rotates a direction vector from the LiDAR frame into the rectified camera frame.
    pub fn lidar_dir_to_rect(&self, d: &Vector3<f64>) -> Vector3<f64> {
        let rot = self.lidar_to_camera.fixed_view::<3, 3>(0, 0).into_owned();
        self.rectification * (rot * d)
    }

    /// Rotates a direction vector from the rectified camera frame into the LiDAR frame.
    pub fn rect_dir_to_lidar(&self, d: &Vector3<f64>) -> Vector3<f64> {
        let r0_inv = self
            .rectification
            .try_inverse()
            .expect("validated rectification");
        let rot = self.lidar_to_camera.fixed_view::<3, 3>(0, 0).into_owned();
        rot.transpose() * (r0_inv * d)
    }

    /// Pixel coordinates of a rectified-frame point.
    pub fn project_rect(&self, p: &Vector3<f64>) -> (f64, f64) {
        let h = self.projection * Vector4::new(p.x, p.y, p.z, 1.0);
        (h.x / h.z, h.y / h.z)
    }

    /// Projects a LiDAR-frame point; `None` when it is behind the near plane.
    pub fn project_point(&self, p: &Point3) -> Option<(f64, f64)> {
        let rect = self.lidar_to_rect(p);
        if rect.z < NEAR_PLANE {
            return None;
        }
        Some(self.project_rect(&rect))
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u <= self.image_width && v >= 0.0 && v <= self.image_height
    }
}

const BOX_EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Image-plane hull of a box, clipped to the image. `None` when no part of the
/// box lies in front of the camera inside the image.
pub fn project_box_to_image(b: &Box3D, calib: &CameraCalibration) -> Option<Aabb2D> {
    let rect: Vec<Vector3<f64>> = b.corners().iter().map(|c| calib.lidar_to_rect(c)).collect();
    if rect.iter().all(|p| p.z < NEAR_PLANE) {
        return None;
    }

    let mut visible: Vec<Vector3<f64>> = rect.iter().filter(|p| p.z >= NEAR_PLANE).copied().collect();
    for &(i, j) in BOX_EDGES.iter() {
        let (a, c) = (rect[i], rect[j]);
        if (a.z < NEAR_PLANE) != (c.z < NEAR_PLANE) {
            let t = (NEAR_PLANE - a.z) / (c.z - a.z);
            visible.push(a + (c - a) * t);
        }
    }

    let mut min_u = f64::INFINITY;
    let mut min_v = f64::INFINITY;
    let mut max_u = f64::NEG_INFINITY;
    let mut max_v = f64::NEG_INFINITY;
    for p in &visible {
        let (u, v) = calib.project_rect(p);
        min_u = min_u.min(u);
        min_v = min_v.min(v);
        max_u = max_u.max(u);
        max_v = max_v.max(v);
    }
    let min_u = min_u.max(0.0);
    let min_v = min_v.max(0.0);
    let max_u = max_u.min(calib.image_width);
    let max_v = max_v.min(calib.image_height);
    if min_u > max_u || min_v > max_v {
        return None;
    }
    Some(Aabb2D {
        min_u,
        min_v,
        max_u,
        max_v,
    })
}
