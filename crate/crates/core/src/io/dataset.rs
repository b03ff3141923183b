//! KITTI object-detection directory layout: `velodyne/`, `label_2/` and
//! `calib/` with one `<frame_id>.<ext>` file per frame.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::kitti::{frame_ground_truth, parse_calib, parse_labels, parse_point_cloud, KittiObject, PointCloud};
use super::text::DetectionRecord;
use crate::error::{Error, Result};
use crate::evaluation::{EvalDetection, EvalFrame};
use crate::geometry::{project_box_to_image, CameraCalibration};

#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub frame_id: String,
    pub cloud: Option<PointCloud>,
    pub labels: Vec<KittiObject>,
    pub calib: CameraCalibration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KittiDataset {
    pub root: PathBuf,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))
}

impl KittiDataset {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn label_path(&self, frame_id: &str) -> PathBuf {
        self.root.join("label_2").join(format!("{frame_id}.txt"))
    }

    pub fn calib_path(&self, frame_id: &str) -> PathBuf {
        self.root.join("calib").join(format!("{frame_id}.txt"))
    }

    pub fn cloud_path(&self, frame_id: &str) -> PathBuf {
        self.root.join("velodyne").join(format!("{frame_id}.bin"))
    }

    /// Frame ids of all label files, sorted.
    pub fn frame_ids(&self) -> Result<Vec<String>> {
        let dir = self.root.join("label_2");
        let mut ids = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::from(e).in_file(&dir))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "txt") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn labels(&self, frame_id: &str) -> Result<Vec<KittiObject>> {
        let path = self.label_path(frame_id);
        parse_labels(&read_text(&path)?).map_err(|e| e.in_file(&path))
    }

    pub fn calib(&self, frame_id: &str) -> Result<CameraCalibration> {
        let path = self.calib_path(frame_id);
        parse_calib(&read_text(&path)?).map_err(|e| e.in_file(&path))
    }

    pub fn cloud(&self, frame_id: &str) -> Result<PointCloud> {
        let path = self.cloud_path(frame_id);
        let bytes = fs::read(&path).map_err(|e| Error::from(e).in_file(&path))?;
        parse_point_cloud(&bytes).map_err(|e| e.in_file(&path))
    }

    /// Labels and calibration; the point cloud only when `with_cloud`.
    pub fn frame(&self, frame_id: &str, with_cloud: bool) -> Result<FrameRecord> {
        Ok(FrameRecord {
            frame_id: frame_id.to_string(),
            cloud: if with_cloud { Some(self.cloud(frame_id)?) } else { None },
            labels: self.labels(frame_id)?,
            calib: self.calib(frame_id)?,
        })
    }
}

/// Pairs detections with each frame's ground truth. Detections project into
/// the image through the frame's calibration; those naming a frame outside
/// `frame_ids` are an error.
pub fn eval_frames(dataset: &KittiDataset, frame_ids: &[String], detections: &[DetectionRecord]) -> Result<Vec<EvalFrame>> {
    let index: HashMap<&str, usize> = frame_ids.iter().enumerate().map(|(i, f)| (f.as_str(), i)).collect();
    let mut per_frame: Vec<Vec<&DetectionRecord>> = vec![Vec::new(); frame_ids.len()];
    for d in detections {
        let &i = index
            .get(d.frame_id.as_str())
            .ok_or_else(|| Error::InvalidInput(format!("detection for unknown frame {}", d.frame_id)))?;
        per_frame[i].push(d);
    }
    frame_ids
        .iter()
        .zip(per_frame)
        .map(|(id, dets)| {
            let calib = dataset.calib(id)?;
            let ground_truth = frame_ground_truth(&dataset.labels(id)?, &calib).map_err(|e| e.in_file(dataset.label_path(id)))?;
            Ok(EvalFrame {
                detections: dets
                    .iter()
                    .map(|d| EvalDetection {
                        score: d.score,
                        box3d: d.bbox,
                        bbox: project_box_to_image(&d.bbox, &calib),
                    })
                    .collect(),
                detection_classes: dets.iter().map(|d| d.bbox.class).collect(),
                ground_truth,
            })
        })
        .collect()
}
