//! Line-oriented text formats: detections, reference tracks and reports.
//!
//! Floats are written with Rust's shortest round-trip formatting, so
//! parsing a written file reproduces the values exactly.

use super::{data_lines, parse_f64};
use crate::error::{Error, Result};
use crate::evaluation::{ApRow, ReferenceReport, TrackPose};
use crate::geometry::{Box3D, ObjectClass, Point3};
use crate::sensor::ChannelPlotRow;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub frame_id: String,
    pub score: f64,
    pub bbox: Box3D,
}

/// Parses `class x y z l w h yaw` starting at `f[0]`.
pub(crate) fn parse_box_fields(f: &[&str], line: usize) -> Result<Box3D> {
    let class = ObjectClass::from_name(f[0]).ok_or_else(|| Error::parse(line, format!("unknown class {:?}", f[0])))?;
    let v = f[1..8]
        .iter()
        .map(|s| parse_f64(s, line, "box"))
        .collect::<Result<Vec<f64>>>()?;
    Box3D::new(Point3::new(v[0], v[1], v[2]), v[3], v[4], v[5], v[6], class).map_err(|e| Error::parse(line, e.to_string()))
}

pub(crate) fn format_box_fields(b: &Box3D) -> String {
    format!(
        "{} {} {} {} {} {} {} {}",
        b.class, b.center.x, b.center.y, b.center.z, b.length, b.width, b.height, b.yaw
    )
}

/// `frame_id class score x y z l w h yaw` per line.
pub fn format_detections(dets: &[DetectionRecord]) -> String {
    dets.iter()
        .map(|d| {
            let b = &d.bbox;
            format!(
                "{} {} {} {} {} {} {} {} {} {}\n",
                d.frame_id, b.class, d.score, b.center.x, b.center.y, b.center.z, b.length, b.width, b.height, b.yaw
            )
        })
        .collect()
}

pub fn parse_detections(text: &str) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for (line, f) in data_lines(text) {
        if f.len() != 10 {
            return Err(Error::parse(line, format!("expected 10 fields, found {}", f.len())));
        }
        let score = parse_f64(f[2], line, "score")?;
        if score < 0.0 {
            return Err(Error::parse(line, "negative score"));
        }
        let mut fields = vec![f[1]];
        fields.extend_from_slice(&f[3..10]);
        out.push(DetectionRecord {
            frame_id: f[0].to_string(),
            score,
            bbox: parse_box_fields(&fields, line)?,
        });
    }
    Ok(out)
}

/// `frame_id x y z l w h yaw` per line; poses are vehicles.
pub fn parse_track(text: &str) -> Result<Vec<TrackPose>> {
    let mut out = Vec::new();
    for (line, f) in data_lines(text) {
        if f.len() != 8 {
            return Err(Error::parse(line, format!("expected 8 fields, found {}", f.len())));
        }
        let mut fields = vec![ObjectClass::Vehicle.name()];
        fields.extend_from_slice(&f[1..8]);
        out.push(TrackPose {
            frame_id: f[0].to_string(),
            pose: parse_box_fields(&fields, line)?,
        });
    }
    Ok(out)
}

pub fn format_track(poses: &[TrackPose]) -> String {
    poses
        .iter()
        .map(|p| {
            let b = &p.pose;
            format!(
                "{} {} {} {} {} {} {} {}\n",
                p.frame_id, b.center.x, b.center.y, b.center.z, b.length, b.width, b.height, b.yaw
            )
        })
        .collect()
}

pub fn format_ap_report(rows: &[ApRow]) -> String {
    let mut s = String::from("space,class,difficulty,ap,labels,true_positives,false_positives\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.6},{},{},{}\n",
            r.space.name(),
            r.class.name(),
            r.difficulty,
            r.result.ap,
            r.result.n_labels,
            r.result.n_true_positives,
            r.result.n_false_positives
        ));
    }
    s
}

pub fn format_pr_curves(rows: &[ApRow]) -> String {
    let mut s = String::from("space,class,difficulty,threshold,recall,precision\n");
    for r in rows {
        for p in &r.result.curve {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.space.name(),
                r.class.name(),
                r.difficulty,
                p.threshold,
                p.recall,
                p.precision
            ));
        }
    }
    s
}

pub const REFERENCE_REPORT_ROWS: [&str; 9] = [
    "evaluation frames",
    "detection ratio [%]",
    "radial position error (RMSE) [m]",
    "tangential position error (RMSE) [m]",
    "vertical position error (RMSE) [m]",
    "orientation error (RMSE) [deg]",
    "length error (RMSE) [m]",
    "width error (RMSE) [m]",
    "height error (RMSE) [m]",
];

/// One row per metric, one column per distance bin; absent values are empty.
pub fn format_reference_report(report: &ReferenceReport) -> String {
    let mut s = String::from("metric");
    for l in &report.labels {
        s.push_str(&format!(",{l} m"));
    }
    s.push('\n');
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
    for (k, name) in REFERENCE_REPORT_ROWS.iter().enumerate() {
        s.push_str(name);
        for bin in &report.bins {
            let cell = match bin {
                None => String::new(),
                Some(b) => match k {
                    0 => b.frames.to_string(),
                    1 => format!("{:.2}", 100.0 * b.detection_ratio),
                    2 => opt(b.radial),
                    3 => opt(b.tangential),
                    4 => opt(b.vertical),
                    5 => opt(b.orientation.map(f64::to_degrees)),
                    6 => opt(b.length),
                    7 => opt(b.width),
                    _ => opt(b.height),
                },
            };
            s.push(',');
            s.push_str(&cell);
        }
        s.push('\n');
    }
    s
}

pub fn format_channel_plot(rows: &[ChannelPlotRow]) -> String {
    let mut s = String::from("sensor,channel,elevation_deg,selected\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.6},{}\n", r.sensor, r.channel, r.elevation_deg, u8::from(r.selected)));
    }
    s
}
