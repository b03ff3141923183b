//! KITTI-style average precision and the reference-vehicle error report.

use std::cmp::Ordering;
use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{iou_2d, iou_3d, iou_bev, normalize_angle, Aabb2D, Box3D, ObjectClass, Point3};
use crate::io::kitti::KittiClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifficultyRule {
    /// Pixels; inclusive.
    pub min_bbox_height: f64,
    /// KITTI occlusion level 0..=3; inclusive.
    pub max_occlusion: u8,
    /// Fraction; inclusive.
    pub max_truncation: f64,
}

impl DifficultyRule {
    pub fn admits(&self, bbox_height: f64, occlusion: u8, truncation: f64) -> bool {
        bbox_height >= self.min_bbox_height && occlusion <= self.max_occlusion && truncation <= self.max_truncation
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifficultyRules {
    pub easy: DifficultyRule,
    pub moderate: DifficultyRule,
    pub hard: DifficultyRule,
}

impl Default for DifficultyRules {
    /// Public KITTI devkit thresholds.
    fn default() -> Self {
        Self {
            easy: DifficultyRule {
                min_bbox_height: 40.0,
                max_occlusion: 0,
                max_truncation: 0.15,
            },
            moderate: DifficultyRule {
                min_bbox_height: 25.0,
                max_occlusion: 1,
                max_truncation: 0.30,
            },
            hard: DifficultyRule {
                min_bbox_height: 25.0,
                max_occlusion: 2,
                max_truncation: 0.50,
            },
        }
    }
}

impl DifficultyRules {
    pub fn rule(&self, d: Difficulty) -> &DifficultyRule {
        match d {
            Difficulty::Easy => &self.easy,
            Difficulty::Moderate => &self.moderate,
            Difficulty::Hard => &self.hard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (e, m, h) = (&self.easy, &self.moderate, &self.hard);
        let monotone = e.min_bbox_height >= m.min_bbox_height
            && m.min_bbox_height >= h.min_bbox_height
            && e.max_occlusion <= m.max_occlusion
            && m.max_occlusion <= h.max_occlusion
            && e.max_truncation <= m.max_truncation
            && m.max_truncation <= h.max_truncation;
        if !monotone {
            return Err(Error::InvalidInput("difficulty thresholds must loosen from easy to hard".into()));
        }
        Ok(())
    }
}

/// Easiest difficulty whose thresholds the label meets, `None` if it meets none.
pub fn assign_difficulty(bbox_height: f64, occlusion: u8, truncation: f64, rules: &DifficultyRules) -> Option<Difficulty> {
    Difficulty::ALL
        .into_iter()
        .find(|&d| rules.rule(d).admits(bbox_height, occlusion, truncation))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EvalClass {
    Car,
    Pedestrian,
    Cyclist,
}

impl EvalClass {
    pub const ALL: [EvalClass; 3] = [EvalClass::Car, EvalClass::Pedestrian, EvalClass::Cyclist];

    pub fn name(self) -> &'static str {
        match self {
            EvalClass::Car => "car",
            EvalClass::Pedestrian => "pedestrian",
            EvalClass::Cyclist => "cyclist",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Detector class whose detections are evaluated against this class.
    pub fn detection_class(self) -> ObjectClass {
        match self {
            EvalClass::Car => ObjectClass::Vehicle,
            _ => ObjectClass::VulnerableRoadUser,
        }
    }

    pub fn label_class(self) -> KittiClass {
        match self {
            EvalClass::Car => KittiClass::Car,
            EvalClass::Pedestrian => KittiClass::Pedestrian,
            EvalClass::Cyclist => KittiClass::Cyclist,
        }
    }

    /// Label classes that are neither required nor penalized.
    pub fn neighbor(self) -> Option<KittiClass> {
        match self {
            EvalClass::Car => Some(KittiClass::Van),
            EvalClass::Pedestrian => Some(KittiClass::PersonSitting),
            EvalClass::Cyclist => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EvalSpace {
    Image,
    Bev,
    ThreeD,
}

impl EvalSpace {
    pub const ALL: [EvalSpace; 3] = [EvalSpace::Image, EvalSpace::Bev, EvalSpace::ThreeD];

    pub fn name(self) -> &'static str {
        match self {
            EvalSpace::Image => "2d",
            EvalSpace::Bev => "bev",
            EvalSpace::ThreeD => "3d",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub iou_vehicle: f64,
    pub iou_other: f64,
    /// Recall sample count of the interpolated AP (11 or 40).
    pub n_points: usize,
    pub rules: DifficultyRules,
    /// Unmatched detections with at least this fraction of their image box
    /// inside a don't-care region are ignored.
    pub dontcare_overlap: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_vehicle: 0.7,
            iou_other: 0.5,
            n_points: 11,
            rules: DifficultyRules::default(),
            dontcare_overlap: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn iou_threshold(&self, class: EvalClass) -> f64 {
        match class {
            EvalClass::Car => self.iou_vehicle,
            _ => self.iou_other,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in [self.iou_vehicle, self.iou_other] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::InvalidInput(format!("IoU threshold {t} outside (0, 1]")));
            }
        }
        if self.n_points < 2 {
            return Err(Error::InvalidInput("need at least two recall samples".into()));
        }
        self.rules.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub class: KittiClass,
    pub bbox: Aabb2D,
    pub box3d: Box3D,
    pub occlusion: u8,
    pub truncation: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameGroundTruth {
    pub objects: Vec<GroundTruth>,
    pub dontcare: Vec<Aabb2D>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalDetection {
    pub score: f64,
    pub box3d: Box3D,
    /// Image box; detections without one cannot be matched in the image space.
    pub bbox: Option<Aabb2D>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectionOutcome {
    TruePositive,
    FalsePositive,
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelOutcome {
    Found,
    Missed,
    Ignored,
    /// Label of an unrelated class.
    NotEvaluated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatches {
    /// One entry per input detection; detections of other classes are `Ignored`.
    pub detections: Vec<DetectionOutcome>,
    pub scores: Vec<f64>,
    pub labels: Vec<LabelOutcome>,
}

impl FrameMatches {
    pub fn n_required(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, LabelOutcome::Found | LabelOutcome::Missed))
            .count()
    }

    pub fn scored(&self) -> impl Iterator<Item = (f64, bool)> + '_ {
        self.detections
            .iter()
            .zip(&self.scores)
            .filter_map(|(o, s)| match o {
                DetectionOutcome::TruePositive => Some((*s, true)),
                DetectionOutcome::FalsePositive => Some((*s, false)),
                DetectionOutcome::Ignored => None,
            })
    }
}

fn overlap(det: &EvalDetection, gt: &GroundTruth, space: EvalSpace) -> Option<f64> {
    match space {
        EvalSpace::Image => det.bbox.map(|b| iou_2d(&b, &gt.bbox)),
        EvalSpace::Bev => iou_bev(&det.box3d, &gt.box3d).ok(),
        EvalSpace::ThreeD => iou_3d(&det.box3d, &gt.box3d).ok(),
    }
}

fn box_key(b: &Box3D) -> [f64; 7] {
    [b.center.x, b.center.y, b.center.z, b.yaw, b.length, b.width, b.height]
}

fn cmp_keys(a: &[f64; 7], b: &[f64; 7]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Greedy single-assignment matching for one frame, class and difficulty.
///
/// Detections are visited in descending score order and take the unmatched
/// label with the highest overlap strictly above the class threshold. Labels
/// of the neighbor class or outside the difficulty are matchable but make the
/// detection neither a true nor a false positive.
pub fn match_detections(
    dets: &[EvalDetection],
    det_classes: &[ObjectClass],
    gt: &FrameGroundTruth,
    class: EvalClass,
    difficulty: Difficulty,
    space: EvalSpace,
    config: &EvalConfig,
) -> Result<FrameMatches> {
    if dets.len() != det_classes.len() {
        return Err(Error::ShapeMismatch("one class per detection".into()));
    }
    let threshold = config.iou_threshold(class);
    let rule = config.rules.rule(difficulty);

    let mut labels: Vec<LabelOutcome> = gt
        .objects
        .iter()
        .map(|o| {
            if o.class == class.label_class() {
                if rule.admits(o.bbox.height(), o.occlusion, o.truncation) {
                    LabelOutcome::Missed
                } else {
                    LabelOutcome::Ignored
                }
            } else if Some(o.class) == class.neighbor() {
                LabelOutcome::Ignored
            } else {
                LabelOutcome::NotEvaluated
            }
        })
        .collect();
    let mut taken = vec![false; gt.objects.len()];

    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&k| det_classes[k] == class.detection_class())
        .collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));

    let mut outcomes = vec![DetectionOutcome::Ignored; dets.len()];
    for k in order {
        let det = &dets[k];
        if space == EvalSpace::Image && det.bbox.is_none() {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (j, o) in gt.objects.iter().enumerate() {
            if taken[j] || labels[j] == LabelOutcome::NotEvaluated {
                continue;
            }
            let Some(iou) = overlap(det, o, space) else { continue };
            if !(iou > threshold) {
                continue;
            }
            let better = match best {
                None => true,
                Some((bj, biou)) => match iou.total_cmp(&biou) {
                    Ordering::Greater => true,
                    Ordering::Less => false,
                    Ordering::Equal => {
                        let required = |i: usize| labels[i] == LabelOutcome::Missed;
                        match (required(j), required(bj)) {
                            (true, false) => true,
                            (false, true) => false,
                            _ => cmp_keys(&box_key(&o.box3d), &box_key(&gt.objects[bj].box3d)).is_lt(),
                        }
                    }
                },
            };
            if better {
                best = Some((j, iou));
            }
        }
        outcomes[k] = match best {
            Some((j, _)) => {
                taken[j] = true;
                if labels[j] == LabelOutcome::Missed {
                    labels[j] = LabelOutcome::Found;
                    DetectionOutcome::TruePositive
                } else {
                    DetectionOutcome::Ignored
                }
            }
            None => match det.bbox {
                Some(b) if b.height() < rule.min_bbox_height => DetectionOutcome::Ignored,
                Some(b)
                    if b.area() > 0.0
                        && gt
                            .dontcare
                            .iter()
                            .any(|d| b.intersection_area(d) >= config.dontcare_overlap * b.area()) =>
                {
                    DetectionOutcome::Ignored
                }
                _ => DetectionOutcome::FalsePositive,
            },
        };
    }

    Ok(FrameMatches {
        detections: outcomes,
        scores: dets.iter().map(|d| d.score).collect(),
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    pub curve: Vec<PrPoint>,
    pub n_labels: usize,
    pub n_true_positives: usize,
    pub n_false_positives: usize,
}

/// Interpolated AP over pooled (score, is_true_positive) pairs.
///
/// Precision and recall are taken at every distinct score threshold; the
/// interpolated precision at recall `r` is the best precision at any recall
/// of at least `r`. With 11 points the samples are 0, 0.1, ..., 1; otherwise
/// they are 1/n, 2/n, ..., 1.
pub fn average_precision(scored: &[(f64, bool)], n_labels: usize, n_points: usize) -> ApResult {
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_tp_total = sorted.iter().filter(|s| s.1).count();
    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(score, hit)) in sorted.iter().enumerate() {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        let group_end = sorted.get(i + 1).is_none_or(|next| next.0 != score);
        if group_end && n_labels > 0 {
            curve.push(PrPoint {
                threshold: score,
                recall: tp as f64 / n_labels as f64,
                precision: tp as f64 / (tp + fp) as f64,
            });
        }
    }
    let ap = if n_labels == 0 {
        log::warn!("average precision requested with no required labels");
        0.0
    } else {
        let samples: Vec<f64> = if n_points == 11 {
            (0..=10).map(|k| k as f64 / 10.0).collect()
        } else {
            (1..=n_points).map(|k| k as f64 / n_points as f64).collect()
        };
        // Precision is kept as an exact fraction tp / (tp + fp) so that the
        // mean is rounded once.
        let mut frac: Vec<(u128, u128)> = Vec::with_capacity(curve.len());
        let (mut tp, mut n) = (0u128, 0u128);
        for (i, &(score, hit)) in sorted.iter().enumerate() {
            tp += u128::from(hit);
            n += 1;
            if sorted.get(i + 1).is_none_or(|next| next.0 != score) {
                frac.push((tp, n));
            }
        }
        let mut best = vec![(0u128, 1u128); curve.len() + 1];
        for i in (0..curve.len()).rev() {
            let (a, b) = best[i + 1];
            let (c, d) = frac[i];
            best[i] = if c * b > a * d { (c, d) } else { (a, b) };
        }
        let mut sum = Some((0u128, 1u128));
        let mut approx = 0.0;
        for &r in &samples {
            let (c, d) = curve.iter().position(|p| p.recall + 1e-12 >= r).map_or((0, 1), |i| best[i]);
            approx += c as f64 / d as f64;
            sum = sum.and_then(|(a, b)| add_fraction(a, b, c, d));
        }
        let k = samples.len() as u128;
        match sum {
            Some((a, b)) if b.checked_mul(k).is_some_and(|den| den < 1 << 53) && a < 1 << 53 => a as f64 / (b * k) as f64,
            _ => approx / samples.len() as f64,
        }
    };
    ApResult {
        ap,
        curve,
        n_labels,
        n_true_positives: n_tp_total,
        n_false_positives: sorted.len() - n_tp_total,
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn add_fraction(a: u128, b: u128, c: u128, d: u128) -> Option<(u128, u128)> {
    let num = a.checked_mul(d)?.checked_add(c.checked_mul(b)?)?;
    let den = b.checked_mul(d)?;
    let g = gcd(num, den).max(1);
    Some((num / g, den / g))
}

/// One frame as seen by the evaluator.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalFrame {
    pub detections: Vec<EvalDetection>,
    pub detection_classes: Vec<ObjectClass>,
    pub ground_truth: FrameGroundTruth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApRow {
    pub space: EvalSpace,
    pub class: EvalClass,
    pub difficulty: Difficulty,
    pub result: ApResult,
}

/// AP for one (space, class, difficulty) over a dataset.
pub fn evaluate(
    frames: &[EvalFrame],
    space: EvalSpace,
    class: EvalClass,
    difficulty: Difficulty,
    config: &EvalConfig,
) -> Result<ApResult> {
    config.validate()?;
    let per_frame: Vec<FrameMatches> = frames
        .par_iter()
        .map(|f| {
            match_detections(
                &f.detections,
                &f.detection_classes,
                &f.ground_truth,
                class,
                difficulty,
                space,
                config,
            )
        })
        .collect::<Result<_>>()?;
    let n_labels = per_frame.iter().map(FrameMatches::n_required).sum();
    let scored: Vec<(f64, bool)> = per_frame.iter().flat_map(|m| m.scored()).collect();
    Ok(average_precision(&scored, n_labels, config.n_points))
}

pub fn evaluate_all(
    frames: &[EvalFrame],
    spaces: &[EvalSpace],
    classes: &[EvalClass],
    config: &EvalConfig,
) -> Result<Vec<ApRow>> {
    let mut rows = Vec::new();
    for &space in spaces {
        for &class in classes {
            for difficulty in Difficulty::ALL {
                rows.push(ApRow {
                    space,
                    class,
                    difficulty,
                    result: evaluate(frames, space, class, difficulty, config)?,
                });
            }
        }
    }
    Ok(rows)
}

/// Ground-truth pose of the reference vehicle in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackPose {
    pub frame_id: String,
    pub pose: Box3D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrack {
    pub poses: Vec<TrackPose>,
    /// Upper edges of the distance bins in meters; a final open bin follows.
    pub bin_edges: Vec<f64>,
}

impl ReferenceTrack {
    pub const DEFAULT_BIN_EDGES: [f64; 2] = [20.0, 40.0];

    pub fn new(poses: Vec<TrackPose>) -> Self {
        Self {
            poses,
            bin_edges: Self::DEFAULT_BIN_EDGES.to_vec(),
        }
    }

    pub fn bin_of(&self, distance: f64) -> usize {
        self.bin_edges.iter().take_while(|&&e| distance >= e).count()
    }

    pub fn bin_labels(&self) -> Vec<String> {
        let mut labels = Vec::new();
        let mut lo = 0.0;
        for &e in &self.bin_edges {
            labels.push(format!("{lo}-{e}"));
            lo = e;
        }
        labels.push(format!(">{lo}"));
        labels
    }
}

pub const DEFAULT_MATCH_RADIUS: f64 = 2.5;

/// Per-distance-bin summary. RMSE fields are `None` when nothing was detected
/// in the bin; the whole bin is `None` in the report when it has no frames.
#[derive(Debug, Clone, PartialEq)]
pub struct BinReport {
    pub label: String,
    pub frames: usize,
    pub detected: usize,
    pub detection_ratio: f64,
    pub radial: Option<f64>,
    pub tangential: Option<f64>,
    pub vertical: Option<f64>,
    /// Full 3D position RMSE.
    pub position: Option<f64>,
    /// Radians.
    pub orientation: Option<f64>,
    pub length: Option<f64>,
    pub width: Option<f64>,
    pub height: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceReport {
    pub labels: Vec<String>,
    pub bins: Vec<Option<BinReport>>,
}

/// Position error split at the true center into the component along the
/// horizontal line of sight, the horizontal perpendicular and z.
pub fn sight_decomposition(truth: &Point3, estimate: &Point3) -> (f64, f64, f64) {
    let az = truth.azimuth();
    let (s, c) = az.sin_cos();
    let dx = estimate.x - truth.x;
    let dy = estimate.y - truth.y;
    (c * dx + s * dy, -s * dx + c * dy, estimate.z - truth.z)
}

/// Orientation error with the front/back ambiguity removed, in [-pi/2, pi/2].
pub fn orientation_error(truth_yaw: f64, estimate_yaw: f64) -> f64 {
    let d = normalize_angle(estimate_yaw - truth_yaw);
    if d > std::f64::consts::FRAC_PI_2 {
        d - std::f64::consts::PI
    } else if d < -std::f64::consts::FRAC_PI_2 {
        d + std::f64::consts::PI
    } else {
        d
    }
}

#[derive(Default)]
struct Accum {
    frames: usize,
    detected: usize,
    sq: [f64; 8],
}

fn rmse(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| (sum / n as f64).sqrt())
}

/// `detections(frame_id)` yields the vehicle detections of a frame.
pub fn reference_vehicle_report<'a, F>(track: &ReferenceTrack, match_radius: f64, mut detections: F) -> ReferenceReport
where
    F: FnMut(&str) -> &'a [Box3D],
{
    let n_bins = track.bin_edges.len() + 1;
    let mut acc: Vec<Accum> = (0..n_bins).map(|_| Accum::default()).collect();
    for tp in &track.poses {
        let truth = &tp.pose;
        let a = &mut acc[track.bin_of(truth.center.horizontal_norm())];
        a.frames += 1;
        let nearest = detections(&tp.frame_id)
            .iter()
            .filter(|d| d.class == ObjectClass::Vehicle)
            .map(|d| {
                let dist = (d.center.x - truth.center.x).hypot(d.center.y - truth.center.y);
                (dist, d)
            })
            .filter(|(dist, _)| *dist <= match_radius)
            .min_by(|a, b| a.0.total_cmp(&b.0));
        let Some((_, det)) = nearest else { continue };
        a.detected += 1;
        let (r, t, v) = sight_decomposition(&truth.center, &det.center);
        let o = orientation_error(truth.yaw, det.yaw);
        let errs = [
            r,
            t,
            v,
            (r * r + t * t + v * v).sqrt(),
            o,
            det.length - truth.length,
            det.width - truth.width,
            det.height - truth.height,
        ];
        for (s, e) in a.sq.iter_mut().zip(errs) {
            *s += e * e;
        }
    }
    let labels = track.bin_labels();
    let bins = acc
        .iter()
        .zip(&labels)
        .map(|(a, label)| {
            (a.frames > 0).then(|| {
                let m = |i: usize| rmse(a.sq[i], a.detected);
                BinReport {
                    label: label.clone(),
                    frames: a.frames,
                    detected: a.detected,
                    detection_ratio: a.detected as f64 / a.frames as f64,
                    radial: m(0),
                    tangential: m(1),
                    vertical: m(2),
                    position: m(3),
                    orientation: m(4),
                    length: m(5),
                    width: m(6),
                    height: m(7),
                }
            })
        })
        .collect();
    ReferenceReport { labels, bins }
}
