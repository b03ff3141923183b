//! Organized range images: sensor layout, construction from point clouds,
//! channel reconstruction for unorganized clouds, and network input scaling.

use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Point3};

/// Multiplier applied to ranges (meters) before they are fed to the network.
pub const INPUT_SCALE: f64 = 0.01;

/// Fallback row-assignment tolerance for single-channel sensors (radians).
const SINGLE_CHANNEL_TOLERANCE: f64 = 0.5 * std::f64::consts::PI / 180.0;

/// Geometry of a spinning sensor's range image.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSpec {
    pub name: String,
    pub columns_per_revolution: usize,
    /// Radians, top row first, strictly decreasing.
    pub channel_elevations: Vec<f64>,
    pub azimuth_of_column_zero: f64,
}

impl SensorSpec {
    pub fn new(
        name: impl Into<String>,
        columns_per_revolution: usize,
        channel_elevations: Vec<f64>,
        azimuth_of_column_zero: f64,
    ) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            columns_per_revolution,
            channel_elevations,
            azimuth_of_column_zero,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns_per_revolution == 0 {
            return Err(Error::InvalidSensor("columns_per_revolution must be > 0".into()));
        }
        if self.channel_elevations.is_empty() {
            return Err(Error::InvalidSensor("no channels".into()));
        }
        if self.channel_elevations.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidSensor("non-finite elevation".into()));
        }
        if self.channel_elevations.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::InvalidSensor(
                "channel elevations must be strictly decreasing".into(),
            ));
        }
        if !self.azimuth_of_column_zero.is_finite() {
            return Err(Error::InvalidSensor("non-finite azimuth offset".into()));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.channel_elevations.len()
    }

    pub fn cols(&self) -> usize {
        self.columns_per_revolution
    }

    /// Angular width of one column (radians).
    pub fn column_width(&self) -> f64 {
        TAU / self.columns_per_revolution as f64
    }

    pub fn azimuth_to_column(&self, azimuth: f64) -> usize {
        let rel = (azimuth - self.azimuth_of_column_zero).rem_euclid(TAU);
        let col = (rel / TAU * self.columns_per_revolution as f64).floor() as usize;
        col.min(self.columns_per_revolution - 1)
    }

    /// Azimuth of the center of column `col`, wrapped to (-pi, pi].
    pub fn column_azimuth(&self, col: usize) -> f64 {
        normalize_angle(self.azimuth_of_column_zero + (col as f64 + 0.5) * self.column_width())
    }

    /// Half the smallest gap between adjacent channels.
    pub fn row_tolerance(&self) -> f64 {
        self.channel_elevations
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(None, |acc: Option<f64>, g| Some(acc.map_or(g, |a| a.min(g))))
            .map_or(SINGLE_CHANNEL_TOLERANCE, |g| 0.5 * g)
    }

    /// Row whose elevation is nearest to `elevation`, if within [`Self::row_tolerance`].
    pub fn nearest_row(&self, elevation: f64) -> Option<usize> {
        let e = &self.channel_elevations;
        // first index with e[i] <= elevation (list is decreasing)
        let idx = e.partition_point(|&x| x > elevation);
        let mut best: Option<(usize, f64)> = None;
        for cand in [idx.wrapping_sub(1), idx] {
            if cand < e.len() {
                let d = (e[cand] - elevation).abs();
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((cand, d));
                }
            }
        }
        best.filter(|&(_, d)| d <= self.row_tolerance()).map(|(i, _)| i)
    }

    /// Unit ray direction of a cell.
    pub fn direction(&self, row: usize, col: usize) -> Point3 {
        let (se, ce) = self.channel_elevations[row].sin_cos();
        let (sa, ca) = self.column_azimuth(col).sin_cos();
        Point3::new(ce * ca, ce * sa, se)
    }

    pub fn point_at(&self, row: usize, col: usize, range: f64) -> Point3 {
        let d = self.direction(row, col);
        Point3::new(range * d.x, range * d.y, range * d.z)
    }
}

/// Organized grid of range returns.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub spec: SensorSpec,
    /// Meters, row-major. Meaningless where `valid` is false.
    pub range: Vec<f64>,
    pub valid: Vec<bool>,
    /// Index of the source point per cell, when built from a cloud.
    pub point_index: Vec<Option<u32>>,
}

impl RangeImage {
    pub fn empty(spec: SensorSpec) -> Self {
        let n = spec.rows() * spec.cols();
        Self {
            spec,
            range: vec![0.0; n],
            valid: vec![false; n],
            point_index: vec![None; n],
        }
    }

    /// Builds an image from row-major ranges; non-finite entries become invalid.
    pub fn from_ranges(spec: SensorSpec, ranges: Vec<f64>) -> Result<Self> {
        let n = spec.rows() * spec.cols();
        if ranges.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} ranges for a {}x{} image",
                ranges.len(),
                spec.rows(),
                spec.cols()
            )));
        }
        if ranges.iter().any(|r| r.is_finite() && *r < 0.0) {
            return Err(Error::InvalidInput("negative range".into()));
        }
        let valid: Vec<bool> = ranges.iter().map(|r| r.is_finite()).collect();
        let range = ranges
            .into_iter()
            .map(|r| if r.is_finite() { r } else { 0.0 })
            .collect();
        Ok(Self {
            spec,
            range,
            valid,
            point_index: vec![None; n],
        })
    }

    pub fn rows(&self) -> usize {
        self.spec.rows()
    }

    pub fn cols(&self) -> usize {
        self.spec.cols()
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols() + col
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let i = self.index(row, col);
        self.valid[i].then(|| self.range[i])
    }

    pub fn set(&mut self, row: usize, col: usize, range: f64, point_index: Option<u32>) {
        let i = self.index(row, col);
        self.range[i] = range;
        self.valid[i] = true;
        self.point_index[i] = point_index;
    }

    pub fn clear(&mut self, row: usize, col: usize) {
        let i = self.index(row, col);
        self.range[i] = 0.0;
        self.valid[i] = false;
        self.point_index[i] = None;
    }

    /// 3D point of a valid cell, reconstructed from the cell's ray and range.
    pub fn cell_point(&self, row: usize, col: usize) -> Option<Point3> {
        self.get(row, col).map(|r| self.spec.point_at(row, col, r))
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Ranges with invalid cells encoded as NaN.
    pub fn ranges_with_nan(&self) -> Vec<f64> {
        self.range
            .iter()
            .zip(&self.valid)
            .map(|(&r, &v)| if v { r } else { f64::NAN })
            .collect()
    }

    /// Multiplies every valid range by `k`.
    pub fn scaled(&self, k: f64) -> RangeImage {
        let mut out = self.clone();
        for (r, v) in out.range.iter_mut().zip(&out.valid) {
            if *v {
                *r *= k;
            }
        }
        out
    }
}

/// Point accounting of [`build_range_image`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BuildStats {
    pub kept: usize,
    /// No channel within tolerance, zero range, or non-finite coordinates.
    pub dropped: usize,
    /// Lost a cell collision to a nearer point.
    pub shadowed: usize,
}

pub fn build_range_image(points: &[Point3], spec: &SensorSpec) -> (RangeImage, BuildStats) {
    let mut img = RangeImage::empty(spec.clone());
    let mut stats = BuildStats::default();
    for (i, p) in points.iter().enumerate() {
        let range = p.norm();
        if !p.is_finite() || range <= 0.0 {
            stats.dropped += 1;
            continue;
        }
        let Some(row) = spec.nearest_row(p.elevation()) else {
            stats.dropped += 1;
            continue;
        };
        let col = spec.azimuth_to_column(p.azimuth());
        match img.get(row, col) {
            Some(existing) if existing <= range => stats.shadowed += 1,
            Some(_) => {
                stats.shadowed += 1;
                img.set(row, col, range, Some(i as u32));
            }
            None => img.set(row, col, range, Some(i as u32)),
        }
    }
    stats.kept = img.valid_count();
    (img, stats)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructOptions {
    /// Elevation gaps at or below this (radians) never separate channels.
    pub min_gap: f64,
    pub max_iterations: usize,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        Self {
            min_gap: 0.02_f64.to_radians(),
            max_iterations: 10,
        }
    }
}

/// Reported when the cloud resolves into fewer channels than expected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DegradedReconstruction {
    pub resolved: usize,
    pub expected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelReconstruction {
    /// Row per input point, in input order.
    pub rows: Vec<usize>,
    /// Estimated elevation of each resolved row (radians, top first).
    pub elevations: Vec<f64>,
    pub expected_rows: usize,
    pub degraded: Option<DegradedReconstruction>,
}

impl ChannelReconstruction {
    /// Sensor layout from a complete reconstruction.
    pub fn to_sensor_spec(
        &self,
        name: impl Into<String>,
        columns_per_revolution: usize,
        azimuth_of_column_zero: f64,
    ) -> Result<SensorSpec> {
        if let Some(d) = self.degraded {
            return Err(Error::InvalidSensor(format!(
                "degraded reconstruction: {} of {} channels resolved",
                d.resolved, d.expected
            )));
        }
        SensorSpec::new(
            name,
            columns_per_revolution,
            self.elevations.clone(),
            azimuth_of_column_zero,
        )
    }
}

/// Recovers the channel structure of an unorganized scan.
///
/// Elevations are sorted, split at the `expected_rows - 1` largest gaps and
/// refined with a few rounds of 1D k-means. Deterministic for a given input.
pub fn reconstruct_channels(
    points: &[Point3],
    expected_rows: usize,
    options: &ReconstructOptions,
) -> Result<ChannelReconstruction> {
    if expected_rows == 0 {
        return Err(Error::InvalidInput("expected_rows must be > 0".into()));
    }
    let elev: Vec<f64> = points.iter().map(|p| p.elevation()).collect();
    if elev.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("point with non-finite elevation".into()));
    }
    if points.is_empty() {
        return Ok(ChannelReconstruction {
            rows: Vec::new(),
            elevations: Vec::new(),
            expected_rows,
            degraded: Some(DegradedReconstruction {
                resolved: 0,
                expected: expected_rows,
            }),
        });
    }

    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| elev[b].total_cmp(&elev[a]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| elev[i]).collect();

    // split after position k when the gap sorted[k] - sorted[k+1] is among the largest
    let mut gaps: Vec<(f64, usize)> = sorted
        .windows(2)
        .enumerate()
        .map(|(k, w)| (w[0] - w[1], k))
        .filter(|&(g, _)| g > options.min_gap)
        .collect();
    gaps.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    gaps.truncate(expected_rows - 1);
    let mut splits: Vec<usize> = gaps.into_iter().map(|(_, k)| k + 1).collect();
    splits.sort_unstable();
    let n_clusters = splits.len() + 1;

    // assignment over sorted positions
    let mut label = vec![0usize; sorted.len()];
    {
        let mut cluster = 0;
        let mut next = splits.iter().peekable();
        for (pos, l) in label.iter_mut().enumerate() {
            while next.peek().is_some_and(|&&s| s == pos) {
                cluster += 1;
                next.next();
            }
            *l = cluster;
        }
    }
    let mut centroids = cluster_means(&sorted, &label, n_clusters, &vec![0.0; n_clusters]);

    for _ in 0..options.max_iterations {
        let mut changed = false;
        let mut c = 0;
        for (pos, &e) in sorted.iter().enumerate() {
            // sorted descending, centroids descending: advance while next is nearer
            while c + 1 < n_clusters && (e - centroids[c + 1]).abs() < (e - centroids[c]).abs() {
                c += 1;
            }
            if label[pos] != c {
                label[pos] = c;
                changed = true;
            }
        }
        centroids = cluster_means(&sorted, &label, n_clusters, &centroids);
        if !changed {
            break;
        }
    }

    let mut rows = vec![0usize; points.len()];
    for (pos, &i) in order.iter().enumerate() {
        rows[i] = label[pos];
    }
    let degraded = (n_clusters < expected_rows).then_some(DegradedReconstruction {
        resolved: n_clusters,
        expected: expected_rows,
    });
    Ok(ChannelReconstruction {
        rows,
        elevations: centroids,
        expected_rows,
        degraded,
    })
}

fn cluster_means(sorted: &[f64], label: &[usize], k: usize, previous: &[f64]) -> Vec<f64> {
    let mut sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    for (&e, &l) in sorted.iter().zip(label) {
        sum[l] += e;
        count[l] += 1;
    }
    (0..k)
        .map(|i| {
            if count[i] == 0 {
                previous[i]
            } else {
                sum[i] / count[i] as f64
            }
        })
        .collect()
}

/// Network input grid (row-major, unitless).
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkInput {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl NetworkInput {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }
}

/// Scales ranges by [`INPUT_SCALE`]; invalid cells become 0.
pub fn scale_for_network(img: &RangeImage) -> NetworkInput {
    let values = img
        .range
        .iter()
        .zip(&img.valid)
        .map(|(&r, &v)| if v { INPUT_SCALE * r } else { 0.0 })
        .collect();
    NetworkInput {
        rows: img.rows(),
        cols: img.cols(),
        values,
    }
}
