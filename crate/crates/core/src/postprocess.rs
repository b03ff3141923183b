//! From prediction maps to a final detection set.
//!
//! The chain is: neighborhood minimum over each objectness channel,
//! reweighting by the orientation-vector norm, thresholding, decoding and
//! finally a greedy non-maximum suppression on a bird's-eye-view grid.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::codec::{AnchorLayout, PredictionMap};
use crate::error::{Error, Result};
use crate::geometry::{bev_corners, Box3D};
use crate::range_image::RangeImage;

pub const DEFAULT_THRESHOLD: f64 = 0.05;
pub const DEFAULT_CELL_SIZE: f64 = 0.2;
pub const DEFAULT_MIN_WINDOW: (usize, usize) = (3, 5);

/// Confidence factor from the predicted orientation vector: 1 for unit
/// vectors, falling off symmetrically in `n` and `1/n`.
pub fn orientation_confidence_factor(rx: f64, ry: f64) -> f64 {
    let n = rx.hypot(ry);
    if n == 0.0 || !n.is_finite() {
        return 0.0;
    }
    n.min(1.0 / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnEdge {
    /// Full revolutions: the first and last columns are neighbors.
    Wrap,
    /// Crops: the window is cut at the image border.
    Clip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ScoreMap {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} map",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    /// Objectness plane of one anchor.
    pub fn objectness(pred: &PredictionMap, anchor: usize) -> Self {
        let ch = AnchorLayout::channel(anchor, AnchorLayout::OBJECTNESS);
        let data = pred
            .data
            .chunks_exact(AnchorLayout::TOTAL_CHANNELS)
            .map(|px| px[ch])
            .collect();
        Self {
            rows: pred.rows,
            cols: pred.cols,
            data,
        }
    }
}

/// Offsets (before, after) of a window of extent `w` around its anchor pixel.
fn window_offsets(w: usize) -> (isize, isize) {
    let w = w.max(1);
    (((w - 1) / 2) as isize, (w / 2) as isize)
}

fn min_rows_in_place(src: &[f64], dst: &mut [f64], rows: usize, cols: usize, win_cols: usize, edge: ColumnEdge) {
    let (before, after) = window_offsets(win_cols);
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        let out = &mut dst[r * cols..(r + 1) * cols];
        for (c, o) in out.iter_mut().enumerate() {
            let mut m = f64::INFINITY;
            for d in -before..=after {
                let cc = c as isize + d;
                let v = match edge {
                    ColumnEdge::Wrap => row[cc.rem_euclid(cols as isize) as usize],
                    ColumnEdge::Clip if cc >= 0 && cc < cols as isize => row[cc as usize],
                    ColumnEdge::Clip => continue,
                };
                m = m.min(v);
            }
            *o = m;
        }
    }
}

fn min_cols_in_place(src: &[f64], dst: &mut [f64], rows: usize, cols: usize, win_rows: usize) {
    let (before, after) = window_offsets(win_rows);
    for r in 0..rows {
        let lo = (r as isize - before).max(0) as usize;
        let hi = ((r as isize + after) as usize).min(rows - 1);
        let out = &mut dst[r * cols..(r + 1) * cols];
        out.copy_from_slice(&src[lo * cols..(lo + 1) * cols]);
        for rr in lo + 1..=hi {
            for (o, v) in out.iter_mut().zip(&src[rr * cols..(rr + 1) * cols]) {
                *o = o.min(*v);
            }
        }
    }
}

fn neighborhood_min_slice(data: &[f64], rows: usize, cols: usize, window: (usize, usize), edge: ColumnEdge) -> Vec<f64> {
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let mut tmp = vec![0.0; data.len()];
    min_rows_in_place(data, &mut tmp, rows, cols, window.1, edge);
    let mut out = vec![0.0; data.len()];
    min_cols_in_place(&tmp, &mut out, rows, cols, window.0);
    out
}

/// Replaces every pixel by the minimum over a `window` = (rows, cols)
/// neighborhood. Rows are always clipped at the border; columns follow `edge`.
pub fn neighborhood_min(map: &ScoreMap, window: (usize, usize), edge: ColumnEdge) -> ScoreMap {
    ScoreMap {
        rows: map.rows,
        cols: map.cols,
        data: neighborhood_min_slice(&map.data, map.rows, map.cols, window, edge),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub score: f64,
    pub row: usize,
    pub col: usize,
    pub anchor: usize,
}

fn check_pred(pred: &PredictionMap, img: &RangeImage) -> Result<()> {
    if pred.rows != img.rows() || pred.cols != img.cols() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs range image {}x{}",
            pred.rows,
            pred.cols,
            img.rows(),
            img.cols()
        )));
    }
    Ok(())
}

/// `objectness` holds one value per (pixel, anchor), anchor-minor.
fn extract_with(
    pred: &PredictionMap,
    img: &RangeImage,
    objectness: &[f64],
    threshold: f64,
    parallel: bool,
) -> Vec<Detection> {
    let cols = pred.cols;
    let row_dets = |r: usize| -> Vec<Detection> {
        let mut out = Vec::new();
        for c in 0..cols {
            let Some(range) = img.get(r, c) else { continue };
            let pix = r * cols + c;
            for a in 0..AnchorLayout::N_ANCHORS {
                let obj = objectness[pix * AnchorLayout::N_ANCHORS + a];
                if !obj.is_finite() {
                    continue;
                }
                let reg = pred.regression(r, c, a);
                let score = obj * orientation_confidence_factor(reg[3], reg[4]);
                if !(score >= threshold) {
                    continue;
                }
                match crate::codec::decode_box(r, c, range, a, &reg, &img.spec) {
                    Ok(bbox) => out.push(Detection {
                        bbox,
                        score,
                        row: r,
                        col: c,
                        anchor: a,
                    }),
                    Err(e) => log::debug!("skipping undecodable prediction at ({r}, {c}, {a}): {e}"),
                }
            }
        }
        out
    };
    if parallel {
        (0..pred.rows).into_par_iter().map(row_dets).flatten().collect()
    } else {
        (0..pred.rows).flat_map(row_dets).collect()
    }
}

fn objectness_slice(pred: &PredictionMap) -> Vec<f64> {
    pred.data
        .chunks_exact(AnchorLayout::TOTAL_CHANNELS)
        .flat_map(|px| (0..AnchorLayout::N_ANCHORS).map(move |a| px[AnchorLayout::channel(a, 0)]))
        .collect()
}

/// Scores every valid (pixel, anchor) and decodes those at or above
/// `threshold`. Output is in row, column, anchor order.
pub fn extract_detections(pred: &PredictionMap, img: &RangeImage, threshold: f64) -> Result<Vec<Detection>> {
    check_pred(pred, img)?;
    Ok(extract_with(pred, img, &objectness_slice(pred), threshold, true))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    /// Cells whose center lies in the footprint.
    CellCenter,
    /// Cells whose interior overlaps the footprint.
    Conservative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsOptions {
    pub cell_size: f64,
    pub coverage: Coverage,
}

impl Default for NmsOptions {
    fn default() -> Self {
        Self {
            cell_size: DEFAULT_CELL_SIZE,
            coverage: Coverage::CellCenter,
        }
    }
}

/// Horizontal run of covered cells: row `j`, columns `i0..=i1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellSpan {
    pub j: i64,
    pub i0: i64,
    pub i1: i64,
}

/// x extent of a convex polygon on the horizontal line `y`.
fn line_extent(poly: &[[f64; 2]; 4], y: f64) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for k in 0..4 {
        let p = poly[k];
        let q = poly[(k + 1) % 4];
        let (ylo, yhi) = if p[1] <= q[1] { (p[1], q[1]) } else { (q[1], p[1]) };
        if y < ylo || y > yhi {
            continue;
        }
        if p[1] == q[1] {
            lo = lo.min(p[0].min(q[0]));
            hi = hi.max(p[0].max(q[0]));
        } else {
            let x = p[0] + (y - p[1]) * (q[0] - p[0]) / (q[1] - p[1]);
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    (lo <= hi).then_some((lo, hi))
}

/// x extent of a convex polygon within the closed strip `y0 <= y <= y1`.
fn strip_extent(poly: &[[f64; 2]; 4], y0: f64, y1: f64) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in poly {
        if p[1] >= y0 && p[1] <= y1 {
            lo = lo.min(p[0]);
            hi = hi.max(p[0]);
        }
    }
    for y in [y0, y1] {
        if let Some((a, b)) = line_extent(poly, y) {
            lo = lo.min(a);
            hi = hi.max(b);
        }
    }
    (lo <= hi).then_some((lo, hi))
}

/// Grid cells covered by a box footprint, as row spans.
///
/// A footprint that covers no cell center under [`Coverage::CellCenter`]
/// claims the cell containing its center, so every box occupies at least one cell.
pub fn footprint_spans(b: &Box3D, cell_size: f64, coverage: Coverage) -> Vec<CellSpan> {
    let s = cell_size;
    let poly = bev_corners(b);
    let ymin = poly.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let ymax = poly.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    let mut spans = Vec::new();
    match coverage {
        Coverage::CellCenter => {
            let j0 = (ymin / s - 0.5).ceil() as i64;
            let j1 = (ymax / s - 0.5).floor() as i64;
            for j in j0..=j1 {
                let yc = (j as f64 + 0.5) * s;
                if let Some((xl, xr)) = line_extent(&poly, yc) {
                    let i0 = (xl / s - 0.5).ceil() as i64;
                    let i1 = (xr / s - 0.5).floor() as i64;
                    if i0 <= i1 {
                        spans.push(CellSpan { j, i0, i1 });
                    }
                }
            }
            if spans.is_empty() {
                let i = (b.center.x / s).floor() as i64;
                let j = (b.center.y / s).floor() as i64;
                spans.push(CellSpan { j, i0: i, i1: i });
            }
        }
        Coverage::Conservative => {
            let j0 = (ymin / s).floor() as i64;
            let j1 = (ymax / s).ceil() as i64 - 1;
            for j in j0..=j1 {
                let y0 = j as f64 * s;
                if let Some((xl, xr)) = strip_extent(&poly, y0, y0 + s) {
                    let i0 = (xl / s).floor() as i64;
                    let i1 = (xr / s).ceil() as i64 - 1;
                    if i0 <= i1 {
                        spans.push(CellSpan { j, i0, i1 });
                    }
                }
            }
        }
    }
    spans
}

/// Dense grids above this many cells fall back to a hash map.
const DENSE_CELL_LIMIT: i64 = 1 << 24;

#[derive(Debug, Clone)]
enum Storage {
    Dense {
        i0: i64,
        j0: i64,
        width: i64,
        cells: Vec<u32>,
    },
    Sparse(HashMap<(i64, i64), u32>),
}

/// Occupancy grid storing, per cell, the id of the kept detection covering it.
#[derive(Debug, Clone)]
pub struct NmsGrid {
    pub cell_size: f64,
    storage: Storage,
}

impl NmsGrid {
    pub fn sparse(cell_size: f64) -> Self {
        Self {
            cell_size,
            storage: Storage::Sparse(HashMap::new()),
        }
    }

    /// Grid sized to the given spans; sparse if that would be too large.
    fn for_spans(cell_size: f64, spans: &[Vec<CellSpan>]) -> Self {
        let mut bounds = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
        for s in spans.iter().flatten() {
            bounds.0 = bounds.0.min(s.i0);
            bounds.1 = bounds.1.min(s.j);
            bounds.2 = bounds.2.max(s.i1);
            bounds.3 = bounds.3.max(s.j);
        }
        if bounds.0 > bounds.2 {
            return Self::sparse(cell_size);
        }
        let width = bounds.2 - bounds.0 + 1;
        let height = bounds.3 - bounds.1 + 1;
        if width.checked_mul(height).is_none_or(|n| n > DENSE_CELL_LIMIT) {
            return Self::sparse(cell_size);
        }
        Self {
            cell_size,
            storage: Storage::Dense {
                i0: bounds.0,
                j0: bounds.1,
                width,
                cells: vec![0; (width * height) as usize],
            },
        }
    }

    pub fn get(&self, i: i64, j: i64) -> Option<usize> {
        let raw = match &self.storage {
            Storage::Dense { i0, j0, width, cells } => {
                let (di, dj) = (i - i0, j - j0);
                if di < 0 || dj < 0 || di >= *width {
                    return None;
                }
                *cells.get((dj * width + di) as usize)?
            }
            Storage::Sparse(m) => *m.get(&(i, j))?,
        };
        (raw != 0).then(|| raw as usize - 1)
    }

    fn span_occupied(&self, s: &CellSpan) -> bool {
        match &self.storage {
            Storage::Dense { i0, j0, width, cells } => {
                let base = (s.j - j0) * width - i0;
                cells[(base + s.i0) as usize..=(base + s.i1) as usize]
                    .iter()
                    .any(|&c| c != 0)
            }
            Storage::Sparse(m) => (s.i0..=s.i1).any(|i| m.contains_key(&(i, s.j))),
        }
    }

    fn fill_span(&mut self, s: &CellSpan, id: usize) {
        let v = id as u32 + 1;
        match &mut self.storage {
            Storage::Dense { i0, j0, width, cells } => {
                let base = (s.j - *j0) * *width - *i0;
                cells[(base + s.i0) as usize..=(base + s.i1) as usize].fill(v);
            }
            Storage::Sparse(m) => {
                for i in s.i0..=s.i1 {
                    m.insert((i, s.j), v);
                }
            }
        }
    }

    pub fn occupied_cells(&self) -> usize {
        match &self.storage {
            Storage::Dense { cells, .. } => cells.iter().filter(|&&c| c != 0).count(),
            Storage::Sparse(m) => m.len(),
        }
    }
}

/// Indices into `dets` of the detections kept by grid suppression, in
/// descending score order (ties by input position).
pub fn grid_nms_indices(dets: &[Detection], opts: &NmsOptions) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let spans: Vec<Vec<CellSpan>> = order
        .iter()
        .map(|&k| footprint_spans(&dets[k].bbox, opts.cell_size, opts.coverage))
        .collect();
    let mut grid = NmsGrid::for_spans(opts.cell_size, &spans);
    let mut kept = Vec::new();
    for (rank, &k) in order.iter().enumerate() {
        let cells = &spans[rank];
        if cells.iter().any(|s| grid.span_occupied(s)) {
            continue;
        }
        for s in cells {
            grid.fill_span(s, k);
        }
        kept.push(k);
    }
    kept
}

pub fn grid_nms(dets: &[Detection], opts: &NmsOptions) -> Vec<Detection> {
    grid_nms_indices(dets, opts).into_iter().map(|k| dets[k]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostprocessOptions {
    pub threshold: f64,
    /// Neighborhood-minimum window (rows, cols); `None` disables the filter.
    pub min_window: Option<(usize, usize)>,
    pub column_edge: ColumnEdge,
    pub nms: NmsOptions,
    /// Use the rayon pool for filtering and extraction.
    pub parallel: bool,
}

impl Default for PostprocessOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            min_window: Some(DEFAULT_MIN_WINDOW),
            column_edge: ColumnEdge::Wrap,
            nms: NmsOptions::default(),
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostprocessOutput {
    /// Thresholded detections before suppression.
    pub raw: Vec<Detection>,
    pub kept: Vec<Detection>,
}

/// Full chain on one frame.
pub fn postprocess(pred: &PredictionMap, img: &RangeImage, opts: &PostprocessOptions) -> Result<PostprocessOutput> {
    check_pred(pred, img)?;
    let objectness = match opts.min_window {
        None => objectness_slice(pred),
        Some(window) => {
            let (rows, cols) = (pred.rows, pred.cols);
            let filter = |a: usize| {
                let plane = ScoreMap::objectness(pred, a);
                neighborhood_min_slice(&plane.data, rows, cols, window, opts.column_edge)
            };
            let planes: Vec<Vec<f64>> = if opts.parallel {
                (0..AnchorLayout::N_ANCHORS).into_par_iter().map(filter).collect()
            } else {
                (0..AnchorLayout::N_ANCHORS).map(filter).collect()
            };
            let mut out = vec![0.0; rows * cols * AnchorLayout::N_ANCHORS];
            for (a, plane) in planes.iter().enumerate() {
                for (pix, v) in plane.iter().enumerate() {
                    out[pix * AnchorLayout::N_ANCHORS + a] = *v;
                }
            }
            out
        }
    };
    let raw = extract_with(pred, img, &objectness, opts.threshold, opts.parallel);
    let kept = grid_nms(&raw, &opts.nms);
    Ok(PostprocessOutput { raw, kept })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::AnchorMap;
    use crate::geometry::{ObjectClass, Point3};
    use crate::range_image::SensorSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn factor_values() {
        assert_eq!(orientation_confidence_factor(1.0, 0.0), 1.0);
        assert_eq!(orientation_confidence_factor(0.0, 2.0), 0.5);
        assert_eq!(orientation_confidence_factor(0.3, 0.4), 0.5);
        assert_eq!(orientation_confidence_factor(0.0, 0.0), 0.0);
        assert_eq!(orientation_confidence_factor(f64::NAN, 0.0), 0.0);
    }

    fn brute_min(m: &ScoreMap, window: (usize, usize), edge: ColumnEdge) -> ScoreMap {
        let (rb, ra) = window_offsets(window.0);
        let (cb, ca) = window_offsets(window.1);
        let mut out = m.clone();
        for r in 0..m.rows {
            for c in 0..m.cols {
                let mut best = f64::INFINITY;
                for dr in -rb..=ra {
                    for dc in -cb..=ca {
                        let rr = r as isize + dr;
                        let cc = c as isize + dc;
                        if rr < 0 || rr >= m.rows as isize {
                            continue;
                        }
                        let cc = match edge {
                            ColumnEdge::Wrap => cc.rem_euclid(m.cols as isize),
                            ColumnEdge::Clip if cc < 0 || cc >= m.cols as isize => continue,
                            ColumnEdge::Clip => cc,
                        };
                        best = best.min(m.get(rr as usize, cc as usize));
                    }
                }
                out.data[r * m.cols + c] = best;
            }
        }
        out
    }

    fn random_map(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ScoreMap {
        ScoreMap::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn min_filter_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (rows, cols) in [(25, 40), (1, 1), (2, 3), (4, 7)] {
            let m = random_map(&mut rng, rows, cols);
            for edge in [ColumnEdge::Wrap, ColumnEdge::Clip] {
                for window in [(3, 5), (1, 1), (2, 4), (5, 9)] {
                    assert_eq!(neighborhood_min(&m, window, edge), brute_min(&m, window, edge));
                }
            }
        }
    }

    #[test]
    fn min_filter_examples() {
        let c = ScoreMap::new(3, 4, vec![0.7; 12]).unwrap();
        assert_eq!(neighborhood_min(&c, (3, 5), ColumnEdge::Wrap), c);
        let mut spike = ScoreMap::new(5, 9, vec![0.0; 45]).unwrap();
        spike.data[2 * 9 + 4] = 1.0;
        let out = neighborhood_min(&spike, (3, 5), ColumnEdge::Clip);
        assert!(out.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn min_filter_wraps_columns() {
        let mut m = ScoreMap::new(1, 10, vec![1.0; 10]).unwrap();
        m.data[0] = 0.0;
        let wrap = neighborhood_min(&m, (1, 5), ColumnEdge::Wrap);
        let clip = neighborhood_min(&m, (1, 5), ColumnEdge::Clip);
        assert_eq!(wrap.get(0, 9), 0.0);
        assert_eq!(wrap.get(0, 8), 0.0);
        assert_eq!(clip.get(0, 9), 1.0);
        assert_eq!(clip.get(0, 2), 0.0);
    }

    fn det(x: f64, y: f64, yaw: f64, l: f64, w: f64, score: f64) -> Detection {
        Detection {
            bbox: Box3D::new(Point3::new(x, y, 0.0), l, w, 1.5, yaw, ObjectClass::Vehicle).unwrap(),
            score,
            row: 0,
            col: 0,
            anchor: 0,
        }
    }

    fn covers_center(b: &Box3D, i: i64, j: i64, s: f64) -> bool {
        let p = Point3::new((i as f64 + 0.5) * s, (j as f64 + 0.5) * s, b.center.z);
        let l = b.to_local(&p);
        l.x.abs() <= b.length / 2.0 && l.y.abs() <= b.width / 2.0
    }

    fn project(pts: &[[f64; 2]], axis: [f64; 2]) -> (f64, f64) {
        pts.iter()
            .map(|p| p[0] * axis[0] + p[1] * axis[1])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    }

    fn overlaps_cell(b: &Box3D, i: i64, j: i64, s: f64) -> bool {
        let rect = bev_corners(b);
        let (x0, y0) = (i as f64 * s, j as f64 * s);
        let square = [[x0, y0], [x0 + s, y0], [x0 + s, y0 + s], [x0, y0 + s]];
        let (sn, cs) = b.yaw.sin_cos();
        [[1.0, 0.0], [0.0, 1.0], [cs, sn], [-sn, cs]].iter().all(|&ax| {
            let (a0, a1) = project(&rect, ax);
            let (b0, b1) = project(&square, ax);
            a0 < b1 && b0 < a1
        })
    }

    fn brute_cells(b: &Box3D, s: f64, coverage: Coverage) -> Vec<(i64, i64)> {
        let r = b.length.hypot(b.width) / 2.0 / s + 2.0;
        let (ci, cj) = ((b.center.x / s).floor() as i64, (b.center.y / s).floor() as i64);
        let mut cells = Vec::new();
        let rr = r.ceil() as i64;
        for j in cj - rr..=cj + rr {
            for i in ci - rr..=ci + rr {
                let hit = match coverage {
                    Coverage::CellCenter => covers_center(b, i, j, s),
                    Coverage::Conservative => overlaps_cell(b, i, j, s),
                };
                if hit {
                    cells.push((i, j));
                }
            }
        }
        if cells.is_empty() && coverage == Coverage::CellCenter {
            cells.push((ci, cj));
        }
        cells
    }

    fn span_cells(spans: &[CellSpan]) -> Vec<(i64, i64)> {
        let mut v: Vec<_> = spans.iter().flat_map(|s| (s.i0..=s.i1).map(move |i| (i, s.j))).collect();
        v.sort_by_key(|&(i, j)| (j, i));
        v
    }

    fn brute_nms(dets: &[Detection], s: f64, coverage: Coverage) -> Vec<usize> {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
        let mut taken = std::collections::HashSet::new();
        let mut kept = Vec::new();
        for k in order {
            let cells = brute_cells(&dets[k].bbox, s, coverage);
            if cells.iter().any(|c| taken.contains(c)) {
                continue;
            }
            taken.extend(cells);
            kept.push(k);
        }
        kept
    }

    fn random_dets(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Detection> {
        (0..n)
            .map(|_| {
                det(
                    rng.random_range(-extent..extent),
                    rng.random_range(-extent..extent),
                    rng.random_range(-3.2..3.2),
                    rng.random_range(0.05..5.0),
                    rng.random_range(0.05..2.5),
                    (rng.random_range(0..20) as f64) / 20.0,
                )
            })
            .collect()
    }

    #[test]
    fn spans_match_brute_force_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in random_dets(&mut rng, 300, 20.0) {
            for cov in [Coverage::CellCenter, Coverage::Conservative] {
                let mut want = brute_cells(&d.bbox, 0.2, cov);
                want.sort_by_key(|&(i, j)| (j, i));
                assert_eq!(span_cells(&footprint_spans(&d.bbox, 0.2, cov)), want, "{:?} {cov:?}", d.bbox);
            }
        }
    }

    #[test]
    fn nms_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let dets = random_dets(&mut rng, 100, 8.0);
            for cov in [Coverage::CellCenter, Coverage::Conservative] {
                let opts = NmsOptions { cell_size: 0.2, coverage: cov };
                assert_eq!(grid_nms_indices(&dets, &opts), brute_nms(&dets, 0.2, cov));
            }
        }
    }

    #[test]
    fn nms_examples() {
        let a = det(5.0, 0.0, 0.3, 4.0, 1.8, 0.9);
        let b = det(5.0, 0.0, 0.3, 4.0, 1.8, 0.8);
        let far = det(15.0, 0.0, 0.3, 4.0, 1.8, 0.8);
        let kept = grid_nms(&[b, a, far], &NmsOptions::default());
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(kept[1].bbox.center.x, 15.0);
        assert!(grid_nms(&[], &NmsOptions::default()).is_empty());
    }

    #[test]
    fn tiny_box_claims_its_cell() {
        let tiny = det(0.05, 0.05, 0.0, 0.02, 0.02, 0.5);
        let spans = footprint_spans(&tiny.bbox, 0.2, Coverage::CellCenter);
        assert_eq!(spans, vec![CellSpan { j: 0, i0: 0, i1: 0 }]);
        let other = det(0.15, 0.15, 0.0, 0.02, 0.02, 0.4);
        assert_eq!(grid_nms(&[tiny, other], &NmsOptions::default()).len(), 1);
    }

    #[test]
    fn score_ties_keep_input_order() {
        let a = det(5.0, 0.0, 0.0, 4.0, 1.8, 0.5);
        let b = det(5.1, 0.0, 0.0, 4.0, 1.8, 0.5);
        assert_eq!(grid_nms_indices(&[a, b], &NmsOptions::default()), vec![0]);
        assert_eq!(grid_nms_indices(&[b, a], &NmsOptions::default()), vec![0]);
    }

    #[test]
    fn sparse_and_dense_grids_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut dets = random_dets(&mut rng, 50, 10.0);
        let kept = grid_nms_indices(&dets, &NmsOptions::default());
        // Two far-apart clusters force a sparse grid.
        let shifted: Vec<Detection> = dets
            .iter()
            .map(|d| {
                let mut d = *d;
                d.bbox.center.x += 1e6;
                d
            })
            .collect();
        dets.push(det(-1e6, 0.0, 0.0, 1.0, 1.0, 0.0));
        let mut both = shifted;
        both.push(det(-1e6, 0.0, 0.0, 1.0, 1.0, 0.0));
        let spans: Vec<_> = both.iter().map(|d| footprint_spans(&d.bbox, 0.2, Coverage::CellCenter)).collect();
        assert!(matches!(NmsGrid::for_spans(0.2, &spans).storage, Storage::Sparse(_)));
        let mut kept_sparse = grid_nms_indices(&both, &NmsOptions::default());
        kept_sparse.retain(|&k| k < 50);
        assert_eq!(kept_sparse, kept);
    }

    fn single_row_spec(cols: usize) -> SensorSpec {
        SensorSpec::new("flat", cols, vec![0.0], -std::f64::consts::PI).unwrap()
    }

    #[test]
    fn extract_examples() {
        let spec = single_row_spec(8);
        let img = RangeImage::from_ranges(spec, vec![10.0; 8]).unwrap();
        let mut pred = AnchorMap::zeros(1, 8);
        assert!(extract_detections(&pred, &img, 0.05).unwrap().is_empty());

        let values = [0.0, 0.0, 0.0, 1.0, 0.0, 1.8, 4.0, 1.5];
        pred.set_anchor(0, 3, 2, 0.8, &values);
        let dets = extract_detections(&pred, &img, 0.05).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].score, 0.8);
        assert_eq!((dets[0].row, dets[0].col, dets[0].anchor), (0, 3, 2));

        let long = [0.0, 0.0, 0.0, 0.0, 2.0, 1.8, 4.0, 1.5];
        pred.set_anchor(0, 3, 2, 0.8, &long);
        let dets = extract_detections(&pred, &img, 0.05).unwrap();
        assert!((dets[0].score - 0.4).abs() < 1e-15);

        let mut bad_img = img.clone();
        bad_img.clear(0, 3);
        assert!(extract_detections(&pred, &bad_img, 0.05).unwrap().is_empty());
        assert!(extract_detections(&AnchorMap::zeros(2, 8), &img, 0.05).is_err());
    }

    #[test]
    fn postprocess_filter_erodes_isolated_pixels() {
        let spec = single_row_spec(64);
        let img = RangeImage::from_ranges(spec, vec![10.0; 64]).unwrap();
        let mut pred = AnchorMap::zeros(1, 64);
        let values = [0.0, 0.0, 0.0, 1.0, 0.0, 1.8, 4.0, 1.5];
        for c in 4..9 {
            pred.set_anchor(0, c, 0, 0.9, &values);
        }
        let with = postprocess(&pred, &img, &PostprocessOptions::default()).unwrap();
        assert_eq!(with.raw.len(), 1);
        assert_eq!(with.raw[0].col, 6);
        let without = postprocess(
            &pred,
            &img,
            &PostprocessOptions {
                min_window: None,
                parallel: false,
                ..PostprocessOptions::default()
            },
        )
        .unwrap();
        assert_eq!(without.raw.len(), 5);
        assert!(without.kept.len() < 5);
    }
}
