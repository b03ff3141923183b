//! Python bindings for the range-image detection toolkit.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use lidarscope_core::codec;
use lidarscope_core::evaluation::{self, EvalClass, EvalConfig, EvalSpace};
use lidarscope_core::geometry::{self, ObjectClass, Point3};
use lidarscope_core::io::dataset::{eval_frames, KittiDataset};
use lidarscope_core::io::formats;
use lidarscope_core::io::text::parse_detections;
use lidarscope_core::model::{self, ModelConfig};
use lidarscope_core::postprocess::{self, Coverage, Detection, NmsOptions, PostprocessOptions};
use lidarscope_core::range_image::{self, ReconstructOptions};
use lidarscope_core::sensor::{self, ChannelTable, MatchConfig};
use lidarscope_core::synth::{self, SyntheticScene};
use lidarscope_core::Error;

fn py_err(e: Error) -> PyErr {
    match e.root() {
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for lidarscope_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn class_of(name: &str) -> PyResult<ObjectClass> {
    ObjectClass::from_name(name).ok_or_else(|| PyValueError::new_err(format!("unknown class {name:?}")))
}

fn table(name: &str) -> PyResult<ChannelTable> {
    match name {
        "hdl64e" => Ok(ChannelTable::hdl64e()),
        "vlp32" => Ok(ChannelTable::vlp32()),
        _ => Err(PyValueError::new_err(format!("unknown channel table {name:?}; use hdl64e or vlp32"))),
    }
}

fn coverage(name: &str) -> PyResult<Coverage> {
    match name {
        "cell-center" => Ok(Coverage::CellCenter),
        "conservative" => Ok(Coverage::Conservative),
        _ => Err(PyValueError::new_err(format!("unknown coverage {name:?}"))),
    }
}

/// Upright box in the LiDAR frame; yaw counter-clockwise from +x.
#[pyclass(name = "Box3D", module = "lidarscope", frozen, from_py_object)]
#[derive(Clone)]
struct PyBox3D {
    inner: geometry::Box3D,
}

#[pymethods]
impl PyBox3D {
    #[new]
    #[pyo3(signature = (x, y, z, length, width, height, yaw, cls = "vehicle"))]
    #[allow(clippy::too_many_arguments)]
    fn new(x: f64, y: f64, z: f64, length: f64, width: f64, height: f64, yaw: f64, cls: &str) -> PyResult<Self> {
        let inner = geometry::Box3D::new(Point3::new(x, y, z), length, width, height, yaw, class_of(cls)?).py()?;
        Ok(Self { inner })
    }

    #[getter]
    fn x(&self) -> f64 {
        self.inner.center.x
    }

    #[getter]
    fn y(&self) -> f64 {
        self.inner.center.y
    }

    #[getter]
    fn z(&self) -> f64 {
        self.inner.center.z
    }

    #[getter]
    fn length(&self) -> f64 {
        self.inner.length
    }

    #[getter]
    fn width(&self) -> f64 {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> f64 {
        self.inner.height
    }

    #[getter]
    fn yaw(&self) -> f64 {
        self.inner.yaw
    }

    #[getter]
    fn cls(&self) -> &'static str {
        self.inner.class.name()
    }

    fn volume(&self) -> f64 {
        self.inner.volume()
    }

    fn corners(&self) -> Vec<(f64, f64, f64)> {
        self.inner.corners().iter().map(|p| (p.x, p.y, p.z)).collect()
    }

    fn __repr__(&self) -> String {
        let b = &self.inner;
        format!(
            "Box3D(x={}, y={}, z={}, length={}, width={}, height={}, yaw={}, cls={:?})",
            b.center.x,
            b.center.y,
            b.center.z,
            b.length,
            b.width,
            b.height,
            b.yaw,
            b.class.name()
        )
    }
}

fn wrap(b: geometry::Box3D) -> PyBox3D {
    PyBox3D { inner: b }
}

/// Range image; invalid cells read as NaN.
#[pyclass(name = "RangeImage", module = "lidarscope", frozen)]
struct PyRangeImage {
    inner: range_image::RangeImage,
}

#[pymethods]
impl PyRangeImage {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: formats::read_range_image(&path).map_err(|e| py_err(e.in_file(&path)))?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        formats::write_range_image(&path, &self.inner).map_err(|e| py_err(e.in_file(&path)))
    }

    #[getter]
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    #[getter]
    fn cols(&self) -> usize {
        self.inner.cols()
    }

    /// Channel elevations in degrees, top row first.
    fn elevations(&self) -> Vec<f64> {
        self.inner.spec.channel_elevations.iter().map(|e| e.to_degrees()).collect()
    }

    /// Row-major ranges.
    fn ranges(&self) -> Vec<f64> {
        self.inner.ranges_with_nan()
    }

    fn get(&self, row: usize, col: usize) -> PyResult<Option<f64>> {
        if row >= self.rows() || col >= self.cols() {
            return Err(PyValueError::new_err(format!("cell ({row}, {col}) outside the image")));
        }
        Ok(self.inner.get(row, col))
    }

    fn valid_count(&self) -> usize {
        self.inner.valid_count()
    }

    /// Keeps the rows of one channel subset of a 64-row image.
    #[pyo3(signature = (subset_id, source = "hdl64e", target = "vlp32"))]
    fn simulate(&self, subset_id: usize, source: &str, target: &str) -> PyResult<Self> {
        let subsets = subsets_of(source, target)?;
        let s = subsets
            .iter()
            .find(|s| s.subset_id == subset_id)
            .ok_or_else(|| PyValueError::new_err(format!("no subset {subset_id}")))?;
        Ok(Self {
            inner: sensor::apply_subset(&self.inner, s).py()?,
        })
    }

    fn __repr__(&self) -> String {
        format!("RangeImage(rows={}, cols={}, valid={})", self.rows(), self.cols(), self.valid_count())
    }
}

#[pyfunction]
fn iou_bev(a: &PyBox3D, b: &PyBox3D) -> PyResult<f64> {
    geometry::iou_bev(&a.inner, &b.inner).py()
}

#[pyfunction]
fn iou_3d(a: &PyBox3D, b: &PyBox3D) -> PyResult<f64> {
    geometry::iou_3d(&a.inner, &b.inner).py()
}

/// Confidence multiplier of a predicted (cos, sin) pair.
#[pyfunction]
fn orientation_confidence_factor(rx: f64, ry: f64) -> f64 {
    postprocess::orientation_confidence_factor(rx, ry)
}

/// (anchor, [dx, dy, dz, cos, sin, width, length, height]) of a box seen
/// through a point.
#[pyfunction]
fn encode_box(point: (f64, f64, f64), b: &PyBox3D) -> PyResult<(usize, Vec<f64>)> {
    let e = codec::encode_box(&Point3::new(point.0, point.1, point.2), &b.inner).py()?;
    Ok((e.anchor, e.values.to_vec()))
}

#[pyfunction]
fn decode_box(point: (f64, f64, f64), anchor: usize, values: [f64; 8]) -> PyResult<PyBox3D> {
    codec::decode_at_point(&Point3::new(point.0, point.1, point.2), anchor, &values)
        .py()
        .map(wrap)
}

/// Indices of the boxes kept by grid suppression, best first.
#[pyfunction]
#[pyo3(signature = (boxes, scores, cell_size = postprocess::DEFAULT_CELL_SIZE, coverage = "cell-center"))]
fn grid_nms(boxes: Vec<PyBox3D>, scores: Vec<f64>, cell_size: f64, coverage: &str) -> PyResult<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(PyValueError::new_err("boxes and scores differ in length"));
    }
    if !(cell_size.is_finite() && cell_size > 0.0) {
        return Err(PyValueError::new_err("cell_size must be > 0"));
    }
    let dets: Vec<Detection> = boxes
        .iter()
        .zip(&scores)
        .map(|(b, &score)| Detection {
            bbox: b.inner,
            score,
            row: 0,
            col: 0,
            anchor: 0,
        })
        .collect();
    let opts = NmsOptions {
        cell_size,
        coverage: self::coverage(coverage)?,
    };
    Ok(postprocess::grid_nms_indices(&dets, &opts))
}

/// Interpolated AP of (score, is_true_positive) pairs.
#[pyfunction]
#[pyo3(signature = (scored, n_labels, n_points = 11))]
fn average_precision(scored: Vec<(f64, bool)>, n_labels: usize, n_points: usize) -> PyResult<f64> {
    if n_points < 2 {
        return Err(PyValueError::new_err("n_points must be >= 2"));
    }
    Ok(evaluation::average_precision(&scored, n_labels, n_points).ap)
}

/// Elevations in degrees of a shipped table, top channel first.
#[pyfunction]
fn channel_table(name: &str) -> PyResult<Vec<f64>> {
    Ok(table(name)?.elevations.iter().map(|e| e.to_degrees()).collect())
}

/// The detector rows of a 32-channel table, in degrees.
#[pyfunction]
#[pyo3(signature = (name = "vlp32"))]
fn target_channels(name: &str) -> PyResult<Vec<f64>> {
    Ok(sensor::select_target_channels(&table(name)?)
        .py()?
        .iter()
        .map(|e| e.to_degrees())
        .collect())
}

fn subsets_of(source: &str, target: &str) -> PyResult<Vec<sensor::ChannelSubset>> {
    let targets = sensor::select_target_channels(&table(target)?).py()?;
    sensor::enumerate_subsets(&table(source)?, &targets, &MatchConfig::default()).py()
}

/// (subset_id, shift, variant, source rows, max gap deviation in degrees).
#[pyfunction]
#[pyo3(signature = (source = "hdl64e", target = "vlp32"))]
fn channel_subsets(source: &str, target: &str) -> PyResult<Vec<(usize, i32, usize, Vec<usize>, f64)>> {
    let src = table(source)?;
    let targets = sensor::select_target_channels(&table(target)?).py()?;
    Ok(subsets_of(source, target)?
        .into_iter()
        .map(|s| {
            let dev = sensor::gap_deviation(&src, &targets, &s).to_degrees();
            (s.subset_id, s.shift, s.variant, s.target_rows, dev)
        })
        .collect())
}

/// Range image of an unorganized scan. Channels are recovered from the
/// points unless a shipped table is named.
#[pyfunction]
#[pyo3(signature = (points, columns = sensor::VLP32_COLUMNS, table = None, rows = 64))]
fn build_range_image(
    points: Vec<(f64, f64, f64)>,
    columns: usize,
    table: Option<&str>,
    rows: usize,
) -> PyResult<PyRangeImage> {
    let pts: Vec<Point3> = points.iter().map(|&(x, y, z)| Point3::new(x, y, z)).collect();
    let az0 = -std::f64::consts::PI;
    let spec = match table {
        Some(t) => self::table(t)?.to_sensor_spec(columns, az0).py()?,
        None => range_image::reconstruct_channels(&pts, rows, &ReconstructOptions::default())
            .py()?
            .to_sensor_spec(format!("reconstructed-{rows}"), columns, az0)
            .py()?,
    };
    Ok(PyRangeImage {
        inner: range_image::build_range_image(&pts, &spec).0,
    })
}

fn detector_spec(columns: usize, target: &str) -> PyResult<range_image::SensorSpec> {
    let t = table(target)?;
    range_image::SensorSpec::new(
        format!("{}-target", t.source_name),
        columns,
        sensor::select_target_channels(&t).py()?,
        -std::f64::consts::PI,
    )
    .py()
}

/// Detector-resolution scan of a scene in the text format
/// (`class x y z l w h yaw` lines, optional `ground z`).
#[pyfunction]
#[pyo3(signature = (scene, columns = sensor::VLP32_COLUMNS, target = "vlp32"))]
fn raycast_scene(scene: &str, columns: usize, target: &str) -> PyResult<PyRangeImage> {
    let scene = SyntheticScene::parse(scene).py()?;
    let cast = synth::raycast(&scene, &detector_spec(columns, target)?).py()?;
    Ok(PyRangeImage { inner: cast.image })
}

fn post_options(threshold: f64, cell_size: f64) -> PostprocessOptions {
    PostprocessOptions {
        threshold,
        nms: NmsOptions {
            cell_size,
            ..NmsOptions::default()
        },
        ..PostprocessOptions::default()
    }
}

/// Post-processed exact targets of a scene: [(box, score)].
#[pyfunction]
#[pyo3(signature = (scene, threshold = postprocess::DEFAULT_THRESHOLD, cell_size = postprocess::DEFAULT_CELL_SIZE, columns = sensor::VLP32_COLUMNS))]
fn detect_oracle(scene: &str, threshold: f64, cell_size: f64, columns: usize) -> PyResult<Vec<(PyBox3D, f64)>> {
    let scene = SyntheticScene::parse(scene).py()?;
    let cast = synth::raycast(&scene, &detector_spec(columns, "vlp32")?).py()?;
    let pred = synth::oracle_predict(&cast, &scene.boxes).py()?;
    let out = postprocess::postprocess(&pred, &cast.image, &post_options(threshold, cell_size)).py()?;
    Ok(out.kept.into_iter().map(|d| (wrap(d.bbox), d.score)).collect())
}

/// Post-processes an LPM1 prediction map against its LRI1 image.
#[pyfunction]
#[pyo3(signature = (prediction, image, threshold = postprocess::DEFAULT_THRESHOLD, cell_size = postprocess::DEFAULT_CELL_SIZE))]
fn detect_file(prediction: PathBuf, image: PathBuf, threshold: f64, cell_size: f64) -> PyResult<Vec<(PyBox3D, f64)>> {
    let pred = formats::read_anchor_map(&prediction).map_err(|e| py_err(e.in_file(&prediction)))?;
    let img = formats::read_range_image(&image).map_err(|e| py_err(e.in_file(&image)))?;
    let out = postprocess::postprocess(&pred, &img, &post_options(threshold, cell_size)).py()?;
    Ok(out.kept.into_iter().map(|d| (wrap(d.bbox), d.score)).collect())
}

/// AP rows (space, class, difficulty, ap) of a detections file against a
/// KITTI-layout dataset.
#[pyfunction]
#[pyo3(signature = (root, detections, classes = vec!["car".to_string()], spaces = vec!["2d".to_string(), "bev".to_string(), "3d".to_string()], n_points = 11))]
fn evaluate_dataset(
    root: PathBuf,
    detections: PathBuf,
    classes: Vec<String>,
    spaces: Vec<String>,
    n_points: usize,
) -> PyResult<Vec<(String, String, String, f64)>> {
    let classes = classes
        .iter()
        .map(|c| EvalClass::from_name(c).ok_or_else(|| PyValueError::new_err(format!("unknown class {c:?}"))))
        .collect::<PyResult<Vec<_>>>()?;
    let spaces = spaces
        .iter()
        .map(|s| EvalSpace::from_name(s).ok_or_else(|| PyValueError::new_err(format!("unknown space {s:?}"))))
        .collect::<PyResult<Vec<_>>>()?;
    let text = std::fs::read_to_string(&detections).map_err(|e| PyOSError::new_err(format!("{}: {e}", detections.display())))?;
    let dets = parse_detections(&text).map_err(|e| py_err(e.in_file(&detections)))?;
    let ds = KittiDataset::new(root);
    let frames = eval_frames(&ds, &ds.frame_ids().py()?, &dets).py()?;
    let config = EvalConfig {
        n_points,
        ..EvalConfig::default()
    };
    let rows = evaluation::evaluate_all(&frames, &spaces, &classes, &config).py()?;
    Ok(rows
        .into_iter()
        .map(|r| {
            (
                r.space.name().to_string(),
                r.class.name().to_string(),
                r.difficulty.name().to_string(),
                r.result.ap,
            )
        })
        .collect())
}

fn model_config(n_blocks: usize, middle_kernel: (usize, usize)) -> ModelConfig {
    ModelConfig {
        n_blocks,
        middle_kernel,
        ..ModelConfig::default()
    }
}

/// (rows, cols, channels) of the network output.
#[pyfunction]
#[pyo3(signature = (rows, cols, n_blocks = 32, middle_kernel = (1, 7)))]
fn output_shape(rows: usize, cols: usize, n_blocks: usize, middle_kernel: (usize, usize)) -> PyResult<(usize, usize, usize)> {
    model::output_shape(rows, cols, &model_config(n_blocks, middle_kernel)).py()
}

/// (rows, cols) receptive field of the network.
#[pyfunction]
#[pyo3(signature = (n_blocks = 32, middle_kernel = (1, 7)))]
fn receptive_field(n_blocks: usize, middle_kernel: (usize, usize)) -> PyResult<(usize, usize)> {
    let config = model_config(n_blocks, middle_kernel);
    config.validate().py()?;
    Ok(model::receptive_field(&config))
}

#[pymodule]
fn lidarscope(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBox3D>()?;
    m.add_class::<PyRangeImage>()?;
    m.add_function(wrap_pyfunction!(iou_bev, m)?)?;
    m.add_function(wrap_pyfunction!(iou_3d, m)?)?;
    m.add_function(wrap_pyfunction!(orientation_confidence_factor, m)?)?;
    m.add_function(wrap_pyfunction!(encode_box, m)?)?;
    m.add_function(wrap_pyfunction!(decode_box, m)?)?;
    m.add_function(wrap_pyfunction!(grid_nms, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(channel_table, m)?)?;
    m.add_function(wrap_pyfunction!(target_channels, m)?)?;
    m.add_function(wrap_pyfunction!(channel_subsets, m)?)?;
    m.add_function(wrap_pyfunction!(build_range_image, m)?)?;
    m.add_function(wrap_pyfunction!(raycast_scene, m)?)?;
    m.add_function(wrap_pyfunction!(detect_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(detect_file, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(output_shape, m)?)?;
    m.add_function(wrap_pyfunction!(receptive_field, m)?)?;
    m.add("ANCHOR_CHANNELS", codec::AnchorLayout::TOTAL_CHANNELS)?;
    Ok(())
}
