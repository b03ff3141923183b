use std::collections::{BTreeSet, HashMap};
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lidarscope_core::codec::{rasterize_targets, AnchorLayout};
use lidarscope_core::evaluation::{evaluate_all, reference_vehicle_report, EvalClass, EvalConfig, EvalSpace, ReferenceTrack};
use lidarscope_core::geometry::{Box3D, ObjectClass, Point3};
use lidarscope_core::io::dataset::{eval_frames, KittiDataset};
use lidarscope_core::io::formats::{read_anchor_map, read_range_image, write_anchor_map, write_masks, write_range_image};
use lidarscope_core::io::kitti::{frame_labels, read_point_cloud};
use lidarscope_core::io::split::{split_dataset, SequenceMap};
use lidarscope_core::io::text::{
    format_ap_report, format_channel_plot, format_detections, format_pr_curves, format_reference_report,
    parse_detections, parse_track, DetectionRecord,
};
use lidarscope_core::io::write_atomic;
use lidarscope_core::model::{forward_reference, ModelConfig, ModelWeights};
use lidarscope_core::postprocess::{grid_nms_indices, postprocess, Detection};
use lidarscope_core::range_image::{
    build_range_image, reconstruct_channels, scale_for_network, RangeImage, ReconstructOptions, SensorSpec,
};
use lidarscope_core::sensor::{
    apply_subset, channel_plot_rows, elevation_mismatch, enumerate_subsets, gap_deviation, pick_subset,
    select_target_channels, ChannelSubset, ChannelTable,
};
use lidarscope_core::synth::{oracle_predict, random_scene, raycast, SceneParams, SyntheticScene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{require_dir, require_file, RunConfig, TableSource};
use crate::error::{CliError, CliResult};
use crate::{BenchArgs, BenchTarget, ChannelsArgs, ConvertArgs, DetectArgs, EncodeArgs, EvaluateArgs, RefevalArgs, SimulateArgs, SplitArgs};

/// Azimuth of the first column of every image the tool builds.
const AZIMUTH_OF_COLUMN_ZERO: f64 = -PI;

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn with_path<T>(r: lidarscope_core::Result<T>, path: &Path) -> CliResult<T> {
    r.map_err(|e| e.in_file(path).into())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    with_path(write_atomic(path, bytes), path)
}

/// Writes to `path`, or to stdout.
fn emit(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => write_bytes(p, text.as_bytes()),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| CliError::Io(format!("stdout: {e}")))
        }
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

/// Files with extension `ext` in `dir`, sorted by name.
fn files_with_ext(dir: &Path, ext: &str) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let p = entry.map_err(|e| CliError::io(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|e| e == ext) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// (frame id, input, output) for a file or a whole directory.
fn batch(input: &Path, output: &Path, in_ext: &str, out_ext: &str) -> CliResult<Vec<(String, PathBuf, PathBuf)>> {
    if input.is_dir() {
        create_dir(output)?;
        Ok(files_with_ext(input, in_ext)?
            .into_iter()
            .map(|p| {
                let id = stem(&p);
                let dst = output.join(format!("{id}.{out_ext}"));
                (id, p, dst)
            })
            .collect())
    } else {
        require_file(input, "input")?;
        Ok(vec![(stem(input), input.to_path_buf(), output.to_path_buf())])
    }
}

/// Runs `f` on every item in parallel; results keep the input order.
fn par_collect<T: Sync, U: Send>(items: &[T], f: impl Fn(usize, &T) -> CliResult<U> + Sync) -> CliResult<Vec<U>> {
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect::<Vec<_>>().into_iter().collect()
}

fn scan_layout(points: &[Point3], table: Option<&ChannelTable>, rows: usize, columns: usize) -> lidarscope_core::Result<SensorSpec> {
    match table {
        Some(t) => t.to_sensor_spec(columns, AZIMUTH_OF_COLUMN_ZERO),
        None => reconstruct_channels(points, rows, &ReconstructOptions::default())?.to_sensor_spec(
            format!("reconstructed-{rows}"),
            columns,
            AZIMUTH_OF_COLUMN_ZERO,
        ),
    }
}

fn table_arg(value: &str) -> CliResult<ChannelTable> {
    let source = TableSource::from_arg(value);
    if let TableSource::File(p) = &source {
        require_file(p, "channel table")?;
    }
    source.load()
}

pub fn convert(cfg: &RunConfig, a: &ConvertArgs) -> CliResult<()> {
    let table = a.table.as_deref().map(table_arg).transpose()?;
    if a.rows == 0 {
        return Err(CliError::Config("--rows must be > 0".into()));
    }
    let jobs = batch(&a.input, &a.output, "bin", "lri")?;
    let lines = par_collect(&jobs, |_, (id, src, dst)| {
        let cloud = with_path(read_point_cloud(src), src)?;
        let spec = with_path(scan_layout(&cloud.points, table.as_ref(), a.rows, cfg.columns), src)?;
        let (img, stats) = build_range_image(&cloud.points, &spec);
        with_path(write_range_image(dst, &img), dst)?;
        Ok(format!(
            "{id},{},{},{},{},{}\n",
            cloud.points.len(),
            cloud.dropped_non_finite,
            stats.kept,
            stats.dropped,
            stats.shadowed
        ))
    })?;
    let mut report = String::from("frame,points,non_finite,kept,outside_channels,shadowed\n");
    report.extend(lines);
    emit(a.stats.as_deref(), &report)
}

fn subsets(cfg: &RunConfig) -> CliResult<(ChannelTable, ChannelTable, Vec<f64>, Vec<ChannelSubset>)> {
    let source = cfg.source_table.load()?;
    let target = cfg.target_table.load()?;
    let targets = select_target_channels(&target)?;
    let subsets = enumerate_subsets(&source, &targets, &cfg.match_config())?;
    if subsets.is_empty() {
        return Err(CliError::Data(format!(
            "no channel subset of {} within {} degrees",
            source.source_name, cfg.match_tolerance_deg
        )));
    }
    Ok((source, target, targets, subsets))
}

fn find_subset(subsets: &[ChannelSubset], id: usize) -> CliResult<&ChannelSubset> {
    subsets
        .iter()
        .find(|s| s.subset_id == id)
        .ok_or_else(|| CliError::Config(format!("no subset {id}; {} available", subsets.len())))
}

pub fn simulate(cfg: &RunConfig, a: &SimulateArgs) -> CliResult<()> {
    let (source, _, _, subsets) = subsets(cfg)?;
    let fixed = a.subset.map(|id| find_subset(&subsets, id)).transpose()?;
    let jobs = batch(&a.input, &a.output, "lri", "lri")?;
    let lines = par_collect(&jobs, |i, (id, src, dst)| {
        let img = with_path(read_range_image(src), src)?;
        if img.rows() != source.len() {
            return Err(CliError::Data(format!(
                "{}: {} rows, but the source table {} has {}",
                src.display(),
                img.rows(),
                source.source_name,
                source.len()
            )));
        }
        let subset = match fixed {
            Some(s) => s,
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(i as u64);
                pick_subset(&mut rng, &subsets).expect("subsets checked non-empty")
            }
        };
        let out = with_path(apply_subset(&img, subset), src)?;
        with_path(write_range_image(dst, &out), dst)?;
        Ok(format!("{id},{},{},{}\n", subset.subset_id, subset.shift, subset.variant))
    })?;
    let mut log = String::from("frame,subset_id,shift,variant\n");
    log.extend(lines);
    emit(a.log.as_deref(), &log)
}

pub fn encode(cfg: &RunConfig, a: &EncodeArgs) -> CliResult<()> {
    let ds = KittiDataset::new(cfg.dataset()?);
    let out_dir = cfg.output_dir()?;
    if let Some(d) = &a.images {
        require_dir(d, "image directory")?;
    }
    let frames = if a.frames.is_empty() { ds.frame_ids()? } else { a.frames.clone() };
    create_dir(out_dir)?;
    let lines = par_collect(&frames, |_, id| {
        let rec = ds.frame(id, a.images.is_none())?;
        let img = match (&a.images, &rec.cloud) {
            (Some(dir), _) => {
                let p = dir.join(format!("{id}.lri"));
                with_path(read_range_image(&p), &p)?
            }
            (None, Some(cloud)) => {
                let p = ds.cloud_path(id);
                let spec = with_path(scan_layout(&cloud.points, None, 64, cfg.columns), &p)?;
                build_range_image(&cloud.points, &spec).0
            }
            (None, None) => unreachable!("frame loaded with its scan"),
        };
        let labels = with_path(frame_labels(&rec.labels, &rec.calib), &ds.label_path(id))?;
        let r = rasterize_targets(&img, &labels.boxes, &labels.dontcare, Some(&rec.calib), cfg.window.window())?;
        let targets = out_dir.join(format!("{id}.targets.lpm"));
        let masks = out_dir.join(format!("{id}.masks.lpm"));
        with_path(write_anchor_map(&targets, &r.targets), &targets)?;
        with_path(write_masks(&masks, &r.masks), &masks)?;
        let positive = r
            .targets
            .data
            .chunks_exact(AnchorLayout::TOTAL_CHANNELS)
            .filter(|px| (0..AnchorLayout::N_ANCHORS).any(|k| px[AnchorLayout::channel(k, AnchorLayout::OBJECTNESS)] > 0.0))
            .count();
        let classified = r.masks.classification.iter().filter(|&&m| m).count();
        Ok(format!(
            "{id},{},{},{},{},{}\n",
            labels.boxes.len(),
            positive,
            classified,
            r.masks.regression_count(),
            r.skipped_boxes
        ))
    })?;
    let mut summary = String::from("frame,boxes,positive_pixels,classified_pixels,regression_anchors,skipped_boxes\n");
    summary.extend(lines);
    emit(a.summary.as_deref(), &summary)
}

fn records(frame_id: &str, kept: Vec<Detection>) -> Vec<DetectionRecord> {
    kept.into_iter()
        .map(|d| DetectionRecord {
            frame_id: frame_id.to_string(),
            score: d.score,
            bbox: d.bbox,
        })
        .collect()
}

pub fn detect(cfg: &RunConfig, a: &DetectArgs, parallel: bool) -> CliResult<()> {
    let mut out = Vec::new();
    if a.oracle {
        let path = a.scene.as_deref().expect("clap requires --scene");
        require_file(path, "scene")?;
        let scene = with_path(SyntheticScene::parse(&read_text(path)?), path)?;
        let target = cfg.target_table.load()?;
        let spec = SensorSpec::new(
            format!("{}-target", target.source_name),
            cfg.columns,
            select_target_channels(&target)?,
            AZIMUTH_OF_COLUMN_ZERO,
        )?;
        let cast = raycast(&scene, &spec)?;
        let pred = oracle_predict(&cast, &scene.boxes)?;
        let result = postprocess(&pred, &cast.image, &cfg.postprocess_options(parallel))?;
        let id = a.frame_id.clone().unwrap_or_else(|| stem(path));
        out.extend(records(&id, result.kept));
    } else {
        let pred = a.prediction.as_deref().expect("clap requires --prediction");
        let image = a.image.as_deref().expect("clap requires --image");
        let pairs: Vec<(String, PathBuf, PathBuf)> = if pred.is_dir() {
            require_dir(image, "image directory")?;
            if a.frame_id.is_some() {
                return Err(CliError::Config("--frame-id needs a single prediction file".into()));
            }
            files_with_ext(pred, "lpm")?
                .into_iter()
                .map(|p| {
                    let id = stem(&p);
                    let img = image.join(format!("{id}.lri"));
                    (id, p, img)
                })
                .collect()
        } else {
            require_file(pred, "prediction")?;
            require_file(image, "image")?;
            vec![(a.frame_id.clone().unwrap_or_else(|| stem(pred)), pred.to_path_buf(), image.to_path_buf())]
        };
        let single = pairs.len() == 1;
        let per_frame = par_collect(&pairs, |_, (id, p, i)| {
            let map = with_path(read_anchor_map(p), p)?;
            let img = with_path(read_range_image(i), i)?;
            let result = with_path(postprocess(&map, &img, &cfg.postprocess_options(parallel && single)), p)?;
            Ok(records(id, result.kept))
        })?;
        out.extend(per_frame.into_iter().flatten());
    }
    emit(a.output.as_deref(), &format_detections(&out))
}

/// `frame_id train|val` lines.
fn parse_split(text: &str, path: &Path) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        match content.split_whitespace().collect::<Vec<_>>()[..] {
            [id, part @ ("train" | "val")] => out.push((id.to_string(), part.to_string())),
            _ => {
                return Err(CliError::Data(format!(
                    "{}: line {}: expected `frame_id train|val`",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(out)
}

fn parse_names<T>(values: &[String], what: &str, from: impl Fn(&str) -> Option<T>) -> CliResult<Vec<T>> {
    values
        .iter()
        .map(|v| from(v.trim()).ok_or_else(|| CliError::Config(format!("unknown {what} {v:?}"))))
        .collect()
}

pub fn evaluate(cfg: &RunConfig, a: &EvaluateArgs) -> CliResult<()> {
    let ds = KittiDataset::new(cfg.dataset()?);
    require_file(&a.detections, "detections")?;
    let spaces = parse_names(&a.spaces, "space", EvalSpace::from_name)?;
    let classes = parse_names(&a.classes, "class", EvalClass::from_name)?;
    if !matches!(a.subset.as_str(), "train" | "val") {
        return Err(CliError::Config(format!("--subset must be train or val, not {:?}", a.subset)));
    }
    let mut detections = with_path(parse_detections(&read_text(&a.detections)?), &a.detections)?;
    let frame_ids = match &a.split {
        Some(p) => {
            require_file(p, "split")?;
            let chosen: Vec<String> = parse_split(&read_text(p)?, p)?
                .into_iter()
                .filter(|(_, part)| *part == a.subset)
                .map(|(id, _)| id)
                .collect();
            let keep: BTreeSet<&str> = chosen.iter().map(String::as_str).collect();
            detections.retain(|d| keep.contains(d.frame_id.as_str()));
            chosen
        }
        None => ds.frame_ids()?,
    };
    let config = EvalConfig {
        n_points: cfg.ap_points,
        ..EvalConfig::default()
    };
    let frames = eval_frames(&ds, &frame_ids, &detections)?;
    let rows = evaluate_all(&frames, &spaces, &classes, &config)?;
    if let Some(p) = &a.pr_curves {
        emit(Some(p), &format_pr_curves(&rows))?;
    }
    emit(a.output.as_deref(), &format_ap_report(&rows))
}

pub fn refeval(a: &RefevalArgs) -> CliResult<()> {
    require_file(&a.detections, "detections")?;
    require_file(&a.track, "track")?;
    if !(a.match_radius.is_finite() && a.match_radius > 0.0) {
        return Err(CliError::Config(format!("--match-radius {} must be > 0", a.match_radius)));
    }
    let dets = with_path(parse_detections(&read_text(&a.detections)?), &a.detections)?;
    let poses = with_path(parse_track(&read_text(&a.track)?), &a.track)?;
    let mut by_frame: HashMap<String, Vec<Box3D>> = HashMap::new();
    for d in dets.into_iter().filter(|d| d.bbox.class == ObjectClass::Vehicle) {
        by_frame.entry(d.frame_id).or_default().push(d.bbox);
    }
    let track = ReferenceTrack::new(poses);
    let report = reference_vehicle_report(&track, a.match_radius, |f| by_frame.get(f).map_or(&[][..], Vec::as_slice));
    emit(a.output.as_deref(), &format_reference_report(&report))
}

pub fn channels(cfg: &RunConfig, a: &ChannelsArgs) -> CliResult<()> {
    if let Some(scan) = &a.reconstruct {
        require_file(scan, "scan")?;
        if a.rows == 0 {
            return Err(CliError::Config("--rows must be > 0".into()));
        }
        let cloud = with_path(read_point_cloud(scan), scan)?;
        let rec = with_path(reconstruct_channels(&cloud.points, a.rows, &ReconstructOptions::default()), scan)?;
        if let Some(d) = rec.degraded {
            log::warn!("only {} of {} channels resolved", d.resolved, d.expected);
        }
        let table = ChannelTable::new(stem(scan), rec.elevations)?;
        return emit(a.output.as_deref(), &table.to_text());
    }
    let (source, target, targets, subsets) = subsets(cfg)?;
    if a.plot {
        let rows = channel_plot_rows(&source, &target, find_subset(&subsets, a.subset)?);
        return emit(a.output.as_deref(), &format_channel_plot(&rows));
    }
    let mut s = String::from("subset_id,shift,variant,max_gap_deviation_deg,max_elevation_error_deg,rows\n");
    for sub in &subsets {
        let rows: Vec<String> = sub.target_rows.iter().map(usize::to_string).collect();
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6},{}\n",
            sub.subset_id,
            sub.shift,
            sub.variant,
            gap_deviation(&source, &targets, sub).to_degrees(),
            elevation_mismatch(&source, &targets, sub).to_degrees(),
            rows.join(" ")
        ));
    }
    emit(a.output.as_deref(), &s)
}

fn random_detections(rng: &mut ChaCha8Rng, n: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let class = if rng.random_bool(0.5) { ObjectClass::Vehicle } else { ObjectClass::VulnerableRoadUser };
            let (l, w) = match class {
                ObjectClass::Vehicle => (rng.random_range(3.5..5.0), rng.random_range(1.5..2.0)),
                ObjectClass::VulnerableRoadUser => (rng.random_range(0.5..1.8), rng.random_range(0.4..0.8)),
            };
            let center = Point3::new(rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0), -1.0);
            let yaw = rng.random_range(-PI..PI);
            Detection {
                bbox: Box3D::new(center, l, w, 1.5, yaw, class).expect("positive dimensions"),
                score: rng.random(),
                row: 0,
                col: 0,
                anchor: 0,
            }
        })
        .collect()
}

fn time_ms<T>(repeats: usize, mut f: impl FnMut() -> CliResult<T>) -> CliResult<Vec<f64>> {
    let mut out = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        std::hint::black_box(f()?);
        out.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(out)
}

fn target_image_spec(cfg: &RunConfig) -> CliResult<SensorSpec> {
    let target = cfg.target_table.load()?;
    Ok(SensorSpec::new(
        format!("{}-target", target.source_name),
        cfg.columns,
        select_target_channels(&target)?,
        AZIMUTH_OF_COLUMN_ZERO,
    )?)
}

pub fn bench(cfg: &RunConfig, a: &BenchArgs, parallel: bool) -> CliResult<()> {
    if a.repeats == 0 {
        return Err(CliError::Config("--repeats must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let opts = cfg.postprocess_options(parallel);
    let (name, n, times) = match a.target {
        BenchTarget::Nms => {
            let dets = random_detections(&mut rng, a.n);
            let times = time_ms(a.repeats, || Ok(grid_nms_indices(std::hint::black_box(&dets), &opts.nms)))?;
            ("nms", a.n, times)
        }
        BenchTarget::Pipeline => {
            let spec = target_image_spec(cfg)?;
            let params = SceneParams { min_boxes: 10, max_boxes: 10, ..SceneParams::default() };
            let scene = random_scene(&mut rng, &params);
            let cast = raycast(&scene, &spec)?;
            let mut pred = oracle_predict(&cast, &scene.boxes)?;
            // Clutter just below the threshold.
            for px in pred.data.chunks_exact_mut(AnchorLayout::TOTAL_CHANNELS) {
                for k in 0..AnchorLayout::N_ANCHORS {
                    let ch = AnchorLayout::channel(k, AnchorLayout::OBJECTNESS);
                    if px[ch] == 0.0 && cfg.threshold > 0.0 {
                        px[ch] = rng.random_range(0.0..cfg.threshold) * 0.98;
                    }
                }
            }
            let cells = pred.rows * pred.cols;
            let times = time_ms(a.repeats, || Ok(postprocess(&pred, &cast.image, &opts)?))?;
            ("pipeline", cells, times)
        }
        BenchTarget::Forward => {
            let spec = target_image_spec(cfg)?;
            let config = ModelConfig {
                n_blocks: 2,
                trunk_channels: 8,
                branch_channels: 8,
                padding: cfg.padding,
                ..ModelConfig::default()
            };
            let weights = ModelWeights::random(&config, 0.1, &mut rng)?;
            let ranges: Vec<f64> = (0..spec.rows() * spec.cols()).map(|_| rng.random_range(2.0..80.0)).collect();
            let input = scale_for_network(&RangeImage::from_ranges(spec, ranges)?);
            let cells = input.rows * input.cols;
            let times = time_ms(a.repeats, || Ok(forward_reference(&config, &weights, &input)?))?;
            ("forward", cells, times)
        }
    };
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 { sorted[mid] } else { 0.5 * (sorted[mid - 1] + sorted[mid]) };
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let report = format!(
        "benchmark,n,repeats,mean_ms,median_ms,min_ms,max_ms\n{name},{n},{},{mean:.4},{median:.4},{:.4},{:.4}\n",
        a.repeats,
        sorted[0],
        sorted[sorted.len() - 1]
    );
    emit(a.output.as_deref(), &report)
}

pub fn split(cfg: &RunConfig, a: &SplitArgs) -> CliResult<()> {
    let map_path = cfg
        .sequence_map
        .as_deref()
        .ok_or_else(|| CliError::Config("no sequence map given (--sequence-map or `sequence_map` key)".into()))?;
    let map = with_path(SequenceMap::parse(&read_text(map_path)?), map_path)?;
    let frame_ids: Vec<String> = match (&a.frames, &cfg.dataset) {
        (Some(p), _) => {
            require_file(p, "frame list")?;
            read_text(p)?
                .lines()
                .map(|l| l.split('#').next().unwrap_or("").trim())
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect()
        }
        (None, Some(root)) => KittiDataset::new(root).frame_ids()?,
        (None, None) => map.entries.iter().map(|(f, _)| f.clone()).collect(),
    };
    let split = split_dataset(&frame_ids, &map, a.target)?;
    log::info!(
        "{} validation frames from sequences {:?}",
        split.validation.len(),
        split.validation_sequences
    );
    emit(a.output.as_deref(), &split.to_text(&frame_ids))
}

