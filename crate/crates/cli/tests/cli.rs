use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lidarscope_core::geometry::{normalize_angle, Box3D, ObjectClass, Point3};
use lidarscope_core::io::formats::{read_anchor_map, read_masks, read_range_image};
use lidarscope_core::io::kitti::{encode_point_cloud, read_calib, read_labels};
use lidarscope_core::io::text::parse_detections;
use lidarscope_core::sensor::ChannelTable;
use lidarscope_core::synth::{raycast, SyntheticScene};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn lidarscope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lidarscope"))
        .args(args)
        .env_remove("LIDARSCOPE_CONFIG")
        .output()
        .expect("run lidarscope")
}

fn ok(args: &[&str]) -> String {
    let out = lidarscope(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn oracle_detect_reproduces_the_scene() {
    let scene_path = fixtures().join("scene.txt");
    let scene = SyntheticScene::parse(&fs::read_to_string(&scene_path).unwrap()).unwrap();
    let dets = parse_detections(&ok(&["detect", "--oracle", "--scene", s(&scene_path)])).unwrap();
    assert_eq!(dets.len(), scene.boxes.len());
    for b in &scene.boxes {
        let d = dets
            .iter()
            .find(|d| d.bbox.center.distance(&b.center) < 1e-6)
            .unwrap_or_else(|| panic!("no detection for {b:?}"));
        assert_eq!(d.frame_id, "scene");
        assert_eq!(d.bbox.class, b.class);
        assert!((d.bbox.length - b.length).abs() < 1e-6);
        assert!((d.bbox.width - b.width).abs() < 1e-6);
        assert!((d.bbox.height - b.height).abs() < 1e-6);
        assert!(normalize_angle(d.bbox.yaw - b.yaw).abs() < 1e-6);
    }
}

#[test]
fn evaluate_mini_dataset() {
    let root = fixtures().join("mini_eval");
    let perfect = ok(&[
        "evaluate",
        "--dataset",
        s(&root),
        "--detections",
        s(&root.join("detections_perfect.txt")),
        "--classes",
        "car",
    ]);
    let rows: Vec<&str> = perfect.lines().skip(1).collect();
    assert_eq!(rows.len(), 9);
    for r in rows {
        assert_eq!(r.split(',').nth(3), Some("1.000000"), "{r}");
    }
    let mixed = ok(&[
        "evaluate",
        "--dataset",
        s(&root),
        "--detections",
        s(&root.join("detections.txt")),
        "--classes",
        "car",
        "--spaces",
        "bev",
    ]);
    for r in mixed.lines().skip(1) {
        let ap: f64 = r.split(',').nth(3).unwrap().parse().unwrap();
        assert!((ap - 28.0 / 33.0).abs() < 1e-6, "{r}");
    }
}

#[test]
fn evaluate_writes_pr_curves_and_honours_split() {
    let root = fixtures().join("mini_eval");
    let dir = tempfile::tempdir().unwrap();
    let split = dir.path().join("split.txt");
    fs::write(&split, "000000 val\n000001 train\n").unwrap();
    let curves = dir.path().join("pr.csv");
    let report = dir.path().join("ap.csv");
    ok(&[
        "evaluate",
        "--dataset",
        s(&root),
        "--detections",
        s(&root.join("detections.txt")),
        "--split",
        s(&split),
        "--classes",
        "car",
        "--spaces",
        "3d",
        "--output",
        s(&report),
        "--pr-curves",
        s(&curves),
    ]);
    // Frame 000000 alone: its hit outranks its false alarm.
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("3d,car,easy,1.000000,1,1,1"), "{text}");
    assert!(fs::read_to_string(&curves).unwrap().starts_with("space,class,difficulty,threshold,recall,precision\n"));
}

#[test]
fn bench_nms_reports_mean_and_median() {
    let out = ok(&["bench", "nms", "--n", "5000", "--repeats", "5"]);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("benchmark,n,repeats,mean_ms,median_ms,min_ms,max_ms"));
    let f: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&f[..3], ["nms", "5000", "5"]);
    let v: Vec<f64> = f[3..].iter().map(|x| x.parse().unwrap()).collect();
    assert!(v.iter().all(|&x| x > 0.0));
    assert!(v[2] <= v[1] && v[1] <= v[3]);
}

#[test]
fn exit_codes() {
    let root = fixtures().join("mini_eval");
    let dir = tempfile::tempdir().unwrap();

    let unknown_flag = lidarscope(&["detect", "--oracle", "--scene", "x", "--frobnicate"]);
    assert_eq!(code(&unknown_flag), 2);
    assert_eq!(code(&lidarscope(&["evaluate", "--dataset", "/no/such/dir", "--detections", "x"])), 2);
    assert_eq!(code(&lidarscope(&["detect", "--oracle", "--scene", "/no/such/scene.txt"])), 2);
    assert_eq!(code(&lidarscope(&["--threshold", "fast", "bench", "nms"])), 2);

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "treshold = 0.1\n").unwrap();
    assert_eq!(code(&lidarscope(&["--config", s(&cfg), "bench", "nms", "--repeats", "1"])), 2);
    let via_env = Command::new(env!("CARGO_BIN_EXE_lidarscope"))
        .args(["bench", "nms", "--repeats", "1"])
        .env("LIDARSCOPE_CONFIG", &cfg)
        .output()
        .unwrap();
    assert_eq!(code(&via_env), 2);

    let broken = dir.path().join("broken.txt");
    fs::write(&broken, "000000 vehicle 0.9 1 2\n").unwrap();
    let args = ["evaluate", "--dataset", s(&root), "--detections", s(&broken)];
    assert_eq!(code(&lidarscope(&args)), 4);
    let stranger = dir.path().join("stranger.txt");
    fs::write(&stranger, "000009 vehicle 0.9 12 3 -0.98 4 1.8 1.5 0\n").unwrap();
    let args = ["evaluate", "--dataset", s(&root), "--detections", s(&stranger)];
    assert_eq!(code(&lidarscope(&args)), 4);

    let unwritable = dir.path().join("missing/dir/out.txt");
    let scene = fixtures().join("scene.txt");
    let args = ["detect", "--oracle", "--scene", s(&scene), "--output", s(&unwritable)];
    assert_eq!(code(&lidarscope(&args)), 3);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# objectness never exceeds 1\nthreshold = 2\n").unwrap();
    let scene = fixtures().join("scene.txt");
    let from_file = ok(&["--config", s(&cfg), "detect", "--oracle", "--scene", s(&scene)]);
    assert!(from_file.is_empty());
    let overridden = ok(&["--config", s(&cfg), "--threshold", "0.5", "detect", "--oracle", "--scene", s(&scene)]);
    assert_eq!(overridden.lines().count(), 4);
}

#[test]
fn help_lists_every_subcommand() {
    let top = ok(&["--help"]);
    for sub in ["convert", "simulate", "encode", "detect", "evaluate", "refeval", "channels", "bench", "split"] {
        assert!(top.contains(sub), "{sub}");
        let help = ok(&[sub, "--help"]);
        assert!(help.contains("--jobs") && help.contains("--config") && help.contains("--seed"), "{sub}");
    }
    assert!(ok(&["detect", "--help"]).contains("--oracle"));
}

/// A KITTI-layout frame whose scan is a raycast of its labels.
fn synthetic_dataset(root: &Path) {
    let mini = fixtures().join("mini_eval");
    for sub in ["label_2", "calib", "velodyne"] {
        fs::create_dir_all(root.join(sub)).unwrap();
    }
    fs::copy(mini.join("label_2/000000.txt"), root.join("label_2/000000.txt")).unwrap();
    fs::copy(mini.join("calib/000000.txt"), root.join("calib/000000.txt")).unwrap();
    let calib = read_calib(&root.join("calib/000000.txt")).unwrap();
    let label = read_labels(&root.join("label_2/000000.txt")).unwrap()[0].to_box3d(&calib).unwrap();
    // Labels enclose their points with a margin.
    let car = Box3D { length: label.length - 0.1, width: label.width - 0.1, height: label.height - 0.1, ..label };
    // Walls around the sensor give every channel returns.
    let room = Box3D::new(Point3::new(0.0, 0.0, 23.27), 120.0, 120.0, 50.0, 0.0, ObjectClass::Vehicle).unwrap();
    let scene = SyntheticScene { boxes: vec![car, room], ground_z: Some(-1.73) };
    let spec = ChannelTable::hdl64e().to_sensor_spec(2083, -PI).unwrap();
    let cast = raycast(&scene, &spec).unwrap();
    let mut points = Vec::new();
    for r in 0..cast.image.rows() {
        for c in 0..cast.image.cols() {
            points.extend(cast.image.cell_point(r, c));
        }
    }
    fs::write(root.join("velodyne/000000.bin"), encode_point_cloud(&points, None)).unwrap();
}

#[test]
fn scan_to_targets_and_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    synthetic_dataset(&root);
    let out = dir.path().join("out");

    let stats = ok(&["convert", "--input", s(&root.join("velodyne")), "--output", s(&out.join("lri"))]);
    assert!(stats.starts_with("frame,points,non_finite,kept,outside_channels,shadowed\n000000,"));
    let img = read_range_image(&out.join("lri/000000.lri")).unwrap();
    assert_eq!((img.rows(), img.cols()), (64, 1808));

    let log = ok(&[
        "--seed",
        "3",
        "simulate",
        "--input",
        s(&out.join("lri")),
        "--output",
        s(&out.join("sim")),
    ]);
    assert!(log.starts_with("frame,subset_id,shift,variant\n000000,"));
    let sim = read_range_image(&out.join("sim/000000.lri")).unwrap();
    assert_eq!((sim.rows(), sim.cols()), (25, 1808));

    let summary = ok(&[
        "--dataset",
        s(&root),
        "--output-dir",
        s(&out.join("targets")),
        "encode",
        "--images",
        s(&out.join("sim")),
    ]);
    let f: Vec<usize> = summary.lines().nth(1).unwrap().split(',').skip(1).map(|x| x.parse().unwrap()).collect();
    assert_eq!(f[0], 1, "{summary}");
    assert!(f[1] > 10 && f[2] >= f[1] && f[3] >= f[1], "{summary}");
    let targets = read_anchor_map(&out.join("targets/000000.targets.lpm")).unwrap();
    let masks = read_masks(&out.join("targets/000000.masks.lpm")).unwrap();
    assert_eq!((targets.rows, targets.cols), (25, 1808));
    assert_eq!(masks.regression_count(), f[3]);

    // Targets as predictions: post-processing recovers the labelled car.
    let dets = ok(&[
        "detect",
        "--prediction",
        s(&out.join("targets/000000.targets.lpm")),
        "--image",
        s(&out.join("sim/000000.lri")),
        "--frame-id",
        "000000",
    ]);
    let dets = parse_detections(&dets).unwrap();
    assert!(!dets.is_empty());
    let det_file = dir.path().join("dets.txt");
    fs::write(&det_file, lidarscope_core::io::text::format_detections(&dets)).unwrap();
    let ap = ok(&[
        "evaluate",
        "--dataset",
        s(&root),
        "--detections",
        s(&det_file),
        "--classes",
        "car",
        "--spaces",
        "bev",
    ]);
    assert!(ap.lines().nth(1).unwrap().starts_with("bev,car,easy,1.000000"), "{ap}");
}

#[test]
fn outputs_are_byte_identical_across_runs_and_job_counts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    synthetic_dataset(&root);
    let run = |tag: &str, jobs: &str| -> Vec<Vec<u8>> {
        let out = dir.path().join(tag);
        let j = ["--jobs", jobs, "--seed", "11"];
        let with = |rest: &[&str]| {
            let mut v: Vec<&str> = j.to_vec();
            v.extend_from_slice(rest);
            ok(&v)
        };
        let conv = with(&["convert", "--input", s(&root.join("velodyne")), "--output", s(&out.join("lri"))]);
        let sim = with(&["simulate", "--input", s(&out.join("lri")), "--output", s(&out.join("sim"))]);
        let det = with(&["detect", "--oracle", "--scene", s(&fixtures().join("scene.txt"))]);
        let plot = with(&["channels", "--plot", "--subset", "5"]);
        vec![
            conv.into_bytes(),
            sim.into_bytes(),
            det.into_bytes(),
            plot.into_bytes(),
            fs::read(out.join("lri/000000.lri")).unwrap(),
            fs::read(out.join("sim/000000.lri")).unwrap(),
        ]
    };
    let a = run("a", "1");
    assert_eq!(a, run("b", "1"));
    assert_eq!(a, run("c", "4"));
}

#[test]
fn split_and_refeval() {
    let dir = tempfile::tempdir().unwrap();
    let map = dir.path().join("map.txt");
    fs::write(&map, "a s1\nb s1\nc s2\nd s2\ne s2\nf s3\n").unwrap();
    let split = ok(&["--sequence-map", s(&map), "split", "--target", "2"]);
    assert_eq!(split, "a val\nb val\nc train\nd train\ne train\nf train\n");

    let track = dir.path().join("track.txt");
    fs::write(&track, "f1 10 0 -1 4 1.8 1.5 0\nf2 30 0 -1 4 1.8 1.5 0\n").unwrap();
    let dets = dir.path().join("dets.txt");
    fs::write(&dets, "f1 vehicle 0.9 10.3 0.4 -1 4 1.8 1.5 0\n").unwrap();
    let report = ok(&["refeval", "--detections", s(&dets), "--track", s(&track)]);
    let rows: Vec<Vec<&str>> = report.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0], ["metric", "0-20 m", "20-40 m", ">40 m"]);
    assert_eq!(rows.len(), 10);
    assert_eq!(rows[2][1..3], ["100.00", "0.00"]);
    assert_eq!(rows[3][1], "0.3000");
    assert_eq!(rows[4][1], "0.4000");
}
