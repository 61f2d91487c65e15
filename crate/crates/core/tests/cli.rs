use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dynaseg::datasets::{synthetic_corpus, SyntheticSpec};
use dynaseg::eval::EvalReport;
use dynaseg::label_io::{read_label_map, write_label_map};
use dynaseg::LabelMap;

fn dynaseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynaseg")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_test_image(path: &Path) {
    let img = image::RgbImage::from_fn(12, 10, |x, _| {
        if x < 6 {
            image::Rgb([220, 30, 30])
        } else {
            image::Rgb([20, 40, 230])
        }
    });
    img.save(path).unwrap();
}

#[test]
fn segment_writes_label_map_overlay_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.png");
    write_test_image(&img);
    let o = dynaseg(&["segment", "--image", img.to_str().unwrap(), "--schedule", "scf", "--alpha", "50", "--iters", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["x.labels.png", "x.overlay.png", "x.log.jsonl", "dynaseg.cfg", "segment_report.csv"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let labels = read_label_map(&dir.path().join("x.labels.png")).unwrap();
    assert_eq!(labels.dims(), (10, 12));
    let log = dynaseg::trainer::read_log(&dir.path().join("x.log.jsonl")).unwrap();
    assert!(!log.is_empty() && log.len() <= 3);
    assert!(log.iter().all(|r| r.mu == 50.0 / r.q_prime as f64));
    let echo = fs::read_to_string(dir.path().join("dynaseg.cfg")).unwrap();
    assert!(echo.contains("schedule = scf") && echo.contains("alpha = 50"));
}

#[test]
fn schedule_defaults_and_fixed_mode() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.png");
    write_test_image(&img);
    let img = img.to_str().unwrap();

    let out = dir.path().join("fsf");
    let o = dynaseg(&["segment", "--image", img, "--schedule", "fsf", "--iters", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let cfg = dynaseg::RunConfig::load(&out.join("dynaseg.cfg")).unwrap();
    assert_eq!(cfg.schedule, dynaseg::MuSchedule::Fsf { alpha: 15.0 });

    let out = dir.path().join("fixed");
    let o = dynaseg(&[
        "segment", "--image", img, "--schedule", "fixed", "--mu", "5", "--iters", "2", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let cfg = dynaseg::RunConfig::load(&out.join("dynaseg.cfg")).unwrap();
    assert_eq!(cfg.schedule, dynaseg::MuSchedule::Fixed { mu: 5.0 });
    let log = dynaseg::trainer::read_log(&out.join("x.log.jsonl")).unwrap();
    assert!(log.iter().all(|r| r.mu == 5.0));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.png");
    write_test_image(&img);
    let img = img.to_str().unwrap();
    assert_eq!(dynaseg(&["segment", "--image", img, "--schedule", "fsf", "--mu", "5"]).status.code(), Some(2));
    assert_eq!(dynaseg(&["segment", "--image", img, "--schedule", "nope"]).status.code(), Some(2));
    assert_eq!(dynaseg(&["segment", "--image", img, "--set", "lr=-1"]).status.code(), Some(2));
    assert_eq!(dynaseg(&["segment"]).status.code(), Some(2));
    let o = dynaseg(&["segment", "--image", img, "--backbone", "resnet-fpn", "--iters", "1"]);
    assert_eq!(o.status.code(), Some(2), "missing weights is a config error");
}

#[test]
fn unreadable_image_is_a_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.png");
    write_test_image(&good);
    let bad = dir.path().join("bad.png");
    fs::write(&bad, b"not a png").unwrap();
    let o = dynaseg(&["segment", "--image", good.to_str().unwrap(), "--image", bad.to_str().unwrap(), "--iters", "2"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("bad: FAILED"));
    assert!(dir.path().join("good.labels.png").is_file());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.png");
    write_test_image(&img);
    let cfg_path = dir.path().join("run.cfg");
    fs::write(&cfg_path, "schedule = scf\nalpha = 80\nmax_iters = 7\nseed = 3\n").unwrap();
    let out = dir.path().join("o");
    let o = dynaseg(&[
        "segment",
        "--image",
        img.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--alpha",
        "60",
        "--iters",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let cfg = dynaseg::RunConfig::load(&out.join("dynaseg.cfg")).unwrap();
    assert_eq!(cfg.schedule, dynaseg::MuSchedule::Scf { alpha: 60.0 });
    assert_eq!((cfg.max_iters, cfg.seed), (2, 3));
}

#[test]
fn rerun_gives_identical_label_maps() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.png");
    write_test_image(&img);
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = dynaseg(&["segment", "--image", img.to_str().unwrap(), "--iters", "4", "--seed", "7", "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
        outputs.push((
            fs::read(out.join("x.labels.png")).unwrap(),
            fs::read(out.join("x.log.jsonl")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

fn synthetic_args() -> Vec<&'static str> {
    vec!["--dataset", "synthetic", "--count", "3", "--size", "16", "--blocks", "3"]
}

fn write_perfect_predictions(dir: &Path) {
    let spec = SyntheticSpec {
        count: 3,
        size: 16,
        ..Default::default()
    };
    for (img, gt) in synthetic_corpus(&spec).unwrap() {
        // a relabeling of the truth is still a perfect segmentation
        let shifted = LabelMap::new(gt.variants[0].labels().mapv(|v| v + 7));
        write_label_map(&shifted, &dir.join(format!("{}.labels.png", img.source_id()))).unwrap();
    }
}

#[test]
fn eval_of_perfect_predictions_prints_one() {
    let dir = tempfile::tempdir().unwrap();
    write_perfect_predictions(dir.path());
    let mut args = vec!["eval", "--pred", dir.path().to_str().unwrap()];
    args.extend(synthetic_args());
    let o = dynaseg(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("mIoU all    1.0000"), "{}", stdout(&o));
    let report = EvalReport::read_json(&dir.path().join("report.json")).unwrap();
    assert_eq!(report.miou_all, 1.0);
    assert_eq!(report.num_images, 3);
    assert!(dir.path().join("classes.csv").is_file());
}

#[test]
fn eval_lists_missing_predictions() {
    let dir = tempfile::tempdir().unwrap();
    write_perfect_predictions(dir.path());
    fs::remove_file(dir.path().join("synthetic_0001.labels.png")).unwrap();
    let mut args = vec!["eval", "--pred", dir.path().to_str().unwrap()];
    args.extend(synthetic_args());
    let o = dynaseg(&args);
    assert_eq!(o.status.code(), Some(3));
    let report = EvalReport::read_json(&dir.path().join("report.json")).unwrap();
    assert_eq!(report.missing, vec!["synthetic_0001".to_string()]);
    assert_eq!(report.num_images, 2);
}

#[test]
fn eval_on_bsd_layout_prints_four_numbers() {
    let root = tempfile::tempdir().unwrap();
    let images = root.path().join("images/test");
    let gts = root.path().join("groundTruth/test");
    fs::create_dir_all(&images).unwrap();
    fs::create_dir_all(&gts).unwrap();
    image::RgbImage::new(4, 3).save(images.join("100007.png")).unwrap();
    fs::copy(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/bsds_gt.mat"),
        gts.join("100007.mat"),
    )
    .unwrap();
    let pred = tempfile::tempdir().unwrap();
    let p = LabelMap::from_vec(3, 4, vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 3, 3]).unwrap();
    write_label_map(&p, &pred.path().join("100007.labels.png")).unwrap();

    let o = dynaseg(&["doctor", "--dataset", "bsd500", "--root", root.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));

    let o = dynaseg(&[
        "eval",
        "--pred",
        pred.path().to_str().unwrap(),
        "--dataset",
        "bsd500",
        "--root",
        root.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = EvalReport::read_json(&pred.path().join("report.json")).unwrap();
    let bsd = report.bsd.unwrap();
    // annotation 1 is matched exactly; annotation 2 has twelve one-pixel segments
    assert_eq!(bsd.coarse, 1.0);
    assert!(bsd.fine < 1.0);
    assert!((bsd.all - (1.0 + bsd.fine) / 2.0).abs() < 1e-12);
    assert!(stdout(&o).contains("BSD All"));
}

#[test]
fn sweep_writes_one_row_per_grid_point_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let mut args = vec![
        "sweep", "--param", "alpha", "--values", "25,50,100", "--schedule", "scf", "--iters", "2", "--out",
    ];
    args.push(csv.to_str().unwrap());
    args.extend(synthetic_args());
    let o = dynaseg(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let first = fs::read_to_string(&csv).unwrap();
    assert_eq!(first.lines().count(), 4, "{first}");
    assert!(first.lines().nth(2).unwrap().starts_with("alpha,50,scf,3,"));

    let o = dynaseg(&args);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read_to_string(&csv).unwrap(), first);
    assert_eq!(stdout(&o).matches("skipped").count(), 3);
}

#[test]
fn sweep_with_empty_grid_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("s.csv");
    let mut args = vec!["sweep", "--out", csv.to_str().unwrap()];
    args.extend(synthetic_args());
    assert_eq!(dynaseg(&args).status.code(), Some(2));
}

#[test]
fn doctor_reports_bad_layouts() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dynaseg(&["doctor", "--dataset", "voc2012", "--root", "/definitely/not/here"]).status.code(), Some(2));
    assert_eq!(dynaseg(&["doctor", "--dataset", "coco_stuff", "--root", dir.path().to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(dynaseg(&["doctor", "--dataset", "imagenet", "--root", "."]).status.code(), Some(2));
}

#[test]
fn help_exits_zero() {
    let o = dynaseg(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for cmd in ["segment", "eval", "sweep", "doctor"] {
        assert!(stdout(&o).contains(cmd));
    }
}
