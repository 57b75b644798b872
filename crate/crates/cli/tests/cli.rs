//! The `pointconv` binary: exit codes, overrides and file-producing commands.

use std::path::Path;
use std::process::{Command, Output};

use pointconv::data::load_cloud;
use pointconv::network::load_params;
use pointconv::PointCloud;
use pointconv_cli::experiments::conv_layers;

fn pointconv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pointconv")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn arg(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn passing_verification_exits_zero() {
    let out = pointconv(&["equivalence", "--trials", "5"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("PASS"));
}

#[test]
fn degenerate_single_mid_channel_passes() {
    for extra in [&[][..], &["--f64"][..]] {
        let mut args = vec!["equivalence", "--trials", "5", "--dims", "2,16,4,3,1,2"];
        args.extend_from_slice(extra);
        assert_eq!(code(&pointconv(&args)), 0);
    }
}

#[test]
fn failed_verification_exits_one() {
    // With K > C_in the WeightNet output, not the filter tensor, dominates
    // the naive route, so the ratio law does not hold.
    let out = pointconv(&["bench-memory", "--desk", "1,8,16,2,4,2"]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&pointconv(&["no-such-command"])), 2);
    assert_eq!(code(&pointconv(&["equivalence", "--dims", "1,2,3"])), 2);
    assert_eq!(code(&pointconv(&["grid-equiv", "--side", "3"])), 2);
    assert_eq!(code(&pointconv(&["gen-data", "--set", "train.bogus=1", "--out", "/nonexistent/x"])), 2);
    assert_eq!(code(&pointconv(&["gen-data", "--set", "noequals", "--out", "/nonexistent/x"])), 2);
}

#[test]
fn help_exits_zero() {
    assert_eq!(code(&pointconv(&["--help"])), 0);
}

#[test]
fn missing_files_exit_three() {
    assert_eq!(code(&pointconv(&["eval", "--checkpoint", "/nonexistent/m.pcnv"])), 3);
    assert_eq!(code(&pointconv(&["img2cloud", "--input", "/nonexistent/a.pgm", "--output", "/tmp/a.pcb"])), 3);
    assert_eq!(code(&pointconv(&["train", "--config", "/nonexistent/c.json"])), 3);
}

#[test]
fn gen_data_applies_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = pointconv(&[
        "gen-data",
        "--task",
        "segment",
        "--set",
        "data.n_train=3",
        "--set",
        "data.n_test=2",
        "--set",
        "data.n_points=64",
        "--out",
        arg(dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let files = |sub: &str| std::fs::read_dir(dir.path().join(sub)).unwrap().count();
    assert_eq!((files("train"), files("test")), (3, 2));
    let c: PointCloud<f32> = load_cloud(&dir.path().join("train/00000.pcb")).unwrap();
    assert_eq!(c.len(), 64);
    assert_eq!(c.point_labels.as_ref().map(Vec::len), Some(64));
}

#[test]
fn gen_data_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |seed: &str, sub: &str| {
        let out_dir = dir.path().join(sub);
        let out =
            pointconv(&["gen-data", "--seed", seed, "--set", "data.n_train=2", "--set", "data.n_test=1", "--out", arg(&out_dir)]);
        assert_eq!(code(&out), 0);
        std::fs::read(out_dir.join("train/00001.pcb")).unwrap()
    };
    assert_eq!(gen("4", "a"), gen("4", "b"));
    assert_ne!(gen("4", "a"), gen("5", "c"));
}

#[test]
fn img2cloud_converts_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let pgm = dir.path().join("a.pgm");
    std::fs::write(&pgm, "P2\n# tiny\n3 3\n10\n0 5 10\n0 5 10\n0 5 10\n").unwrap();
    let pcb = dir.path().join("a.pcb");
    let out = pointconv(&["img2cloud", "--input", arg(&pgm), "--output", arg(&pcb)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let c: PointCloud<f64> = load_cloud(&pcb).unwrap();
    assert_eq!((c.len(), c.dim, c.channels), (9, 2, 1));
    let f: Vec<f64> = c.features.iter().map(|v| (v * 255.0).round()).collect();
    assert_eq!(&f[..3], &[0.0, 128.0, 255.0]);

    std::fs::write(&pgm, "P7\n3 3\n").unwrap();
    assert_eq!(code(&pointconv(&["img2cloud", "--input", arg(&pgm), "--output", arg(&pcb)])), 3);
}

#[test]
fn viz_filters_writes_one_image_per_channel_pair() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = pointconv(&[
        "train",
        "--task",
        "image",
        "--epochs",
        "1",
        "--set",
        "data.n_train=8",
        "--set",
        "data.n_test=4",
        "--out",
        arg(&run),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("model.pcnv");
    assert!(run.join("log.csv").exists());

    let net = load_params::<f32>(&ckpt).unwrap();
    let layers = conv_layers(&net);
    let (_, conv) = layers.iter().find(|(n, _)| n == "enc0").unwrap();
    let pairs = conv.config.c_in * conv.config.c_out;

    let images = dir.path().join("filters");
    let out = pointconv(&["viz-filters", "--checkpoint", arg(&ckpt), "--side", "12", "--out", arg(&images)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let files: Vec<_> = std::fs::read_dir(&images).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.len(), pairs);
    let header = std::fs::read(&files[0]).unwrap();
    assert!(header.starts_with(b"P5\n12 12\n65535\n"), "{:?}", String::from_utf8_lossy(&header[..14]));

    assert_eq!(code(&pointconv(&["viz-filters", "--checkpoint", arg(&ckpt), "--layer", "enc9", "--out", arg(&images)])), 2);
    let eval = pointconv(&["eval", "--task", "image", "--set", "data.n_test=4", "--checkpoint", arg(&ckpt)]);
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
}

#[test]
fn grid_equiv_is_origin_invariant() {
    let report = |origin: &str| {
        let out = pointconv(&["grid-equiv", "--side", "8", "--seed", "3", "--origin", origin]);
        assert_eq!(code(&out), 0);
        stdout(&out)
    };
    assert_eq!(report("0,0"), report("12.5,-3"));
}

#[test]
fn runs_are_reproducible() {
    let a = pointconv(&["equivalence", "--trials", "3", "--seed", "9"]);
    let b = pointconv(&["equivalence", "--trials", "3", "--seed", "9"]);
    assert_eq!(stdout(&a), stdout(&b));
}
