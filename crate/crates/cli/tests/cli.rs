use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stst::interop::{write_archive, TensorArchive};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn stst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stst"))
        .args(args)
        .current_dir(fixtures())
        .output()
        .expect("spawn stst")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn frame_bytes(dir: &Path) -> Vec<Vec<u8>> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    files.sort();
    files.iter().map(|p| fs::read(p).unwrap()).collect()
}

#[test]
fn help_prints_usage() {
    let o = stst(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("Usage"));
    for sub in ["synth", "stps", "analyze", "metrics"] {
        assert!(text.contains(sub), "{sub}");
    }
}

#[test]
fn bad_blending_ratio_is_a_config_error() {
    let out = tempfile::tempdir().unwrap();
    let o = stst(&[
        "synth",
        "--config",
        "run.cfg",
        "--set",
        "blend=1.5",
        "--output",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("invalid blending ratio"), "{err}");
    assert_eq!(err.trim().lines().count(), 1);
    assert!(err.starts_with("error[config]"));
    assert!(!out.path().join("manifest.cfg").exists());
}

#[test]
fn unknown_key_and_missing_input() {
    let o = stst(&["synth", "--config", "run.cfg", "--set", "octave.itrs=5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown config key"));
    let out = tempfile::tempdir().unwrap();
    let o = stst(&[
        "synth",
        "--config",
        "run.cfg",
        "--set",
        "target=does_not_exist",
        "--output",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[video]"), "{}", stderr(&o));
}

#[test]
fn synth_smoke_and_determinism() {
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().to_str().unwrap();
    let args = [
        "synth",
        "--config",
        "run.cfg",
        "--set",
        "octave.iters=5,5,5",
        "--output",
        dir,
        "--threads",
        "1",
    ];
    let o = stst(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let first = frame_bytes(&out.path().join("frames"));
    assert_eq!(first.len(), 8);
    let log = fs::read_to_string(out.path().join("loss_log.csv")).unwrap();
    assert!(log.starts_with("frame,octave,iteration,"));
    // 13 frames (5 padded) × 3 octaves × 6 logged iterations
    assert_eq!(log.lines().count(), 1 + 13 * 3 * 6);
    let manifest = fs::read_to_string(out.path().join("manifest.cfg")).unwrap();
    assert!(manifest.contains("# override: octave.iters=5,5,5"));
    assert!(manifest.contains("\noctave.iters = 5,5,5\n"));
    assert!(manifest.contains("# sha256 drift8: "));

    let o = stst(&args);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        fs::read_to_string(out.path().join("manifest.cfg")).unwrap(),
        manifest
    );
    assert_eq!(frame_bytes(&out.path().join("frames")), first);
}

#[test]
fn stps_and_analysis() {
    let out = tempfile::tempdir().unwrap();
    let o = stst(&[
        "stps",
        "drift8",
        "--output",
        out.path().to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(frame_bytes(&out.path().join("frames")).len(), 8);
    assert!(fs::read_to_string(out.path().join("manifest.cfg"))
        .unwrap()
        .contains("\nseed = 3\n"));

    let csv = out.path().join("features.csv");
    let o = stst(&["analyze", "drift8", "--output", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 9);
    assert_eq!(
        lines[0],
        "frame,intensity,contrast,pixel_change,flow_magnitude,flow_angle"
    );
    let magnitude: f64 = lines[2].split(',').nth(4).unwrap().parse().unwrap();
    assert!((magnitude - 2.0).abs() < 0.3, "{magnitude}");
}

#[test]
fn metrics_subcommands() {
    let o = stst(&["metrics", "ssim", "drift8", "drift8"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    assert_eq!(text.lines().count(), 9);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",1")), "{text}");

    let dir = tempfile::tempdir().unwrap();
    let mut a = TensorArchive::new();
    let x: Vec<f32> = (0..40).map(|i| ((i * 37) % 11) as f32).collect();
    a.insert("x", vec![10, 4], x.clone()).unwrap();
    a.insert("y", vec![10, 4], x.iter().map(|v| v * 2.0).collect())
        .unwrap();
    let path = dir.path().join("acts.stta");
    write_archive(&a, &path).unwrap();
    let o = stst(&[
        "metrics",
        "cka",
        "--archive",
        path.to_str().unwrap(),
        "--x",
        "x",
        "--y",
        "y",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    let value: f64 = text
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(2)
        .unwrap()
        .parse()
        .unwrap();
    assert!((value - 1.0).abs() < 1e-9);

    let o = stst(&[
        "metrics",
        "cka",
        "--archive",
        path.to_str().unwrap(),
        "--x",
        "x",
        "--y",
        "z",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("archive"));
}
