use std::path::Path;
use std::process::{Command, Output};

use labelfusion::io::{read_affine, read_displacement, read_labels, read_volume, write_labels};
use labelfusion::pipeline::library::{read_manifest, write_manifest};
use labelfusion::volume::{resample, signed_distance, transfer_labels_logodds, FieldThenAffine, Interpolation, LabelMap};

const SMALL_SPEC: &str = "dims = 40,32,36\ncenter_mm = 18,14,18\naxes_mm = 11,5,5\n\
distractor_offset_mm = 13,3,0\ndistractor_axes_mm = 4,4,4\nseed = 7\n";

fn labelfusion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_labelfusion")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Small cohort of four subjects with fields towards subject 0 only.
fn cohort(dir: &Path) {
    let spec = dir.join("small.spec");
    std::fs::write(&spec, SMALL_SPEC).unwrap();
    let o = labelfusion(&["phantom", "generate", "--spec", s(&spec), "--out", s(dir), "--n", "4", "--targets", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eval_of_identical_files_is_one() {
    let dir = tempfile::tempdir().unwrap();
    cohort(dir.path());
    let lab = dir.path().join("s01_labels.nii");
    let o = labelfusion(&["eval", "--auto", s(&lab), "--truth", s(&lab)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "dice,1.0\n");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(labelfusion(&["fuse", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(labelfusion(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(labelfusion(&["fuse", "--method", "median"]).status.code(), Some(2));
    assert_eq!(labelfusion(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_one() {
    let o = labelfusion(&["eval", "--auto", "/nonexistent/a.nii", "--truth", "/nonexistent/b.nii"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
    let o = labelfusion(&["fuse", "--set", "n_r=0", "--output", "/tmp/never.nii"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn generate_writes_manifest_and_fields() {
    let dir = tempfile::tempdir().unwrap();
    cohort(dir.path());
    let entries = read_manifest(&dir.path().join("manifest_s00.csv")).unwrap();
    assert_eq!(entries.iter().map(|e| e.id.as_str()).collect::<Vec<_>>(), ["s01", "s02", "s03"]);
    for e in &entries {
        assert!(e.dfield_path.as_ref().unwrap().exists());
        read_volume(&e.intensity_path).unwrap();
    }
    assert!(!dir.path().join("manifest_s01.csv").exists());
    let info = stdout(&labelfusion(&["info", s(&dir.path().join("s00.nii"))]));
    assert!(info.starts_with("dims: 40 x 32 x 36\n"), "{info}");
}

#[test]
fn majority_vote_of_one_atlas_is_its_transfer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    cohort(d);
    let mut entries = read_manifest(&d.join("manifest_s00.csv")).unwrap();
    entries.truncate(1);
    let one = d.join("one.csv");
    write_manifest(&one, &entries).unwrap();
    let out = d.join("mv.nii");
    let o = labelfusion(&[
        "fuse",
        "--method",
        "mv",
        "--target",
        s(&d.join("s00.nii")),
        "--target-affine",
        s(&d.join("s00_affine.txt")),
        "--library",
        s(&one),
        "--output",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let target = read_volume(&d.join("s00.nii")).unwrap();
    let common = *target.geometry();
    let e = &entries[0];
    let field = read_displacement(e.dfield_path.as_ref().unwrap()).unwrap();
    let affine = read_affine(e.affine_path.as_ref().unwrap()).unwrap();
    let sdm = signed_distance(&read_labels(&e.label_path).unwrap()).unwrap();
    let in_common = transfer_labels_logodds(&sdm, &FieldThenAffine { field: Some(&field), affine: &affine }, &common).unwrap();
    let to_common = read_affine(&d.join("s00_affine.txt")).unwrap().inverse().unwrap();
    let native = resample(&in_common.to_volume(), &to_common, &common, Interpolation::Nearest, 0.0).unwrap();
    let expected = LabelMap::threshold(&native, 0.5);
    assert_eq!(read_labels(&out).unwrap(), expected);
}

#[test]
fn fuse_reports_dice_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    cohort(d);
    let cfg = d.join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "target = {}\ntarget_affine = {}\nlibrary = {}\ntruth = {}\nn_r = 3\nn_a = 3\n",
            s(&d.join("s00.nii")),
            s(&d.join("s00_affine.txt")),
            s(&d.join("manifest_s00.csv")),
            s(&d.join("s00_labels.nii"))
        ),
    )
    .unwrap();
    let metrics = d.join("m.csv");
    let o = labelfusion(&["fuse", "--config", s(&cfg), "--method", "staple", "--metrics", s(&metrics)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o);
    let dice: f64 = line.trim().strip_prefix("all,staple,").expect("dice line").parse().unwrap();
    assert!(dice > 0.7 && dice <= 1.0, "{line}");
    let report = std::fs::read_to_string(&metrics).unwrap();
    assert!(report.starts_with("roi,method,dice,stage,seconds\n"));
    assert!(report.lines().any(|l| l.starts_with("all,staple,") && l.contains(",total,")));
    let echo = std::fs::read_to_string(d.join("m.csv.config")).unwrap();
    assert!(echo.contains("method = staple"));
    assert!(echo.contains("n_r = 3"));
}

#[test]
fn ssd_rank_puts_the_target_copy_first() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    cohort(d);
    let mut entries = read_manifest(&d.join("manifest_s00.csv")).unwrap();
    let mut own = entries[0].clone();
    own.id = "copy".into();
    own.intensity_path = d.join("s00.nii");
    own.label_path = d.join("s00_labels.nii");
    own.affine_path = Some(d.join("s00_affine.txt"));
    own.dfield_path = None;
    entries.push(own);
    let lib = d.join("with_copy.csv");
    write_manifest(&lib, &entries).unwrap();
    let o = labelfusion(&[
        "rank",
        "--metric",
        "ssd",
        "--target",
        s(&d.join("s00.nii")),
        "--target-affine",
        s(&d.join("s00_affine.txt")),
        "--library",
        s(&lib),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("rank,id,score"));
    assert!(lines.next().unwrap().starts_with("1,copy,"), "{out}");
    assert_eq!(lines.count(), 3);
}

#[test]
fn eval_reads_label_files_written_by_the_library() {
    let dir = tempfile::tempdir().unwrap();
    cohort(dir.path());
    let a = read_labels(&dir.path().join("s01_labels.nii")).unwrap();
    let empty = LabelMap::empty(*a.geometry());
    let p = dir.path().join("empty.nii");
    write_labels(&p, &empty).unwrap();
    let o = labelfusion(&["eval", "--auto", s(&p), "--truth", s(&dir.path().join("s01_labels.nii"))]);
    assert_eq!(stdout(&o), "dice,0.0\n");
}
