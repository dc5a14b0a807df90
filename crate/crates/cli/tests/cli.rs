use std::path::Path;
use std::process::{Command, Output};

fn plmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plmm")).args(args).env_remove("CSTM_THREADS").output().expect("spawn plmm")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &[&str] = &[
    "--slices", "3", "--phases", "3", "--height", "64", "--width", "64", "--lv-radius", "8", "--myo-thickness", "3",
    "--rv-offset", "13",
];

fn small_phantom(dir: &Path) {
    let mut args = vec!["phantom", "--out-dir", dir.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    let o = plmm(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&plmm(&["--help"])), 0);
    assert_eq!(code(&plmm(&["--version"])), 0);
    assert_eq!(code(&plmm(&["frobnicate"])), 1);
    assert_eq!(code(&plmm(&["eval", "--pred"])), 1);
}

#[test]
fn phantom_is_deterministic_and_echoes_config() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let mut args = vec!["phantom", "--seed", "7", "--out-dir", d.path().to_str().unwrap()];
        args.extend_from_slice(SMALL);
        let o = plmm(&args);
        assert_eq!(code(&o), 0);
        assert!(stdout(&o).contains("\"seed\": 7"));
        assert!(stdout(&o).contains("Z=3 T=3 H=64 W=64 seed=7"));
    }
    for f in ["volume.cgrid", "truth.cgrid"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn phantom_spec_error_exits_nonzero() {
    let d = tempfile::tempdir().unwrap();
    let o = plmm(&["phantom", "--contraction", "0.5", "--lv-radius", "70", "--out-dir", d.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("phantom spec error"));
}

#[test]
fn config_file_with_unknown_key_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.json");
    std::fs::write(&cfg, r#"{"propagation": {"patch": 6, "bogus": 1}}"#).unwrap();
    let o = plmm(&["phantom", "--config", cfg.to_str().unwrap(), "--out-dir", d.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn echoed_config_reproduces_the_run() {
    let a = tempfile::tempdir().unwrap();
    small_phantom(a.path());
    let b = tempfile::tempdir().unwrap();
    let o = plmm(&[
        "phantom",
        "--config",
        a.path().join("config.json").to_str().unwrap(),
        "--out-dir",
        b.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(a.path().join("volume.cgrid")).unwrap(), std::fs::read(b.path().join("volume.cgrid")).unwrap());
}

#[test]
fn propagate_eval_round() {
    let d = tempfile::tempdir().unwrap();
    small_phantom(d.path());
    let dir = d.path().to_str().unwrap();
    let vol = d.path().join("volume.cgrid");
    let truth = d.path().join("truth.cgrid");
    for matcher in ["plmm", "dense"] {
        let out = d.path().join(matcher);
        let o = plmm(&[
            "propagate",
            "--volume",
            vol.to_str().unwrap(),
            "--seed",
            truth.to_str().unwrap(),
            "--matcher",
            matcher,
            "--work-size",
            "96",
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("segmented 8 frames"));
        let prov: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("provenance.json")).unwrap()).unwrap();
        assert_eq!(prov.as_object().unwrap().len(), 9);
        assert_eq!(prov["1,0"], serde_json::json!([]));
        assert_eq!(prov["1,2"], serde_json::json!(["1,0", "1,1"]));

        let csv = out.join("metrics.csv");
        let o = plmm(&[
            "eval",
            "--pred",
            out.join("masks.cgrid").to_str().unwrap(),
            "--truth",
            truth.to_str().unwrap(),
            "--method",
            matcher,
            "--out",
            csv.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), 17);
        assert!(text.lines().skip(1).all(|l| l.starts_with(matcher)));
    }
    let _ = dir;
}

#[test]
fn flipped_orientation_keeps_file_coordinates() {
    let d = tempfile::tempdir().unwrap();
    small_phantom(d.path());
    let out = d.path().join("flip");
    let o = plmm(&[
        "propagate",
        "--volume",
        d.path().join("volume.cgrid").to_str().unwrap(),
        "--seed",
        d.path().join("truth.cgrid").to_str().unwrap(),
        "--flip-z",
        "--work-size",
        "96",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let prov: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("provenance.json")).unwrap()).unwrap();
    // Z=3: slice 0 in file order is the apex after flipping, so it gets the
    // three-entry rule at phase 1.
    assert_eq!(prov["0,1"], serde_json::json!(["1,0", "1,1", "0,0"]));
}

#[test]
fn eval_of_truth_against_itself() {
    let d = tempfile::tempdir().unwrap();
    small_phantom(d.path());
    let t = d.path().join("truth.cgrid");
    let o = plmm(&["eval", "--pred", t.to_str().unwrap(), "--truth", t.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let s = stdout(&o);
    assert!(s.contains("whole    Avg     1.000     0.000"));
    assert_eq!(s.lines().filter(|l| l.starts_with("plmm,")).count(), 16);
}

#[test]
fn missing_seed_is_a_data_error_naming_the_path() {
    let d = tempfile::tempdir().unwrap();
    small_phantom(d.path());
    let missing = d.path().join("nope.cgrid");
    let o = plmm(&[
        "propagate",
        "--volume",
        d.path().join("volume.cgrid").to_str().unwrap(),
        "--seed",
        missing.to_str().unwrap(),
        "--out-dir",
        d.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope.cgrid"));
}

#[test]
fn mismatched_eval_dims_are_data_errors() {
    let a = tempfile::tempdir().unwrap();
    small_phantom(a.path());
    let b = tempfile::tempdir().unwrap();
    let o = plmm(&["phantom", "--slices", "5", "--phases", "3", "--out-dir", b.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let o = plmm(&[
        "eval",
        "--pred",
        a.path().join("truth.cgrid").to_str().unwrap(),
        "--truth",
        b.path().join("truth.cgrid").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bench_grid_file() {
    let d = tempfile::tempdir().unwrap();
    let grid = d.path().join("grid.json");
    std::fs::write(&grid, r#"[{"t":2,"h":24,"w":24,"p":6,"k":4},{"t":1,"h":16,"w":16,"p":4,"k":2,"scale":3}]"#).unwrap();
    let out = d.path().join("c.csv");
    let o = plmm(&["bench", "--grid", grid.to_str().unwrap(), "--reps", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("T,H,W,P,K,scale,predicted_patch_pairs,measured_patch_pairs"));
    assert!(csv.contains("\n2,24,24,6,4,4,4802,4802,254016,254016,"));

    std::fs::write(&grid, r#"[{"t":2,"h":25,"w":24,"p":6,"k":4}]"#).unwrap();
    assert_eq!(code(&plmm(&["bench", "--grid", grid.to_str().unwrap()])), 1);
    std::fs::write(&grid, r#"[{"t":2,"height":24}]"#).unwrap();
    assert_eq!(code(&plmm(&["bench", "--grid", grid.to_str().unwrap()])), 1);
}

#[test]
fn verify_passes_and_fault_injection_fails() {
    let o = plmm(&["verify"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert_eq!(stdout(&o).matches("[PASS]").count(), 5);
    let o = Command::new(env!("CARGO_BIN_EXE_plmm"))
        .args(["verify", "--inject-fault"])
        .env("CSTM_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&o), 3);
    assert!(stdout(&o).contains("[FAIL] oracle"));
}
