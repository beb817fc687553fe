//! End-to-end checks of the `iclk` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use iclk::datagen::synthetic_scene;
use iclk::extract::{default_stack_shape, init_conv_stack, Checkpoint, ExtractorSpec};
use iclk::fgt::save_fgt;
use iclk::grid::crop;
use iclk::harness::{self, read_eval_csv, Manifest, TrainFile};
use iclk::solver::SolverConfig;
use tempfile::TempDir;

fn iclk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iclk"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn printed_warp(out: &Output) -> [f64; 9] {
    let text = String::from_utf8_lossy(&out.stdout);
    let v: Vec<f64> = text
        .lines()
        .take(3)
        .flat_map(|l| l.split(' ').map(|t| t.parse::<f64>().unwrap()).collect::<Vec<_>>())
        .collect();
    v.try_into().unwrap()
}

/// A template cut from a synthetic scene and an image offset by (dx, dy).
fn write_shifted(dir: &Path, dx: isize, dy: isize) -> (PathBuf, PathBuf) {
    let scene = synthetic_scene(120, 120, 7);
    let t = crop(&scene, 40, 40, 40, 40).unwrap().with_origin([0.0, 0.0]);
    let i = crop(&scene, 40 + dx, 40 + dy, 40, 40).unwrap().with_origin([0.0, 0.0]);
    let (tp, ip) = (dir.join("t.fgt"), dir.join("i.fgt"));
    save_fgt(&tp, &t).unwrap();
    save_fgt(&ip, &i).unwrap();
    (tp, ip)
}

fn write_manifest(dir: &Path) -> PathBuf {
    let p = dir.join("manifest.toml");
    fs::write(
        &p,
        "test_fraction = 0.3\n\
         [synthetic]\nheight = 200\nwidth = 400\nseed = 3\n\
         [pairs]\npatch_min = 32\npatch_max = 40\nmax_noop_error_pct = 10.0\n",
    )
    .unwrap();
    p
}

#[test]
fn identical_inputs_give_the_identity() {
    let dir = TempDir::new().unwrap();
    let (tp, _) = write_shifted(dir.path(), 0, 0);
    let out = iclk(&["align", "--template", s(&tp), "--image", s(&tp)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(printed_warp(&out), [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn align_matches_library_bit_for_bit() {
    let dir = TempDir::new().unwrap();
    let (tp, ip) = write_shifted(dir.path(), 2, -1);
    let t = harness::load_grid(&tp).unwrap();
    let i = harness::load_grid(&ip).unwrap();

    let out = iclk(&["align", "--template", s(&tp), "--image", s(&ip)]);
    assert_eq!(out.status.code(), Some(0));
    let lib = harness::align(&t, &i, &ExtractorSpec::Identity, None, &SolverConfig::default()).unwrap();
    assert_eq!(printed_warp(&out), lib.warp.to_row_array());
    // image content sits at template position minus the crop offset
    let w = lib.warp.to_row_array();
    assert!((w[2] + 2.0).abs() < 0.05 && (w[5] - 1.0).abs() < 0.05, "{w:?}");

    let ck = dir.path().join("m.ckpt");
    let stack = init_conv_stack(&default_stack_shape(), 5).unwrap();
    Checkpoint {
        stack: stack.clone(),
        meta: Default::default(),
    }
    .save(&ck)
    .unwrap();
    let ext = format!("conv:{}", s(&ck));
    let out = iclk(&["align", "--template", s(&tp), "--image", s(&ip), "--extractor", &ext]);
    assert!(matches!(out.status.code(), Some(0 | 2)));
    let lib = harness::align(&t, &i, &ExtractorSpec::ConvStack(stack), None, &SolverConfig::default()).unwrap();
    assert_eq!(printed_warp(&out), lib.warp.to_row_array());
}

#[test]
fn iteration_cap_exits_two() {
    let dir = TempDir::new().unwrap();
    let (tp, ip) = write_shifted(dir.path(), 3, 2);
    let out = iclk(&["align", "--template", s(&tp), "--image", s(&ip), "--max-iters", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("converged false"));
}

#[test]
fn bad_inputs_exit_one() {
    let dir = TempDir::new().unwrap();
    let junk = dir.path().join("junk.fgt");
    fs::write(&junk, b"FGT1 nonsense").unwrap();
    let (tp, _) = write_shifted(dir.path(), 0, 0);
    for args in [
        vec!["align", "--template", s(&junk), "--image", s(&tp)],
        vec!["align", "--template", s(&tp), "--image", "/nonexistent.png"],
        vec!["align", "--template", s(&tp), "--image", s(&tp), "--extractor", "external:2"],
        vec!["align", "--template", s(&tp)],
        vec!["align", "--template", s(&tp), "--image", s(&tp), "--max-iters", "0"],
        vec!["frobnicate"],
    ] {
        let out = iclk(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn zero_pairs_writes_only_the_header() {
    let dir = TempDir::new().unwrap();
    let m = write_manifest(dir.path());
    let out_csv = dir.path().join("e.csv");
    let out = iclk(&["evaluate", "--manifest", s(&m), "--pairs", "0", "--out", s(&out_csv)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        fs::read_to_string(&out_csv).unwrap(),
        "# iclk-eval v1\npair_id,method,corner_error_pct,converged,iterations,wall_time_ms,status\n"
    );
}

#[test]
fn evaluation_is_deterministic_and_cdf_is_monotone() {
    let dir = TempDir::new().unwrap();
    let m = write_manifest(dir.path());
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for p in [&a, &b] {
        let out = iclk(&[
            "evaluate", "--manifest", s(&m), "--methods", "iclk-raw,conv-init:1", "--pairs", "12", "--seed", "9",
            "--out", s(p),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let records = read_eval_csv(&fs::read(&a).unwrap()).unwrap();
    assert_eq!(records.len(), 36);
    for r in records.iter().filter(|r| r.method == "noop") {
        assert!(r.corner_error_pct <= 10.0 + 1e-9);
        assert_eq!(r.iterations, 0);
    }

    let c = dir.path().join("cdf.csv");
    assert_eq!(iclk(&["cdf", "--eval", s(&a), "--out", s(&c)]).status.code(), Some(0));
    let text = fs::read_to_string(&c).unwrap();
    let mut lines = text.lines().skip(1);
    assert_eq!(lines.next().unwrap(), "threshold_pct,noop,iclk-raw,conv-init:1");
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 121);
    for w in rows.windows(2) {
        for k in 1..4 {
            assert!(w[1][k] >= w[0][k]);
        }
    }
    assert_eq!(rows[120][1], 1.0);
}

#[test]
fn dumped_pairs_match_the_stream() {
    let dir = TempDir::new().unwrap();
    let m = write_manifest(dir.path());
    let out_dir = dir.path().join("pairs");
    let out = iclk(&["dump-pairs", "--manifest", s(&m), "--pairs", "2", "--seed", "4", "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(0));
    let stream = Manifest::load(&m).unwrap().stream(4).unwrap();
    let p = stream.evaluation_pair(1).unwrap();
    let t = harness::load_grid(&out_dir.join("pair000001_template.fgt")).unwrap();
    assert_eq!(t.data(), p.template.data());
    let csv = fs::read_to_string(out_dir.join("pairs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(out_dir.join("pair000001_image.png").exists());
}

fn write_train_config(dir: &Path, name: &str, steps: usize) -> PathBuf {
    let p = dir.join(name);
    fs::write(
        &p,
        format!(
            "[train]\nsteps = {steps}\nbatch_size = 2\nlearning_rate = 1e-3\nvalidation_size = 3\n\
             validation_interval = 2\nseed = 11\n[model]\ninit_seed = 2\n"
        ),
    )
    .unwrap();
    p
}

#[test]
fn zero_step_training_saves_the_initial_model() {
    let dir = TempDir::new().unwrap();
    let m = write_manifest(dir.path());
    let cfg = write_train_config(dir.path(), "t.toml", 0);
    let ck = dir.path().join("model.ckpt");
    let out = iclk(&["train", "--config", s(&cfg), "--manifest", s(&m), "--out", s(&ck)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let init = TrainFile::load(&cfg).unwrap().initial_stack().unwrap();
    assert_eq!(Checkpoint::load(&ck).unwrap().stack, init);
    let hist = fs::read_to_string(harness::history_path(&ck)).unwrap();
    assert_eq!(hist.lines().count(), 3);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let m = write_manifest(dir.path());
    let short = write_train_config(dir.path(), "short.toml", 2);
    let long = write_train_config(dir.path(), "long.toml", 4);
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));

    let run = |cfg: &Path, out: &Path, resume: bool| {
        let mut args = vec!["train", "--config", s(cfg), "--manifest", s(&m), "--out", s(out)];
        if resume {
            args.push("--resume");
        }
        let o = iclk(&args);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    };
    run(&long, &a, false);
    run(&short, &b, false);
    run(&long, &b, true);
    for (x, y) in [
        (a.clone(), b.clone()),
        (harness::last_path(&a), harness::last_path(&b)),
        (harness::history_path(&a), harness::history_path(&b)),
    ] {
        assert_eq!(fs::read(&x).unwrap(), fs::read(&y).unwrap(), "{}", x.display());
    }
}
