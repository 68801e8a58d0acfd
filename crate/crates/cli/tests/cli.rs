use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_urbanform"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

#[test]
fn help_matches_golden_files() {
    let cases: [(&str, &[&str]); 7] = [
        ("root", &["--help"]),
        ("dataset", &["dataset", "--help"]),
        ("dataset_build", &["dataset", "build", "--help"]),
        ("dataset_synth", &["dataset", "synth", "--help"]),
        ("train", &["train", "--help"]),
        ("generate", &["generate", "--help"]),
        ("evaluate", &["evaluate", "--help"]),
    ];
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    for (name, args) in cases {
        let out = run(args);
        assert_eq!(out.status.code(), Some(0), "{name}");
        let text = String::from_utf8(out.stdout).unwrap();
        let path = golden_dir().join(format!("{name}.txt"));
        if update {
            fs::create_dir_all(golden_dir()).unwrap();
            fs::write(&path, &text).unwrap();
        }
        let want = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden {}", path.display()));
        assert_eq!(text, want, "help of {name} changed");
    }
}

#[test]
fn every_option_documents_its_default() {
    for args in [
        &["dataset", "build", "--help"][..],
        &["dataset", "synth", "--help"],
        &["train", "--help"],
        &["generate", "--help"],
        &["evaluate", "--help"],
    ] {
        let text = String::from_utf8(run(args).stdout).unwrap();
        for line in text.lines().filter(|l| l.trim_start().starts_with("--")) {
            let required = ["--input", "--out", "--manifest", "--ckpt", "--generated", "--config", "--help"];
            let flag = line.split_whitespace().next().unwrap();
            if required.contains(&flag) {
                continue;
            }
            assert!(line.contains("[default:"), "{args:?}: {line}");
        }
    }
}

#[test]
fn argument_errors_exit_one() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["train"]), 1);
    assert_eq!(code(&["dataset", "synth", "--out", "/nonexistent/x", "--size", "33"]), 1);
    assert_eq!(code(&["dataset", "synth", "--out", "x", "--water", "lake"]), 1);
    assert_eq!(
        code(&["train", "--manifest", "m.json", "--out", "o", "--no-adversarial", "--spectral-norm"]),
        1
    );
    assert_eq!(code(&["--version"]), 0);
}

#[test]
fn synth_is_deterministic_and_respects_water_style() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let args = ["dataset", "synth", "--count", "6", "--size", "16", "--seed", "4", "--test-count", "2", "--out", s(d)];
        assert_eq!(code(&args), 0);
    }
    let names = |d: &Path| {
        let mut v: Vec<String> = fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        v.sort();
        v
    };
    assert_eq!(names(&a), names(&b));
    for n in names(&a) {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n}");
    }
    assert!(a.join("manifest.json").exists());
    assert!(a.join("resolved_config.json").exists());
    let labels = names(&a).iter().filter(|n| n.ends_with("_builtup.urg")).count();
    assert_eq!(labels, 6);

    let dry = dir.path().join("dry");
    let args = ["dataset", "synth", "--count", "4", "--size", "16", "--water", "none", "--out", s(&dry)];
    assert_eq!(code(&args), 0);
    for n in names(&dry).iter().filter(|n| n.ends_with("_water.urg")) {
        let g = urbanform::raster::read_grid(dry.join(n)).unwrap();
        assert_eq!(g.bright_count(), 0);
    }
}

#[test]
fn build_reports_empty_directory() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = run(&["dataset", "build", "--input", s(&empty), "--out", s(&dir.path().join("m.json"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains(s(&empty)), "{err}");
}

#[test]
fn build_is_deterministic() {
    use urbanform::raster::{write_grid, Domain, Grid};
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("exports");
    fs::create_dir(&input).unwrap();
    for (i, city) in ["alpha", "beta", "gamma"].iter().enumerate() {
        let label = Grid::from_fn_binary(64, 64, |x, y| (x + y + i) % 5 == 0 || (x / 8 + y / 8) % 3 == 0);
        let ramp = Grid::new(64, 64, Domain::Raw, (0..4096).map(|v| (v % 97) as f32).collect()).unwrap();
        let water = Grid::from_fn_binary(64, 64, |x, _| x < 4);
        write_grid(&label, input.join(format!("{city}_2020_builtup.urg"))).unwrap();
        write_grid(&ramp, input.join(format!("{city}_2020_ntl.urg"))).unwrap();
        write_grid(&ramp, input.join(format!("{city}_2020_dem.urg"))).unwrap();
        write_grid(&water, input.join(format!("{city}_2020_water.urg"))).unwrap();
    }
    let m1 = dir.path().join("one/manifest.json");
    let m2 = dir.path().join("two/manifest.json");
    for m in [&m1, &m2] {
        let args = ["dataset", "build", "--input", s(&input), "--out", s(m), "--test-count", "1", "--seed", "3"];
        assert_eq!(code(&args), 0);
    }
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
    let resolved = fs::read_to_string(dir.path().join("one/resolved_config.json")).unwrap();
    assert!(resolved.contains("\"test_count\": 1"));
}

#[test]
fn generate_and_evaluate_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&["dataset", "synth", "--count", "4", "--size", "16", "--test-count", "2", "--out", s(&data)]), 0);
    let manifest = data.join("manifest.json");
    let missing = dir.path().join("nope.bin");
    let out = dir.path().join("gen");
    assert_eq!(code(&["generate", "--ckpt", s(&missing), "--manifest", s(&manifest), "--out", s(&out)]), 2);
    fs::write(&missing, b"garbage").unwrap();
    assert_eq!(code(&["generate", "--ckpt", s(&missing), "--manifest", s(&manifest), "--out", s(&out)]), 2);

    let other = dir.path().join("other");
    fs::create_dir(&other).unwrap();
    fs::write(other.join("unrelated.urg"), b"").unwrap();
    let report = dir.path().join("r.csv");
    let args = ["evaluate", "--generated", s(&other), "--manifest", s(&manifest), "--out", s(&report)];
    assert_eq!(code(&args), 2);
    assert!(!report.exists());
}

fn copy_labels(manifest: &Path, split: &str, out: &Path) -> Vec<String> {
    let m = urbanform::dataset::Manifest::load(manifest).unwrap();
    fs::create_dir_all(out).unwrap();
    let mut stems = Vec::new();
    for e in m.entries.iter().filter(|e| e.split.to_string() == split) {
        let name = Path::new(&e.path).file_name().unwrap().to_str().unwrap();
        let stem = name.strip_suffix("_builtup.urg").unwrap().to_string();
        fs::copy(manifest.parent().unwrap().join(&e.path), out.join(format!("{stem}.urg"))).unwrap();
        stems.push(stem);
    }
    stems
}

#[test]
fn evaluate_perfect_match_and_partial_overlap() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&["dataset", "synth", "--count", "12", "--size", "32", "--test-count", "5", "--out", s(&data)]), 0);
    let manifest = data.join("manifest.json");
    let gen = dir.path().join("copied");
    let stems = copy_labels(&manifest, "test", &gen);
    assert_eq!(stems.len(), 5);
    let report = dir.path().join("out/report.csv");
    let args = ["evaluate", "--generated", s(&gen), "--manifest", s(&manifest), "--out", s(&report)];
    assert_eq!(code(&args), 0);
    let text = fs::read_to_string(&report).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "# fractal_mode=filled spm_levels=auto");
    assert!(lines.next().unwrap().starts_with("id,mse,psnr,spm,ssim"));
    let mean: Vec<&str> = text.lines().last().unwrap().split(',').collect();
    assert_eq!(mean[0], "mean");
    assert_eq!(mean[1], "0");
    assert_eq!(mean[2], "inf");
    assert_eq!(mean[3], "100");
    assert_eq!(mean[4], "1");
    for suffix in ["fractal.csv", "zipf.csv", "summary.json"] {
        assert!(dir.path().join(format!("out/report_{suffix}")).exists(), "{suffix}");
    }
    assert!(dir.path().join("out/resolved_config.json").exists());
    let first = fs::read(&report).unwrap();
    assert_eq!(code(&args), 0);
    assert_eq!(fs::read(&report).unwrap(), first);

    let boundary = dir.path().join("out/boundary.csv");
    let args = [
        "evaluate", "--generated", s(&gen), "--manifest", s(&manifest), "--out", s(&boundary), "--fractal-mode", "boundary",
    ];
    assert_eq!(code(&args), 0);
    assert!(fs::read_to_string(&boundary).unwrap().starts_with("# fractal_mode=boundary"));

    fs::remove_file(gen.join(format!("{}.urg", stems[0]))).unwrap();
    fs::write(gen.join("stranger.urg"), b"").unwrap();
    let partial = dir.path().join("out/partial.csv");
    let out = run(&["evaluate", "--generated", s(&gen), "--manifest", s(&manifest), "--out", s(&partial)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read_to_string(&partial).unwrap().lines().count(), 2 + 4 + 1);
    let summary = fs::read_to_string(dir.path().join("out/partial_summary.json")).unwrap();
    assert!(summary.contains("stranger") && summary.contains(&stems[0]));

    let bad_levels = ["evaluate", "--generated", s(&gen), "--manifest", s(&manifest), "--out", s(&partial), "--spm-levels", "9"];
    assert_eq!(code(&bad_levels), 1);
}

#[test]
fn config_rejects_unknown_keys_and_invalid_values() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&["dataset", "synth", "--count", "4", "--size", "16", "--test-count", "1", "--out", s(&data)]), 0);
    let manifest = data.join("manifest.json");
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let out = dir.path().join("run");
    assert_eq!(code(&["train", "--manifest", s(&manifest), "--config", s(&cfg), "--out", s(&out)]), 1);
    fs::write(&cfg, r#"{"train": {"batch_size": 1}}"#).unwrap();
    assert_eq!(code(&["train", "--manifest", s(&manifest), "--config", s(&cfg), "--out", s(&out)]), 1);
    fs::write(&cfg, r#"{"train": {"max_resolution": 32}}"#).unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&["train", "--manifest", s(&missing), "--config", s(&cfg), "--out", s(&out)]), 2);
}

#[test]
fn short_training_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&["dataset", "synth", "--count", "10", "--size", "16", "--test-count", "3", "--out", s(&data)]), 0);
    let manifest = data.join("manifest.json");
    let cfg = dir.path().join("tiny.json");
    fs::write(
        &cfg,
        r#"{"train": {"max_resolution": 16, "base_channels": 4, "batch_size": 4, "total_iters": 12,
            "iters_per_stage": 4, "checkpoint_interval": 6, "base_lr": 0.001}}"#,
    )
    .unwrap();
    let run_dir = dir.path().join("run");
    for flags in [&[][..], &["--physical-only"], &["--no-adversarial", "--no-geo"], &["--spectral-norm"]] {
        let mut args = vec!["train", "--manifest", s(&manifest), "--config", s(&cfg), "--out", s(&run_dir)];
        args.extend_from_slice(flags);
        assert_eq!(code(&args), 0, "{flags:?}");
    }
    let log = fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "iter,stage,alpha,lr,d_loss,g_loss,l1,geo");
    assert_eq!(log.lines().count(), 13);
    let resolved = fs::read_to_string(run_dir.join("resolved_config.json")).unwrap();
    assert!(resolved.contains("\"spectral_norm\": true"));

    let ckpt = run_dir.join("ckpt_12.bin");
    let gen = dir.path().join("gen");
    assert_eq!(code(&["generate", "--ckpt", s(&ckpt), "--manifest", s(&manifest), "--out", s(&gen)]), 0);
    let urg = fs::read_dir(&gen).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "urg")).count();
    let pgm = fs::read_dir(&gen).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm")).count();
    assert_eq!((urg, pgm), (3, 3));
    let report = dir.path().join("report.csv");
    assert_eq!(code(&["evaluate", "--generated", s(&gen), "--manifest", s(&manifest), "--out", s(&report)]), 0);

    let other = dir.path().join("other");
    assert_eq!(code(&["dataset", "synth", "--count", "4", "--size", "32", "--test-count", "2", "--out", s(&other)]), 0);
    let other_manifest = other.join("manifest.json");
    let mismatch = ["generate", "--ckpt", s(&ckpt), "--manifest", s(&other_manifest), "--out", s(&gen)];
    assert_eq!(code(&mismatch), 2);
}
