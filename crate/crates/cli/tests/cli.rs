use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use localtrans::data::{procedural_image, read_dataset};
use localtrans::homography::imageio::{quantize_tensor, read_rgb, write_pnm};
use localtrans::homography::{psnr, Homography};
use localtrans::tensor::resize::resize_bicubic_to;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_localtrans"));
    c.env_remove("LOCALTRANS_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn ok(args: &[&str]) -> BTreeMap<String, String> {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .filter_map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
        })
        .collect()
}

fn num(kv: &BTreeMap<String, String>, key: &str) -> f64 {
    kv.get(key)
        .unwrap_or_else(|| panic!("missing {key}"))
        .parse()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(root).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(files(&path));
        } else {
            let bytes = std::fs::read(&path).unwrap();
            out.push((path.strip_prefix(root).unwrap().to_path_buf(), bytes));
        }
    }
    out.sort();
    out
}

fn small_data(dir: &Path, rho: &str, extra: &[&str]) {
    let mut args = vec![
        "gen-data",
        "--out",
        p(dir),
        "--n",
        "4",
        "--patch",
        "32",
        "--rho",
        rho,
        "--seed",
        "7",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

const TINY: [&str; 6] = ["--levels", "1", "--channels", "4", "--batch", "4"];

fn train(data: &Path, out: &Path, extra: &[&str]) -> BTreeMap<String, String> {
    let mut args = vec!["train", "--data", p(data), "--out", p(out)];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn gen_data_is_reproducible_and_honours_options() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    small_data(&a, "6", &[]);
    small_data(&b, "6", &[]);
    assert_eq!(files(&a), files(&b));
    assert_eq!(files(&a).len(), 12);

    let flat = tmp.path().join("flat");
    small_data(&flat, "0", &[]);
    assert!(read_dataset(&flat)
        .unwrap()
        .iter()
        .all(|s| s.gt_h == Homography::IDENTITY));

    let cross = tmp.path().join("cross");
    small_data(&cross, "6", &["--cross-res", "4"]);
    assert!(read_dataset(&cross).unwrap().iter().all(|s| s.scale == 4));
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "n = 2\npatchh = 32\n").unwrap();
    let out = run(&[
        "--config",
        p(&cfg),
        "gen-data",
        "--out",
        p(&tmp.path().join("d")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("patchh"));

    let out = run(&[
        "gen-data",
        "--out",
        p(&tmp.path().join("d")),
        "--cross-res",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&[
        "eval",
        "--checkpoint",
        p(tmp.path()),
        "--data",
        p(&tmp.path().join("missing")),
    ]);
    assert_eq!(out.status.code(), Some(3));

    let bad = tmp.path().join("bad");
    small_data(&bad, "6", &[]);
    std::fs::write(bad.join("000001").join("gt.txt"), "1 0 0\n").unwrap();
    let out = run(&[
        "train",
        "--data",
        p(&bad),
        "--out",
        p(&tmp.path().join("m")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_file_supplies_defaults() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "# small\nn = 2\npatch = 32\nrho = 4\nseed = 3\n").unwrap();
    let kv = ok(&[
        "--config",
        p(&cfg),
        "gen-data",
        "--out",
        p(&tmp.path().join("d")),
        "--n",
        "3",
    ]);
    assert_eq!(kv["samples"], "3");
    assert_eq!(kv["seed"], "3");
    assert_eq!(kv["patch"], "32");
}

#[test]
fn zero_step_training_reports_identity_error() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    small_data(&data, "6", &[]);
    let kv = train(
        &data,
        &tmp.path().join("m"),
        &["--overfit", "4", "--steps", "0"],
    );
    assert_eq!(
        num(&kv, "initial_corner_error"),
        num(&kv, "identity_corner_error")
    );
    assert!(num(&kv, "identity_corner_error") > 0.0);
    assert_eq!(kv["steps"], "0");
}

#[test]
fn eval_of_identity_pairs_with_zero_init_model_is_exact() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    small_data(&data, "0", &[]);
    let model = tmp.path().join("m");
    train(&data, &model, &["--steps", "0"]);
    let kv = ok(&[
        "eval",
        "--checkpoint",
        p(&model.join("best")),
        "--data",
        p(&data),
    ]);
    assert_eq!(num(&kv, "mean_corner_error"), 0.0);
    assert_eq!(num(&kv, "samples"), 4.0);
}

#[test]
fn resumed_training_continues_the_loss_curve() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    small_data(&data, "6", &[]);
    let model = tmp.path().join("m");
    let common = ["--overfit", "4", "--epoch-steps", "1", "--lr", "1e-4"];
    let first = train(&data, &model, &[&common[..], &["--steps", "4"]].concat());
    let before = num(&first, "epoch.4.loss");
    let second = train(
        &data,
        &model,
        &[&common[..], &["--steps", "6", "--resume"]].concat(),
    );
    assert_eq!(second["start_step"], "4");
    let after = num(&second, "epoch.1.loss");
    assert!(
        (after - before).abs() <= 0.05 * before,
        "loss {before} -> {after}"
    );
    assert_eq!(second["steps"], "6");
}

#[test]
fn deterministic_training_is_bit_reproducible() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    small_data(&data, "6", &[]);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for m in [&a, &b] {
        ok(&[
            "--deterministic",
            "--threads",
            "1",
            "--seed",
            "5",
            "train",
            "--data",
            p(&data),
            "--out",
            p(m),
            "--steps",
            "2",
            "--levels",
            "1",
            "--channels",
            "4",
            "--batch",
            "2",
        ]);
    }
    assert_eq!(files(&a), files(&b));
}

#[test]
fn align_with_identity_model_returns_the_input() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    small_data(&data, "6", &[]);
    let model = tmp.path().join("m");
    train(&data, &model, &["--steps", "0"]);
    let img = data.join("000000").join("target.ppm");
    let out = tmp.path().join("aligned");
    let kv = ok(&[
        "align",
        "--checkpoint",
        p(&model.join("best")),
        "--target",
        p(&img),
        "--unaligned",
        p(&img),
        "--out",
        p(&out),
    ]);
    assert_eq!(num(&kv, "h11"), 1.0);
    assert_eq!(
        std::fs::read(out.join("warped.ppm")).unwrap(),
        std::fs::read(&img).unwrap()
    );
    let h = Homography::from_text(&std::fs::read_to_string(out.join("homography.txt")).unwrap())
        .unwrap();
    assert_eq!(h, Homography::IDENTITY);
    assert_eq!(
        std::fs::read(out.join("mosaic.ppm")).unwrap(),
        std::fs::read(&img).unwrap()
    );
}

#[test]
fn stitch_rebuilds_a_three_by_three_scene() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    small_data(&data, "6", &[]);
    let model = tmp.path().join("m");
    train(&data, &model, &["--steps", "0"]);

    let scene = quantize_tensor(&procedural_image(4, 96, 96));
    let global = quantize_tensor(&resize_bicubic_to(&scene, 24, 24).unwrap());
    write_pnm(&tmp.path().join("global.ppm"), &global).unwrap();
    let tiles = tmp.path().join("tiles");
    std::fs::create_dir_all(&tiles).unwrap();
    for r in 0..3 {
        for c in 0..3 {
            let tile = scene.crop(32 * c, 32 * r, 32, 32).unwrap();
            write_pnm(&tiles.join(format!("tile_{r}_{c}.ppm")), &tile).unwrap();
        }
    }
    let out = tmp.path().join("mosaic.ppm");
    let kv = ok(&[
        "stitch",
        "--checkpoint",
        p(&model.join("best")),
        "--global",
        p(&tmp.path().join("global.ppm")),
        "--locals",
        p(&tiles),
        "--rows",
        "3",
        "--cols",
        "3",
        "--scale",
        "4",
        "--out",
        p(&out),
    ]);
    assert_eq!(kv["fallback_cells"], "0");
    let mosaic = read_rgb(&out).unwrap();
    let score = psnr(&mosaic, &scene).unwrap();
    assert!(score >= 35.0, "mosaic PSNR {score}");
}

#[test]
fn bench_counters_match_formulas() {
    let kv = ok(&[
        "bench",
        "--sizes",
        "8x8,5x5",
        "--radius",
        "2",
        "--channels",
        "4",
    ]);
    assert_eq!(kv["rows"], "4");
    for i in 0..4 {
        assert_eq!(
            kv[&format!("row.{i}.macs")],
            kv[&format!("row.{i}.predicted_macs")]
        );
        assert_eq!(
            kv[&format!("row.{i}.map_elements")],
            kv[&format!("row.{i}.predicted_map_elements")]
        );
    }
    assert!(num(&kv, "row.0.map_elements") < num(&kv, "row.1.map_elements"));
    // a 5x5 window on a 5x5 grid covers everything
    assert_eq!(kv["row.2.map_elements"], kv["row.3.map_elements"]);

    let kv = ok(&[
        "bench",
        "--sizes",
        "8x8",
        "--radius",
        "1",
        "--channels",
        "2",
        "--modes",
        "global",
        "--budget",
        "10",
    ]);
    assert_eq!(kv["row.0.refused_budget"], "10");
}

#[test]
fn bench_default_pyramid_orders_local_below_global() {
    let kv = ok(&["bench", "--channels", "8"]);
    assert_eq!(kv["rows"], "6");
    for k in 0..3 {
        let (l, g) = (2 * k, 2 * k + 1);
        assert_eq!(kv[&format!("row.{l}.mode")], "local");
        assert!(
            num(&kv, &format!("row.{l}.map_elements")) < num(&kv, &format!("row.{g}.map_elements"))
        );
    }
}
