//! End-to-end runs of the `burstm` binary.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use burstm::cli::{ExperimentConfig, CONFIG_FILE};
use burstm::flow_net::FNetConfig;
use burstm::io::{read_burst, read_npy};
use burstm::neural_warp::WarpConfig;
use burstm::reconstruction::{MergeMode, ModelConfig};
use common::corpus_dir;
use sha2::{Digest, Sha256};

fn burstm(cache: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_burstm"))
        .args(args)
        .env("BURSTM_CACHE", cache)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "stdout:\n{stdout}\nstderr:\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

fn small_config(n_frames: usize, scales: Vec<usize>, gt: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.n_frames = n_frames;
    cfg.data.scales = scales.clone();
    cfg.data.gt_size = gt;
    cfg.model = ModelConfig {
        fnet: FNetConfig { base_channels: 4, levels: 2, pad_to_multiple: true, ..FNetConfig::default() },
        warp: WarpConfig { k: 4, encoder_blocks: 1, ..WarpConfig::default() },
        blender_blocks: 1,
        merge: MergeMode::Mean,
        merge_frames: n_frames,
        decoder_layers: 2,
        decoder_channels: 8,
    };
    cfg.train.steps = Some(2);
    cfg.train.batch_size = 1;
    cfg.train.burst_size = n_frames;
    cfg.train.scales = scales;
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join("experiment.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

/// The bundled photographs plus a fifth crop and one unreadable file.
fn image_dir(root: &Path) -> PathBuf {
    let dir = root.join("images");
    fs::create_dir_all(&dir).unwrap();
    for e in fs::read_dir(corpus_dir()).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "png") {
            fs::copy(&p, dir.join(p.file_name().unwrap())).unwrap();
        }
    }
    let img = image::open(corpus_dir().join("coffee.png")).unwrap();
    img.crop_imm(40, 40, 200, 200).save(dir.join("mug.png")).unwrap();
    fs::write(dir.join("broken.png"), b"not an image").unwrap();
    dir
}

fn digest_tree(root: &Path) -> Vec<(PathBuf, String)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let hash = format!("{:x}", Sha256::digest(fs::read(&p).unwrap()));
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), hash));
            }
        }
    }
    out.sort();
    out
}

fn has_config(dir: &Path) -> bool {
    dir.join(CONFIG_FILE).is_file() && ExperimentConfig::load(&dir.join(CONFIG_FILE)).is_ok()
}

#[test]
fn synthesize_writes_one_burst_per_image_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let images = image_dir(tmp.path());
    let config = write_config(tmp.path(), &small_config(4, vec![2], 48));
    let cache = tmp.path().join("cache");
    let run = |out: &str| {
        let out = tmp.path().join(out);
        let args = ["synthesize", "--config", config.to_str().unwrap(), "--images", images.to_str().unwrap()];
        let stdout = ok(&burstm(&cache, &[&args[..], &["--seed", "3", "--out", out.to_str().unwrap()]].concat()));
        assert!(stdout.contains("config_hash=") && stdout.contains("seed=3"), "{stdout}");
        assert!(stdout.contains("failed_inputs=1"), "{stdout}");
        out
    };
    let a = run("a");
    let bursts: Vec<PathBuf> = fs::read_dir(a.join("train")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(bursts.len(), 5);
    for b in &bursts {
        let frames = fs::read_dir(b).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("frame_"));
        assert_eq!(frames.count(), 4);
        assert_eq!(read_burst(b).unwrap().frames.len(), 4);
    }
    assert!(has_config(&a));
    assert_eq!(digest_tree(&a), digest_tree(&run("b")));
    // nothing lands in the cache when --out is given, and inputs are untouched
    assert!(!cache.exists());
    assert_eq!(fs::read_dir(&images).unwrap().count(), 6);
}

#[test]
fn synthesize_at_scale_four_gives_twelve_pixel_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_config(4, vec![2], 96));
    let cache = tmp.path().join("cache");
    ok(&burstm(
        &cache,
        &["synthesize", "--config", config.to_str().unwrap(), "--images", corpus_dir().to_str().unwrap(), "--scale", "4"],
    ));
    // no --out: the cache root holds synthesize/<hash>
    let runs: Vec<PathBuf> = fs::read_dir(cache.join("synthesize")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    assert!(has_config(&runs[0]));
    for e in fs::read_dir(runs[0].join("train")).unwrap() {
        let dir = e.unwrap().path();
        assert!(dir.to_string_lossy().ends_with("_x4"));
        let frame = read_npy(&dir.join("frame_00.npy")).unwrap();
        assert_eq!(frame.shape(), &[4, 12, 12]);
        assert_eq!(read_npy(&dir.join("gt.npy")).unwrap().shape(), &[3, 96, 96]);
    }
}

#[test]
fn unreadable_inputs_only_fail_when_all_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let images = tmp.path().join("junk");
    fs::create_dir_all(&images).unwrap();
    fs::write(images.join("a.png"), b"garbage").unwrap();
    let out = burstm(tmp.path(), &["synthesize", "--images", images.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no readable images"));
}

#[test]
fn train_eval_infer_analyze_round() {
    let tmp = tempfile::tempdir().unwrap();
    let t = |p: &str| tmp.path().join(p);
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let cache = t("cache");
    let mut cfg = small_config(4, vec![2, 3, 4], 48);
    cfg.data.val_scenes = 1;
    let config = write_config(tmp.path(), &cfg);
    ok(&burstm(&cache, &["synthesize", "--config", &s(&config), "--images", &s(&corpus_dir()), "--out", &s(&t("data"))]));

    let stdout = ok(&burstm(&cache, &["train", "--config", &s(&config), "--data", &s(&t("data")), "--out", &s(&t("run"))]));
    assert!(stdout.contains("steps=2"), "{stdout}");
    assert!(has_config(&t("run")));
    let ck = s(&t("run/checkpoint.npz"));

    let stdout = ok(&burstm(&cache, &["eval", "--checkpoint", &ck, "--data", &s(&t("data")), "--out", &s(&t("eval"))]));
    assert!(stdout.contains("config_hash=") && stdout.contains("summary"), "{stdout}");
    assert!(t("eval/report.txt").is_file() && has_config(&t("eval")));

    fs::create_dir_all(t("empty/val")).unwrap();
    let empty = burstm(&cache, &["eval", "--checkpoint", &ck, "--data", &s(&t("empty")), "--out", &s(&t("eval2"))]);
    assert!(!empty.status.success());
    assert!(String::from_utf8_lossy(&empty.stderr).contains("no bursts"), "{}", String::from_utf8_lossy(&empty.stderr));

    let burst = fs::read_dir(t("data/val")).unwrap().map(|e| e.unwrap().path()).find(|p| s(p).ends_with("_x2")).unwrap();
    let (h, w) = read_burst(&burst).unwrap().lr_dims();
    let infer = ["infer", "--checkpoint", &ck, "--burst", &s(&burst), "--out", &s(&t("infer"))];
    ok(&burstm(&cache, &[&infer[..], &["--scale", "2", "--scale", "3", "--scale", "4"]].concat()));
    for sc in [2u32, 3, 4] {
        let img = image::open(t(&format!("infer/sr_x{sc}.png"))).unwrap();
        assert_eq!((img.height(), img.width()), (2 * sc * h as u32, 2 * sc * w as u32));
    }
    assert!(has_config(&t("infer")));

    let stdout = ok(&burstm(&cache, &["analyze", "--checkpoint", &ck, "--burst", &s(&burst), "--out", &s(&t("spec"))]));
    assert!(stdout.contains("wrote 6 files"), "{stdout}");
    let pngs = fs::read_dir(t("spec")).unwrap().filter(|e| s(&e.as_ref().unwrap().path()).ends_with(".png")).count();
    assert_eq!(pngs, 4 + 2);
    assert!(has_config(&t("spec")));

    let align = ["analyze", "--checkpoint", &ck, "--burst", &s(&burst), "--mode", "alignment", "--out", &s(&t("align"))];
    ok(&burstm(&cache, &align));
    assert!(t("align/alignment.txt").is_file() && has_config(&t("align")));
    assert!(!cache.exists());
}

#[test]
fn bad_checkpoints_are_rejected_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let fake = tmp.path().join("ck.npz");
    fs::write(&fake, b"nope").unwrap();
    let out = burstm(tmp.path(), &["infer", "--checkpoint", fake.to_str().unwrap(), "--burst", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}
