//! End-to-end checks of the command-line surface: exit codes, file formats,
//! and output schemas.

use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_xvfg"));
    cmd.env("XVFG_THREADS", "1");
    cmd
}

fn temp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("xvfg_cli_it").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

#[test]
fn missing_data_flag_exits_2_naming_the_flag() {
    let out = bin().args(["train", "--out", "/tmp/x"]).output().unwrap();
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--data"), "{stderr}");
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = temp("badcfg");
    let cfg = dir.join("c.cfg");
    std::fs::write(&cfg, "no_such_knob=1\n").unwrap();
    let out = bin()
        .args(["train", "--data", "toy:4", "--out"])
        .arg(dir.join("run"))
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_knob"));
}

#[test]
fn missing_data_directory_exits_3() {
    let out = bin()
        .args(["train", "--data", "/definitely/not/here", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 3);
}

#[test]
fn gradcheck_passes_and_sabotage_exits_5_naming_the_op() {
    let out = bin()
        .args(["gradcheck", "--module", "losses", "--seed", "2"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("max_rel_err"), "{stdout}");

    let out = bin().args(["gradcheck", "--sabotage"]).output().unwrap();
    assert_eq!(code(&out), 5);
    assert!(String::from_utf8_lossy(&out.stderr).contains("sigmoid"));
}

#[test]
fn train_smoke_writes_checkpoint_and_four_panel_grid() {
    let dir = temp("smoke");
    let out = bin()
        .args([
            "train",
            "--data",
            "toy:4",
            "--ablation",
            "D",
            "--size",
            "32",
            "--iterations",
            "2",
            "--batch-size",
            "2",
        ])
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("final.xvfg").is_file());
    assert!(dir.join("loss_log.csv").is_file());
    // 4 panels of 32px each, 4 preview rows of 32px
    let grid = xvfg::data::image::decode_image(&dir.join("samples_final.ppm")).unwrap();
    assert_eq!(grid.shape().w, 4 * 32);
    let log = std::fs::read_to_string(dir.join("loss_log.csv")).unwrap();
    assert!(log.starts_with("iter,d1,d2,g_adv,l1_stage1,l1_stage2,tv,total\n"));
}

#[test]
fn eval_appends_identical_rows_with_exact_header() {
    let dir = temp("evalfmt");
    let run = dir.join("run");
    let out = bin()
        .args([
            "train", "--data", "toy:4", "--iterations", "2", "--batch-size", "2",
        ])
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = dir.join("metrics.csv");
    for _ in 0..2 {
        let out = bin()
            .args(["eval", "--probe", "uniform", "--data", "toy:3:900"])
            .arg("--checkpoint")
            .arg(run.join("final.xvfg"))
            .arg("--out")
            .arg(&csv)
            .output()
            .unwrap();
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "method,direction,size,ssim,psnr,kl_mean,kl_std,top1,top5");
    assert_eq!(lines[1], lines[2], "appended rows differ");
    assert!(!text.contains('\u{00b1}'), "kl must be two plain columns");
}

#[test]
fn corrupt_checkpoint_exits_4() {
    let dir = temp("crc");
    let run = dir.join("run");
    let out = bin()
        .args([
            "train", "--data", "toy:4", "--iterations", "1", "--batch-size", "2",
        ])
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let ckpt = run.join("final.xvfg");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&ckpt, bytes).unwrap();
    let out = bin()
        .args(["eval", "--probe", "uniform", "--data", "toy:2:900"])
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(dir.join("m.csv"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn make_toy_then_train_from_directory() {
    let dir = temp("roundtrip");
    let data = dir.join("data");
    let out = bin()
        .args(["make-toy", "--count", "4", "--size", "32", "--layout", "split-folders"])
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = bin()
        .args(["train", "--iterations", "1", "--batch-size", "2"])
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(dir.join("run"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_writes_grids_for_every_sample() {
    let dir = temp("gen");
    let run = dir.join("run");
    let out = bin()
        .args([
            "train", "--data", "toy:4", "--iterations", "1", "--batch-size", "2",
        ])
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let imgs = dir.join("imgs");
    let out = bin()
        .args(["generate", "--data", "toy:3:500"])
        .arg("--checkpoint")
        .arg(run.join("final.xvfg"))
        .arg("--out")
        .arg(&imgs)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let grids = std::fs::read_dir(&imgs)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .ends_with("_grid.ppm")
        })
        .count();
    assert_eq!(grids, 3);
}
