use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn plumeseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plumeseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn config_file() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/small.toml")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn count(dir: &Path, suffix: &str) -> usize {
    fs::read_dir(dir)
        .map(|d| {
            d.filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(suffix))
                .count()
        })
        .unwrap_or(0)
}

#[test]
fn end_to_end_on_generated_data() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let ckpt = root.join("ckpt");
    let data_s = data.to_str().unwrap();
    let out = plumeseg(&[
        "-q",
        "gen-data",
        "--out",
        data_s,
        "--per-category",
        "1",
        "--test-per-category",
        "0",
        "--frames",
        "4",
        "--height",
        "32",
        "--width",
        "32",
        "--categories",
        "close-clear,long-complex",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(data.join("manifest.txt")).unwrap();
    assert_eq!(
        manifest.lines().filter(|l| l.ends_with(" train")).count(),
        2,
        "{manifest}"
    );

    let cfg = config_file();
    let cfg_s = cfg.to_str().unwrap();
    let ckpt_set = format!("checkpoint_dir={}", ckpt.display());
    let common = [
        "--config",
        cfg_s,
        "--data",
        data_s,
        "--set",
        "input_size=[32,32]",
        "--set",
        "epochs=1",
        "--set",
        "data.segment_len=4",
        "--set",
        &ckpt_set,
    ];
    let mut args = vec!["-q", "train"];
    args.extend(common);
    let out = plumeseg(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(count(&ckpt, ".ckpt"), 1);
    let ckpt_file = ckpt.join("epoch-0001.ckpt");
    let head = fs::read(&ckpt_file).unwrap();
    assert!(head.starts_with(b"plumeseg-checkpoint v1\n"));

    let reports = root.join("reports");
    let mut args = vec!["-q", "eval", "--checkpoint", ckpt.to_str().unwrap(), "--split", "train"];
    args.extend([
        "--data",
        data_s,
        "--set",
        "data.segment_len=4",
        "--out",
        reports.to_str().unwrap(),
    ]);
    let out = plumeseg(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(reports.join("metrics.csv")).unwrap();
    assert!(
        metrics.starts_with("s_alpha,f_beta_w,mae,e_phi,miou,mdice,n_frames"),
        "{metrics}"
    );
    assert!(metrics.lines().nth(1).unwrap().ends_with(",8"));

    let video = fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.is_dir())
        .unwrap();
    let preds = root.join("preds");
    let out = plumeseg(&[
        "-q",
        "predict",
        "--checkpoint",
        ckpt_file.to_str().unwrap(),
        "--input",
        video.to_str().unwrap(),
        "--out",
        preds.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(count(&preds, ".png"), 4);
    assert!(preds.join("000000.png").exists());

    let viz = root.join("viz");
    let vid = video.file_name().unwrap().to_str().unwrap();
    let out = plumeseg(&[
        "-q",
        "visualize",
        "--checkpoint",
        ckpt_file.to_str().unwrap(),
        "--data",
        data_s,
        "--split",
        "train",
        "--set",
        "data.segment_len=4",
        "--video",
        vid,
        "--out",
        viz.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(count(&viz.join(vid), "_viz.png"), 4);
}

#[test]
fn invalid_config_exits_with_2() {
    let out = plumeseg(&[
        "train",
        "--config",
        config_file().to_str().unwrap(),
        "--set",
        "input_size=[100,100]",
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    let out = plumeseg(&["train", "--set", "no_such_key=1"]);
    assert_eq!(code(&out), 2);
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "epochs = \"many\"\n").unwrap();
    assert_eq!(code(&plumeseg(&["train", "--config", bad.to_str().unwrap()])), 2);
}

#[test]
fn missing_data_exits_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = plumeseg(&[
        "train",
        "--config",
        config_file().to_str().unwrap(),
        "--data",
        tmp.path().join("absent").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let out = plumeseg(&["eval", "--checkpoint", tmp.path().join("none.ckpt").to_str().unwrap()]);
    assert_eq!(code(&out), 3);
}
