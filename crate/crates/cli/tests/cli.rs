use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn moblurf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moblurf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path) {
    let o = moblurf(&["synth", "--out", dir.to_str().unwrap(), "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.json" {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a);
    synth(&b);
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() > 24 * 4);
    assert!(ta == tb, "dataset bytes differ between identical runs");
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(a.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["num_frames"], 24);
    assert_eq!((meta["width"].as_u64(), meta["height"].as_u64()), (Some(64), Some(64)));
    assert!(a.join("manifest.json").exists());
}

#[test]
fn bad_arguments_exit_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let o = moblurf(&["synth", "--preset", "nope", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("moving-quad-64") && stderr(&o).contains("static-64"), "{}", stderr(&o));

    fs::create_dir_all(&out).unwrap();
    fs::write(out.join("keep.txt"), "x").unwrap();
    let o = moblurf(&["synth", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--force"));
    assert!(out.join("keep.txt").exists());
    let o = moblurf(&["synth", "--out", out.to_str().unwrap(), "--force"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!out.join("keep.txt").exists());
}

#[test]
fn gradcheck_passes_and_detects_injected_fault() {
    let o = moblurf(&["gradcheck", "--points", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = moblurf(&["gradcheck", "--points", "2", "--inject-fault", "matmul"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("matmul") || stderr(&o).contains("matmul"));
    let o = moblurf(&["gradcheck", "--inject-fault", "no-such-op"]);
    assert_eq!(o.status.code(), Some(1));
}

const TINY: &str = r#"{
    "bri_iters": 4,
    "mdd_iters": 2,
    "batch_size": 16,
    "n_samples": 8,
    "num_latent": 2,
    "log_every": 1,
    "mlp": { "trunk_depth": 2, "trunk_width": 16, "rgb_width": 8, "local_depth": 1, "local_width": 8 }
}"#;

#[test]
fn frame_count_mismatch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, TINY.replacen('{', "{ \"num_frames\": 12,", 1)).unwrap();
    let run = tmp.path().join("run");
    let o = moblurf(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("12"), "{}", stderr(&o));
}

#[test]
fn train_render_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_string();
    synth(Path::new(&p("data")));
    fs::write(p("cfg.json"), TINY).unwrap();

    let o = moblurf(&["train", "--data", &p("data"), "--config", &p("cfg.json"), "--out", &p("run")]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["model.ckpt", "train.log", "summary.json", "manifest.json"] {
        assert!(Path::new(&p("run")).join(f).exists(), "missing {f}");
    }
    let log = fs::read_to_string(Path::new(&p("run")).join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert!(log.lines().last().unwrap().contains("stage=mdd"));

    let ckpt = Path::new(&p("run")).join("model.ckpt");
    let o = moblurf(&[
        "render",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        &p("data"),
        "--frames",
        "3,9",
        "--samples",
        "8",
        "--out",
        &p("renders"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["frame_0003.png", "mask_0003.png", "frame_0009.png", "mask_0009.png"] {
        assert!(Path::new(&p("renders")).join(f).exists(), "missing {f}");
    }

    let o = moblurf(&["eval", "--renders", &p("renders"), "--data", &p("data"), "--out", &p("eval")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(Path::new(&p("eval")).join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["frames"].as_array().map(Vec::len), Some(2));
    assert!(m["mean_psnr"].as_f64().is_some_and(f64::is_finite));
    let text = fs::read_to_string(Path::new(&p("eval")).join("metrics.txt")).unwrap();
    assert!(text.contains("PSNR") || text.contains("psnr"), "{text}");
    assert!(Path::new(&p("eval")).join("baseline.json").exists());
}
