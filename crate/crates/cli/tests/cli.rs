use std::path::Path;
use std::process::{Command, Output};

use deepcl_core::network::{save_checkpoint, DecoderKind, EncoderConfig, ModelConfig, ModelParams};
use deepcl_core::synthdata::{generate_dataset, write_dataset, SceneConfig};

fn deepcl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepcl"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DEEPCL_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&deepcl(&["frobnicate"], d)), 1);
    assert_eq!(code(&deepcl(&["gen-data", "--out", "x", "--n", "0"], d)), 1);
    assert_eq!(code(&deepcl(&["gen-data", "--out", "x", "--n", "2", "--size", "4"], d)), 1);
    assert_eq!(code(&deepcl(&["--help"], d)), 0);
    assert_eq!(code(&deepcl(&["--version"], d)), 0);

    assert_eq!(code(&deepcl(&["gen-data", "--out", "data", "--n", "5", "--size", "32"], d)), 0);
    let o = deepcl(&["train", "--data", "data", "--out", "m", "--loss", "none", "--decoder", "none"], d);
    assert_eq!(code(&o), 1);
    let o = deepcl(&["sweep", "--kind", "ablation", "--data", "data", "--out", "s", "--seeds"], d);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));

    std::fs::write(d.join("cfg.json"), r#"{"scene": {}, "trainn": {}}"#).unwrap();
    assert_eq!(code(&deepcl(&["--config", "cfg.json", "gen-data", "--out", "y", "--n", "1"], d)), 1);
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = deepcl(&["train", "--data", "missing", "--out", "m"], d);
    assert_eq!(code(&o), 2);
    std::fs::write(d.join("bad.dclm"), b"not a checkpoint").unwrap();
    assert_eq!(code(&deepcl(&["gen-data", "--out", "data", "--n", "2", "--size", "32"], d)), 0);
    let o = deepcl(&["eval", "--ckpt", "bad.dclm", "--data", "data", "--mode", "seg"], d);
    assert_eq!(code(&o), 2);
}

#[test]
fn gen_data_is_seeded_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&deepcl(&["gen-data", "--out", "a", "--n", "3", "--seed", "9", "--size", "32"], d)), 0);
    let o = Command::new(env!("CARGO_BIN_EXE_deepcl"))
        .args(["gen-data", "--out", "b", "--n", "3", "--size", "32"])
        .current_dir(d)
        .env("DEEPCL_SEED", "9")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    for i in 0..3 {
        let f = format!("sample_{i:06}.dclt");
        assert_eq!(std::fs::read(d.join("a").join(&f)).unwrap(), std::fs::read(d.join("b").join(&f)).unwrap());
    }
    let run = json(&d.join("a/run.json"));
    assert_eq!(run["command"], "gen-data");
    assert_eq!(run["seeds"][0], 9);
    assert_eq!(run["config"]["scene"]["size"], 32);
}

#[test]
fn pseudo_only_masks_are_empty() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = deepcl(&["gen-data", "--out", "p", "--n", "4", "--pseudo-only", "--size", "32"], d);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("(0.00% changed pixels)"), "{}", stdout(&o));
}

#[test]
fn seg_oracle_checkpoint_scores_perfectly_on_static_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let samples = generate_dataset(6, 0, &SceneConfig::default().static_scene()).unwrap();
    write_dataset(&d.join("static"), &samples, None).unwrap();

    // zero classifier weights and a large negative bias: every pixel is unchanged
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            input_size: 64,
            ..EncoderConfig::default()
        },
        decoder: DecoderKind::Simple,
        decoder_width: 16,
    };
    let mut params = ModelParams::<f32>::init(&cfg, 0).unwrap();
    let w = params.get("dec.cls.weight").unwrap().numel();
    params.set("dec.cls.weight", vec![0.0; w]).unwrap();
    params.set("dec.cls.bias", vec![-100.0]).unwrap();
    save_checkpoint(&d.join("oracle.dclm"), &params).unwrap();

    let o = deepcl(&["eval", "--ckpt", "oracle.dclm", "--data", "static", "--mode", "seg", "--out", "ev"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&d.join("ev/report.json"));
    assert_eq!(report["aggregation"], "pooled_pixels");
    assert_eq!(report["report"]["f1"], 1.0);
    assert_eq!(report["report"]["iou"], 1.0);
    assert_eq!(report["report"]["confusion"]["fp"], 0);
    let csv = std::fs::read_to_string(d.join("ev/report.csv")).unwrap();
    assert!(csv.starts_with("mode,aggregation,d_thre,iou,precision,recall,f1"));
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&deepcl(&["gen-data", "--out", "data", "--n", "10", "--size", "32", "--seed", "1"], d)), 0);
    let args = ["train", "--data", "data", "--out", "m", "--epochs", "2", "--batch-size", "4", "--seed", "5", "--loss", "con"];
    let o = deepcl(&args, d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("epoch")).count(), 2);
    let log_a = std::fs::read(d.join("m/train_log.csv")).unwrap();
    let run = json(&d.join("m/run.json"));
    assert_eq!(run["config"]["train"]["flags"]["use_con"], true);
    assert_eq!(run["config"]["train"]["encoder"]["input_size"], 32);

    let mut again = args;
    again[4] = "m2";
    assert_eq!(code(&deepcl(&again, d)), 0);
    assert_eq!(log_a, std::fs::read(d.join("m2/train_log.csv")).unwrap());
    assert_eq!(std::fs::read(d.join("m/model.dclm")).unwrap(), std::fs::read(d.join("m2/model.dclm")).unwrap());

    let o = deepcl(&["eval", "--ckpt", "m/model.dclm", "--data", "data", "--mode", "metric", "--thre", "auto"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&d.join("m/eval_metric/report.json"));
    assert!(report["d_thre"].as_f64().unwrap() > 0.0);

    let o = deepcl(&["eval", "--ckpt", "m/model.dclm", "--data", "data", "--mode", "metric", "--thre", "0.5", "--out", "fixed"], d);
    assert_eq!(code(&o), 0);
    assert_eq!(json(&d.join("fixed/report.json"))["d_thre"], 0.5);
    let o = deepcl(&["eval", "--ckpt", "m/model.dclm", "--data", "data", "--mode", "metric", "--thre", "high"], d);
    assert_eq!(code(&o), 1);
}

#[test]
fn metric_only_checkpoint_refuses_seg_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&deepcl(&["gen-data", "--out", "data", "--n", "5", "--size", "32"], d)), 0);
    let o = deepcl(&["train", "--data", "data", "--out", "m", "--epochs", "1", "--decoder", "none"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&deepcl(&["eval", "--ckpt", "m/model.dclm", "--data", "data", "--mode", "seg"], d)), 1);
}

#[test]
fn sweep_writes_summary_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&deepcl(&["gen-data", "--out", "data", "--n", "10", "--size", "32"], d)), 0);
    let args = ["sweep", "--kind", "temperature", "--data", "data", "--out", "s", "--seeds", "1,2", "--taus", "0.2,10", "--epochs", "1"];
    let o = deepcl(&args, d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("4 cells, 0 already complete"));
    for key in ["tau0.2_seed1", "tau0.2_seed2", "tau10_seed1", "tau10_seed2"] {
        assert!(d.join(format!("s/cells/{key}.json")).exists(), "{key}");
        assert!(d.join(format!("s/cells/{key}_log.csv")).exists(), "{key}");
    }
    let summary = json(&d.join("s/summary.json"));
    assert_eq!(summary["rows"].as_array().unwrap().len(), 2);
    assert_eq!(summary["aggregation"], "pooled_pixels");

    let o = deepcl(&args, d);
    assert!(stdout(&o).contains("4 cells, 4 already complete"), "{}", stdout(&o));

    // a different epoch count invalidates the stored cells
    let mut changed = args;
    changed[12] = "2";
    let o = deepcl(&changed, d);
    assert!(stdout(&o).contains("4 cells, 0 already complete"), "{}", stdout(&o));
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = deepcl(&["gradcheck", "--scope", "losses", "--trials", "1", "--out", "g"], d);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("max_rel_error"));
    assert!(json(&d.join("g/gradcheck.json"))["checks"].as_array().unwrap().len() >= 7);

    let o = deepcl(&["gradcheck", "--scope", "losses", "--trials", "1", "--inject-fault"], d);
    assert_eq!(code(&o), 3);
    assert!(stdout(&o).contains("FAIL"));
    assert_eq!(code(&deepcl(&["gradcheck", "--trials", "0"], d)), 1);
}
