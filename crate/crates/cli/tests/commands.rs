use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use imd_cli::RunConfig;
use imd_core::{Image, MatchingConfig};
use imd_data::write_png;
use imd_model::{BackboneSpec, CipmSpec, ModelConfig, PromptMode};

fn imd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imd")).args(args).current_dir(cwd).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        backbone: BackboneSpec {
            latent_channels: 4,
            channels: [8, 16],
            out_channels: 16,
            prompt_dim: 8,
            time_embed_dim: 16,
            groups: 4,
            ..BackboneSpec::default()
        },
        cipm: CipmSpec { encoder_dim: 8, grid: 4, attn_dim: 8, mode: PromptMode::Cross },
        fine_channels: 8,
        seed: 3,
    };
    cfg.matching = MatchingConfig { tau: 0.05, ..MatchingConfig::default() };
    cfg.train.steps = 3;
    cfg.train.batch = 2;
    cfg.data.width = 32;
    cfg.data.height = 32;
    cfg
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(cfg: &RunConfig) -> Self {
        let dir = tempfile::tempdir().unwrap();
        cfg.save(&dir.path().join("imd.json")).unwrap();
        Self { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn run(&self, args: &[&str]) -> Output {
        imd(args, self.path())
    }

    fn trained(&self) -> PathBuf {
        let o = self.run(&["gen-data", "--kind", "warp", "--n", "6", "--n-test", "2", "--out", "warp", "--config", "imd.json"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let o = self.run(&["train", "--config", "imd.json", "--data", "warp", "--out", "run"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        self.path().join("run/checkpoint")
    }
}

#[test]
fn config_init_writes_every_field_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = imd(&["config", "init", "--out", "c.json"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("c.json")).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    let m = &value["matching"];
    assert_eq!(m["tau"], 0.2);
    assert_eq!(m["alpha"], 1.0);
    assert_eq!(m["beta"], 0.25);
    assert_eq!(m["timestep"], 0);
    assert_eq!(m["n_attn"], 2);
    assert_eq!(value["checkpoint"], serde_json::Value::Null);

    let shown = imd(&["config", "show", "--config", "c.json"], dir.path());
    assert_eq!(code(&shown), 0);
    assert_eq!(String::from_utf8(shown.stdout).unwrap(), text);
    assert_eq!(code(&imd(&["config", "init", "--out", "c.json"], dir.path())), 1);
}

#[test]
fn config_rejects_unknown_keys_and_inconsistent_tap() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = serde_json::to_value(RunConfig::default()).unwrap();
    v["matching"]["tua"] = 0.3.into();
    fs::write(dir.path().join("typo.json"), v.to_string()).unwrap();
    let o = imd(&["config", "show", "--config", "typo.json"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("tua"), "{}", stderr(&o));

    let mut cfg = RunConfig::default();
    cfg.matching.block_index = 0;
    assert!(cfg.validate().is_err());
}

#[test]
fn gen_data_splits_train_and_test() {
    let dir = tempfile::tempdir().unwrap();
    let o = imd(&["gen-data", "--kind", "multi-instance", "--n", "3", "--n-test", "2", "--seed", "4", "--out", "d"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let records = imd_cli::experiments::load_records(&dir.path().join("d")).unwrap();
    let splits: Vec<&str> = records.iter().map(|r| r.split.as_str()).collect();
    assert_eq!(splits, ["train", "train", "train", "test", "test"]);
    assert!(records.iter().all(|r| r.evaluation_masks().is_some()));
}

#[test]
fn match_contract() {
    let ws = Workspace::new(&tiny_config());
    let ckpt = ws.trained();
    let ckpt = ckpt.to_str().unwrap();
    let records = imd_cli::experiments::load_records(&ws.path().join("warp")).unwrap();
    write_png(&records[0].image_a, &ws.path().join("a.png")).unwrap();
    write_png(&records[0].image_b, &ws.path().join("b.png")).unwrap();

    let args = ["match", "--config", "imd.json", "--checkpoint", ckpt, "a.png", "b.png", "--out"];
    let o1 = ws.run(&[&args[..], &["m1.jsonl", "--overlay", "o.png"]].concat());
    assert_eq!(code(&o1), 0, "{}", stderr(&o1));
    let o2 = ws.run(&[&args[..], &["m2.jsonl"]].concat());
    assert_eq!(code(&o2), 0);
    let m1 = fs::read(ws.path().join("m1.jsonl")).unwrap();
    assert!(!m1.is_empty());
    assert_eq!(m1, fs::read(ws.path().join("m2.jsonl")).unwrap());
    for line in String::from_utf8(m1).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["level"], "fine");
        for k in ["xa", "ya", "xb", "yb", "conf"] {
            assert!(v[k].is_number());
        }
    }
    assert!(ws.path().join("o.png").exists());

    let flat = Image::filled("flat", 32, 32, [128, 128, 128]).unwrap();
    write_png(&flat, &ws.path().join("flat.png")).unwrap();
    let o = ws.run(&["match", "--config", "imd.json", "--checkpoint", ckpt, "flat.png", "flat.png"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(o.stdout.is_empty());
}

#[test]
fn checkpoint_of_another_architecture_is_exit_one_with_diff() {
    let ws = Workspace::new(&tiny_config());
    let ckpt = ws.trained();
    let mut other = tiny_config();
    other.model.fine_channels = 12;
    other.save(&ws.path().join("other.json")).unwrap();
    let records = imd_cli::experiments::load_records(&ws.path().join("warp")).unwrap();
    write_png(&records[0].image_a, &ws.path().join("a.png")).unwrap();
    let o = ws.run(&["match", "--config", "other.json", "--checkpoint", ckpt.to_str().unwrap(), "a.png", "a.png"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("checkpoint mismatch") && err.contains("fine_channels"), "{err}");
}

#[test]
fn evaluations_report_per_pair_and_aggregate() {
    let ws = Workspace::new(&tiny_config());
    let ckpt = ws.trained();
    let o = ws.run(&["eval-homography", "--config", "imd.json", "--checkpoint", ckpt.to_str().unwrap(), "--data", "warp", "--out", "h.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path().join("h.json")).unwrap()).unwrap();
    assert_eq!(v["per_pair"].as_array().unwrap().len(), 2);
    assert_eq!(v["aggregate"]["auc"].as_array().unwrap().len(), 3);

    let o = ws.run(&["eval-imim", "--config", "imd.json", "--checkpoint", ckpt.to_str().unwrap(), "--data", "warp"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("no instance-mask pairs"));
}

fn ablation_rows(ws: &Workspace, axes: &str, out: &str) -> serde_json::Value {
    let o = ws.run(&["ablate", "--config", "imd.json", "--axes", axes, "--train-data", "multi", "--out", out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    serde_json::from_str(&fs::read_to_string(ws.path().join(out).join("ablation.json")).unwrap()).unwrap()
}

#[test]
fn ablation_sweeps_the_cross_product() {
    let mut cfg = tiny_config();
    cfg.train.steps = 1;
    let ws = Workspace::new(&cfg);
    let o = ws.run(&["gen-data", "--kind", "multi-instance", "--n", "2", "--n-test", "1", "--out", "multi", "--config", "imd.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let modes = ablation_rows(&ws, "prompt-mode", "a");
    let rows = modes["rows"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["prompt_mode"].as_str().unwrap()).collect();
    assert_eq!(names, ["empty", "individual", "shared", "cross"]);
    assert_eq!(ablation_rows(&ws, "timestep", "b")["rows"].as_array().unwrap().len(), 2);
    let both = ablation_rows(&ws, "prompt-mode,timestep", "c");
    assert_eq!(both["rows"].as_array().unwrap().len(), 8);
    let md = fs::read_to_string(ws.path().join("c/ablation.md")).unwrap();
    assert_eq!(md.lines().count(), 2 + 8);

    let again = ablation_rows(&ws, "prompt-mode", "d");
    assert_eq!(fs::read(ws.path().join("a/ablation.json")).unwrap(), fs::read(ws.path().join("d/ablation.json")).unwrap());
    assert_eq!(again, modes);

    let o = ws.run(&["ablate", "--config", "imd.json", "--axes", "lr", "--train-data", "multi"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("unknown ablation axis"));
}
