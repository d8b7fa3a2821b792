use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ggnet::config::RunConfig;
use ggnet::data::load_dataset;

const TINY: &str = r#"
seed = 4

[phantom]
height = 32
width = 32
axes_min = 4.0
axes_max = 8.0

[data]
count = 8
folds = 4

[encoder]
stage_channels = [2, 4, 4, 4]
aspp_dilations = [1, 2]
aspp_out_channels = 4

[model]
reduction = 2

[train]
epochs = 2
batch_size = 3
lr = 0.003
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn run(&self, config: &Path, out: &str, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_ggnet"))
            .arg("--config")
            .arg(config)
            .arg("--out")
            .arg(self.path(out))
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, config: &Path, out: &str, args: &[&str]) -> String {
        let o = self.run(config, out, args);
        assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn generate_zero_gives_empty_manifest() {
    let ws = Workspace::new();
    let cfg = ws.config("c.toml", TINY);
    ws.ok(&cfg, "out", &["generate", "--count", "0"]);
    let root = ws.path("out/data");
    assert_eq!(fs::read_to_string(root.join("manifest.txt")).unwrap(), "");
    assert_eq!(fs::read_dir(root.join("images")).map(|d| d.count()).unwrap_or(0), 0);
}

#[test]
fn generate_is_byte_identical_and_loads_back() {
    let ws = Workspace::new();
    let cfg = ws.config("c.toml", TINY);
    ws.ok(&cfg, "a", &["generate", "--count", "10"]);
    ws.ok(&cfg, "b", &["generate", "--count", "10"]);
    assert_eq!(tree(&ws.path("a/data")), tree(&ws.path("b/data")));
    assert_eq!(load_dataset(&ws.path("a/data")).unwrap().len(), 10);
}

#[test]
fn seed_flag_changes_the_data() {
    let ws = Workspace::new();
    let cfg = ws.config("c.toml", TINY);
    ws.ok(&cfg, "a", &["generate"]);
    ws.ok(&cfg, "b", &["--seed", "99", "generate"]);
    assert_ne!(tree(&ws.path("a/data")), tree(&ws.path("b/data")));
}

#[test]
fn resume_replays_uninterrupted_run() {
    let ws = Workspace::new();
    let two = ws.config("two.toml", TINY);
    let one = ws.config("one.toml", &TINY.replace("epochs = 2", "epochs = 1"));
    for out in ["full", "split"] {
        ws.ok(&two, out, &["generate"]);
    }
    ws.ok(&two, "full", &["train"]);
    ws.ok(&one, "split", &["train"]);
    ws.ok(&two, "split", &["train", "--resume"]);
    let dir = "baseline+ggb+bd";
    for f in ["checkpoint.ggnt", "train_log.csv"] {
        let a = fs::read(ws.path(&format!("full/{dir}/{f}"))).unwrap();
        let b = fs::read(ws.path(&format!("split/{dir}/{f}"))).unwrap();
        assert!(a == b, "{f} differs after resume");
    }
    let log = fs::read_to_string(ws.path(&format!("full/{dir}/train_log.csv"))).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn ablation_flags_select_variant_directories() {
    let ws = Workspace::new();
    let cfg = ws.config("c.toml", &TINY.replace("epochs = 2", "epochs = 1"));
    ws.ok(&cfg, "out", &["generate"]);
    ws.ok(&cfg, "out", &["train", "--no-ggb", "--no-bd"]);
    ws.ok(&cfg, "out", &["train", "--no-guidance"]);
    ws.ok(&cfg, "out", &["eval", "--no-ggb", "--no-bd", "--split", "all"]);
    assert!(ws.path("out/baseline/metrics_all.csv").exists());
    assert!(ws.path("out/baseline+ggb+unguided+bd/checkpoint.ggnt").exists());
    let csv = fs::read_to_string(ws.path("out/baseline/metrics_all.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "id,fold,dice,jaccard,accuracy,recall,precision,hd,abd");
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn eval_is_deterministic_and_infer_writes_mask() {
    let ws = Workspace::new();
    let cfg = ws.config("c.toml", TINY);
    ws.ok(&cfg, "out", &["generate"]);
    ws.ok(&cfg, "out", &["train"]);
    let csv = ws.path("out/baseline+ggb+bd/metrics_test.csv");
    ws.ok(&cfg, "out", &["eval"]);
    let first = fs::read(&csv).unwrap();
    ws.ok(&cfg, "out", &["eval"]);
    assert_eq!(first, fs::read(&csv).unwrap());
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("out/baseline+ggb+bd/metrics_test.json")).unwrap()).unwrap();
    assert_eq!(json["images"], 2);

    let input = ws.path("out/data/images/phantom_0003.png");
    ws.ok(&cfg, "out", &["infer", "--input", input.to_str().unwrap()]);
    let (h, w, bytes) = ggnet::data::load_gray_png(&ws.path("out/baseline+ggb+bd/infer/phantom_0003.png")).unwrap();
    assert_eq!((h, w), (32, 32));
    assert!(bytes.iter().all(|&b| b == 0 || b == 255));
}

#[test]
fn outputs_stay_under_out_dir() {
    let ws = Workspace::new();
    let cfg = ws.config("c.toml", &TINY.replace("epochs = 2", "epochs = 1"));
    ws.ok(&cfg, "out", &["generate"]);
    ws.ok(&cfg, "out", &["train"]);
    ws.ok(&cfg, "out", &["eval"]);
    let mut top: Vec<_> = fs::read_dir(ws.dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    top.sort();
    assert_eq!(top, ["c.toml", "out"]);
}

#[test]
fn exit_codes_distinguish_failures() {
    let ws = Workspace::new();
    let bad = ws.config("bad.toml", "[train]\nlearning_rate = 1.0\n");
    let o = ws.run(&bad, "out", &["generate"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    let invalid = ws.config("invalid.toml", "[data]\nfolds = 3\ntest_fold = 3\n");
    assert_eq!(code(&ws.run(&invalid, "out", &["train"])), 2);

    let cfg = ws.config("c.toml", TINY);
    assert_eq!(code(&ws.run(&cfg, "nodata", &["train"])), 3);
    ws.ok(&cfg, "out", &["generate"]);
    assert_eq!(code(&ws.run(&cfg, "out", &["eval"])), 3);

    let diverge = ws.config("diverge.toml", &TINY.replace("lr = 0.003", "lr = 1e6"));
    ws.ok(&diverge, "nan", &["generate"]);
    let o = ws.run(&diverge, "nan", &["train"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    let msg = String::from_utf8_lossy(&o.stderr);
    assert!(msg.contains("epoch") && msg.contains("step"), "{msg}");
}

#[test]
fn verify_passes_and_reports_margins() {
    let ws = Workspace::new();
    let cfg = ws.config("c.toml", "");
    let text = ws.ok(&cfg, "out", &["verify", "--json"]);
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    let checks = report["checks"].as_array().unwrap();
    assert!(checks.len() > 40);
    for c in checks {
        for key in ["name", "measured", "tolerance", "passed"] {
            assert!(c.get(key).is_some(), "{key} missing in {c}");
        }
        assert_eq!(c["passed"], true, "{c}");
    }
    let table = ws.ok(&cfg, "out", &["verify"]);
    assert!(table.lines().filter(|l| l.starts_with("PASS")).all(|l| l.contains("margin")));
}

#[test]
fn verify_catches_corrupted_softmax() {
    let ws = Workspace::new();
    let cfg = ws.config("c.toml", "");
    let o = ws.run(&cfg, "out", &["verify", "--inject-softmax-fault"]);
    assert_eq!(code(&o), 4);
    let text = String::from_utf8_lossy(&o.stdout);
    let failures: Vec<&str> = text.lines().filter(|l| l.starts_with("FAIL")).collect();
    assert!(failures.iter().any(|l| l.contains("softmax row sums")), "{text}");
}

#[test]
fn config_command_round_trips() {
    let ws = Workspace::new();
    let cfg = ws.config("c.toml", TINY);
    let printed = ws.ok(&cfg, "out", &["--seed", "77", "config"]);
    let parsed = RunConfig::from_toml(&printed).unwrap();
    assert_eq!(parsed.seed, 77);
    assert_eq!(parsed.phantom.seed, 77);
    assert_eq!(parsed.out_dir, ws.path("out"));
    assert_eq!(parsed.encoder.stage_channels, [2, 4, 4, 4]);
}
