use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use adapterseg::run::RunConfig;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_adapterseg"));
    c.env("ADAPTERSEG_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, edit: impl FnOnce(&mut serde_json::Value)) -> std::path::PathBuf {
    let mut v = serde_json::to_value(RunConfig::default()).unwrap();
    v["model"] = serde_json::to_value(adapterseg::model::ModelConfig::tiny()).unwrap();
    v["model"]["image_size"] = 32.into();
    v["model"]["patch_size"] = 8.into();
    v["adapter"]["d_prime"] = 2.into();
    v["data"] = serde_json::json!({"generate": {"seed": 0, "n": 20, "size": 32}});
    v["train"]["batch_size"] = 4.into();
    v["train"]["max_epochs"] = 2.into();
    v["out_dir"] = dir.join("run").to_str().unwrap().into();
    edit(&mut v);
    let path = dir.join("config.json");
    fs::write(&path, v.to_string()).unwrap();
    path
}

#[test]
fn count_params_prints_closed_form_totals() {
    let o = run(&["count-params", "--preset", "clip-b", "--adapter", "da", "--variant", "vlc"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("3,040,576"));

    let o = run(&["count-params", "--preset", "clip-b", "--adapter", "sa", "--variant", "vl"]);
    assert!(stdout(&o).contains("3,939,072") && stdout(&o).contains("4,464,384"), "{}", stdout(&o));

    let o = run(&["count-params", "--preset", "toy", "--adapter", "da", "--json"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["total"], v["live_census"]);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&run(&["count-params", "--preset", "nope", "--adapter", "da"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    let o = run(&["count-params", "--preset", "toy", "--adapter", "da", "--d-prime", "0"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("adapter.d_prime"));
}

#[test]
fn gen_data_writes_pairs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = |name: &str| dir.path().join(name);
    for name in ["a", "b"] {
        let o = run(&["gen-data", "--seed", "0", "--n", "100", "--size", "64", "--out", out(name).to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let pngs = |d: &Path| fs::read_dir(d).unwrap().count();
    assert_eq!(pngs(&out("a").join("images")), 100);
    assert_eq!(pngs(&out("a").join("masks")), 100);
    assert_eq!(fs::read_to_string(out("a").join("manifest.jsonl")).unwrap().lines().count(), 100);
    for sub in ["manifest.jsonl", "images/000042.png", "masks/000099.png"] {
        assert_eq!(fs::read(out("a").join(sub)).unwrap(), fs::read(out("b").join(sub)).unwrap(), "{sub}");
    }
}

#[test]
fn gen_data_rejects_bad_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gen-data", "--n", "2", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("data.n"));

    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = run(&["gen-data", "--n", "10", "--size", "32", "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn print_config_round_trips() {
    let o = run(&["print-config"]);
    assert_eq!(code(&o), 0);
    let cfg = RunConfig::from_json(&stdout(&o)).unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.train.lr, 1e-3);
    assert_eq!(cfg.train.max_epochs, 200);
}

#[test]
fn grad_check_passes_and_catches_faults() {
    let o = run(&["grad-check"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("all"));

    let o = run(&["grad-check", "--inject-fault", "softmax"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("softmax"), "{}", stderr(&o));
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |_| {});
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run_dir = dir.path().join("run");
    for f in ["checkpoint.ckpt", "epochs.jsonl", "timing.jsonl", "val_report.json", "config.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let resolved = RunConfig::load(&run_dir.join("config.json")).unwrap();
    assert_eq!(resolved.train.seed, 3);
    assert_eq!(fs::read_to_string(run_dir.join("epochs.jsonl")).unwrap().lines().count(), 2);

    let data = dir.path().join("data");
    assert_eq!(code(&run(&["gen-data", "--n", "20", "--size", "32", "--out", data.to_str().unwrap()])), 0);
    let report = dir.path().join("r.json");
    let o = run(&[
        "eval",
        "--checkpoint",
        run_dir.join("checkpoint.ckpt").to_str().unwrap(),
        "--manifest",
        data.join("manifest.jsonl").to_str().unwrap(),
        "--split",
        "test",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("threshold 0.5"));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(v["n_samples"], 3);

    // A manifest whose images do not match the checkpoint's input size.
    let big = dir.path().join("big");
    assert_eq!(code(&run(&["gen-data", "--n", "10", "--size", "64", "--out", big.to_str().unwrap()])), 0);
    let o = run(&[
        "eval",
        "--checkpoint",
        run_dir.join("checkpoint.ckpt").to_str().unwrap(),
        "--manifest",
        big.join("manifest.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model.image_size"), "{}", stderr(&o));
}

#[test]
fn train_config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |v| v["adapter"]["dense_max_layer"] = 99.into());
    let o = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("adapter.dense_max_layer"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), |v| v["train"]["batch_size"] = 0.into());
    let o = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.batch_size"), "{}", stderr(&o));

    let o = run(&["train", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn divergent_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |v| {
        v["train"]["lr"] = 1e300.into();
        v["train"]["weight_decay"] = 0.0.into();
    });
    let o = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));
}
