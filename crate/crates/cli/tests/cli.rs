use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use masseg_core::benchmark::{generate_domain, save_dataset, ShiftSpec, Split};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_masseg");

fn quick_config(dir: &Path, name: &str, strategy: &str, extra: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(
        &path,
        format!(
            "num_seeds = 1\n{extra}\n[strategy]\nkind = \"{strategy}\"\n\n[schedule]\nepochs_per_domain = 1\ninitial_lr = 0.02\nbatch_size = 1\n"
        ),
    )
    .unwrap();
    path
}

fn masseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env_remove("MASSEG_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_ok(args: &[&str], cwd: &Path) -> String {
    let o = masseg(args, cwd);
    assert!(o.status.success(), "masseg {args:?} failed: {}", stderr(&o));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn run_writes_the_documented_artifacts() {
    let tmp = TempDir::new().unwrap();
    let cfg = quick_config(tmp.path(), "ft.toml", "fine_tune", "");
    let stdout = run_ok(
        &[
            "run",
            cfg.to_str().unwrap(),
            "--output-dir",
            "out",
            "--quiet",
        ],
        tmp.path(),
    );
    assert_eq!(stdout.trim(), "out/manifest.json");

    let out = tmp.path().join("out");
    let csv = fs::read_to_string(out.join("seed_0/R.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "domain_1,domain_2,domain_3,domain_4");
    assert_eq!(lines.len(), 5);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 4));

    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("seed_0/metrics.json")).unwrap())
            .unwrap();
    for key in ["TL", "REM", "BWT_plus", "CL_DSC", "FWT"] {
        assert!(metrics[key].is_f64(), "missing {key}");
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["strategy"], "fine_tune");
    assert_eq!(manifest["config"]["strategy"]["kind"], "fine_tune");
    assert_eq!(manifest["config"]["schedule"]["epochs_per_domain"], 1);
    let run = &manifest["runs"][0];
    for key in ["r_csv", "metrics", "train_log"] {
        assert!(out.join(run[key].as_str().unwrap()).is_file(), "{key}");
    }
    let ckpts = run["checkpoints"].as_array().unwrap();
    assert_eq!(ckpts.len(), 4);
    assert!(ckpts
        .iter()
        .all(|c| out.join(c.as_str().unwrap()).is_file()));

    let aggregate: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(aggregate["metrics"]["REM"]["mean"], metrics["REM"]);
    assert_eq!(aggregate["metrics"]["REM"]["std"], 0.0);

    let log = fs::read_to_string(out.join("seed_0/train.log")).unwrap();
    assert_eq!(log.lines().next(), Some("domain epoch step loss base_lr"));
    assert_eq!(log.lines().filter(|l| l.starts_with("4 ")).count(), 2);
}

#[test]
fn metrics_command_reproduces_the_run_output() {
    let tmp = TempDir::new().unwrap();
    let cfg = quick_config(tmp.path(), "mas.toml", "mas", "");
    run_ok(
        &[
            "run",
            cfg.to_str().unwrap(),
            "--output-dir",
            "out",
            "--quiet",
        ],
        tmp.path(),
    );
    let printed = run_ok(&["metrics", "out/seed_0/R.csv"], tmp.path());
    assert_eq!(
        printed,
        fs::read_to_string(tmp.path().join("out/seed_0/metrics.json")).unwrap()
    );
}

#[test]
fn metrics_command_on_hand_matrix() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("r.csv"),
        "domain_1,domain_2\n0.9,0.5\n0.9,0.8\n",
    )
    .unwrap();
    let m: serde_json::Value =
        serde_json::from_str(&run_ok(&["metrics", "r.csv"], tmp.path())).unwrap();
    assert_eq!(m["REM"], 1.0);
    assert_eq!(m["FWT"], 0.5);
    assert_eq!(m["BWT_plus"], 0.0);
}

#[test]
fn metrics_command_errors() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("short.csv"),
        "domain_1,domain_2\n0.9,0.5\n0.9\n",
    )
    .unwrap();
    let o = masseg(&["metrics", "short.csv"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("row 3"), "{}", stderr(&o));
    assert_eq!(stderr(&o).lines().count(), 1);

    fs::write(tmp.path().join("one.csv"), "domain_1\n0.5\n").unwrap();
    let o = masseg(&["metrics", "one.csv"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("D must be ≥ 2"));
}

#[test]
fn invalid_config_exits_2_naming_the_field() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("bad.toml"),
        "[strategy]\nkind = \"mas\"\nlambda = -1.0\n",
    )
    .unwrap();
    let o = masseg(&["run", "bad.toml", "--output-dir", "out"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[invalid]:"), "{err}");
    assert!(err.contains("strategy.lambda"), "{err}");
    assert!(!tmp.path().join("out").exists());

    fs::write(tmp.path().join("typo.toml"), "[schedule]\nbatchsize = 2\n").unwrap();
    let o = masseg(&["run", "typo.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("batchsize"));
    assert_eq!(stderr(&o).lines().count(), 1);

    let o = masseg(&["run", "typo.toml", "--strategy", "nonsense"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr(&o).lines().count(), 1);
}

#[test]
fn rerun_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = quick_config(tmp.path(), "fix.toml", "mas_fix", "");
    for out in ["a", "b"] {
        run_ok(
            &["run", cfg.to_str().unwrap(), "--output-dir", out, "--quiet"],
            tmp.path(),
        );
    }
    for file in [
        "seed_0/R.csv",
        "seed_0/metrics.json",
        "seed_0/train.log",
        "aggregate.json",
    ] {
        let a = fs::read(tmp.path().join("a").join(file)).unwrap();
        let b = fs::read(tmp.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn overrides_and_default_output_root() {
    let tmp = TempDir::new().unwrap();
    let cfg = quick_config(tmp.path(), "c.toml", "fine_tune", "");
    let o = Command::new(BIN)
        .args([
            "run",
            cfg.to_str().unwrap(),
            "--strategy",
            "l2",
            "--seed",
            "9",
            "--quiet",
        ])
        .current_dir(tmp.path())
        .env("MASSEG_OUTPUT_ROOT", tmp.path().join("root"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let out = tmp.path().join("root/l2");
    assert!(out.join("seed_9/R.csv").is_file());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["strategy"], "l2");
    assert_eq!(manifest["config"]["schedule"]["seed"], 9);
    assert!(o.stderr.is_empty());
}

#[test]
fn compare_contract() {
    let tmp = TempDir::new().unwrap();
    let ft = quick_config(tmp.path(), "ft.toml", "fine_tune", "");
    let lr = quick_config(tmp.path(), "lr.toml", "mas_lr", "");
    let other = quick_config(
        tmp.path(),
        "other.toml",
        "fine_tune",
        "[benchmark]\nsuite_seed = 5\n",
    );
    for (cfg, out) in [(&ft, "ft"), (&lr, "lr"), (&other, "other")] {
        run_ok(
            &["run", cfg.to_str().unwrap(), "--output-dir", out, "--quiet"],
            tmp.path(),
        );
    }

    let o = masseg(&["compare", "ft/manifest.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("need ≥ 2 runs"));

    let o = masseg(
        &["compare", "ft/manifest.json", "other/manifest.json"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("benchmark mismatch"), "{}", stderr(&o));

    let csv = run_ok(
        &["compare", "ft/manifest.json", "ft/manifest.json", "--csv"],
        tmp.path(),
    );
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1], rows[2]);

    let text = run_ok(
        &[
            "compare",
            "ft/manifest.json",
            "lr/manifest.json",
            "--output-dir",
            "cmp",
        ],
        tmp.path(),
    );
    assert!(text.starts_with("strategy"));
    assert!(text.contains("fine_tune") && text.contains("mas_lr"));
    for col in ["CL_DSC", "REM", "BWT+", "TL", "FWT"] {
        assert!(text.lines().next().unwrap().contains(col));
    }
    assert!(text.contains('*'));
    assert_eq!(
        fs::read_to_string(tmp.path().join("cmp/comparison.txt")).unwrap(),
        text
    );
    let csv = fs::read_to_string(tmp.path().join("cmp/comparison.csv")).unwrap();
    assert!(csv.starts_with("strategy,seeds,CL_DSC_mean"));
}

#[test]
fn explicit_dataset_files() {
    let tmp = TempDir::new().unwrap();
    let mut domains = String::new();
    for d in 0..2u64 {
        let mut shift = ShiftSpec::identity();
        shift.intensity_scale = 1.0 + 0.3 * d as f64;
        for (split, n) in [(Split::Train, 3), (Split::Eval, 2)] {
            let ds = generate_domain(n, (16, 16), 3, &shift, split, 40 + d * 2 + n as u64).unwrap();
            save_dataset(&ds, &tmp.path().join(format!("d{d}_{n}.bin"))).unwrap();
        }
        domains.push_str(&format!(
            "[[benchmark.domains]]\ntrain = \"d{d}_3.bin\"\neval = \"d{d}_2.bin\"\n"
        ));
    }
    let cfg = tmp.path().join("files.toml");
    fs::write(
        &cfg,
        format!("num_seeds = 2\n{domains}\n[network]\nnum_classes = 3\n\n[schedule]\nepochs_per_domain = 1\ninitial_lr = 0.02\n"),
    )
    .unwrap();
    run_ok(
        &["run", "files.toml", "--output-dir", "out", "--quiet"],
        tmp.path(),
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("out/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["benchmark"]["source"], "files");
    assert_eq!(manifest["benchmark"]["domains"], 2);
    assert_eq!(manifest["runs"].as_array().unwrap().len(), 2);
    let csv = fs::read_to_string(tmp.path().join("out/seed_1/R.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    fs::write(&cfg, format!("{domains}\n[network]\nnum_classes = 4\n")).unwrap();
    let o = masseg(&["run", "files.toml", "--output-dir", "bad"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("network.num_classes"), "{}", stderr(&o));
}

#[test]
fn shipped_configs_parse_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = masseg_cli::ExperimentConfig::load(&path).unwrap();
        cfg.validate().unwrap();
        seen += 1;
    }
    assert!(seen >= 5);
}
