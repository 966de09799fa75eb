use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
schema_version = 1
seed = 11
stages = ["simulate", "train", "decompose", "report"]

[simulate]
n_high = 120
n_low = 120
neutral_replicates = 0

[train]
n_folds = 3

[train.high]
n_trees = 30

[train.low]
n_trees = 30

[decompose]
group_by = ["prompt_name", "grade"]
"#;

fn stylegap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stylegap"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn run_config(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--config", config.to_str().unwrap(), "--out-dir", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    stylegap(&args)
}

fn first_field(line: &str) -> String {
    match line.strip_prefix('"') {
        Some(rest) => rest[..rest.find('"').unwrap()].to_string(),
        None => line.split(',').next().unwrap().to_string(),
    }
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn pipeline_all_row_satisfies_identity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", SMALL);
    let out = dir.path().join("out");
    let o = run_config(&cfg, &out, &[]);
    assert_ok(&o);

    let dec = json(&out.join("decompose/results.json"));
    let m = &dec["main"];
    let f = |k: &str| m[k].as_f64().unwrap();
    assert!((f("content") + f("style") + f("tilt") - f("total_gap")).abs() < 1e-9);
    let s = &m["shares"];
    let share_sum: f64 = ["content", "style", "tilt"].iter().map(|k| s[k].as_f64().unwrap()).sum();
    assert!((share_sum - 1.0).abs() < 1e-9);

    let main_csv = std::fs::read_to_string(out.join("report/table_main.csv")).unwrap();
    let mut lines = main_csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "label,Total Gap,Content,Style,Other,Share Content,Share Style,Share Other,note"
    );
    let all = lines.next().unwrap();
    assert!(all.starts_with("All,"));
    // without a bootstrap the cells are bare 3-decimal levels
    let cells: Vec<f64> = all.split(',').skip(1).take(4).map(|c| c.parse().unwrap()).collect();
    assert!((cells[1] + cells[2] + cells[3] - cells[0]).abs() <= 0.0015 + 1e-12);

    let robustness = std::fs::read_to_string(out.join("report/table_robustness.csv")).unwrap();
    let labels: Vec<String> = robustness.lines().skip(1).map(first_field).collect();
    assert_eq!(
        labels,
        ["SAT (baseline)", "Score 2-5, |Δ|≤1", "Rewrites {1,2,5,6} only", "Drop k=1 rewrites", "Baseline GPT"]
    );
    for f in ["table_prompt.csv", "table_subgroup.csv", "hist_components.csv", "scatter_components.csv", "calibration.csv"] {
        assert!(out.join("report").join(f).exists(), "{f} missing");
    }
    assert!(!out.join("report/table_neutral.csv").exists());
    assert!(!out.join("error.json").exists());
}

#[test]
fn neutral_variant_without_neutral_rewrites_fails_with_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", SMALL);
    let out = dir.path().join("out");
    let c = cfg.to_str().unwrap();
    let o = out.to_str().unwrap();
    assert_ok(&stylegap(&["simulate", "--config", c, "--out-dir", o]));
    assert_ok(&stylegap(&["train", "--config", c, "--out-dir", o]));
    let r = stylegap(&["decompose", "--variant", "neutral", "--config", c, "--out-dir", o]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("neutral rewrites absent"));
    let err = json(&out.join("error.json"));
    assert_eq!(err["stage"], "decompose");
    assert_eq!(err["kind"], "neutral_absent");
    assert!(err["message"].as_str().unwrap().contains("neutral rewrites absent"));

    // a later successful stage clears the record
    assert_ok(&stylegap(&["decompose", "--config", c, "--out-dir", o]));
    assert!(!out.join("error.json").exists());
}

#[test]
fn verify_merges_neutral_rewrites() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let features = dir.path().join("neutral_features.csv");
    let config = format!("{SMALL}\n[paths]\nrewrite_features = \"neutral_features.csv\"\n");
    let cfg = write_config(dir.path(), "run.toml", &config);
    let c = cfg.to_str().unwrap();
    let o = out.to_str().unwrap();
    assert_ok(&stylegap(&["simulate", "--config", c, "--out-dir", o]));

    // neutral rewrites: one per essay, features copied from the original,
    // every fifth rejected
    let versions = std::fs::read_to_string(out.join("panel/versions.csv")).unwrap();
    let mut lines = versions.lines();
    let mut feat = String::from(lines.next().unwrap());
    feat.push('\n');
    let mut results = String::new();
    let mut n = 0;
    for line in lines {
        let mut cols: Vec<&str> = line.split(',').collect();
        if cols[2] != "ORIGINAL" {
            continue;
        }
        let id = cols[0].to_string();
        cols[1] = "1";
        cols[2] = "NEUTRAL";
        feat.push_str(&cols.join(","));
        feat.push('\n');
        let verdict = if n % 5 == 4 { "REJECTED" } else { "ACCEPTED" };
        results.push_str(&format!(
            "{{\"essay_id\":\"{id}\",\"rewrite_kind\":\"NEUTRAL\",\"slot\":1,\"output_text\":\"text\",\"attempt\":1,\"verdict\":\"{verdict}\",\"endpoint\":null,\"error\":null}}\n"
        ));
        n += 1;
    }
    std::fs::write(&features, feat).unwrap();
    std::fs::create_dir_all(out.join("rewrite")).unwrap();
    std::fs::write(out.join("rewrite/results.jsonl"), results).unwrap();

    assert_ok(&stylegap(&["verify", "--config", c, "--out-dir", o]));
    let acc = json(&out.join("verify/acceptance.json"));
    let neutral = acc["acceptance"]
        .as_array()
        .unwrap()
        .iter()
        .find(|a| a["kind"] == "NEUTRAL")
        .expect("neutral acceptance row");
    assert_eq!(neutral["total"].as_u64().unwrap(), n);
    assert_eq!(neutral["accepted"].as_u64().unwrap(), n - n / 5);

    assert_ok(&stylegap(&["train", "--config", c, "--out-dir", o]));
    assert_ok(&stylegap(&["decompose", "--variant", "neutral", "--config", c, "--out-dir", o]));
    let dec = json(&out.join("decompose/results.json"));
    assert_eq!(dec["main"]["variant"], "NEUTRAL_BASELINE");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "schema_version = 1\n[train]\nn_fold = 3\n");
    let out = dir.path().join("out");
    let o = run_config(&cfg, &out, &[]);
    assert!(!o.status.success());
    let err = json(&out.join("error.json"));
    assert_eq!(err["stage"], "config");
    assert_eq!(err["kind"], "config");
    assert!(err["message"].as_str().unwrap().contains("n_fold"));
}

#[test]
fn invalid_stage_order_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "order.toml", "schema_version = 1\nstages = [\"train\", \"simulate\"]\n");
    let out = dir.path().join("out");
    let o = run_config(&cfg, &out, &[]);
    assert!(!o.status.success());
    assert!(json(&out.join("error.json"))["message"].as_str().unwrap().contains("cannot follow"));

    let o = stylegap(&["report", "--out-dir", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("a panel"));
}

#[test]
fn manifest_replay_reproduces_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace(
        "stages = [\"simulate\", \"train\", \"decompose\", \"report\"]",
        "stages = [\"simulate\", \"train\", \"decompose\", \"diagnose\", \"bootstrap\", \"report\"]",
    ) + "\n[diagnose.did_options]\nb = 20\n\n[bootstrap]\nb = 10\n";
    let cfg = write_config(dir.path(), "run.toml", &text);
    let first = dir.path().join("first");
    assert_ok(&run_config(&cfg, &first, &["--workers", "2"]));
    let second = dir.path().join("second");
    let replay = first.join("config.toml");
    assert_ok(&run_config(&replay, &second, &[]));

    let a = json(&first.join("manifest.json"));
    let b = json(&second.join("manifest.json"));
    assert!(a["artifacts"].as_array().unwrap().len() > 20);
    assert_eq!(a["artifacts"], b["artifacts"]);
    assert_eq!(a["seeds"], b["seeds"]);
    assert_eq!(a["config_sha256"], b["config_sha256"]);

    // recorded hashes match the files on disk
    for art in a["artifacts"].as_array().unwrap() {
        let bytes = std::fs::read(first.join(art["path"].as_str().unwrap())).unwrap();
        assert_eq!(bytes.len() as u64, art["bytes"].as_u64().unwrap());
    }
    let seed_changed = dir.path().join("third");
    assert_ok(&run_config(&cfg, &seed_changed, &["--seed", "12"]));
    assert_ne!(json(&seed_changed.join("manifest.json"))["artifacts"], a["artifacts"]);
}

#[test]
fn ingest_reads_an_emitted_panel() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", SMALL);
    let sim = dir.path().join("sim");
    assert_ok(&stylegap(&["simulate", "--config", cfg.to_str().unwrap(), "--out-dir", sim.to_str().unwrap()]));
    let ingest = "schema_version = 1\nstages = [\"ingest\", \"train\", \"decompose\"]\n[paths]\nessays = \"sim/panel/essays.csv\"\nversions = \"sim/panel/versions.csv\"\nmanifest = \"sim/panel/manifest.json\"\n[train]\nn_folds = 3\n[train.high]\nn_trees = 20\n[train.low]\nn_trees = 20\n";
    let icfg = write_config(dir.path(), "ingest.toml", ingest);
    let out = dir.path().join("ingested");
    assert_ok(&run_config(&icfg, &out, &[]));
    assert_eq!(
        std::fs::read(sim.join("panel/versions.csv")).unwrap(),
        std::fs::read(out.join("panel/versions.csv")).unwrap()
    );
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["inputs"].as_array().unwrap().len(), 3);
}
