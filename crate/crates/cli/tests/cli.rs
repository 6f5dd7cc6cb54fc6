use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use msvlad_core::synthetic::{SceneDataset, SceneSpec, SplitPlan};
use serde_json::Value;
use tempfile::TempDir;

const TRAIN_TOML: &str = r#"
margin = 0.1
lr_initial = 0.01
lr_final = 0.001
lr_drop_epoch = 50
iterations = 16
mining_interval = 8
resolution = 224
checkpoint_every = 8

[mining]
mining_batch_size = 32
num_classes = 8
mini_batch_size = 4
"#;

fn msvlad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msvlad"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "status {:?}, stderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
    manifest: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let spec = SceneSpec {
            classes: 8,
            images_per_class: 8,
            height: 6,
            width: 6,
            channels: 4,
            seed: 3,
            ..SceneSpec::default()
        };
        let ds = SceneDataset::generate(
            &spec,
            SplitPlan {
                query: 1,
                gallery: 3,
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = ds.write(dir.path(), 224).unwrap();
        Self { dir, manifest }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Same images listed at 224, 336 and 504.
    fn multires_manifest(&self) -> PathBuf {
        let text = std::fs::read_to_string(&self.manifest).unwrap();
        let mut lines = Vec::new();
        for line in text.lines() {
            lines.push(line.to_string());
            if line.contains("\"resolution\":224") {
                for r in ["336", "504"] {
                    lines.push(line.replace("\"resolution\":224", &format!("\"resolution\":{r}")));
                }
            }
        }
        let path = self.path("multires.jsonl");
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        path
    }

    fn kmeans(&self, out: &Path, seed: &str) -> Output {
        msvlad(&[
            "kmeans-init",
            "--manifest",
            p(&self.manifest),
            "--checkpoint",
            p(out),
            "--clusters",
            "4",
            "--seed",
            seed,
        ])
    }

    fn init(&self) -> PathBuf {
        let out = self.path("init");
        stdout_json(&self.kmeans(&out, "1"));
        out
    }

    fn config(&self) -> PathBuf {
        let path = self.path("train.toml");
        std::fs::write(&path, TRAIN_TOML).unwrap();
        path
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), to.join(e.file_name())).unwrap();
    }
}

#[test]
fn kmeans_init_writes_deterministic_checkpoint() {
    let fx = Fixture::new();
    let (a, b) = (fx.path("a"), fx.path("b"));
    let report = stdout_json(&fx.kmeans(&a, "5"));
    assert_eq!(report["clusters"], 4);
    assert_eq!(report["dim"], 4);
    stdout_json(&fx.kmeans(&b, "5"));
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    assert!(a.join("meta.json").is_file());
}

#[test]
fn kmeans_init_rejects_more_clusters_than_samples() {
    let fx = Fixture::new();
    let out = msvlad(&[
        "kmeans-init",
        "--manifest",
        p(&fx.manifest),
        "--checkpoint",
        p(&fx.path("k")),
        "--clusters",
        "50",
        "--sample-size",
        "10",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn train_runs_two_mining_rounds_in_sixteen_iterations() {
    let fx = Fixture::new();
    let init = fx.init();
    let out_dir = fx.path("trained");
    let log = fx.path("log.csv");
    let summary = stdout_json(&msvlad(&[
        "train",
        "--manifest",
        p(&fx.manifest),
        "--checkpoint",
        p(&init),
        "--config",
        p(&fx.config()),
        "--out",
        p(&out_dir),
        "--log",
        p(&log),
    ]));
    assert_eq!(summary["iteration"], 16);
    assert_eq!(summary["mining_rounds"], 2);
    let csv = std::fs::read_to_string(&log).unwrap();
    assert_eq!(csv.lines().count(), 17);
    assert!(csv.starts_with("iteration,loss,lr,triplet_pool_size"));
    assert!(out_dir.join("meta.json").is_file());
}

#[test]
fn train_streams_csv_to_stdout() {
    let fx = Fixture::new();
    let init = fx.init();
    let out = msvlad(&[
        "train",
        "--manifest",
        p(&fx.manifest),
        "--checkpoint",
        p(&init),
        "--config",
        p(&fx.config()),
        "--out",
        p(&fx.path("t")),
        "--iterations",
        "3",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("3,"));
}

#[test]
fn train_without_checkpoint_is_a_usage_error() {
    let fx = Fixture::new();
    let out = msvlad(&[
        "train",
        "--manifest",
        p(&fx.manifest),
        "--checkpoint",
        p(&fx.path("missing")),
        "--config",
        p(&fx.config()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let fx = Fixture::new();
    let init = fx.init();
    let config = fx.config();
    let train = |checkpoint: &Path, out: &Path, iterations: &str| {
        stdout_json(&msvlad(&[
            "train",
            "--manifest",
            p(&fx.manifest),
            "--checkpoint",
            p(checkpoint),
            "--config",
            p(&config),
            "--out",
            p(out),
            "--iterations",
            iterations,
            "--log",
            p(&out.with_extension("csv")),
        ]))
    };
    let full = fx.path("full");
    train(&init, &full, "16");

    let half = fx.path("half");
    train(&init, &half, "5");
    let resumed = fx.path("resumed");
    copy_dir(&half, &resumed);
    let summary = train(&resumed, &resumed, "16");
    assert_eq!(summary["start_iteration"], 5);
    assert_eq!(dir_bytes(&full), dir_bytes(&resumed));

    let full_log = std::fs::read_to_string(full.with_extension("csv")).unwrap();
    let tail: Vec<&str> = full_log.lines().skip(6).collect();
    let resumed_log = std::fs::read_to_string(resumed.with_extension("csv")).unwrap();
    assert_eq!(resumed_log.lines().skip(1).collect::<Vec<_>>(), tail);
}

#[test]
fn train_rejects_malformed_config() {
    let fx = Fixture::new();
    let init = fx.init();
    let bad = fx.path("bad.toml");
    std::fs::write(&bad, "iterations = \"many\"\n").unwrap();
    let out = msvlad(&[
        "train",
        "--manifest",
        p(&fx.manifest),
        "--checkpoint",
        p(&init),
        "--config",
        p(&bad),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_reports_map() {
    let fx = Fixture::new();
    let init = fx.init();
    let report = stdout_json(&msvlad(&[
        "evaluate",
        "--manifest",
        p(&fx.manifest),
        "--checkpoint",
        p(&init),
    ]));
    let map = report["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    assert_eq!(report["queries"], 8);
    assert_eq!(report["power_norm"], true);
}

#[test]
fn evaluate_with_gallery_as_queries_is_perfect() {
    let fx = Fixture::new();
    let init = fx.init();
    // Each query becomes a copy of one of its positives.
    let text = std::fs::read_to_string(&fx.manifest).unwrap();
    let mut lines = Vec::new();
    for line in text.lines() {
        let mut v: Value = serde_json::from_str(line).unwrap();
        if v["split"] == "query" {
            let class = v["id"].as_str().unwrap()[..4].to_string();
            v["path"] = Value::from(format!("maps/{class}_01.msvf"));
        }
        if v.get("query").is_some() {
            let class = v["query"].as_str().unwrap()[..4].to_string();
            v["positives"] = Value::from(vec![format!("{class}_01")]);
        }
        lines.push(v.to_string());
    }
    let manifest = fx.path("perfect.jsonl");
    std::fs::write(&manifest, lines.join("\n") + "\n").unwrap();
    let report = stdout_json(&msvlad(&[
        "evaluate",
        "--manifest",
        p(&manifest),
        "--checkpoint",
        p(&init),
    ]));
    assert_eq!(report["map"].as_f64(), Some(1.0));
}

#[test]
fn evaluate_rejects_unknown_pooling() {
    let fx = Fixture::new();
    let init = fx.init();
    let out = msvlad(&[
        "evaluate",
        "--manifest",
        p(&fx.manifest),
        "--checkpoint",
        p(&init),
        "--pooling",
        "4x4",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_combines_resolutions() {
    let fx = Fixture::new();
    let init = fx.init();
    let manifest = fx.multires_manifest();
    let index = fx.path("index");
    let report = stdout_json(&msvlad(&[
        "evaluate",
        "--manifest",
        p(&manifest),
        "--checkpoint",
        p(&init),
        "--resolutions",
        "224,336,504",
        "--pooling",
        "3x3",
        "--power-norm",
        "false",
        "--save-index",
        p(&index),
    ]));
    assert_eq!(report["resolutions"], serde_json::json!([224, 336, 504]));
    assert_eq!(report["power_norm"], false);
    assert!(index.is_dir());
}

#[test]
fn query_ranks_gallery_member_first() {
    let fx = Fixture::new();
    let init = fx.init();
    let member = fx.path("maps/c002_03.msvf");
    let result = stdout_json(&msvlad(&[
        "query",
        "--manifest",
        p(&fx.manifest),
        "--checkpoint",
        p(&init),
        "--top-k",
        "3",
        p(&member),
    ]));
    let ranking = result["results"][0]["ranking"].as_array().unwrap();
    assert_eq!(ranking.len(), 3);
    assert_eq!(ranking[0]["id"], "c002_03");
}

#[test]
fn query_top_k_beyond_gallery_returns_full_ranking() {
    let fx = Fixture::new();
    let init = fx.init();
    let index = fx.path("index");
    stdout_json(&msvlad(&[
        "evaluate",
        "--manifest",
        p(&fx.manifest),
        "--checkpoint",
        p(&init),
        "--save-index",
        p(&index),
    ]));
    let result = stdout_json(&msvlad(&[
        "query",
        "--index",
        p(&index),
        "--checkpoint",
        p(&init),
        "--top-k",
        "1000",
        p(&fx.path("maps/c000_00.msvf")),
        p(&fx.path("maps/c005_07.msvf")),
    ]));
    let results = result["results"].as_array().unwrap();
    assert_eq!(results.len(), 2);
    for r in results {
        assert_eq!(r["ranking"].as_array().unwrap().len(), 24);
    }
}

#[test]
fn query_rejects_malformed_feature_file() {
    let fx = Fixture::new();
    let init = fx.init();
    let bad = fx.path("bad.msvf");
    std::fs::write(&bad, b"NOPE1234").unwrap();
    let out = msvlad(&[
        "query",
        "--manifest",
        p(&fx.manifest),
        "--checkpoint",
        p(&init),
        p(&bad),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_is_deterministic() {
    let a = msvlad(&["gradcheck", "--seed", "9"]);
    let report = stdout_json(&a);
    assert!(report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["passed"] == true));
    assert!(String::from_utf8_lossy(&a.stderr).contains("netvlad"));
    let b = msvlad(&["gradcheck", "--seed", "9"]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn gradcheck_catches_injected_bug() {
    let out = msvlad(&["gradcheck", "--inject-bug", "1.01"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(msvlad(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        msvlad(&["gradcheck", "--threads", "0"]).status.code(),
        Some(2)
    );
}
