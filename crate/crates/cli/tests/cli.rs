use std::path::PathBuf;
use std::process::{Command, Output};

use stabfi::fi::{baseline_measure, unit_base_values, BaselineKind, StabilityMap};
use stabfi::zoo::{scores_and_probs, Dataset, PerturbationTarget, TargetKind, ZooModel};
use stabfi_cli::RunManifest;
use tempfile::TempDir;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_stab"))
            .args(args)
            .env("STAB_THREADS", "1")
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn code(&self, args: &[&str]) -> i32 {
        self.run(args).status.code().unwrap()
    }

    fn read(&self, name: &str) -> String {
        std::fs::read_to_string(self.path(name)).unwrap()
    }

    fn blobs_and_mlp(&self) {
        self.ok(&[
            "gen-data",
            "--kind",
            "blobs",
            "--n",
            "80",
            "--seed",
            "1",
            "--out",
            &self.p("d.jsonl"),
        ]);
        self.ok(&[
            "train",
            "--arch",
            "mlp",
            "--data",
            &self.p("d.jsonl"),
            "--epochs",
            "2",
            "--hidden",
            "8",
            "--out",
            &self.p("m.json"),
        ]);
    }

    fn shapes_and_vision(&self) {
        self.ok(&[
            "gen-data",
            "--kind",
            "shapes",
            "--n",
            "40",
            "--classes",
            "4",
            "--out",
            &self.p("img.jsonl"),
        ]);
        self.ok(&[
            "train",
            "--arch",
            "vision",
            "--data",
            &self.p("img.jsonl"),
            "--epochs",
            "2",
            "--hidden",
            "8",
            "--out",
            &self.p("v.json"),
        ]);
    }

    fn grammar_and_transformer(&self) {
        self.ok(&[
            "gen-data",
            "--kind",
            "grammar",
            "--n",
            "40",
            "--len",
            "8",
            "--out",
            &self.p("g.jsonl"),
        ]);
        self.ok(&[
            "train",
            "--arch",
            "transformer",
            "--data",
            &self.p("g.jsonl"),
            "--epochs",
            "1",
            "--d-model",
            "8",
            "--layers",
            "1",
            "--context",
            "16",
            "--out",
            &self.p("t.json"),
        ]);
    }
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    csv::Reader::from_reader(text.as_bytes())
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

#[test]
fn training_is_byte_identical_across_runs() {
    let s = Sandbox::new();
    s.blobs_and_mlp();
    let first = s.read("m.json");
    s.ok(&[
        "train",
        "--arch",
        "mlp",
        "--data",
        &s.p("d.jsonl"),
        "--epochs",
        "2",
        "--hidden",
        "8",
        "--out",
        &s.p("m2.json"),
    ]);
    assert_eq!(first, s.read("m2.json"));
}

#[test]
fn exit_codes() {
    let s = Sandbox::new();
    s.blobs_and_mlp();
    assert_eq!(
        s.code(&["train", "--arch", "resnet", "--out", &s.p("x.json")]),
        2
    );
    assert_eq!(
        s.code(&[
            "train",
            "--arch",
            "mlp",
            "--data",
            &s.p("nope.jsonl"),
            "--out",
            &s.p("x.json")
        ]),
        2
    );
    assert_eq!(
        s.code(&[
            "fi-map",
            "--model",
            &s.p("m.json"),
            "--data",
            &s.p("d.jsonl")
        ]),
        2
    );
    assert_eq!(
        s.code(&[
            "train",
            "--arch",
            "mlp",
            "--data",
            &s.p("d.jsonl"),
            "--lr",
            "1e307",
            "--epochs",
            "1",
            "--out",
            &s.p("x.json"),
        ]),
        3
    );
    assert!(!s.path("x.json").exists());
    assert_eq!(s.code(&["--help"]), 0);
}

#[test]
fn pixel_map_and_pgm() {
    let s = Sandbox::new();
    s.shapes_and_vision();
    s.ok(&[
        "fi-map",
        "--model",
        &s.p("v.json"),
        "--data",
        &s.p("img.jsonl"),
        "--target",
        "pixels",
        "--emit-pgm",
        &s.p("fi.pgm"),
        "--out",
        &s.p("fi.json"),
    ]);
    let map = StabilityMap::from_json(&s.read("fi.json")).unwrap();
    assert_eq!(map.len(), 256);
    let pgm = s.read("fi.pgm");
    let tokens: Vec<&str> = pgm.split_whitespace().collect();
    assert_eq!(&tokens[..4], &["P2", "16", "16", "255"]);
    let pixels: Vec<u32> = tokens[4..].iter().map(|t| t.parse().unwrap()).collect();
    assert_eq!(pixels.len(), 256);
    assert_eq!(pixels.iter().max(), Some(&255));
    assert_eq!(
        s.code(&[
            "fi-map",
            "--model",
            &s.p("v.json"),
            "--data",
            &s.p("img.jsonl"),
            "--target",
            "params",
            "--emit-pgm",
            &s.p("p.pgm"),
            "--out",
            &s.p("p.json"),
        ]),
        2
    );
}

#[test]
fn snip_pixel_map_matches_library() {
    let s = Sandbox::new();
    s.shapes_and_vision();
    s.ok(&[
        "fi-map",
        "--model",
        &s.p("v.json"),
        "--data",
        &s.p("img.jsonl"),
        "--target",
        "pixels",
        "--measure",
        "snip",
        "--index",
        "3",
        "--out",
        &s.p("snip.json"),
    ]);
    let map = StabilityMap::from_json(&s.read("snip.json")).unwrap();
    let model = ZooModel::load(&s.path("v.json")).unwrap();
    let x = &Dataset::load(&s.path("img.jsonl")).unwrap().examples[3].sample;
    let base = unit_base_values(&model, x, TargetKind::Pixel).unwrap();
    for (unit, value) in map.ids().into_iter().zip(map.values()).step_by(17) {
        let target = PerturbationTarget::pixel(unit);
        let (scores, probs) = scores_and_probs(&model, x, &target).unwrap();
        let want = baseline_measure(
            BaselineKind::Snip,
            &scores,
            probs.argmax(),
            Some(&base[3 * unit..3 * unit + 3]),
        )
        .unwrap();
        assert!(
            (value - want).abs() <= 1e-12 * want.abs().max(1.0),
            "{unit}: {value} vs {want}"
        );
    }
}

#[test]
fn pixel_attack_rows() {
    let s = Sandbox::new();
    s.shapes_and_vision();
    s.ok(&[
        "attack",
        "pixels",
        "--model",
        &s.p("v.json"),
        "--data",
        &s.p("img.jsonl"),
        "--k",
        "5",
        "--limit",
        "12",
        "--seeds",
        "2",
        "--ppm-dir",
        &s.p("ppm"),
        "--out",
        &s.p("a.csv"),
    ]);
    let rows = csv_rows(&s.read("a.csv"));
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["original", "fi", "jacobian", "saliency", "random"]);
    assert_eq!(rows[4][4], "0;1");
    assert!(s.path("ppm").join("original-0.ppm").exists());
    assert!(s.path("ppm").join("fi-2.ppm").exists());
}

#[test]
fn embedding_attack_rows() {
    let s = Sandbox::new();
    s.grammar_and_transformer();
    s.ok(&[
        "attack",
        "embed",
        "--model",
        &s.p("t.json"),
        "--data",
        &s.p("g.jsonl"),
        "--epsilons",
        "0.5,2",
        "--limit",
        "10",
        "--out",
        &s.p("e.csv"),
    ]);
    let rows = csv_rows(&s.read("e.csv"));
    let names: Vec<&str> = rows
        .iter()
        .map(|r| r[0].as_str())
        .filter(|n| !n.starts_with("warning"))
        .collect();
    assert!(
        names.contains(&"fi@eps=0.5") && names.contains(&"random@eps=2"),
        "{names:?}"
    );
}

#[test]
fn sparsify_sweep() {
    let s = Sandbox::new();
    s.blobs_and_mlp();
    s.ok(&[
        "sparsify",
        "--model",
        &s.p("m.json"),
        "--data",
        &s.p("d.jsonl"),
        "--fractions",
        "0.01,0.1",
        "--calibration",
        "16",
        "--seeds",
        "2",
        "--out",
        &s.p("s.csv"),
    ]);
    let rows = csv_rows(&s.read("s.csv"));
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(
        names,
        [
            "original",
            "fi-high@0.01",
            "random@0.01",
            "fi-high@0.1",
            "random@0.1"
        ]
    );
    assert!(rows.iter().all(|r| r[1] == "accuracy"));
}

#[test]
fn sequence_fi_report() {
    let s = Sandbox::new();
    s.grammar_and_transformer();
    s.ok(&[
        "seq-fi",
        "--model",
        &s.p("t.json"),
        "--data",
        &s.p("g.jsonl"),
        "--prompts",
        "3",
        "--samples",
        "4",
        "--out",
        &s.p("q.json"),
    ]);
    let doc: serde_json::Value = serde_json::from_str(&s.read("q.json")).unwrap();
    assert_eq!(doc["prompts"].as_array().unwrap().len(), 3);
    assert!(doc["mean"].as_f64().unwrap() >= 0.0);
    assert_eq!(
        s.code(&[
            "seq-fi",
            "--model",
            &s.p("t.json"),
            "--data",
            &s.p("g.jsonl"),
            "--horizon",
            "3",
            "--gamma",
            "0.9",
            "--out",
            &s.p("q2.json"),
        ]),
        2
    );
}

fn two_task(s: &Sandbox) {
    for (kind, name, seed) in [
        ("task-a", "ta", "1"),
        ("task-b", "tb", "2"),
        ("task-a", "va", "3"),
        ("task-b", "vb", "4"),
    ] {
        s.ok(&[
            "gen-data",
            "--kind",
            kind,
            "--n",
            "60",
            "--seed",
            seed,
            "--out",
            &s.p(&format!("{name}.jsonl")),
        ]);
    }
    s.ok(&[
        "train",
        "--arch",
        "mlp",
        "--data",
        &s.p("ta.jsonl"),
        "--epochs",
        "1",
        "--hidden",
        "8",
        "--out",
        &s.p("base.json"),
    ]);
    for (data, out) in [("ta", "a"), ("tb", "b")] {
        s.ok(&[
            "train",
            "--arch",
            "mlp",
            "--init",
            &s.p("base.json"),
            "--data",
            &s.p(&format!("{data}.jsonl")),
            "--epochs",
            "2",
            "--out",
            &s.p(&format!("{out}.json")),
        ]);
    }
}

#[test]
fn merge_grids_and_report() {
    let s = Sandbox::new();
    two_task(&s);
    let common = |method: &str, stage: &str, out: &str| {
        s.ok(&[
            "merge",
            "--method",
            method,
            "--protect-stage",
            stage,
            "--a",
            &s.p("a.json"),
            "--b",
            &s.p("b.json"),
            "--base",
            &s.p("base.json"),
            "--calib-a",
            &s.p("ta.jsonl"),
            "--calib-b",
            &s.p("tb.jsonl"),
            "--calibration",
            "8",
            "--val-a",
            &s.p("va.jsonl"),
            "--val-b",
            &s.p("vb.jsonl"),
            "--grid-from-paper",
            "--out",
            &s.p(out),
        ])
    };
    common("ties", "I", "ties.csv");
    assert_eq!(csv_rows(&s.read("ties.csv")).len(), 60);
    common("average", "none", "avg.csv");
    assert_eq!(csv_rows(&s.read("avg.csv")).len(), 10);
    s.ok(&[
        "report",
        "--inputs",
        &s.p("ties.csv"),
        &s.p("avg.csv"),
        "--out",
        &s.p("r.csv"),
    ]);
    let report = csv_rows(&s.read("r.csv"));
    assert_eq!(report.len(), 20);
    s.ok(&[
        "merge",
        "--method",
        "task",
        "--gamma",
        "0.5",
        "--a",
        &s.p("a.json"),
        "--b",
        &s.p("b.json"),
        "--base",
        &s.p("base.json"),
        "--out",
        &s.p("merged.json"),
    ]);
    ZooModel::load(&s.path("merged.json")).unwrap();
}

#[test]
fn replay_reproduces_and_detects_tampering() {
    let s = Sandbox::new();
    s.blobs_and_mlp();
    let manifest_path = s.path("m.json.manifest.json");
    let manifest = RunManifest::load(&manifest_path).unwrap();
    assert_eq!(manifest.command, "train");
    assert_eq!(manifest.outputs.len(), 1);
    let before = s.read("m.json");
    let out = s.ok(&["replay", "--manifest", &s.p("m.json.manifest.json")]);
    assert!(out.contains("byte-identical"));
    assert_eq!(before, s.read("m.json"));
    std::fs::write(s.path("d.jsonl"), s.read("d.jsonl").replace("0.", "1.")).unwrap();
    assert_eq!(
        s.code(&["replay", "--manifest", &s.p("m.json.manifest.json")]),
        2
    );
}

#[test]
fn flags_override_config_file() {
    let s = Sandbox::new();
    std::fs::write(
        s.path("cfg.json"),
        r#"{"kind": "blobs", "n": 30, "seed": 4}"#,
    )
    .unwrap();
    s.ok(&[
        "gen-data",
        "--config",
        &s.p("cfg.json"),
        "--out",
        &s.p("c.jsonl"),
    ]);
    assert_eq!(Dataset::load(&s.path("c.jsonl")).unwrap().len(), 30);
    s.ok(&[
        "gen-data",
        "--config",
        &s.p("cfg.json"),
        "--n",
        "12",
        "--out",
        &s.p("f.jsonl"),
    ]);
    assert_eq!(Dataset::load(&s.path("f.jsonl")).unwrap().len(), 12);
    let manifest = RunManifest::load(&s.path("f.jsonl.manifest.json")).unwrap();
    assert_eq!(manifest.params["gen-data"]["n"], 12);
}
