use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tadnet::io::{encode_features, read_header, FEATURES_FILE};

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn smoke_config() -> PathBuf {
    repo().join("configs/smoke.toml")
}

fn smoke_data(split: &str) -> PathBuf {
    repo().join("data/smoke").join(split)
}

fn tadnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tadnet"))
        .args(args)
        .env_remove("TADNET_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn train_smoke(out: &Path) -> Output {
    tadnet(&[
        "train",
        "--config",
        s(&smoke_config()),
        "--data",
        s(&smoke_data("train")),
        "--out",
        s(out),
    ])
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn smoke_training_writes_checkpoint_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_smoke(dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("checkpoint.dssd").is_file());
    let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let header = read_header(&metrics).expect("metrics header");
    assert_eq!(header.seed, 0);
    assert!(header.config.contains("epochs = 1"));
    assert!(metrics.lines().count() > 1);
}

#[test]
fn misspelled_key_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(smoke_config()).unwrap().replace("learning_rate", "learnin_rate");
    write(&cfg, &text);
    let o = tadnet(&["train", "--config", s(&cfg), "--data", s(&smoke_data("train")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learnin_rate"), "{}", stderr(&o));
}

#[test]
fn same_seed_gives_identical_metrics_logs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(train_smoke(a.path()).status.code(), Some(0));
    assert_eq!(train_smoke(b.path()).status.code(), Some(0));
    for f in ["metrics.jsonl", "checkpoint.dssd"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn out_dir_can_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_tadnet"))
        .args(["train", "--config", s(&smoke_config()), "--data", s(&smoke_data("train"))])
        .env("TADNET_OUT_DIR", dir.path())
        .env("TADNET_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("checkpoint.dssd").is_file());
}

#[test]
fn infer_on_zero_windows_writes_only_a_header() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(train_smoke(dir.path()).status.code(), Some(0));
    let feats = dir.path().join(FEATURES_FILE);
    std::fs::write(&feats, encode_features(&[], 4, 32).unwrap()).unwrap();
    let out = dir.path().join("det.jsonl");
    let o = tadnet(&[
        "infer",
        "--checkpoint",
        s(&dir.path().join("checkpoint.dssd")),
        "--features",
        s(&feats),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1);
    let header = read_header(&text).unwrap();
    assert!(header.config.contains("nms_threshold = 0.2"));
}

#[test]
fn version_mismatch_exits_4_with_both_versions() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(train_smoke(dir.path()).status.code(), Some(0));
    let ckpt = dir.path().join("checkpoint.dssd");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
    std::fs::write(&ckpt, bytes).unwrap();
    let o = tadnet(&[
        "infer",
        "--checkpoint",
        s(&ckpt),
        "--features",
        s(&smoke_data("eval").join(FEATURES_FILE)),
        "--out",
        s(&dir.path().join("det.jsonl")),
    ]);
    assert_eq!(o.status.code(), Some(4));
    let err = stderr(&o);
    assert!(err.contains("version 7") && err.contains("version 1"), "{err}");
}

#[test]
fn synth_train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let o = tadnet(&["synth", "--config", s(&smoke_config()), "--out", s(&data)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for split in ["train", "eval"] {
        for f in ["features.tadf", "annotations.jsonl", "classes.txt"] {
            assert_eq!(
                std::fs::read(data.join(split).join(f)).unwrap(),
                std::fs::read(smoke_data(split).join(f)).unwrap(),
                "bundled smoke data regenerates from its config: {split}/{f}"
            );
        }
    }
    let o = tadnet(&["train", "--config", s(&smoke_config()), "--data", s(&data.join("train")), "--out", s(&run)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let det = run.join("det.jsonl");
    let o = tadnet(&[
        "infer",
        "--checkpoint",
        s(&run.join("checkpoint.dssd")),
        "--features",
        s(&data.join("eval/features.tadf")),
        "--out",
        s(&det),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let json = run.join("eval.json");
    let o = tadnet(&[
        "eval",
        "--detections",
        s(&det),
        "--annotations",
        s(&data.join("eval/annotations.jsonl")),
        "--json",
        s(&json),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(v["mAP"].as_array().unwrap().len(), 5);
}

fn eval_files(dir: &Path, detections: &[&str], annotations: &[&str]) -> (PathBuf, PathBuf) {
    write(&dir.join("classes.txt"), "jump\nrun\n");
    let d = dir.join("det.jsonl");
    let a = dir.join("gt.jsonl");
    write(&d, &(detections.join("\n") + "\n"));
    write(&a, &(annotations.join("\n") + "\n"));
    (d, a)
}

fn eval(d: &Path, a: &Path) -> Output {
    tadnet(&["eval", "--detections", s(d), "--annotations", s(a)])
}

const GTS: [&str; 2] = [
    r#"{"video_id":"v","t_start":0.0,"t_end":10.0,"class":"jump"}"#,
    r#"{"video_id":"v","t_start":20.0,"t_end":30.0,"class":"jump"}"#,
];

#[test]
fn hand_built_three_detections_give_five_sixths() {
    let dir = tempfile::tempdir().unwrap();
    let dets = [
        r#"{"video_id":"v","t_start":0.0,"t_end":10.0,"class":"jump","score":0.9}"#,
        r#"{"video_id":"v","t_start":50.0,"t_end":60.0,"class":"jump","score":0.8}"#,
        r#"{"video_id":"v","t_start":20.0,"t_end":30.0,"class":"jump","score":0.7}"#,
    ];
    let (d, a) = eval_files(dir.path(), &dets, &GTS);
    let o = eval(&d, &a);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let header: Vec<&str> = out.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(header, ["IoU", "0.3", "0.4", "0.5", "0.6", "0.7"]);
    let map: Vec<&str> = out.lines().nth(2).unwrap().split_whitespace().collect();
    assert_eq!(map, ["mAP", "0.8333", "0.8333", "0.8333", "0.8333", "0.8333"]);
}

#[test]
fn perfect_detections_score_one_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let dets: Vec<String> = GTS.iter().map(|g| g.replace("}", r#","score":1.0}"#)).collect();
    let dets: Vec<&str> = dets.iter().map(String::as_str).collect();
    let (d, a) = eval_files(dir.path(), &dets, &GTS);
    let o = eval(&d, &a);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let map: Vec<&str> = out.lines().nth(2).unwrap().split_whitespace().collect();
    assert_eq!(map, ["mAP", "1.0000", "1.0000", "1.0000", "1.0000", "1.0000"]);
}

#[test]
fn shuffled_detection_lines_give_an_identical_table() {
    let dir = tempfile::tempdir().unwrap();
    let base = smoke_data("eval");
    let run = dir.path().join("run");
    assert_eq!(train_smoke(&run).status.code(), Some(0));
    let det = dir.path().join("det.jsonl");
    let o = tadnet(&[
        "infer",
        "--checkpoint",
        s(&run.join("checkpoint.dssd")),
        "--features",
        s(&base.join(FEATURES_FILE)),
        "--out",
        s(&det),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(&det).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    assert!(lines.len() > 3, "need several detections to shuffle");
    lines.reverse();
    lines.rotate_left(2);
    let shuffled = dir.path().join("shuffled.jsonl");
    write(&shuffled, &(lines.join("\n") + "\n"));
    let ann = base.join("annotations.jsonl");
    let classes = base.join("classes.txt");
    let a = tadnet(&["eval", "--detections", s(&det), "--annotations", s(&ann), "--classes", s(&classes)]);
    let b = tadnet(&["eval", "--detections", s(&shuffled), "--annotations", s(&ann), "--classes", s(&classes)]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn malformed_detection_line_exits_2_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let dets = [
        r#"{"video_id":"v","t_start":0.0,"t_end":10.0,"class":"jump","score":0.9}"#,
        r#"{"video_id":"v","t_start":5.0,"t_end":"late","class":"jump","score":0.8}"#,
    ];
    let (d, a) = eval_files(dir.path(), &dets, &GTS);
    let o = eval(&d, &a);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_on_tiny_and_fails_when_corrupted() {
    let o = tadnet(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS"));
    let o = tadnet(&["gradcheck", "--corrupt-block", "cls.l1.c2_0.w"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("cls.l1.c2_0.w"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_at_rho_edges() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = std::fs::read_to_string(repo().join("configs/tiny.toml")).unwrap();
    for rho in ["0.0", "1.0"] {
        let cfg = dir.path().join(format!("rho{rho}.toml"));
        let text = tiny
            .lines()
            .map(|l| if l.starts_with("rho =") { format!("rho = {rho}") } else { l.to_string() })
            .collect::<Vec<_>>()
            .join("\n");
        write(&cfg, &text);
        let o = tadnet(&["gradcheck", "--config", s(&cfg)]);
        assert_eq!(o.status.code(), Some(0), "rho = {rho}\n{}", stdout(&o));
    }
}

#[test]
fn ablate_emits_five_rows_after_one_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("one_step.toml");
    let text = std::fs::read_to_string(smoke_config())
        .unwrap()
        .replace("batch_size = 2", "batch_size = 16");
    write(&cfg, &text);
    let o = tadnet(&["ablate", "--config", s(&cfg), "--data", s(&repo().join("data/smoke")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let modes: Vec<&str> = out.lines().skip(1).filter_map(|l| l.split_whitespace().next()).collect();
    assert_eq!(modes, ["main_only", "main+prop", "main+cls", "refinement", "full"]);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ablation.json")).unwrap()).unwrap();
    assert_eq!(json["ablation"]["rows"].as_array().unwrap().len(), 5);
    assert!(json["header"]["config"].as_str().unwrap().contains("batch_size = 16"));
}

#[test]
fn missing_checkpoint_is_a_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = tadnet(&[
        "infer",
        "--checkpoint",
        s(&dir.path().join("absent.dssd")),
        "--features",
        s(&smoke_data("eval").join(FEATURES_FILE)),
        "--out",
        s(&dir.path().join("det.jsonl")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}
