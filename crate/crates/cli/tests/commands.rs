mod common;

use std::path::Path;

use common::*;
use editdiff_cli::commands::{DetectionRecord, VerdictRecord};
use editdiff_cli::io::{write_jsonl, Provenance};
use editdiff_core::datagen::{AnnotatedImage, AnnotatedObject, Stage1Pair};
use editdiff_core::parser::parse_differences;
use editdiff_core::{CoherenceVerdict, NormalizedBBox};
use editdiff_gateway::mock::{MockScript, MockServer};
use serde_json::Value;

fn lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn run_ok(args: &[&str]) -> String {
    let o = editdiff(args);
    assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    String::from_utf8(o.stdout).unwrap()
}

/// Config that fails fast against dead endpoints.
fn fast_config(dir: &Path) -> String {
    let p = dir.join("fast.toml");
    std::fs::write(&p, "retry_delays_ms = []\ntimeout_secs = 5\n").unwrap();
    p.display().to_string()
}

#[test]
fn mine_pairs_matches_exhaustive_reference() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = random_corpus(11, 30);
    let ann = dir.path().join("ann.jsonl");
    write_lines(&ann, &corpus);
    let out = dir.path().join("out");
    let args = [
        "--annotations",
        ann.to_str().unwrap(),
        "--output-dir",
        out.to_str().unwrap(),
        "mine-pairs",
    ];
    run_ok(&args);
    let first = std::fs::read(out.join("pairs.jsonl")).unwrap();

    let recs = lines(&out.join("pairs.jsonl"));
    assert!(recs[0].get("provenance").is_some());
    let got: Vec<Stage1Pair> = recs[1..]
        .iter()
        .map(|v| serde_json::from_value(v.clone()).unwrap())
        .collect();
    let expected = oracle::mine(&corpus, 0.6, 15, 0.5, 16.0);
    assert!(!expected.is_empty());
    assert_eq!(got.len(), expected.len());
    for (g, e) in got.iter().zip(&expected) {
        assert_eq!((&g.image_a, &g.image_b), (&e.image_a, &e.image_b));
        assert!((g.cosine_similarity - e.cosine_similarity).abs() < 1e-12);
        assert_eq!(g.labels, e.labels, "{} / {}", g.image_a, g.image_b);
    }

    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("mine-pairs.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["pairs"], expected.len());
    let adds: usize = expected
        .iter()
        .flat_map(|p| &p.labels)
        .filter(|l| l.command.as_str() == "ADD")
        .count();
    assert_eq!(summary["labels"]["add"], adds);

    run_ok(&args);
    assert_eq!(std::fs::read(out.join("pairs.jsonl")).unwrap(), first);
}

#[test]
fn mine_pairs_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("ann.jsonl");
    std::fs::write(&ann, "").unwrap();
    let out = dir.path().join("out");
    run_ok(&[
        "--annotations",
        ann.to_str().unwrap(),
        "--output-dir",
        out.to_str().unwrap(),
        "mine-pairs",
    ]);
    assert_eq!(lines(&out.join("pairs.jsonl")).len(), 1);
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("mine-pairs.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["pairs"], 0);
    assert_eq!(summary["images"], 0);
}

#[test]
fn mine_pairs_names_corrupt_line() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("ann.jsonl");
    let mut text = String::new();
    for (k, img) in random_corpus(3, 9).iter().enumerate() {
        if k == 6 {
            text.push_str("{\"image_id\": \"broken\", \"width\": \n");
        } else {
            text.push_str(&serde_json::to_string(img).unwrap());
            text.push('\n');
        }
    }
    std::fs::write(&ann, text).unwrap();
    let o = editdiff(&[
        "--annotations",
        ann.to_str().unwrap(),
        "--output-dir",
        dir.path().to_str().unwrap(),
        "mine-pairs",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(":7:"), "{}", stderr(&o));
}

fn stage2_corpus(n: usize, with_masks: bool) -> Vec<AnnotatedImage> {
    (0..n)
        .map(|k| AnnotatedImage {
            image_id: format!("s{k:04}"),
            width: 400,
            height: 400,
            objects: (0..4)
                .map(|q| {
                    let (x, y) = ((q % 2) as f64 * 0.5, (q / 2) as f64 * 0.5);
                    AnnotatedObject {
                        class_name: ["dog", "cat", "car", "tree"][q].into(),
                        bbox: NormalizedBBox::new(x + 0.05, y + 0.05, x + 0.4, y + 0.4).unwrap(),
                        mask_ref: with_masks.then(|| format!("m{k}_{q}.png")),
                    }
                })
                .collect(),
            embedding: None,
        })
        .collect()
}

#[test]
fn build_stage2_is_deterministic_and_balanced() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("ann.jsonl");
    write_lines(&ann, &stage2_corpus(600, false));
    let out = dir.path().join("out");
    let args = [
        "--annotations",
        ann.to_str().unwrap(),
        "--output-dir",
        out.to_str().unwrap(),
        "--seed",
        "9",
        "build-stage2",
    ];
    run_ok(&args);
    let first = std::fs::read(out.join("stage2.jsonl")).unwrap();
    run_ok(&args);
    assert_eq!(std::fs::read(out.join("stage2.jsonl")).unwrap(), first);

    let s: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("build-stage2.summary.json")).unwrap()).unwrap();
    for k in ["add", "remove", "edit", "unchanged"] {
        let (req, got) = (s["requested"][k].as_f64().unwrap(), s["realized"][k].as_f64().unwrap());
        assert!((req - got).abs() <= 0.02, "{k}: requested {req}, realized {got}");
    }
    assert_eq!(s["violations"], 0);
    assert_eq!(s["seed"], 9);

    let other = dir.path().join("other");
    run_ok(&[
        "--annotations",
        ann.to_str().unwrap(),
        "--output-dir",
        other.to_str().unwrap(),
        "--seed",
        "10",
        "build-stage2",
    ]);
    assert_ne!(std::fs::read(other.join("stage2.jsonl")).unwrap(), first);
}

#[test]
fn build_stage2_warns_on_missing_masks() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("ann.jsonl");
    write_lines(&ann, &stage2_corpus(3, true));
    let out = dir.path().join("out");
    let o = editdiff(&[
        "--annotations",
        ann.to_str().unwrap(),
        "--masks-dir",
        dir.path().join("masks").to_str().unwrap(),
        "--output-dir",
        out.to_str().unwrap(),
        "build-stage2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("using box overlap rule"), "{}", stderr(&o));
    let s: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("build-stage2.summary.json")).unwrap()).unwrap();
    assert_eq!(s["warnings"], 12);
}

#[test]
fn detect_against_dead_endpoint_records_failures() {
    let dir = tempfile::tempdir().unwrap();
    let datasets = write_dataset(&dir.path().join("data"));
    let out = dir.path().join("out");
    let o = editdiff(&[
        "--config",
        &fast_config(dir.path()),
        "--dataset",
        datasets["alpha"].to_str().unwrap(),
        "--output-dir",
        out.to_str().unwrap(),
        "--base-url",
        "http://127.0.0.1:9/v1",
        "detect",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let recs = lines(&out.join("detections.jsonl"));
    assert_eq!(recs.len(), CASES + 1);
    assert!(recs[1..]
        .iter()
        .all(|r| r["error"].is_string() && r.get("report").is_none()));
    let s: Value = serde_json::from_str(&std::fs::read_to_string(out.join("detect.summary.json")).unwrap()).unwrap();
    assert_eq!(s["failed"], CASES);
}

#[test]
fn coherence_with_no_differences_and_unparseable_replies() {
    let mut script = MockScript::default();
    // the first case gets one difference with a reply that has no decision
    script.detections.insert(
        edited_image(0, 0).fingerprint(),
        "ADD: cat, [0.1, 0.2, 0.5, 0.7]".into(),
    );
    script
        .coherence
        .push((": cat,".into(), "I am not sure what to say.".into()));
    let server = MockServer::start(script).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let datasets = write_dataset(&dir.path().join("data"));
    let out = dir.path().join("out");
    let common = [
        "--dataset",
        datasets["alpha"].to_str().unwrap(),
        "--output-dir",
        out.to_str().unwrap(),
        "--base-url",
        &server.base_url(),
    ];
    run_ok(&[&common[..], &["detect"]].concat());
    run_ok(&[&common[..], &["coherence"]].concat());
    let recs = lines(&out.join("verdicts.jsonl"));
    let flagged = &recs[1]["verdicts"][0];
    assert_eq!(recs[1]["case_id"], "case00");
    assert_eq!(flagged["flagged_unparseable"], true);
    assert_eq!(flagged["decision"], false);
    for r in &recs[2..] {
        assert_eq!(r["verdicts"], Value::Array(vec![]));
    }
}

#[test]
fn eval_detect_perfect_predictions_and_missing_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let datasets = write_dataset(&dir.path().join("data"));
    let dataset = &datasets["alpha"];
    let hash = editdiff_cli::io::sha256_hex(&std::fs::read(dataset).unwrap());
    let out = dir.path().join("out");
    let records: Vec<DetectionRecord> = cases()
        .iter()
        .map(|c| {
            let text = c
                .ground_truth
                .iter()
                .flatten()
                .map(|g| editdiff_core::parser::serialize_difference(&g.as_difference()))
                .collect::<Vec<_>>()
                .join("\n");
            DetectionRecord {
                case_id: c.case_id.clone(),
                report: Some(parse_differences(&text)),
                error: None,
            }
        })
        .collect();
    write_jsonl(
        &out.join("detections.jsonl"),
        &Provenance::new("detect", "x", Some(&hash)),
        &records,
    )
    .unwrap();
    run_ok(&[
        "--dataset",
        dataset.to_str().unwrap(),
        "--output-dir",
        out.to_str().unwrap(),
        "eval-detect",
    ]);
    let s: Value = serde_json::from_str(&std::fs::read_to_string(out.join("eval_detect.json")).unwrap()).unwrap();
    for mode in ["class_agnostic", "class_aware"] {
        for k in ["ap", "ap50", "ap75"] {
            assert_eq!(s[mode][k], 1.0, "{mode}.{k}");
        }
    }

    // the same cases without ground truth
    let bare = dir.path().join("bare.jsonl");
    let mut stripped = cases();
    stripped.iter_mut().for_each(|c| c.ground_truth = None);
    write_lines(&bare, &stripped);
    let hash = editdiff_cli::io::sha256_hex(&std::fs::read(&bare).unwrap());
    write_jsonl(
        &out.join("detections.jsonl"),
        &Provenance::new("detect", "x", Some(&hash)),
        &records,
    )
    .unwrap();
    let o = editdiff(&[
        "--dataset",
        bare.to_str().unwrap(),
        "--output-dir",
        out.to_str().unwrap(),
        "eval-detect",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ground truth"), "{}", stderr(&o));
}

fn write_run(dir: &Path, cases: &[(&str, &str, Vec<bool>)]) {
    let prov = Provenance::new("detect", "cfg", Some("dataset"));
    let dets: Vec<DetectionRecord> = cases
        .iter()
        .map(|(id, text, _)| DetectionRecord {
            case_id: id.to_string(),
            report: Some(parse_differences(text)),
            error: None,
        })
        .collect();
    let verdicts: Vec<VerdictRecord> = cases
        .iter()
        .map(|(id, _, v)| VerdictRecord {
            case_id: id.to_string(),
            verdicts: Some(
                v.iter()
                    .map(|&decision| CoherenceVerdict {
                        decision,
                        rationale: String::new(),
                        flagged_unparseable: false,
                    })
                    .collect(),
            ),
            error: None,
        })
        .collect();
    write_jsonl(&dir.join("detections.jsonl"), &prov, &dets).unwrap();
    write_jsonl(&dir.join("verdicts.jsonl"), &prov, &verdicts).unwrap();
}

#[test]
fn rank_four_case_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let d = dir.path().join(name);
        write_run(
            &d,
            &[
                ("c1", "ADD: cat, [0.0, 0.0, 0.5, 0.5]", vec![true]),
                (
                    "c2",
                    "ADD: hat, [0.0, 0.0, 0.2, 0.1]\nREMOVE: cup, [0.1, 0.0, 0.3, 0.1]",
                    vec![false, false],
                ),
                ("c3", "", vec![]),
                (
                    "c4",
                    "EDIT: car, [0.5, 0.5, 0.9, 0.9]\nADD: sun, [0.0, 0.8, 0.2, 1.0]",
                    vec![true, false],
                ),
            ],
        );
        format!("{name}={}", d.display())
    };
    let (a, b) = (run("one"), run("two"));
    let out = dir.path().join("ranked");
    let stdout = run_ok(&["--output-dir", out.to_str().unwrap(), "rank", "--run", &a, "--run", &b]);
    assert!(stdout.contains("one"));
    let s: Value = serde_json::from_str(&std::fs::read_to_string(out.join("ranking.json")).unwrap()).unwrap();
    let rows = s["ranking"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    // c1 and c4 have a coherent difference; c3 has none; unwanted area is
    // the union 0.3 x 0.1 in c2 plus 0.2 x 0.2 in c4, averaged over 4 cases
    let row = &rows[0];
    assert_eq!(row["correct_edits_pct"], 50.0);
    assert_eq!(row["no_visual_change_pct"], 25.0);
    let unwanted = 100.0 * (0.3 * 0.1 + 0.2 * 0.2) / 4.0;
    assert!((row["unwanted_edit_area_pct"].as_f64().unwrap() - unwanted).abs() < 1e-9);
    let strip = |r: &Value| {
        let mut r = r.clone();
        r.as_object_mut().unwrap().remove("model");
        r
    };
    assert_eq!(strip(&rows[0]), strip(&rows[1]));
    let csv = std::fs::read_to_string(out.join("ranking.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn rank_rejects_incomplete_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("run");
    write_run(&d, &[("c1", "ADD: cat, [0.0, 0.0, 0.5, 0.5]", vec![true])]);
    let mut v = lines(&d.join("verdicts.jsonl"));
    v[1]["verdicts"] = Value::Null;
    v[1]["error"] = "timeout".into();
    std::fs::write(
        d.join("verdicts.jsonl"),
        v.iter().map(|x| x.to_string() + "\n").collect::<String>(),
    )
    .unwrap();
    let o = editdiff(&[
        "--output-dir",
        dir.path().to_str().unwrap(),
        "rank",
        "--run",
        &format!("m={}", d.display()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("incomplete run"), "{}", stderr(&o));
}

#[test]
fn report_over_empty_directory() {
    let dir = tempfile::tempdir().unwrap();
    let o = editdiff(&["report", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no runs found"), "{}", stderr(&o));
}

#[test]
fn bad_flags_and_config_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(editdiff(&["detect", "--no-such-flag"]).status.code(), Some(2));
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "concurency = 3\n").unwrap();
    let o = editdiff(&["--config", cfg.to_str().unwrap(), "detect"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("concurency"), "{}", stderr(&o));
    assert_eq!(editdiff(&["--help"]).status.code(), Some(0));
}
