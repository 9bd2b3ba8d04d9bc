//! Shared fixtures for the CLI integration tests: a 12-case synthetic
//! dataset edited by two models, a matching mock-server script, and a
//! helper that runs the real binary.
#![allow(dead_code)]

pub mod ap_oracle;
pub mod oracle;

/// Like `assert!`, but returns the message as an `Err`.
#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use editdiff_core::datagen::{AnnotatedImage, AnnotatedObject};
use editdiff_core::parser::serialize_difference;
use editdiff_core::raster::pixel_rect;
use editdiff_core::{
    Difference, EditCase, EditCommand, GroundTruthDifference, HumanRatings, Image, NormalizedBBox, Rgb,
};
use editdiff_gateway::mock::{CapturedRequest, MockScript, MockServer};
use editdiff_gateway::prompts::{COHERENCE_SYSTEM_PROMPT, DIFFERENCE_SYSTEM_PROMPT};
use editdiff_gateway::wire::decode_data_url;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIDE: u32 = 256;
pub const CASES: usize = 12;
pub const MODELS: [&str; 2] = ["alpha", "beta"];

const SUBJECTS: [&str; CASES] = [
    "cat", "lamp", "vase", "chair", "kite", "boat", "clock", "bench", "apple", "horse", "tree", "sign",
];

pub fn case_id(i: usize) -> String {
    format!("case{i:02}")
}

fn command_of(i: usize) -> EditCommand {
    [EditCommand::Add, EditCommand::Remove, EditCommand::Edit][i % 3]
}

fn bbox(c: [f64; 4]) -> NormalizedBBox {
    NormalizedBBox::from_array(c).unwrap()
}

pub fn ground_truth(i: usize) -> Vec<GroundTruthDifference> {
    let s = 0.04 * (i % 4) as f64;
    let mut gts = vec![GroundTruthDifference::new(
        command_of(i),
        SUBJECTS[i],
        bbox([0.1 + s, 0.2, 0.55 + s, 0.7]),
        Some(!i.is_multiple_of(5)),
    )
    .unwrap()];
    if i.is_multiple_of(4) {
        gts.push(
            GroundTruthDifference::new(EditCommand::Remove, "cup", bbox([0.7, 0.7, 0.95, 0.95]), Some(false)).unwrap(),
        );
    }
    gts
}

pub fn prompt(i: usize) -> String {
    let verb = match command_of(i) {
        EditCommand::Add => "add a",
        EditCommand::Remove => "remove the",
        EditCommand::Edit => "make red the",
    };
    format!("{verb} {}", SUBJECTS[i])
}

pub fn cases() -> Vec<EditCase> {
    (0..CASES)
        .map(|i| {
            let mut extra = serde_json::Map::new();
            extra.insert("group".into(), format!("g{}", i % 3).into());
            EditCase {
                case_id: case_id(i),
                original_image: format!("images/{}_original.png", case_id(i)),
                edited_image: format!("images/{}_edited.png", case_id(i)),
                prompt: prompt(i),
                width: SIDE,
                height: SIDE,
                ground_truth: Some(ground_truth(i)),
                human_ratings: Some(HumanRatings {
                    prompt_adherence: 1 + ((i * 7) % 5) as u8,
                    background_preservation: 1 + ((i * 3 + 1) % 5) as u8,
                }),
                extra,
            }
        })
        .collect()
}

pub fn original_image(i: usize) -> Image {
    let mut img = Image::filled(SIDE, SIDE, Rgb([40 + 15 * i as u8, 120, 220 - 12 * i as u8]));
    for x in 0..SIDE {
        img.put(x, (x * 3 + i as u32) % SIDE, Rgb([250, 250, 250]));
    }
    img
}

/// Paints every ground-truth box of case `i` with a model-specific colour.
pub fn edited_image(model: usize, i: usize) -> Image {
    let mut img = original_image(i);
    let color = [Rgb([230, 200, 30]), Rgb([20, 20, 20])][model];
    for g in ground_truth(i) {
        let [x0, y0, x1, y1] = g.bbox.to_array();
        for y in (y0 * SIDE as f64) as u32..(y1 * SIDE as f64) as u32 {
            for x in (x0 * SIDE as f64) as u32..(x1 * SIDE as f64) as u32 {
                img.put(x, y, color);
            }
        }
    }
    img
}

fn shifted(b: &NormalizedBBox, d: f64) -> NormalizedBBox {
    let [x0, y0, x1, y1] = b.to_array();
    bbox([x0 + d, y0, (x1 + d).min(1.0), y1])
}

/// Scripted detector output for one model and case.
pub fn detection_lines(model: usize, i: usize) -> Vec<Difference> {
    let gts = ground_truth(i);
    let mut out = Vec::new();
    if model == 0 {
        for g in &gts {
            out.push(Difference::new(g.command, g.subject.clone(), shifted(&g.bbox, 0.01), 1.0).unwrap());
        }
        if i == 7 {
            out.push(Difference::new(EditCommand::Add, "shadow", bbox([0.0, 0.0, 0.15, 0.1]), 1.0).unwrap());
        }
    } else if i != 5 {
        let g = &gts[0];
        let cmd = if i % 4 == 1 { EditCommand::Edit } else { g.command };
        out.push(Difference::new(cmd, g.subject.clone(), shifted(&g.bbox, 0.06), 1.0).unwrap());
    }
    out
}

fn verdict(yes: bool, why: &str) -> String {
    format!("Reasoning: {why}\nDecision: \"{}\"", if yes { "YES" } else { "NO" })
}

pub fn mock_script() -> MockScript {
    let mut script = MockScript::default();
    for (m, _) in MODELS.iter().enumerate() {
        for i in 0..CASES {
            let lines: Vec<String> = detection_lines(m, i).iter().map(serialize_difference).collect();
            let mut text = lines.join("\n");
            if m == 0 && i == 11 {
                text.push_str("\nADD: ghost, [0.1, 0.2]");
            }
            for (k, l) in lines.iter().enumerate() {
                if (i + k + m) % 3 == 1 {
                    script.line_probability.insert(l.clone(), 0.55 + 0.05 * (i % 4) as f64);
                }
            }
            script.detections.insert(edited_image(m, i).fingerprint(), text);
        }
    }
    script.coherence.push((
        ": shadow,".into(),
        verdict(false, "the prompt does not ask for a shadow."),
    ));
    script.coherence.push((
        ": cup,".into(),
        verdict(false, "the cup is not mentioned in the prompt."),
    ));
    for (i, s) in SUBJECTS.iter().enumerate() {
        let why = format!("the prompt asks to change the {s}.");
        script.coherence.push((format!(": {s},"), verdict(i % 5 != 0, &why)));
    }
    for i in 0..CASES {
        script
            .captions
            .insert(original_image(i).fingerprint(), format!("a small scene number {i}"));
    }
    for (i, s) in SUBJECTS.iter().enumerate() {
        let target = match command_of(i) {
            EditCommand::Add => format!("a scene with a {s}"),
            EditCommand::Remove => format!("an empty scene without {s}"),
            EditCommand::Edit => format!("a scene with a red {s}"),
        };
        script.compose.push((format!(" {s}"), target));
    }
    script
}

/// Writes the dataset for every model under `root/<model>/` and returns the
/// paths of the case files.
pub fn write_dataset(root: &Path) -> BTreeMap<&'static str, PathBuf> {
    let mut text = String::new();
    for c in cases() {
        text.push_str(&serde_json::to_string(&c).unwrap());
        text.push('\n');
    }
    let mut out = BTreeMap::new();
    for (m, name) in MODELS.iter().enumerate() {
        let dir = root.join(name);
        std::fs::create_dir_all(dir.join("images")).unwrap();
        for i in 0..CASES {
            original_image(i)
                .save(dir.join(format!("images/{}_original.png", case_id(i))))
                .unwrap();
            edited_image(m, i)
                .save(dir.join(format!("images/{}_edited.png", case_id(i))))
                .unwrap();
        }
        let path = dir.join("cases.jsonl");
        std::fs::write(&path, &text).unwrap();
        out.insert(*name, path);
    }
    out
}

/// Runs the `editdiff` binary with `EDITDIFF_*` variables cleared.
pub fn editdiff(args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_editdiff"));
    for (k, _) in std::env::vars() {
        if k.starts_with("EDITDIFF_") {
            cmd.env_remove(k);
        }
    }
    cmd.args(args).output().expect("binary runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Every file under `dir`, relative path to bytes.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Runs the whole evaluation pipeline for both models. Returns the report
/// directory.
pub fn run_pipeline(root: &Path, base_url: &str) -> PathBuf {
    let datasets = write_dataset(&root.join("data"));
    let cache = root.join("cache");
    let out = |m: &str| root.join("out").join(m);
    let ok = |args: Vec<String>| {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = editdiff(&refs);
        assert_eq!(o.status.code(), Some(0), "{args:?} failed:\n{}", stderr(&o));
    };
    for (model, dataset) in &datasets {
        let common = vec![
            "--dataset".to_string(),
            dataset.display().to_string(),
            "--output-dir".into(),
            out(model).display().to_string(),
            "--cache-dir".into(),
            cache.display().to_string(),
            "--base-url".into(),
            base_url.into(),
        ];
        for cmd in ["detect", "coherence", "eval-detect", "eval-pipeline"] {
            let mut a = common.clone();
            a.push(cmd.into());
            ok(a);
        }
    }
    let mut rank = vec![
        "--output-dir".to_string(),
        out(MODELS[0]).display().to_string(),
        "rank".into(),
    ];
    for m in MODELS {
        rank.push("--run".into());
        rank.push(format!("{m}={}", out(m).display()));
    }
    ok(rank);
    ok(vec![
        "--dataset".into(),
        datasets[MODELS[0]].display().to_string(),
        "--output-dir".into(),
        out(MODELS[0]).display().to_string(),
        "--cache-dir".into(),
        cache.display().to_string(),
        "--base-url".into(),
        base_url.into(),
        "correlate".into(),
    ]);
    ok(vec!["report".into(), out(MODELS[0]).display().to_string()]);
    out(MODELS[0])
}

pub fn golden_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/report.txt")
}

/// Compares `actual` with the committed golden report, rewriting it when
/// `UPDATE_GOLDEN` is set.
pub fn check_golden(actual: &str) -> Result<(), String> {
    let path = golden_path();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return Ok(());
    }
    let expected = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        Ok(())
    } else {
        Err(format!("report differs from {}:\n{actual}", path.display()))
    }
}

const CLASSES: [&str; 8] = ["person", "dog", "car", "cup", "chair", "bottle", "bird", "tv"];

/// Annotated images in three embedding clusters with random objects, as
/// they read back from JSONL.
pub fn random_corpus(seed: u64, n: usize) -> Vec<AnnotatedImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    (0..n)
        .map(|k| {
            let c = &centers[rng.random_range(0..3)];
            let mut e: Vec<f64> = c.iter().map(|v| v + rng.random_range(-0.6..0.6)).collect();
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            e.iter_mut().for_each(|v| *v /= norm);
            let objects = (0..rng.random_range(1..=5))
                .map(|_| {
                    let x0 = rng.random_range(0.0..0.7);
                    let y0 = rng.random_range(0.0..0.7);
                    let w = rng.random_range(0.02..0.3);
                    let h = rng.random_range(0.02..0.3);
                    AnnotatedObject {
                        class_name: CLASSES[rng.random_range(0..CLASSES.len())].into(),
                        bbox: bbox([x0, y0, x0 + w, y0 + h]),
                        mask_ref: None,
                    }
                })
                .collect();
            AnnotatedImage {
                image_id: format!("img{k:03}"),
                width: 320,
                height: 240,
                objects,
                embedding: Some(e),
            }
        })
        .map(|img| serde_json::from_str(&serde_json::to_string(&img).unwrap()).unwrap())
        .collect()
}

pub fn write_lines<T: serde::Serialize>(path: &Path, items: &[T]) {
    let mut text = String::new();
    for it in items {
        text.push_str(&serde_json::to_string(it).unwrap());
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

/// Full pipeline against a fresh mock server, compared with the golden
/// report, then rerun on the warm cache.
pub fn golden_and_warm_rerun() -> Result<String, String> {
    let server = MockServer::start(mock_script()).map_err(|e| e.to_string())?;
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let started = std::time::Instant::now();
    let report_dir = run_pipeline(root.path(), &server.base_url());
    let elapsed = started.elapsed();
    ensure!(elapsed.as_secs_f64() < 30.0, "pipeline took {elapsed:?}");
    let report = std::fs::read_to_string(report_dir.join("report.txt")).map_err(|e| e.to_string())?;
    check_golden(&report)?;

    let calls = server.call_count();
    ensure!(calls > 0, "cold run made no calls");
    let first = snapshot(&root.path().join("out"));
    run_pipeline(root.path(), &server.base_url());
    let extra = server.call_count() - calls;
    ensure!(extra == 0, "warm rerun made {extra} calls");
    let second = snapshot(&root.path().join("out"));
    ensure!(first.keys().eq(second.keys()), "rerun produced a different file set");
    for (path, bytes) in &first {
        ensure!(second[path] == *bytes, "{} changed on rerun", path.display());
    }
    Ok(format!(
        "{} files byte-identical, cold run {calls} calls in {:.1}s, warm rerun 0 calls",
        first.len(),
        elapsed.as_secs_f64()
    ))
}

/// Checks captured pipeline traffic: detection requests never carry the
/// edit prompt; coherence requests carry the serialized difference and the
/// overlaid pair with the command's colour.
pub fn check_wire(captured: &[CapturedRequest]) -> Result<String, String> {
    let prompts: Vec<String> = (0..CASES).map(prompt).collect();
    let detect: Vec<_> = captured
        .iter()
        .filter(|r| r.system_prompt() == Some(DIFFERENCE_SYSTEM_PROMPT))
        .collect();
    ensure!(detect.len() == CASES * MODELS.len(), "{} detect requests", detect.len());
    for r in &detect {
        let body = r.body.to_string();
        for p in &prompts {
            ensure!(!body.contains(p.as_str()), "detect request carries prompt {p:?}");
        }
        ensure!(
            r.image_urls().len() == 2,
            "detect request with {} images",
            r.image_urls().len()
        );
    }

    let coherence: Vec<_> = captured
        .iter()
        .filter(|r| r.system_prompt() == Some(COHERENCE_SYSTEM_PROMPT))
        .collect();
    let mut checked = 0;
    let mut seen = [false; 3];
    for (m, _) in MODELS.iter().enumerate() {
        for (i, prompt) in prompts.iter().enumerate() {
            let gts: Vec<Difference> = ground_truth(i).iter().map(|g| g.as_difference()).collect();
            for d in detection_lines(m, i).iter().chain(&gts) {
                let line = serialize_difference(d);
                let req = coherence.iter().find(|r| {
                    let t = r.user_text();
                    t.contains(&line) && t.contains(prompt.as_str())
                });
                let Some(req) = req else {
                    return Err(format!("no coherence request for {line:?} in case {i}"));
                };
                let urls = req.image_urls();
                ensure!(urls.len() == 2, "coherence request with {} images", urls.len());
                let o = decode_data_url(urls[0]).map_err(|e| e.to_string())?;
                let e = decode_data_url(urls[1]).map_err(|e| e.to_string())?;
                let (k, color, overlaid, plain) = match d.command {
                    EditCommand::Add => (0, Rgb::RED, &e, &o),
                    EditCommand::Edit => (1, Rgb::GREEN, &o, &e),
                    EditCommand::Remove => (2, Rgb::BLUE, &o, &e),
                };
                let r = pixel_rect(&d.bbox, SIDE, SIDE);
                let (x, y) = (r.x0, r.y0);
                ensure!(
                    overlaid.get(x, y) == color,
                    "{line}: overlay corner is {:?}",
                    overlaid.get(x, y)
                );
                ensure!(plain.get(x, y) != color, "{line}: overlay drawn on the wrong image");
                seen[k] = true;
                checked += 1;
            }
        }
    }
    ensure!(seen == [true; 3], "not every command colour observed: {seen:?}");
    Ok(format!(
        "{} detect requests without prompt text, {checked} coherence requests with correct overlays",
        detect.len()
    ))
}
