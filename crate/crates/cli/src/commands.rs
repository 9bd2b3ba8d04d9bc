//! Subcommand implementations.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use editdiff_core::datagen::{
    build_stage2_manifest, mine_and_label, plan_augmentation, validate_manifest, AnnotatedImage, FileMasks,
    MaskResolver, NoMasks, OpCounts, PairMiningParams,
};
use editdiff_core::detmetrics::{
    coherence_accuracy, evaluate_coherence_ap, evaluate_detection, APReport, CoherenceCase, DetectionCase,
};
use editdiff_core::evalcomp::{
    clip_i, clip_t, correlation_study, ranking_axes, CaseOutcome, CaseScores, CorrelationTable, MaskKind, MaskPolicy,
    RankingReport, ScoringInput,
};
use editdiff_core::parser::ParseReport;
use editdiff_core::{CoherenceVerdict, EditCase, EditCommand, GroundTruthDifference, Rgb};
use editdiff_gateway::prompts::{CAPTION_TEMPLATE_VERSION, COMPOSE_TEMPLATE_VERSION};
use editdiff_gateway::{map_bounded, Gateway, OverlayStyle};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Outcome, Result};
use crate::io::{
    calls_file, load_case_images, load_cases, read_jsonl, read_plain_jsonl, read_summary, sha256_hex, summary_file,
    write_atomic, write_jsonl, write_summary, Provenance, CORRELATION_CSV, CORRELATION_FILE, DETECTIONS_FILE,
    EVAL_DETECT_FILE, EVAL_PIPELINE_FILE, GT_VERDICTS_FILE, PAIRS_FILE, RANKING_CSV, RANKING_FILE, REPORT_FILE,
    SCORES_FILE, STAGE2_FILE, VERDICTS_FILE,
};
use crate::report;

/// Detector output for one case, or why there is none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub case_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ParseReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Verdicts for one case's differences, in difference order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub case_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdicts: Option<Vec<CoherenceVerdict>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub case_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<CaseScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub add: usize,
    pub remove: usize,
    pub edit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MineSummary {
    pub images: usize,
    pub pairs: usize,
    pub labels: LabelCounts,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shares {
    pub add: f64,
    pub remove: f64,
    pub edit: f64,
    pub unchanged: f64,
    pub color_change_of_edits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Summary {
    pub seed: u64,
    pub counts: OpCounts,
    pub requested: Shares,
    pub realized: Shares,
    pub augmentation: editdiff_core::datagen::AugmentationSpec,
    pub warnings: usize,
    pub violations: usize,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectSummary {
    pub cases: usize,
    pub failed: usize,
    pub differences: usize,
    pub malformed_lines: usize,
    pub flagged_confidences: usize,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceSummary {
    pub cases: usize,
    pub failed: usize,
    pub verdicts: usize,
    pub yes: usize,
    pub flagged_unparseable: usize,
    pub overlay: OverlayStyle,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDetectSummary {
    pub cases: usize,
    pub failed_cases: Vec<String>,
    pub class_agnostic: APReport,
    pub class_aware: APReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPipelineSummary {
    pub cases: usize,
    pub failed_cases: Vec<String>,
    pub gt_differences: usize,
    pub coherence_accuracy: f64,
    pub coherence_ap: APReport,
    pub overlay: OverlayStyle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRef {
    pub model: String,
    pub dataset_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub runs: Vec<RunRef>,
    pub ranking: RankingReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelateSummary {
    pub cases: usize,
    pub failed_cases: Vec<String>,
    pub caption_template: String,
    pub compose_template: String,
    pub table: CorrelationTable,
}

pub struct Context {
    pub cfg: RunConfig,
    pub config_hash: String,
}

impl Context {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let config_hash = cfg.config_hash();
        Ok(Self { cfg, config_hash })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn provenance(&self, command: &str, dataset_hash: Option<&str>) -> Provenance {
        Provenance::new(command, &self.config_hash, dataset_hash)
    }

    fn dataset(&self) -> Result<Dataset> {
        let path = self
            .cfg
            .dataset
            .clone()
            .ok_or_else(|| CliError::Config("no dataset given (--dataset or `dataset` in the config)".into()))?;
        let (cases, hash) = load_cases(&path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Dataset { cases, hash, base })
    }

    fn corpus(&self) -> Result<(Vec<AnnotatedImage>, String)> {
        let path = self.cfg.annotations.clone().ok_or_else(|| {
            CliError::Config("no annotations given (--annotations or `annotations` in the config)".into())
        })?;
        let (corpus, hash): (Vec<AnnotatedImage>, String) = read_plain_jsonl(&path)?;
        for (i, img) in corpus.iter().enumerate() {
            img.validate().map_err(|e| CliError::Schema {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok((corpus, hash))
    }

    fn gateway(&self) -> Result<Gateway> {
        Ok(Gateway::new(self.cfg.gateway_config()?)?)
    }

    fn write_calls(&self, command: &str, dataset_hash: &str, gw: &Gateway) -> Result<()> {
        write_jsonl(
            &self.out(&calls_file(command)),
            &self.provenance(command, Some(dataset_hash)),
            &gw.records(),
        )
    }

    fn input_path(&self, explicit: Option<&Path>, default_name: &str) -> PathBuf {
        explicit
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.out(default_name))
    }
}

struct Dataset {
    cases: Vec<EditCase>,
    hash: String,
    base: PathBuf,
}

/// Reads a per-case JSONL output and checks it came from `dataset_hash`.
fn read_case_output<T: serde::de::DeserializeOwned>(path: &Path, dataset_hash: &str) -> Result<Vec<T>> {
    let (prov, records) = read_jsonl(path)?;
    if prov.dataset_hash.as_deref() != Some(dataset_hash) {
        return Err(CliError::Config(format!(
            "{} was produced from a different dataset (hash {})",
            path.display(),
            prov.dataset_hash.as_deref().unwrap_or("none")
        )));
    }
    Ok(records)
}

fn label_counts<'a>(labels: impl Iterator<Item = &'a GroundTruthDifference>) -> LabelCounts {
    let mut c = LabelCounts {
        add: 0,
        remove: 0,
        edit: 0,
    };
    for l in labels {
        match l.command {
            EditCommand::Add => c.add += 1,
            EditCommand::Remove => c.remove += 1,
            EditCommand::Edit => c.edit += 1,
        }
    }
    c
}

pub fn mine_pairs(ctx: &Context) -> Result<Outcome> {
    let (corpus, hash) = ctx.corpus()?;
    let t = &ctx.cfg.thresholds;
    let params = PairMiningParams {
        sim_threshold: t.sim_threshold,
        max_class_diff: t.max_class_diff,
        edit_iou_threshold: t.edit_iou,
        min_side_px: t.min_side_px,
    };
    let pairs = mine_and_label(&corpus, &params)?;
    let prov = ctx.provenance("mine-pairs", Some(&hash));
    write_jsonl(&ctx.out(PAIRS_FILE), &prov, &pairs)?;
    let summary = MineSummary {
        images: corpus.len(),
        pairs: pairs.len(),
        labels: label_counts(pairs.iter().flat_map(|p| &p.labels)),
        config: ctx.cfg.clone(),
    };
    write_summary(&ctx.out(&summary_file("mine-pairs")), &prov, &summary)?;
    println!(
        "{} images, {} pairs, labels: {} ADD, {} REMOVE, {} EDIT",
        summary.images, summary.pairs, summary.labels.add, summary.labels.remove, summary.labels.edit
    );
    Ok(Outcome::Complete)
}

fn shares(c: &OpCounts) -> Shares {
    let ops = c.operations().max(1) as f64;
    Shares {
        add: c.add as f64 / ops,
        remove: c.remove as f64 / ops,
        edit: c.edit as f64 / ops,
        unchanged: c.unchanged_images as f64 / c.images.max(1) as f64,
        color_change_of_edits: c.color_change as f64 / c.edit.max(1) as f64,
    }
}

pub fn build_stage2(ctx: &Context) -> Result<Outcome> {
    let (corpus, hash) = ctx.corpus()?;
    let cfg = &ctx.cfg;
    let file_masks = cfg.masks_dir.as_ref().map(FileMasks::new);
    let masks: &dyn MaskResolver = match &file_masks {
        Some(m) => m,
        None => &NoMasks,
    };
    let (manifest, warnings) = build_stage2_manifest(&corpus, cfg.seeds.stage2, &cfg.op_balance, &cfg.stage2, masks)?;
    for w in &warnings {
        tracing::warn!(image_id = %w.image_id, "{}", w.message);
    }
    let manifest = plan_augmentation(manifest, cfg.augmentation_probability)?;
    let violations = validate_manifest(&manifest, &corpus, &cfg.stage2, masks);
    for v in &violations {
        tracing::error!(image_id = %v.image_id, "constraint violated: {}", v.message);
    }

    let prov = ctx.provenance("build-stage2", Some(&hash));
    write_jsonl(&ctx.out(STAGE2_FILE), &prov, &manifest.records)?;
    let counts = manifest.op_counts();
    let b = &cfg.op_balance;
    let op_total = b.add + b.remove + b.edit;
    let summary = Stage2Summary {
        seed: manifest.seed,
        counts,
        requested: Shares {
            add: b.add / op_total,
            remove: b.remove / op_total,
            edit: b.edit / op_total,
            unchanged: b.unchanged,
            color_change_of_edits: cfg.stage2.color_change_fraction,
        },
        realized: shares(&counts),
        augmentation: manifest.augmentation.clone(),
        warnings: warnings.len(),
        violations: violations.len(),
        config: cfg.clone(),
    };
    write_summary(&ctx.out(&summary_file("build-stage2")), &prov, &summary)?;
    let r = &summary.realized;
    println!(
        "{} images ({} unchanged), {} operations: ADD {:.1}%, REMOVE {:.1}%, EDIT {:.1}% (color change {:.1}% of edits)",
        counts.images,
        counts.unchanged_images,
        counts.operations(),
        100.0 * r.add,
        100.0 * r.remove,
        100.0 * r.edit,
        100.0 * r.color_change_of_edits
    );
    if !violations.is_empty() {
        return Err(CliError::Other(format!(
            "{} constraint violations in the manifest",
            violations.len()
        )));
    }
    Ok(Outcome::Complete)
}

pub fn detect(ctx: &Context) -> Result<Outcome> {
    let data = ctx.dataset()?;
    let gw = ctx.gateway()?;
    let mut records = map_bounded(&data.cases, ctx.cfg.concurrency, |case| {
        let result = load_case_images(&data.base, case).and_then(|(o, e)| Ok(gw.detect(case, &o, &e)?));
        match result {
            Ok(report) => DetectionRecord {
                case_id: case.case_id.clone(),
                report: Some(report),
                error: None,
            },
            Err(e) => {
                tracing::error!(case_id = %case.case_id, "detection failed: {e}");
                DetectionRecord {
                    case_id: case.case_id.clone(),
                    report: None,
                    error: Some(e.to_string()),
                }
            }
        }
    });
    records.sort_by(|a, b| a.case_id.cmp(&b.case_id));

    let prov = ctx.provenance("detect", Some(&data.hash));
    write_jsonl(&ctx.out(DETECTIONS_FILE), &prov, &records)?;
    ctx.write_calls("detect", &data.hash, &gw)?;
    let reports: Vec<&ParseReport> = records.iter().filter_map(|r| r.report.as_ref()).collect();
    let summary = DetectSummary {
        cases: records.len(),
        failed: records.len() - reports.len(),
        differences: reports.iter().map(|r| r.differences.len()).sum(),
        malformed_lines: reports.iter().map(|r| r.malformed_lines.len()).sum(),
        flagged_confidences: reports.iter().map(|r| r.flagged_count()).sum(),
        config: ctx.cfg.clone(),
    };
    write_summary(&ctx.out(&summary_file("detect")), &prov, &summary)?;
    println!(
        "{} cases, {} failed, {} differences, {} malformed lines",
        summary.cases, summary.failed, summary.differences, summary.malformed_lines
    );
    eprintln!("{} network requests", gw.network_calls());
    Ok(Outcome::from_failures(summary.failed))
}

fn assess_all(
    gw: &Gateway,
    base: &Path,
    case: &EditCase,
    diffs: &[editdiff_core::Difference],
) -> Result<Vec<CoherenceVerdict>> {
    if diffs.is_empty() {
        return Ok(Vec::new());
    }
    let (o, e) = load_case_images(base, case)?;
    diffs
        .iter()
        .map(|d| Ok(gw.assess_coherence(case, &o, &e, d)?))
        .collect()
}

pub fn coherence(ctx: &Context, detections: Option<&Path>) -> Result<Outcome> {
    let data = ctx.dataset()?;
    let path = ctx.input_path(detections, DETECTIONS_FILE);
    let dets: HashMap<String, DetectionRecord> = read_case_output::<DetectionRecord>(&path, &data.hash)?
        .into_iter()
        .map(|r| (r.case_id.clone(), r))
        .collect();
    let gw = ctx.gateway()?;
    let mut records = map_bounded(&data.cases, ctx.cfg.concurrency, |case| {
        let result = match dets.get(&case.case_id).and_then(|r| r.report.as_ref()) {
            Some(report) => assess_all(&gw, &data.base, case, &report.differences),
            None => Err(CliError::Other("no detections for this case".into())),
        };
        match result {
            Ok(v) => VerdictRecord {
                case_id: case.case_id.clone(),
                verdicts: Some(v),
                error: None,
            },
            Err(e) => {
                tracing::error!(case_id = %case.case_id, "coherence failed: {e}");
                VerdictRecord {
                    case_id: case.case_id.clone(),
                    verdicts: None,
                    error: Some(e.to_string()),
                }
            }
        }
    });
    records.sort_by(|a, b| a.case_id.cmp(&b.case_id));

    let prov = ctx.provenance("coherence", Some(&data.hash));
    write_jsonl(&ctx.out(VERDICTS_FILE), &prov, &records)?;
    ctx.write_calls("coherence", &data.hash, &gw)?;
    let all: Vec<&CoherenceVerdict> = records.iter().filter_map(|r| r.verdicts.as_ref()).flatten().collect();
    let summary = CoherenceSummary {
        cases: records.len(),
        failed: records.iter().filter(|r| r.verdicts.is_none()).count(),
        verdicts: all.len(),
        yes: all.iter().filter(|v| v.decision).count(),
        flagged_unparseable: all.iter().filter(|v| v.flagged_unparseable).count(),
        overlay: gw.config().overlay,
        config: ctx.cfg.clone(),
    };
    write_summary(&ctx.out(&summary_file("coherence")), &prov, &summary)?;
    println!(
        "{} cases, {} failed, {} verdicts ({} YES, {} unparseable)",
        summary.cases, summary.failed, summary.verdicts, summary.yes, summary.flagged_unparseable
    );
    eprintln!("{} network requests", gw.network_calls());
    Ok(Outcome::from_failures(summary.failed))
}

fn detections_by_case(records: Vec<DetectionRecord>) -> HashMap<String, ParseReport> {
    records
        .into_iter()
        .filter_map(|r| r.report.map(|rep| (r.case_id, rep)))
        .collect()
}

pub fn eval_detect(ctx: &Context, detections: Option<&Path>) -> Result<Outcome> {
    let data = ctx.dataset()?;
    let path = ctx.input_path(detections, DETECTIONS_FILE);
    let reports = detections_by_case(read_case_output(&path, &data.hash)?);
    let failed: Vec<String> = data
        .cases
        .iter()
        .filter(|c| !reports.contains_key(&c.case_id))
        .map(|c| c.case_id.clone())
        .collect();
    let det_cases: Vec<DetectionCase<'_>> = data
        .cases
        .iter()
        .map(|c| DetectionCase {
            case: c,
            predictions: reports.get(&c.case_id).map(|r| r.differences.as_slice()).unwrap_or(&[]),
        })
        .collect();
    let summary = EvalDetectSummary {
        cases: data.cases.len(),
        failed_cases: failed,
        class_agnostic: evaluate_detection(&det_cases, false)?,
        class_aware: evaluate_detection(&det_cases, true)?,
    };
    let prov = ctx.provenance("eval-detect", Some(&data.hash));
    write_summary(&ctx.out(EVAL_DETECT_FILE), &prov, &summary)?;
    print!("{}", report::detection_table(&summary));
    Ok(Outcome::from_failures(summary.failed_cases.len()))
}

pub fn eval_pipeline(ctx: &Context, detections: Option<&Path>, verdicts: Option<&Path>) -> Result<Outcome> {
    let data = ctx.dataset()?;
    for c in &data.cases {
        if c.ground_truth.is_none() {
            return Err(editdiff_core::Error::MissingGroundTruth(c.case_id.clone()).into());
        }
    }
    let reports = detections_by_case(read_case_output(
        &ctx.input_path(detections, DETECTIONS_FILE),
        &data.hash,
    )?);
    let verdict_map: HashMap<String, Vec<CoherenceVerdict>> =
        read_case_output::<VerdictRecord>(&ctx.input_path(verdicts, VERDICTS_FILE), &data.hash)?
            .into_iter()
            .filter_map(|r| r.verdicts.map(|v| (r.case_id, v)))
            .collect();

    // coherence of the ground-truth areas, judged through the gateway
    let gw = ctx.gateway()?;
    let mut gt_records = map_bounded(&data.cases, ctx.cfg.concurrency, |case| {
        let gts: Vec<_> = case.ground_truth.iter().flatten().map(|g| g.as_difference()).collect();
        match assess_all(&gw, &data.base, case, &gts) {
            Ok(v) => VerdictRecord {
                case_id: case.case_id.clone(),
                verdicts: Some(v),
                error: None,
            },
            Err(e) => VerdictRecord {
                case_id: case.case_id.clone(),
                verdicts: None,
                error: Some(e.to_string()),
            },
        }
    });
    gt_records.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let prov = ctx.provenance("eval-pipeline", Some(&data.hash));
    write_jsonl(&ctx.out(GT_VERDICTS_FILE), &prov, &gt_records)?;
    ctx.write_calls("eval-pipeline", &data.hash, &gw)?;

    let gt_verdicts: HashMap<&str, &Vec<CoherenceVerdict>> = gt_records
        .iter()
        .filter_map(|r| r.verdicts.as_ref().map(|v| (r.case_id.as_str(), v)))
        .collect();
    let mut failed = Vec::new();
    let (mut all_gts, mut all_verdicts) = (Vec::new(), Vec::new());
    let mut coherence_cases = Vec::new();
    for case in &data.cases {
        let id = case.case_id.as_str();
        let (Some(gv), Some(report), Some(dv)) = (gt_verdicts.get(id), reports.get(id), verdict_map.get(id)) else {
            failed.push(case.case_id.clone());
            continue;
        };
        all_gts.extend(case.ground_truth.iter().flatten().cloned());
        all_verdicts.extend(gv.iter().cloned());
        coherence_cases.push(CoherenceCase {
            case,
            predictions: &report.differences,
            verdicts: dv,
        });
    }
    let summary = EvalPipelineSummary {
        cases: data.cases.len(),
        failed_cases: failed,
        gt_differences: all_gts.len(),
        coherence_accuracy: coherence_accuracy(&all_gts, &all_verdicts)?,
        coherence_ap: evaluate_coherence_ap(&coherence_cases)?,
        overlay: gw.config().overlay,
    };
    write_summary(&ctx.out(EVAL_PIPELINE_FILE), &prov, &summary)?;
    print!("{}", report::pipeline_table(&summary));
    Ok(Outcome::from_failures(summary.failed_cases.len()))
}

/// Reads one model's run directory into case outcomes.
fn load_run(dir: &Path) -> Result<(Option<String>, Vec<CaseOutcome>)> {
    let (prov, dets): (_, Vec<DetectionRecord>) = read_jsonl(&dir.join(DETECTIONS_FILE))?;
    let verdicts: Vec<VerdictRecord> =
        read_case_output(&dir.join(VERDICTS_FILE), prov.dataset_hash.as_deref().unwrap_or(""))?;
    let by_case: HashMap<&str, &VerdictRecord> = verdicts.iter().map(|v| (v.case_id.as_str(), v)).collect();
    let mut outcomes = Vec::new();
    let mut failed = Vec::new();
    for d in &dets {
        match (
            &d.report,
            by_case.get(d.case_id.as_str()).and_then(|v| v.verdicts.as_ref()),
        ) {
            (Some(r), Some(v)) => outcomes.push(CaseOutcome {
                case_id: d.case_id.clone(),
                differences: r.differences.clone(),
                verdicts: v.clone(),
            }),
            _ => failed.push(d.case_id.as_str()),
        }
    }
    if !failed.is_empty() {
        return Err(CliError::Other(format!(
            "{}: incomplete run, cases without detections or verdicts: {}",
            dir.display(),
            failed.join(", ")
        )));
    }
    Ok((prov.dataset_hash, outcomes))
}

pub fn rank(ctx: &Context, runs: &[(String, PathBuf)]) -> Result<Outcome> {
    if runs.is_empty() {
        return Err(CliError::Config("rank needs at least one --run MODEL=DIR".into()));
    }
    let mut outcomes = BTreeMap::new();
    let mut refs = Vec::new();
    for (model, dir) in runs {
        let (hash, o) = load_run(dir)?;
        if outcomes.insert(model.clone(), o).is_some() {
            return Err(CliError::Config(format!("model {model} given twice")));
        }
        refs.push(RunRef {
            model: model.clone(),
            dataset_hash: hash,
        });
    }
    refs.sort_by(|a, b| a.model.cmp(&b.model));
    let ranking = ranking_axes(&outcomes, ctx.cfg.thresholds.confidence_floor)?;

    // one shared hash, or a combined one that matches no single dataset
    let hashes: Vec<&str> = refs.iter().map(|r| r.dataset_hash.as_deref().unwrap_or("")).collect();
    let dataset_hash = if hashes.windows(2).all(|w| w[0] == w[1]) {
        hashes[0].to_string()
    } else {
        sha256_hex(hashes.join("\n").as_bytes())
    };
    let prov = ctx.provenance("rank", Some(&dataset_hash));
    let summary = RankSummary { runs: refs, ranking };
    write_summary(&ctx.out(RANKING_FILE), &prov, &summary)?;
    write_atomic(&ctx.out(RANKING_CSV), report::ranking_csv(&summary.ranking)?.as_bytes())?;
    print!("{}", report::ranking_table(&summary.ranking));
    Ok(Outcome::Complete)
}

const CLIP_I_KINDS: [MaskKind; 4] = [
    MaskKind::None,
    MaskKind::RandomAreas,
    MaskKind::AllDifferences,
    MaskKind::CoherentDifferences,
];
const CLIP_T_KINDS: [MaskKind; 4] = [
    MaskKind::None,
    MaskKind::RandomAreas,
    MaskKind::AllDifferences,
    MaskKind::NonCoherentDifferences,
];

fn policy(ctx: &Context, kind: MaskKind) -> MaskPolicy {
    let p = match kind {
        MaskKind::RandomAreas => MaskPolicy::random(ctx.cfg.seeds.random_mask),
        k => MaskPolicy::new(k),
    };
    p.with_fill(Rgb(ctx.cfg.mask_fill))
}

fn score_case(
    ctx: &Context,
    gw: &Gateway,
    base: &Path,
    case: &EditCase,
    outcome: Option<(&ParseReport, &Vec<CoherenceVerdict>)>,
) -> Result<(String, CaseScores)> {
    let (report, verdicts) =
        outcome.ok_or_else(|| CliError::Other("no detections or verdicts for this case".into()))?;
    let (o, e) = load_case_images(base, case)?;
    let caption = gw.target_caption(case, &o)?;
    let embedder = gw.embedder(&case.case_id);
    let input = ScoringInput {
        case_id: &case.case_id,
        original: &o,
        edited: &e,
        differences: &report.differences,
        verdicts,
    };
    let mut scores = CaseScores {
        case_id: case.case_id.clone(),
        group: case.extra.get("group").and_then(|g| g.as_str()).map(str::to_string),
        ratings: case.human_ratings,
        clip_i: BTreeMap::new(),
        clip_t: BTreeMap::new(),
    };
    for kind in CLIP_I_KINDS {
        scores
            .clip_i
            .insert(kind, clip_i(&input, &policy(ctx, kind), &embedder)?);
    }
    for kind in CLIP_T_KINDS {
        scores
            .clip_t
            .insert(kind, clip_t(&input, &caption, &policy(ctx, kind), &embedder)?);
    }
    Ok((caption, scores))
}

pub fn correlate(ctx: &Context, detections: Option<&Path>, verdicts: Option<&Path>) -> Result<Outcome> {
    let data = ctx.dataset()?;
    let reports = detections_by_case(read_case_output(
        &ctx.input_path(detections, DETECTIONS_FILE),
        &data.hash,
    )?);
    let verdict_map: HashMap<String, Vec<CoherenceVerdict>> =
        read_case_output::<VerdictRecord>(&ctx.input_path(verdicts, VERDICTS_FILE), &data.hash)?
            .into_iter()
            .filter_map(|r| r.verdicts.map(|v| (r.case_id, v)))
            .collect();
    let gw = ctx.gateway()?;
    let mut records = map_bounded(&data.cases, ctx.cfg.concurrency, |case| {
        let outcome = reports.get(&case.case_id).zip(verdict_map.get(&case.case_id));
        match score_case(ctx, &gw, &data.base, case, outcome) {
            Ok((caption, scores)) => ScoreRecord {
                case_id: case.case_id.clone(),
                target_caption: Some(caption),
                scores: Some(scores),
                error: None,
            },
            Err(e) => {
                tracing::error!(case_id = %case.case_id, "scoring failed: {e}");
                ScoreRecord {
                    case_id: case.case_id.clone(),
                    target_caption: None,
                    scores: None,
                    error: Some(e.to_string()),
                }
            }
        }
    });
    records.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let prov = ctx.provenance("correlate", Some(&data.hash));
    write_jsonl(&ctx.out(SCORES_FILE), &prov, &records)?;
    ctx.write_calls("correlate", &data.hash, &gw)?;

    let scores: Vec<CaseScores> = records.iter().filter_map(|r| r.scores.clone()).collect();
    let summary = CorrelateSummary {
        cases: records.len(),
        failed_cases: records
            .iter()
            .filter(|r| r.scores.is_none())
            .map(|r| r.case_id.clone())
            .collect(),
        caption_template: CAPTION_TEMPLATE_VERSION.into(),
        compose_template: COMPOSE_TEMPLATE_VERSION.into(),
        table: correlation_study(&scores, ctx.cfg.correlation_unit),
    };
    write_summary(&ctx.out(CORRELATION_FILE), &prov, &summary)?;
    write_atomic(
        &ctx.out(CORRELATION_CSV),
        report::correlation_csv(&summary.table)?.as_bytes(),
    )?;
    print!("{}", report::correlation_table(&summary.table));
    Ok(Outcome::from_failures(summary.failed_cases.len()))
}

/// Consolidates the evaluation outputs in `dir` into `report.txt`.
pub fn report(dir: &Path) -> Result<Outcome> {
    let mut sections = report::Sections::default();
    let mut seen: Vec<Provenance> = Vec::new();
    let path = |n: &str| dir.join(n);
    if path(EVAL_DETECT_FILE).exists() {
        let (p, s) = read_summary(&path(EVAL_DETECT_FILE))?;
        seen.push(p);
        sections.detection = Some(s);
    }
    if path(EVAL_PIPELINE_FILE).exists() {
        let (p, s) = read_summary(&path(EVAL_PIPELINE_FILE))?;
        seen.push(p);
        sections.pipeline = Some(s);
    }
    if path(RANKING_FILE).exists() {
        let (p, s): (_, RankSummary) = read_summary(&path(RANKING_FILE))?;
        seen.push(p);
        sections.ranking = Some(s.ranking);
    }
    if path(CORRELATION_FILE).exists() {
        let (p, s) = read_summary(&path(CORRELATION_FILE))?;
        seen.push(p);
        sections.correlation = Some(s);
    }
    if seen.is_empty() {
        return Err(CliError::Other(format!("no runs found in {}", dir.display())));
    }
    let hash = seen[0].dataset_hash.clone();
    if let Some(bad) = seen.iter().find(|p| p.dataset_hash != hash) {
        return Err(CliError::Other(format!(
            "refusing to merge outputs with mismatched dataset hashes: {} from {} vs {} from {}",
            hash.as_deref().unwrap_or("none"),
            seen[0].command,
            bad.dataset_hash.as_deref().unwrap_or("none"),
            bad.command
        )));
    }
    sections.provenance = seen;
    let text = report::render(&sections);
    write_atomic(&dir.join(REPORT_FILE), text.as_bytes())?;
    print!("{text}");
    Ok(Outcome::Complete)
}
