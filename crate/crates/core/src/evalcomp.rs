//! Composite evaluation on top of detected differences and coherence verdicts.
//!
//! - Masked embedding similarity: image-image (CLIP-I style) and image-text
//!   (CLIP-T style) cosine similarity after patching selected difference
//!   regions.
//! - Ranking axes per editing model: correct edits, unwanted edit area and no
//!   visual change.
//! - Pearson, Spearman and Kendall tau-b correlation against human ratings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::{fill_regions, Image, Rgb};
use crate::types::{CoherenceVerdict, Difference, HumanRatings, NormalizedBBox};

/// Embedding backend for images and text. Vectors are L2-normalized.
pub trait Embedder: Sync {
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

pub fn l2_normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Embedding("zero or non-finite vector".into()));
    }
    for x in &mut v {
        *x /= n;
    }
    Ok(v)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Embedding("zero-norm vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Deterministic stand-in for a real embedding model.
///
/// Images map to the per-channel mean of each cell of a 2×2 grid (scaled to
/// [0,1]) followed by a constant 1, text to SHA-256-derived values; both are
/// then L2-normalized into [`MeanPixelEmbedder::DIM`] dimensions.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanPixelEmbedder;

impl MeanPixelEmbedder {
    pub const DIM: usize = 13;

    pub fn raw_image_vector(image: &Image) -> Vec<f64> {
        let (w, h) = (image.width(), image.height());
        let mut sums = [[0.0f64; 3]; 4];
        let mut counts = [0usize; 4];
        for y in 0..h {
            for x in 0..w {
                let cell = usize::from(2 * y >= h) * 2 + usize::from(2 * x >= w);
                let p = image.get(x, y).0;
                for c in 0..3 {
                    sums[cell][c] += f64::from(p[c]);
                }
                counts[cell] += 1;
            }
        }
        let mut v = Vec::with_capacity(Self::DIM);
        for cell in 0..4 {
            for s in sums[cell] {
                // a 1-pixel-wide image leaves some cells empty
                v.push(if counts[cell] == 0 {
                    0.0
                } else {
                    s / counts[cell] as f64 / 255.0
                });
            }
        }
        v.push(1.0);
        v
    }

    pub fn raw_text_vector(text: &str) -> Vec<f64> {
        let digest = Sha256::digest(text.as_bytes());
        let mut v: Vec<f64> = digest
            .iter()
            .take(Self::DIM - 1)
            .map(|b| f64::from(*b) / 255.0)
            .collect();
        v.push(1.0);
        v
    }
}

impl Embedder for MeanPixelEmbedder {
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        l2_normalize(Self::raw_image_vector(image))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        l2_normalize(Self::raw_text_vector(text))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    None,
    CoherentDifferences,
    NonCoherentDifferences,
    AllDifferences,
    RandomAreas,
}

impl MaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskKind::None => "none",
            MaskKind::CoherentDifferences => "coherent_differences",
            MaskKind::NonCoherentDifferences => "non_coherent_differences",
            MaskKind::AllDifferences => "all_differences",
            MaskKind::RandomAreas => "random_areas",
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which regions to patch before embedding, and with what color.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub kind: MaskKind,
    pub fill: Rgb,
    /// Required for [`MaskKind::RandomAreas`].
    pub seed: Option<u64>,
}

impl MaskPolicy {
    pub fn new(kind: MaskKind) -> Self {
        Self {
            kind,
            fill: Rgb::BLACK,
            seed: None,
        }
    }

    pub fn random(seed: u64) -> Self {
        Self {
            kind: MaskKind::RandomAreas,
            fill: Rgb::BLACK,
            seed: Some(seed),
        }
    }

    pub fn with_fill(mut self, fill: Rgb) -> Self {
        self.fill = fill;
        self
    }
}

/// Case inputs for masked similarity.
#[derive(Debug, Clone, Copy)]
pub struct ScoringInput<'a> {
    pub case_id: &'a str,
    pub original: &'a Image,
    pub edited: &'a Image,
    pub differences: &'a [Difference],
    pub verdicts: &'a [CoherenceVerdict],
}

fn case_stream_seed(seed: u64, case_id: &str) -> u64 {
    let d = Sha256::digest(case_id.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    seed ^ u64::from_le_bytes(b)
}

/// Boxes to patch for a policy.
///
/// Random areas keep each detected box's size and place it uniformly at
/// random inside the image, seeded per case.
pub fn mask_boxes(
    case_id: &str,
    differences: &[Difference],
    verdicts: &[CoherenceVerdict],
    policy: &MaskPolicy,
) -> Result<Vec<NormalizedBBox>> {
    let needs_verdicts = matches!(
        policy.kind,
        MaskKind::CoherentDifferences | MaskKind::NonCoherentDifferences
    );
    if needs_verdicts && differences.len() != verdicts.len() {
        return Err(Error::LengthMismatch {
            what: "differences vs verdicts",
            left: differences.len(),
            right: verdicts.len(),
        });
    }
    let boxes = match policy.kind {
        MaskKind::None => Vec::new(),
        MaskKind::AllDifferences => differences.iter().map(|d| d.bbox).collect(),
        MaskKind::CoherentDifferences => differences
            .iter()
            .zip(verdicts)
            .filter(|(_, v)| v.decision)
            .map(|(d, _)| d.bbox)
            .collect(),
        MaskKind::NonCoherentDifferences => differences
            .iter()
            .zip(verdicts)
            .filter(|(_, v)| !v.decision)
            .map(|(d, _)| d.bbox)
            .collect(),
        MaskKind::RandomAreas => {
            let seed = policy
                .seed
                .ok_or_else(|| Error::InvalidCase("random_areas policy requires a seed".into()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(case_stream_seed(seed, case_id));
            differences
                .iter()
                .map(|d| {
                    let (w, h) = (d.bbox.width(), d.bbox.height());
                    let x = rng.random::<f64>() * (1.0 - w);
                    let y = rng.random::<f64>() * (1.0 - h);
                    NormalizedBBox::new(x, y, (x + w).min(1.0), (y + h).min(1.0))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(boxes)
}

/// Image-image similarity after patching the policy's regions on both images.
pub fn clip_i(input: &ScoringInput<'_>, policy: &MaskPolicy, embedder: &dyn Embedder) -> Result<f64> {
    let boxes = mask_boxes(input.case_id, input.differences, input.verdicts, policy)?;
    let original = fill_regions(input.original, &boxes, policy.fill);
    let edited = fill_regions(input.edited, &boxes, policy.fill);
    let a = embedder.embed_image(&original)?;
    let b = embedder.embed_image(&edited)?;
    cosine_similarity(&a, &b)
}

/// Image-text similarity between the patched edited image and the target caption.
pub fn clip_t(
    input: &ScoringInput<'_>,
    target_caption: &str,
    policy: &MaskPolicy,
    embedder: &dyn Embedder,
) -> Result<f64> {
    let boxes = mask_boxes(input.case_id, input.differences, input.verdicts, policy)?;
    let edited = fill_regions(input.edited, &boxes, policy.fill);
    let a = embedder.embed_image(&edited)?;
    let b = embedder.embed_text(target_caption)?;
    cosine_similarity(&a, &b)
}

/// Exact area of the union of boxes, in normalized units.
pub fn union_area(boxes: &[NormalizedBBox]) -> f64 {
    if boxes.is_empty() {
        return 0.0;
    }
    let mut xs: Vec<f64> = boxes.iter().flat_map(|b| [b.x_min(), b.x_max()]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let mut total = 0.0;
    for w in xs.windows(2) {
        let (x0, x1) = (w[0], w[1]);
        let mut spans: Vec<(f64, f64)> = boxes
            .iter()
            .filter(|b| b.x_min() <= x0 && b.x_max() >= x1)
            .map(|b| (b.y_min(), b.y_max()))
            .collect();
        if spans.is_empty() {
            continue;
        }
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut covered = 0.0;
        let (mut s, mut e) = spans[0];
        for &(ns, ne) in &spans[1..] {
            if ns > e {
                covered += e - s;
                s = ns;
                e = ne;
            } else {
                e = e.max(ne);
            }
        }
        covered += e - s;
        total += covered * (x1 - x0);
    }
    total.min(1.0)
}

/// One model's detections and verdicts for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub case_id: String,
    pub differences: Vec<Difference>,
    pub verdicts: Vec<CoherenceVerdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub model: String,
    pub cases: usize,
    pub correct_edits_pct: f64,
    pub unwanted_edit_area_pct: f64,
    pub no_visual_change_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub confidence_floor: f64,
    pub rows: Vec<RankingRow>,
}

fn ranking_row(model: &str, outcomes: &[CaseOutcome], floor: f64) -> Result<RankingRow> {
    let n = outcomes.len();
    let (mut correct, mut empty) = (0usize, 0usize);
    let mut unwanted_sum = 0.0;
    for o in outcomes {
        if o.differences.len() != o.verdicts.len() {
            return Err(Error::LengthMismatch {
                what: "differences vs verdicts",
                left: o.differences.len(),
                right: o.verdicts.len(),
            });
        }
        let kept: Vec<(&Difference, &CoherenceVerdict)> = o
            .differences
            .iter()
            .zip(&o.verdicts)
            .filter(|(d, _)| d.confidence >= floor)
            .collect();
        if kept.is_empty() {
            empty += 1;
        }
        if kept.iter().any(|(_, v)| v.decision) {
            correct += 1;
        }
        let bad: Vec<NormalizedBBox> = kept.iter().filter(|(_, v)| !v.decision).map(|(d, _)| d.bbox).collect();
        unwanted_sum += union_area(&bad);
    }
    let pct = |k: usize| if n == 0 { 0.0 } else { 100.0 * k as f64 / n as f64 };
    Ok(RankingRow {
        model: model.to_string(),
        cases: n,
        correct_edits_pct: pct(correct),
        unwanted_edit_area_pct: if n == 0 { 0.0 } else { 100.0 * unwanted_sum / n as f64 },
        no_visual_change_pct: pct(empty),
    })
}

/// The three ranking axes for each model. All models must cover the same
/// case ids.
pub fn ranking_axes(model_runs: &BTreeMap<String, Vec<CaseOutcome>>, confidence_floor: f64) -> Result<RankingReport> {
    let mut reference: Option<(&str, BTreeSet<&str>)> = None;
    for (model, outcomes) in model_runs {
        let ids: BTreeSet<&str> = outcomes.iter().map(|o| o.case_id.as_str()).collect();
        if ids.len() != outcomes.len() {
            return Err(Error::MismatchedCases(format!("{model} has duplicate case ids")));
        }
        match &reference {
            None => reference = Some((model, ids)),
            Some((m0, ids0)) if *ids0 != ids => {
                return Err(Error::MismatchedCases(format!(
                    "{model} and {m0} cover different cases"
                )));
            }
            _ => {}
        }
    }
    let rows = model_runs
        .iter()
        .map(|(model, outcomes)| {
            // canonical order; summation order then never depends on input order
            let mut sorted = outcomes.clone();
            sorted.sort_by(|a, b| a.case_id.cmp(&b.case_id));
            ranking_row(model, &sorted, confidence_floor)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankingReport { confidence_floor, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pearson: f64,
    pub spearman: f64,
    pub kendall: f64,
    pub n: usize,
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len();
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i].total_cmp(&x[j]) as i64;
            let dy = y[i].total_cmp(&y[j]) as i64;
            match (dx, dy) {
                (0, 0) => {}
                (0, _) => tie_x += 1,
                (_, 0) => tie_y += 1,
                _ if dx == dy => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n0 = concordant + discordant;
    let denom = (((n0 + tie_x) as f64) * ((n0 + tie_y) as f64)).sqrt();
    if denom == 0.0 {
        return Err(Error::UndefinedCorrelation("all pairs tied".into()));
    }
    Ok(((concordant - discordant) as f64 / denom).clamp(-1.0, 1.0))
}

/// Pearson, Spearman (average ranks) and Kendall tau-b.
pub fn correlate(metric_scores: &[f64], human_scores: &[f64]) -> Result<CorrelationReport> {
    if metric_scores.len() != human_scores.len() {
        return Err(Error::LengthMismatch {
            what: "metric vs human scores",
            left: metric_scores.len(),
            right: human_scores.len(),
        });
    }
    if metric_scores.len() < 3 {
        return Err(Error::UndefinedCorrelation(format!(
            "{} samples, need at least 3",
            metric_scores.len()
        )));
    }
    if metric_scores.iter().chain(human_scores).any(|v| !v.is_finite()) {
        return Err(Error::UndefinedCorrelation("non-finite score".into()));
    }
    Ok(CorrelationReport {
        pearson: pearson(metric_scores, human_scores)?,
        spearman: pearson(&average_ranks(metric_scores), &average_ranks(human_scores))?,
        kendall: kendall_tau_b(metric_scores, human_scores)?,
        n: metric_scores.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    ClipI,
    ClipT,
}

impl SimilarityMetric {
    pub fn label(&self) -> &'static str {
        match self {
            SimilarityMetric::ClipI => "CLIP-I",
            SimilarityMetric::ClipT => "CLIP-T",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanDimension {
    BackgroundPreservation,
    PromptAdherence,
}

impl HumanDimension {
    pub fn of(&self, r: &HumanRatings) -> f64 {
        f64::from(match self {
            HumanDimension::BackgroundPreservation => r.background_preservation,
            HumanDimension::PromptAdherence => r.prompt_adherence,
        })
    }
}

/// Rows of the correlation table: CLIP-I against background preservation and
/// CLIP-T against prompt adherence, each under four masking policies.
pub const STUDY_ROWS: [(SimilarityMetric, MaskKind, HumanDimension); 8] = [
    (
        SimilarityMetric::ClipI,
        MaskKind::None,
        HumanDimension::BackgroundPreservation,
    ),
    (
        SimilarityMetric::ClipI,
        MaskKind::RandomAreas,
        HumanDimension::BackgroundPreservation,
    ),
    (
        SimilarityMetric::ClipI,
        MaskKind::AllDifferences,
        HumanDimension::BackgroundPreservation,
    ),
    (
        SimilarityMetric::ClipI,
        MaskKind::CoherentDifferences,
        HumanDimension::BackgroundPreservation,
    ),
    (SimilarityMetric::ClipT, MaskKind::None, HumanDimension::PromptAdherence),
    (
        SimilarityMetric::ClipT,
        MaskKind::RandomAreas,
        HumanDimension::PromptAdherence,
    ),
    (
        SimilarityMetric::ClipT,
        MaskKind::AllDifferences,
        HumanDimension::PromptAdherence,
    ),
    (
        SimilarityMetric::ClipT,
        MaskKind::NonCoherentDifferences,
        HumanDimension::PromptAdherence,
    ),
];

/// Per-case similarity scores under each policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub case_id: String,
    /// Grouping key for per-group aggregation, e.g. the editing model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub ratings: Option<HumanRatings>,
    pub clip_i: BTreeMap<MaskKind, f64>,
    pub clip_t: BTreeMap<MaskKind, f64>,
}

impl CaseScores {
    fn score(&self, metric: SimilarityMetric, kind: MaskKind) -> Option<f64> {
        match metric {
            SimilarityMetric::ClipI => self.clip_i.get(&kind).copied(),
            SimilarityMetric::ClipT => self.clip_t.get(&kind).copied(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationUnit {
    #[default]
    PerCase,
    /// Correlate group means (cases sharing [`CaseScores::group`]).
    PerGroupMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub metric: SimilarityMetric,
    pub policy: MaskKind,
    pub human_dimension: HumanDimension,
    pub result: Option<CorrelationReport>,
    /// Set when the correlation is undefined.
    pub error: Option<String>,
    /// Cases dropped because ratings or scores were missing.
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub unit: CorrelationUnit,
    pub rows: Vec<CorrelationRow>,
}

/// Computes the eight-row correlation table.
pub fn correlation_study(cases: &[CaseScores], unit: CorrelationUnit) -> CorrelationTable {
    let mut sorted: Vec<&CaseScores> = cases.iter().collect();
    sorted.sort_by(|a, b| a.case_id.cmp(&b.case_id));

    let rows = STUDY_ROWS
        .iter()
        .map(|&(metric, policy, dim)| {
            let mut pairs: Vec<(Option<&str>, f64, f64)> = Vec::new();
            let mut excluded = 0;
            for c in &sorted {
                match (c.ratings.as_ref(), c.score(metric, policy)) {
                    (Some(r), Some(s)) => pairs.push((c.group.as_deref(), s, dim.of(r))),
                    _ => excluded += 1,
                }
            }
            let (x, y): (Vec<f64>, Vec<f64>) = match unit {
                CorrelationUnit::PerCase => pairs.iter().map(|p| (p.1, p.2)).unzip(),
                CorrelationUnit::PerGroupMean => {
                    let mut groups: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
                    for (g, s, h) in &pairs {
                        let e = groups.entry(g.unwrap_or("")).or_default();
                        e.0 += s;
                        e.1 += h;
                        e.2 += 1;
                    }
                    groups.values().map(|(s, h, n)| (s / *n as f64, h / *n as f64)).unzip()
                }
            };
            let (result, error) = match correlate(&x, &y) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            CorrelationRow {
                metric,
                policy,
                human_dimension: dim,
                result,
                error,
                excluded,
            }
        })
        .collect();
    CorrelationTable { unit, rows }
}
