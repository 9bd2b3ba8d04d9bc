//! Training-data construction from detection-style annotations.
//!
//! Stage 1 mines pairs of visually similar annotated images and labels the
//! object-level differences between them. Stage 2 plans inpainting jobs: per
//! image it selects up to four large, non-overlapping objects and assigns each
//! an operation, producing a manifest for an external inpainting service.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::types::{iou, EditCommand, GroundTruthDifference, NormalizedBBox};

pub const DEFAULT_SIM_THRESHOLD: f64 = 0.6;
pub const DEFAULT_MAX_CLASS_DIFF: usize = 15;
pub const DEFAULT_EDIT_IOU: f64 = 0.5;
pub const DEFAULT_MIN_SIDE_PX: u32 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedObject {
    pub class_name: String,
    pub bbox: NormalizedBBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<AnnotatedObject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl AnnotatedImage {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCase(format!(
                "{}: width and height must be positive",
                self.image_id
            )));
        }
        if let Some(e) = &self.embedding {
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidCase(format!(
                    "{}: embedding norm {norm} is not 1",
                    self.image_id
                )));
            }
        }
        Ok(())
    }

    pub fn class_set(&self) -> BTreeSet<&str> {
        self.objects.iter().map(|o| o.class_name.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Pair {
    pub image_a: String,
    pub image_b: String,
    pub cosine_similarity: f64,
    pub labels: Vec<GroundTruthDifference>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMiningParams {
    pub sim_threshold: f64,
    pub max_class_diff: usize,
    pub edit_iou_threshold: f64,
    pub min_side_px: u32,
}

impl Default for PairMiningParams {
    fn default() -> Self {
        Self {
            sim_threshold: DEFAULT_SIM_THRESHOLD,
            max_class_diff: DEFAULT_MAX_CLASS_DIFF,
            edit_iou_threshold: DEFAULT_EDIT_IOU,
            min_side_px: DEFAULT_MIN_SIDE_PX,
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// All unordered pairs with cosine similarity above the threshold, at least
/// one shared class and fewer than `max_class_diff` differing classes.
///
/// Output is sorted by `(image_a, image_b)` with `image_a < image_b`. Labels
/// are left empty; see [`label_pair`].
pub fn mine_pairs(corpus: &[AnnotatedImage], sim_threshold: f64, max_class_diff: usize) -> Result<Vec<Stage1Pair>> {
    let mut sorted: Vec<&AnnotatedImage> = corpus.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let mut dim = None;
    let embeddings = sorted
        .iter()
        .map(|img| {
            let e = img
                .embedding
                .as_deref()
                .ok_or_else(|| Error::MissingEmbedding(img.image_id.clone()))?;
            match dim {
                None => dim = Some(e.len()),
                Some(d) if d != e.len() => {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: e.len(),
                    })
                }
                _ => {}
            }
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    let classes: Vec<BTreeSet<&str>> = sorted.iter().map(|i| i.class_set()).collect();

    let pairs = (0..sorted.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let (sorted, embeddings, classes) = (&sorted, &embeddings, &classes);
            (i + 1..sorted.len()).filter_map(move |j| {
                let sim = cosine(embeddings[i], embeddings[j]);
                if sim <= sim_threshold {
                    return None;
                }
                if classes[i].is_disjoint(&classes[j]) {
                    return None;
                }
                if classes[i].symmetric_difference(&classes[j]).count() >= max_class_diff {
                    return None;
                }
                Some(Stage1Pair {
                    image_a: sorted[i].image_id.clone(),
                    image_b: sorted[j].image_id.clone(),
                    cosine_similarity: sim,
                    labels: Vec::new(),
                })
            })
        })
        .collect();
    Ok(pairs)
}

/// Drops objects whose box is narrower or shorter than `min_side_px` pixels.
pub fn filter_small(objects: &[AnnotatedObject], min_side_px: u32, width: u32, height: u32) -> Vec<AnnotatedObject> {
    let min = f64::from(min_side_px);
    objects
        .iter()
        .filter(|o| {
            // tolerate float noise right at the boundary
            o.bbox.width() * f64::from(width) >= min - 1e-9 && o.bbox.height() * f64::from(height) >= min - 1e-9
        })
        .cloned()
        .collect()
}

/// Confirms that an object class is really absent from an image before an
/// ADD or REMOVE label is emitted. Backed by an external open-vocabulary
/// detector in practice.
pub trait AbsenceVerifier: Sync {
    fn confirm_absent(&self, image: &AnnotatedImage, class_name: &str) -> bool;
}

/// Verifier that trusts the annotations.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrustAnnotations;

impl AbsenceVerifier for TrustAnnotations {
    fn confirm_absent(&self, _image: &AnnotatedImage, _class_name: &str) -> bool {
        true
    }
}

/// Labels the differences from image `a` to image `b` with the default
/// minimum object side and no absence verification.
pub fn label_pair(a: &AnnotatedImage, b: &AnnotatedImage, edit_iou_threshold: f64) -> Vec<GroundTruthDifference> {
    label_pair_with(a, b, edit_iou_threshold, DEFAULT_MIN_SIDE_PX, &TrustAnnotations)
}

/// Labels the differences from image `a` to image `b`.
///
/// Objects of classes only in `a` become REMOVE, objects of classes only in
/// `b` become ADD, one per instance. Before that, cross-image pairs of such
/// exclusive objects with IoU at or above `edit_iou_threshold` are greedily
/// paired (highest IoU first) into one EDIT anchored at `b`'s box; paired
/// objects emit nothing else. Objects of classes present in both images are
/// unchanged.
pub fn label_pair_with(
    a: &AnnotatedImage,
    b: &AnnotatedImage,
    edit_iou_threshold: f64,
    min_side_px: u32,
    verifier: &dyn AbsenceVerifier,
) -> Vec<GroundTruthDifference> {
    let objs_a = filter_small(&a.objects, min_side_px, a.width, a.height);
    let objs_b = filter_small(&b.objects, min_side_px, b.width, b.height);
    let classes_a: BTreeSet<&str> = objs_a.iter().map(|o| o.class_name.as_str()).collect();
    let classes_b: BTreeSet<&str> = objs_b.iter().map(|o| o.class_name.as_str()).collect();

    let only_a: Vec<usize> = (0..objs_a.len())
        .filter(|&i| !classes_b.contains(objs_a[i].class_name.as_str()))
        .collect();
    let only_b: Vec<usize> = (0..objs_b.len())
        .filter(|&j| !classes_a.contains(objs_b[j].class_name.as_str()))
        .collect();

    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for &i in &only_a {
        for &j in &only_b {
            let v = iou(&objs_a[i].bbox, &objs_b[j].bbox);
            if v >= edit_iou_threshold {
                candidates.push((v, i, j));
            }
        }
    }
    candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    let mut used_a = vec![false; objs_a.len()];
    let mut used_b = vec![false; objs_b.len()];
    let mut edits = Vec::new();
    for (_, i, j) in candidates {
        if used_a[i] || used_b[j] {
            continue;
        }
        used_a[i] = true;
        used_b[j] = true;
        edits.push(j);
    }
    edits.sort_unstable();

    let mut labels = Vec::new();
    for &i in &only_a {
        if !used_a[i] && verifier.confirm_absent(b, &objs_a[i].class_name) {
            labels.push(GroundTruthDifference {
                command: EditCommand::Remove,
                subject: objs_a[i].class_name.clone(),
                bbox: objs_a[i].bbox,
                coherent: None,
            });
        }
    }
    for &j in &only_b {
        if !used_b[j] && verifier.confirm_absent(a, &objs_b[j].class_name) {
            labels.push(GroundTruthDifference {
                command: EditCommand::Add,
                subject: objs_b[j].class_name.clone(),
                bbox: objs_b[j].bbox,
                coherent: None,
            });
        }
    }
    for j in edits {
        labels.push(GroundTruthDifference {
            command: EditCommand::Edit,
            subject: objs_b[j].class_name.clone(),
            bbox: objs_b[j].bbox,
            coherent: None,
        });
    }
    labels
}

/// Mines pairs and labels each one.
pub fn mine_and_label(corpus: &[AnnotatedImage], params: &PairMiningParams) -> Result<Vec<Stage1Pair>> {
    let by_id: HashMap<&str, &AnnotatedImage> = corpus.iter().map(|i| (i.image_id.as_str(), i)).collect();
    let mut pairs = mine_pairs(corpus, params.sim_threshold, params.max_class_diff)?;
    pairs.par_iter_mut().for_each(|p| {
        let a = by_id[p.image_a.as_str()];
        let b = by_id[p.image_b.as_str()];
        p.labels = label_pair_with(a, b, params.edit_iou_threshold, params.min_side_px, &TrustAnnotations);
    });
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// Stage 2
// ---------------------------------------------------------------------------

/// Requested proportions. `unchanged` is the share of images left without any
/// operation; `add`, `remove` and `edit` are relative operation shares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpBalance {
    pub add: f64,
    pub remove: f64,
    pub edit: f64,
    pub unchanged: f64,
}

impl Default for OpBalance {
    fn default() -> Self {
        let unchanged = 19.0 / 97.0;
        let each = (1.0 - unchanged) / 3.0;
        Self {
            add: each,
            remove: each,
            edit: each,
            unchanged,
        }
    }
}

impl OpBalance {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.add, self.remove, self.edit, self.unchanged];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidProportions(format!(
                "{parts:?} has negative or non-finite entries"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidProportions(format!("{parts:?} sums to {sum}")));
        }
        if self.add + self.remove + self.edit <= 0.0 && self.unchanged < 1.0 {
            return Err(Error::InvalidProportions("no operation share".into()));
        }
        Ok(())
    }

    fn op_shares(&self) -> [f64; 3] {
        let t = self.add + self.remove + self.edit;
        [self.add / t, self.remove / t, self.edit / t]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InpaintParams {
    pub steps: u32,
    pub guidance: f64,
}

impl Default for InpaintParams {
    fn default() -> Self {
        Self {
            steps: 100,
            guidance: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Params {
    pub max_objects: usize,
    pub min_area_fraction: f64,
    pub max_overlap: f64,
    pub color_change_fraction: f64,
    pub inpaint: InpaintParams,
    pub jpeg_qualities: Vec<u8>,
}

impl Default for Stage2Params {
    fn default() -> Self {
        Self {
            max_objects: 4,
            min_area_fraction: 0.03,
            max_overlap: 0.05,
            color_change_fraction: 0.3,
            inpaint: InpaintParams::default(),
            jpeg_qualities: vec![15, 50],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    ColorChange,
    Substitution,
}

/// Image on which the inpainting service operates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InpaintSide {
    Original,
    Edited,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetObject {
    pub class_name: String,
    pub bbox: NormalizedBBox,
    pub mask_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperationRecord {
    pub op: EditCommand,
    pub target_object: TargetObject,
    pub edit_kind: Option<EditKind>,
    /// Filled later by a captioning/LLM service for substitutions.
    pub substitution_target: Option<String>,
    pub inpaint_params: InpaintParams,
    pub which_side: InpaintSide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JpegDecision {
    pub quality: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Record {
    pub image_id: String,
    pub operations: Vec<OperationRecord>,
    /// Set by [`plan_augmentation`].
    pub jpeg: Option<JpegDecision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub jpeg_qualities: Vec<u8>,
    pub apply_probability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Manifest {
    pub seed: u64,
    pub op_balance: OpBalance,
    pub augmentation: AugmentationSpec,
    pub records: Vec<Stage2Record>,
}

impl Stage2Manifest {
    pub fn op_counts(&self) -> OpCounts {
        let mut c = OpCounts::default();
        for r in &self.records {
            if r.operations.is_empty() {
                c.unchanged_images += 1;
            }
            for op in &r.operations {
                match op.op {
                    EditCommand::Add => c.add += 1,
                    EditCommand::Remove => c.remove += 1,
                    EditCommand::Edit => {
                        c.edit += 1;
                        if op.edit_kind == Some(EditKind::ColorChange) {
                            c.color_change += 1;
                        }
                    }
                }
            }
        }
        c.images = self.records.len();
        c
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub images: usize,
    pub unchanged_images: usize,
    pub add: usize,
    pub remove: usize,
    pub edit: usize,
    pub color_change: usize,
}

impl OpCounts {
    pub fn operations(&self) -> usize {
        self.add + self.remove + self.edit
    }
}

/// Binary object mask at image resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn from_image(img: &Image) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            bits: img.pixels().map(|p| p.0.iter().any(|&c| c > 0)).collect(),
        }
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.area() as f64 / self.bits.len() as f64
    }

    pub fn intersection(&self, other: &Mask) -> Option<usize> {
        ((self.width, self.height) == (other.width, other.height))
            .then(|| self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count())
    }
}

/// Resolves `mask_ref` strings to masks.
pub trait MaskResolver: Sync {
    fn resolve(&self, mask_ref: &str) -> Option<Mask>;
}

/// No masks available; everything falls back to boxes.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoMasks;

impl MaskResolver for NoMasks {
    fn resolve(&self, _mask_ref: &str) -> Option<Mask> {
        None
    }
}

/// Loads masks from image files relative to a base directory; any non-black
/// pixel is inside the mask.
#[derive(Debug, Clone)]
pub struct FileMasks {
    pub base: PathBuf,
}

impl FileMasks {
    pub fn new(base: impl AsRef<Path>) -> Self {
        Self {
            base: base.as_ref().to_path_buf(),
        }
    }
}

impl MaskResolver for FileMasks {
    fn resolve(&self, mask_ref: &str) -> Option<Mask> {
        Image::open(self.base.join(mask_ref)).ok().map(|i| Mask::from_image(&i))
    }
}

/// Geometry used for the area and overlap filters.
enum Region {
    Mask(Mask),
    Box(NormalizedBBox),
}

impl Region {
    fn area_fraction(&self) -> f64 {
        match self {
            Region::Mask(m) => m.area_fraction(),
            Region::Box(b) => b.area(),
        }
    }
}

/// Overlap as intersection over the smaller region. Masks are compared
/// exactly when both resolve; otherwise boxes are used.
fn overlap(a: &Region, a_box: &NormalizedBBox, b: &Region, b_box: &NormalizedBBox) -> f64 {
    if let (Region::Mask(ma), Region::Mask(mb)) = (a, b) {
        if let Some(inter) = ma.intersection(mb) {
            let smaller = ma.area().min(mb.area());
            return if smaller == 0 {
                0.0
            } else {
                inter as f64 / smaller as f64
            };
        }
    }
    let smaller = a_box.area().min(b_box.area());
    a_box.intersection_area(b_box) / smaller
}

/// A diagnostic emitted while planning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanWarning {
    pub image_id: String,
    pub message: String,
}

fn regions_for(img: &AnnotatedImage, masks: &dyn MaskResolver, warnings: &mut Vec<PlanWarning>) -> Vec<Region> {
    img.objects
        .iter()
        .map(|o| match &o.mask_ref {
            Some(r) => match masks.resolve(r) {
                Some(m) if (m.width, m.height) == (img.width, img.height) => Region::Mask(m),
                _ => {
                    warnings.push(PlanWarning {
                        image_id: img.image_id.clone(),
                        message: format!("mask {r:?} did not resolve; using box overlap rule"),
                    });
                    Region::Box(o.bbox)
                }
            },
            None => Region::Box(o.bbox),
        })
        .collect()
}

/// Splits `n` slots by `shares` with largest-remainder rounding.
fn quotas(n: usize, shares: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = shares.iter().map(|s| s * n as f64).collect();
    let mut q: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rest = n - q.iter().sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..shares.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        (raw[b] - raw[b].floor())
            .total_cmp(&(raw[a] - raw[a].floor()))
            .then(a.cmp(&b))
    });
    for i in by_remainder {
        if rest == 0 {
            break;
        }
        q[i] += 1;
        rest -= 1;
    }
    q
}

/// Plans Stage-2 inpainting jobs.
///
/// Per image, eligible objects (area at least `min_area_fraction`) are visited
/// in a seeded random order and kept while they overlap every kept object by at
/// most `max_overlap`, up to `max_objects`. Images are then marked unchanged to
/// reach the requested share, and operations and edit kinds are dealt from
/// shuffled quotas so the global balance matches the request. Identical
/// inputs and seed give an identical manifest.
pub fn build_stage2_manifest(
    corpus: &[AnnotatedImage],
    seed: u64,
    balance: &OpBalance,
    params: &Stage2Params,
    masks: &dyn MaskResolver,
) -> Result<(Stage2Manifest, Vec<PlanWarning>)> {
    balance.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();

    let mut sorted: Vec<&AnnotatedImage> = corpus.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    // object selection
    let mut picks: Vec<Vec<usize>> = Vec::with_capacity(sorted.len());
    for img in &sorted {
        let regions = regions_for(img, masks, &mut warnings);
        let mut eligible: Vec<usize> = (0..img.objects.len())
            .filter(|&i| regions[i].area_fraction() >= params.min_area_fraction)
            .collect();
        eligible.shuffle(&mut rng);
        let mut chosen: Vec<usize> = Vec::new();
        for i in eligible {
            if chosen.len() >= params.max_objects {
                break;
            }
            let fits = chosen.iter().all(|&k| {
                overlap(&regions[i], &img.objects[i].bbox, &regions[k], &img.objects[k].bbox) <= params.max_overlap
            });
            if fits {
                chosen.push(i);
            }
        }
        chosen.sort_unstable();
        picks.push(chosen);
    }

    // unchanged images: forced ones count toward the requested share
    let forced = picks.iter().filter(|p| p.is_empty()).count();
    let target_unchanged = (balance.unchanged * sorted.len() as f64).round() as usize;
    let mut changeable: Vec<usize> = (0..picks.len()).filter(|&i| !picks[i].is_empty()).collect();
    changeable.shuffle(&mut rng);
    for &i in changeable.iter().take(target_unchanged.saturating_sub(forced)) {
        picks[i].clear();
    }

    // operations dealt from shuffled quotas
    let slots: usize = picks.iter().map(Vec::len).sum();
    let q = quotas(slots, &balance.op_shares());
    let mut ops: Vec<EditCommand> = Vec::with_capacity(slots);
    for (cmd, n) in [EditCommand::Add, EditCommand::Remove, EditCommand::Edit]
        .into_iter()
        .zip(q)
    {
        ops.extend(std::iter::repeat_n(cmd, n));
    }
    ops.shuffle(&mut rng);

    let n_edit = ops.iter().filter(|c| **c == EditCommand::Edit).count();
    let kq = quotas(
        n_edit,
        &[params.color_change_fraction, 1.0 - params.color_change_fraction],
    );
    let mut kinds: Vec<EditKind> = Vec::with_capacity(n_edit);
    kinds.extend(std::iter::repeat_n(EditKind::ColorChange, kq[0]));
    kinds.extend(std::iter::repeat_n(EditKind::Substitution, kq[1]));
    kinds.shuffle(&mut rng);

    let mut ops = ops.into_iter();
    let mut kinds = kinds.into_iter();
    let records = sorted
        .iter()
        .zip(&picks)
        .map(|(img, chosen)| Stage2Record {
            image_id: img.image_id.clone(),
            operations: chosen
                .iter()
                .map(|&i| {
                    let op = ops.next().expect("one op per slot");
                    let obj = &img.objects[i];
                    let edit_kind = (op == EditCommand::Edit).then(|| kinds.next().expect("one kind per edit"));
                    OperationRecord {
                        op,
                        target_object: TargetObject {
                            class_name: obj.class_name.clone(),
                            bbox: obj.bbox,
                            mask_ref: obj.mask_ref.clone(),
                        },
                        edit_kind,
                        substitution_target: None,
                        inpaint_params: params.inpaint,
                        which_side: if op == EditCommand::Add {
                            InpaintSide::Original
                        } else {
                            InpaintSide::Edited
                        },
                    }
                })
                .collect(),
            jpeg: None,
        })
        .collect();

    Ok((
        Stage2Manifest {
            seed,
            op_balance: *balance,
            augmentation: AugmentationSpec {
                jpeg_qualities: params.jpeg_qualities.clone(),
                apply_probability: None,
            },
            records,
        },
        warnings,
    ))
}

/// Decides per record whether to JPEG-compress the pair, and at which quality.
///
/// Uses a random stream derived from the manifest seed, separate from the one
/// used for object selection.
pub fn plan_augmentation(mut manifest: Stage2Manifest, apply_probability: f64) -> Result<Stage2Manifest> {
    if !(0.0..=1.0).contains(&apply_probability) {
        return Err(Error::InvalidProbability(apply_probability));
    }
    if manifest.augmentation.jpeg_qualities.is_empty() {
        return Err(Error::InvalidProportions("no JPEG qualities to choose from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
    rng.set_stream(1);
    let qualities = manifest.augmentation.jpeg_qualities.clone();
    for r in &mut manifest.records {
        let apply = rng.random::<f64>() < apply_probability;
        let quality = apply.then(|| qualities[rng.random_range(0..qualities.len())]);
        r.jpeg = Some(JpegDecision { quality });
    }
    manifest.augmentation.apply_probability = Some(apply_probability);
    Ok(manifest)
}

/// A constraint violated by a manifest record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub image_id: String,
    pub message: String,
}

/// Re-checks every record against the selection constraints.
pub fn validate_manifest(
    manifest: &Stage2Manifest,
    corpus: &[AnnotatedImage],
    params: &Stage2Params,
    masks: &dyn MaskResolver,
) -> Vec<Violation> {
    let by_id: HashMap<&str, &AnnotatedImage> = corpus.iter().map(|i| (i.image_id.as_str(), i)).collect();
    let mut out = Vec::new();
    let mut v = |id: &str, m: String| {
        out.push(Violation {
            image_id: id.to_string(),
            message: m,
        })
    };
    for r in &manifest.records {
        let Some(img) = by_id.get(r.image_id.as_str()) else {
            v(&r.image_id, "image not in corpus".into());
            continue;
        };
        if r.operations.len() > params.max_objects {
            v(&r.image_id, format!("{} operations", r.operations.len()));
        }
        let regions: Vec<(Region, NormalizedBBox)> = r
            .operations
            .iter()
            .map(|op| {
                let t = &op.target_object;
                let region = t
                    .mask_ref
                    .as_deref()
                    .and_then(|m| masks.resolve(m))
                    .filter(|m| (m.width, m.height) == (img.width, img.height))
                    .map(Region::Mask)
                    .unwrap_or(Region::Box(t.bbox));
                (region, t.bbox)
            })
            .collect();
        for (k, op) in r.operations.iter().enumerate() {
            let area = regions[k].0.area_fraction();
            if area < params.min_area_fraction {
                v(
                    &r.image_id,
                    format!("target {} covers {area:.4} of the image", op.target_object.class_name),
                );
            }
            if (op.op == EditCommand::Edit) != op.edit_kind.is_some() {
                v(
                    &r.image_id,
                    format!("{} record with edit_kind {:?}", op.op, op.edit_kind),
                );
            }
            let expected_side = if op.op == EditCommand::Add {
                InpaintSide::Original
            } else {
                InpaintSide::Edited
            };
            if op.which_side != expected_side {
                v(
                    &r.image_id,
                    format!("{} record inpaints the {:?} side", op.op, op.which_side),
                );
            }
            for j in k + 1..r.operations.len() {
                let o = overlap(&regions[k].0, &regions[k].1, &regions[j].0, &regions[j].1);
                if o > params.max_overlap {
                    v(&r.image_id, format!("targets {k} and {j} overlap by {o:.4}"));
                }
            }
        }
    }
    out
}
