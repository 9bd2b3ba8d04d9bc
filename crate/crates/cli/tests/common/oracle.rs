//! Exhaustive reference for Stage-1 pair mining and labeling.

use std::collections::BTreeSet;

use editdiff_core::datagen::{AnnotatedImage, AnnotatedObject, Stage1Pair};
use editdiff_core::{EditCommand, GroundTruthDifference};

fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn big_enough(o: &AnnotatedObject, img: &AnnotatedImage, min_side: f64) -> bool {
    let [x0, y0, x1, y1] = o.bbox.to_array();
    (x1 - x0) * img.width as f64 >= min_side - 1e-9 && (y1 - y0) * img.height as f64 >= min_side - 1e-9
}

fn label(a: &AnnotatedImage, b: &AnnotatedImage, edit_iou: f64, min_side: f64) -> Vec<GroundTruthDifference> {
    let oa: Vec<&AnnotatedObject> = a.objects.iter().filter(|o| big_enough(o, a, min_side)).collect();
    let ob: Vec<&AnnotatedObject> = b.objects.iter().filter(|o| big_enough(o, b, min_side)).collect();
    let ca: BTreeSet<&str> = oa.iter().map(|o| o.class_name.as_str()).collect();
    let cb: BTreeSet<&str> = ob.iter().map(|o| o.class_name.as_str()).collect();
    let xa: Vec<usize> = (0..oa.len())
        .filter(|&i| !cb.contains(oa[i].class_name.as_str()))
        .collect();
    let xb: Vec<usize> = (0..ob.len())
        .filter(|&j| !ca.contains(ob[j].class_name.as_str()))
        .collect();

    // repeatedly take the best remaining pair at or above the threshold
    let mut free_a: BTreeSet<usize> = xa.iter().copied().collect();
    let mut free_b: BTreeSet<usize> = xb.iter().copied().collect();
    let mut edits = Vec::new();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for &i in &free_a {
            for &j in &free_b {
                let v = box_iou(oa[i].bbox.to_array(), ob[j].bbox.to_array());
                if v >= edit_iou && best.is_none_or(|(bv, _, _)| v > bv) {
                    best = Some((v, i, j));
                }
            }
        }
        let Some((_, i, j)) = best else { break };
        free_a.remove(&i);
        free_b.remove(&j);
        edits.push(j);
    }
    edits.sort_unstable();

    let mk = |command, o: &AnnotatedObject| GroundTruthDifference {
        command,
        subject: o.class_name.clone(),
        bbox: o.bbox,
        coherent: None,
    };
    let mut out: Vec<GroundTruthDifference> = Vec::new();
    out.extend(free_a.iter().map(|&i| mk(EditCommand::Remove, oa[i])));
    out.extend(free_b.iter().map(|&j| mk(EditCommand::Add, ob[j])));
    out.extend(edits.iter().map(|&j| mk(EditCommand::Edit, ob[j])));
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Every ordered-by-id pair passing the three filters, labeled.
pub fn mine(corpus: &[AnnotatedImage], sim: f64, max_diff: usize, edit_iou: f64, min_side: f64) -> Vec<Stage1Pair> {
    let mut out = Vec::new();
    for a in corpus {
        for b in corpus {
            if a.image_id >= b.image_id {
                continue;
            }
            let s = cosine(a.embedding.as_ref().unwrap(), b.embedding.as_ref().unwrap());
            let ca: BTreeSet<&str> = a.objects.iter().map(|o| o.class_name.as_str()).collect();
            let cb: BTreeSet<&str> = b.objects.iter().map(|o| o.class_name.as_str()).collect();
            let shared = ca.iter().filter(|c| cb.contains(*c)).count();
            let differing = ca.len() + cb.len() - 2 * shared;
            if s > sim && shared >= 1 && differing < max_diff {
                out.push(Stage1Pair {
                    image_a: a.image_id.clone(),
                    image_b: b.image_id.clone(),
                    cosine_similarity: s,
                    labels: label(a, b, edit_iou, min_side),
                });
            }
        }
    }
    out.sort_by(|x, y| (&x.image_a, &x.image_b).cmp(&(&y.image_a, &y.image_b)));
    out
}
