//! Brute-force AP reference: pooled ranking per category, greedy matching
//! with area-range ignores, and precision taken as the maximum over every
//! operating point at or beyond each recall level.

pub struct OCase {
    pub id: String,
    pub width: u32,
    pub height: u32,
    /// (box, confidence, category)
    pub preds: Vec<([f64; 4], f64, usize)>,
    /// (box, category)
    pub gts: Vec<([f64; 4], usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OSuite {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    pub per_category: Vec<Option<f64>>,
}

const TOL: f64 = 1e-12;

fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = a[2].min(b[2]) - a[0].max(b[0]);
    let ih = a[3].min(b[3]) - a[1].max(b[1]);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    (inter / union).min(1.0)
}

/// Snapped to 1e-6 px² so areas exactly on a bucket edge are stable.
fn pixel_area(b: [f64; 4], w: u32, h: u32) -> f64 {
    let a = (b[2] - b[0]) * w as f64 * ((b[3] - b[1]) * h as f64);
    (a * 1e6).round() / 1e6
}

fn ap_at(cases: &[&OCase], cat: usize, lo: f64, hi: f64, t: f64) -> Option<f64> {
    let inside = |b: [f64; 4], c: &OCase| {
        let a = pixel_area(b, c.width, c.height);
        lo <= a && a < hi
    };
    let mut hits: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut positives = 0;
    for (ci, c) in cases.iter().enumerate() {
        let gts: Vec<([f64; 4], bool)> = c
            .gts
            .iter()
            .filter(|g| g.1 == cat)
            .map(|g| (g.0, !inside(g.0, c)))
            .collect();
        positives += gts.iter().filter(|g| !g.1).count();
        let mut preds: Vec<(usize, [f64; 4], f64)> = c
            .preds
            .iter()
            .enumerate()
            .filter(|(_, p)| p.2 == cat)
            .map(|(i, p)| (i, p.0, p.1))
            .collect();
        preds.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
        let mut taken = vec![false; gts.len()];
        for (pi, pb, conf) in preds {
            let mut pick: Option<usize> = None;
            for g in 0..gts.len() {
                if taken[g] || iou(pb, gts[g].0) + TOL < t {
                    continue;
                }
                pick = match pick {
                    None => Some(g),
                    Some(k) => {
                        let better = if gts[k].1 != gts[g].1 {
                            gts[k].1
                        } else {
                            iou(pb, gts[g].0) > iou(pb, gts[k].0)
                        };
                        Some(if better { g } else { k })
                    }
                };
            }
            match pick {
                Some(g) => {
                    taken[g] = true;
                    if !gts[g].1 {
                        hits.push((conf, ci, pi, true));
                    }
                }
                None if inside(pb, c) => hits.push((conf, ci, pi, false)),
                None => {}
            }
        }
    }
    hits.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    if positives == 0 {
        return if hits.is_empty() { None } else { Some(0.0) };
    }
    let mut points = Vec::new();
    let mut tp = 0;
    for (k, h) in hits.iter().enumerate() {
        tp += usize::from(h.3);
        points.push((tp as f64 / positives as f64, tp as f64 / (k + 1) as f64));
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        total += points.iter().filter(|p| p.0 >= level).map(|p| p.1).fold(0.0, f64::max);
    }
    Some(total / 101.0)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn suite_value(cases: &[&OCase], categories: usize, lo: f64, hi: f64, ts: &[f64]) -> (Option<f64>, Vec<Option<f64>>) {
    let per: Vec<Option<f64>> = (0..categories)
        .map(|k| {
            mean(
                &ts.iter()
                    .filter_map(|&t| ap_at(cases, k, lo, hi, t))
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    (mean(&per.iter().flatten().copied().collect::<Vec<_>>()), per)
}

pub fn evaluate(cases: &[OCase], categories: usize) -> OSuite {
    let mut sorted: Vec<&OCase> = cases.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let all = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
    let (m, l) = (32.0 * 32.0, 96.0 * 96.0);
    let (ap, per_category) = suite_value(&sorted, categories, 0.0, f64::INFINITY, &all);
    OSuite {
        ap: ap.unwrap_or(1.0),
        ap50: suite_value(&sorted, categories, 0.0, f64::INFINITY, &[0.5])
            .0
            .unwrap_or(1.0),
        ap75: suite_value(&sorted, categories, 0.0, f64::INFINITY, &[0.75])
            .0
            .unwrap_or(1.0),
        ap_m: suite_value(&sorted, categories, m, l, &all).0,
        ap_l: suite_value(&sorted, categories, l, f64::INFINITY, &all).0,
        per_category,
    }
}
