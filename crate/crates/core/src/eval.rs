//! Triplet scoring, pairwise NMS and mean average precision.

use std::cmp::Ordering;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::boxes;
use crate::error::{Error, Result};
use crate::model::{HoiModel, PredictionSet};
use crate::recompose::FeasibilityTable;
use crate::synth::{rasterize, CategoryCensus, Scene};

pub const DEFAULT_TOP_K: usize = 100;
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.7;
/// Both boxes must overlap their ground truth by more than this.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredTriplet {
    pub image_id: u64,
    pub human_box: [f64; 4],
    pub object_box: [f64; 4],
    pub category: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtTriplet {
    pub image_id: u64,
    pub human_box: [f64; 4],
    pub object_box: [f64; 4],
    pub category: usize,
}

/// One ground-truth triplet per positive action of every instance.
pub fn gt_triplets(scene: &Scene, table: &FeasibilityTable) -> Vec<GtTriplet> {
    let mut out = Vec::new();
    for inst in &scene.gt.instances {
        for a in inst.positive_actions() {
            if let Some(category) = table.category(inst.object_class, a) {
                out.push(GtTriplet {
                    image_id: scene.image_id,
                    human_box: inst.human_box,
                    object_box: inst.object_box,
                    category,
                });
            }
        }
    }
    out
}

fn by_score_desc(a: &ScoredTriplet, b: &ScoredTriplet) -> Ordering {
    b.score.total_cmp(&a.score)
}

/// Scores every feasible (object, action) pair of every query with
/// `p(object) · σ(action logit)`, where `p(object)` is the softmax
/// probability over all classes including "no object". Returns the `top_k`
/// best, highest first; ties keep query-then-category order.
pub fn score_triplets(preds: &PredictionSet<f64>, table: &FeasibilityTable, image_id: u64, top_k: usize) -> Result<Vec<ScoredTriplet>> {
    let (no, na) = (table.num_objects(), table.num_actions());
    if preds.object_logits.cols() != no + 1 || preds.action_logits.cols() != na {
        return Err(Error::shape(
            "score_triplets",
            &[preds.object_logits.cols(), preds.action_logits.cols()],
            &[no + 1, na],
        ));
    }
    let mut out = Vec::new();
    for q in 0..preds.num_queries() {
        let logits = preds.object_logits.row(q);
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
        let actions = preds.action_logits.row(q);
        for (category, &(o, a)) in table.categories().iter().enumerate() {
            let s_o = (logits[o] - m).exp() / z;
            let s_a = sigmoid(actions[a]);
            out.push(ScoredTriplet {
                image_id,
                human_box: preds.human_box(q),
                object_box: preds.object_box(q),
                category,
                score: s_o * s_a,
            });
        }
    }
    out.sort_by(by_score_desc);
    out.truncate(top_k);
    Ok(out)
}

pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    boxes::iou(a, b)
}

fn pair_overlap(h1: [f64; 4], o1: [f64; 4], h2: [f64; 4], o2: [f64; 4]) -> f64 {
    iou(h1, h2).min(iou(o1, o2))
}

/// Greedy suppression in score order: a triplet is dropped when a kept one
/// of the same category overlaps it with `min(IoU_h, IoU_o) > threshold`.
pub fn pairwise_nms(triplets: &[ScoredTriplet], threshold: f64) -> Vec<ScoredTriplet> {
    let mut sorted = triplets.to_vec();
    sorted.sort_by(by_score_desc);
    let mut kept: Vec<ScoredTriplet> = Vec::new();
    for t in sorted {
        let suppressed = kept.iter().any(|k| {
            k.image_id == t.image_id
                && k.category == t.category
                && pair_overlap(k.human_box, k.object_box, t.human_box, t.object_box) > threshold
        });
        if !suppressed {
            kept.push(t);
        }
    }
    kept
}

/// True-positive flag of each detection, in descending score order. Each
/// detection claims the unmatched ground truth of its image with the highest
/// `min(IoU_h, IoU_o)` above [`MATCH_IOU`]; ties go to the lower index.
pub fn match_detections(dets: &[ScoredTriplet], gts: &[GtTriplet]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| by_score_desc(&dets[a], &dets[b]));
    let mut used = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for &d in &order {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.image_id != det.image_id || gt.category != det.category {
                continue;
            }
            let ov = pair_overlap(det.human_box, det.object_box, gt.human_box, gt.object_box);
            if ov > MATCH_IOU && best.is_none_or(|(_, b)| ov > b) {
                best = Some((g, ov));
            }
        }
        match best {
            Some((g, _)) => {
                used[g] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    flags
}

/// All-point interpolated AP of one category; `None` without ground truth.
pub fn average_precision(dets: &[ScoredTriplet], gts: &[GtTriplet]) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let flags = match_detections(dets, gts);
    let n = gts.len() as f64;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        recall.push(tp as f64 / n);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Some(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub top_k: usize,
    /// `None` disables pairwise NMS.
    pub nms_threshold: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            nms_threshold: Some(DEFAULT_NMS_THRESHOLD),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub category: usize,
    pub rare: bool,
    pub num_gt: usize,
    pub num_detections: usize,
    /// `None` when the category has no test ground truth.
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub categories: Vec<CategoryAp>,
    pub map_full: f64,
    pub map_rare: f64,
    pub map_nonrare: f64,
    pub num_rare: usize,
    pub num_nonrare: usize,
    pub num_images: usize,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Per-category AP and the Full / Rare / Non-Rare means over categories
/// with ground truth. Empty splits report a mean of 0.
pub fn evaluate_triplets(
    dets: &[ScoredTriplet],
    gts: &[GtTriplet],
    census: &CategoryCensus,
    num_categories: usize,
    num_images: usize,
) -> EvalReport {
    let mut dets_by = vec![Vec::new(); num_categories];
    for d in dets {
        if d.category < num_categories {
            dets_by[d.category].push(d.clone());
        }
    }
    let mut gts_by = vec![Vec::new(); num_categories];
    for g in gts {
        if g.category < num_categories {
            gts_by[g.category].push(g.clone());
        }
    }
    let mut categories = Vec::with_capacity(num_categories);
    let (mut full, mut rare, mut nonrare) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..num_categories {
        let ap = average_precision(&dets_by[c], &gts_by[c]);
        let is_rare = census.train_counts.get(c).is_some_and(|&n| n < census.rare_threshold);
        match ap {
            Some(v) => {
                full.push(v);
                if is_rare {
                    rare.push(v);
                } else {
                    nonrare.push(v);
                }
            }
            None => log::info!("category {c} has no test ground truth; excluded from mAP"),
        }
        categories.push(CategoryAp {
            category: c,
            rare: is_rare,
            num_gt: gts_by[c].len(),
            num_detections: dets_by[c].len(),
            ap,
        });
    }
    EvalReport {
        categories,
        map_full: mean(&full),
        map_rare: mean(&rare),
        map_nonrare: mean(&nonrare),
        num_rare: rare.len(),
        num_nonrare: nonrare.len(),
        num_images,
    }
}

/// Runs the model over every scene and collects scored triplets.
pub fn predict_triplets(
    model: &HoiModel<f64>,
    scenes: &[Scene],
    table: &FeasibilityTable,
    options: &EvalOptions,
) -> Result<Vec<ScoredTriplet>> {
    let grid = model.config().feature_grid;
    let mut all = Vec::new();
    for scene in scenes {
        let fmap = rasterize(scene, grid, table.num_objects())?;
        let preds = model.predict(&fmap)?;
        let mut dets = score_triplets(&preds, table, scene.image_id, options.top_k)?;
        if let Some(t) = options.nms_threshold {
            dets = pairwise_nms(&dets, t);
        }
        all.extend(dets);
    }
    Ok(all)
}

pub fn evaluate(
    model: &HoiModel<f64>,
    scenes: &[Scene],
    table: &FeasibilityTable,
    census: &CategoryCensus,
    options: &EvalOptions,
) -> Result<(EvalReport, Vec<ScoredTriplet>)> {
    let dets = predict_triplets(model, scenes, table, options)?;
    let gts: Vec<GtTriplet> = scenes.iter().flat_map(|s| gt_triplets(s, table)).collect();
    Ok((evaluate_triplets(&dets, &gts, census, table.num_categories(), scenes.len()), dets))
}

impl EvalReport {
    /// Per-category rows followed by the three summary rows.
    pub fn to_csv(&self, table: &FeasibilityTable) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["scope", "category", "object", "action", "rare", "num_gt", "num_detections", "ap"])?;
        for c in &self.categories {
            let (o, a) = table.categories()[c.category];
            w.write_record([
                "category".to_string(),
                c.category.to_string(),
                table.object_names()[o].clone(),
                table.action_names()[a].clone(),
                c.rare.to_string(),
                c.num_gt.to_string(),
                c.num_detections.to_string(),
                c.ap.map_or(String::new(), |v| format!("{v:?}")),
            ])?;
        }
        for (name, count, value) in [
            ("full", self.num_rare + self.num_nonrare, self.map_full),
            ("rare", self.num_rare, self.map_rare),
            ("non_rare", self.num_nonrare, self.map_nonrare),
        ] {
            w.write_record(["summary", name, "", "", "", &count.to_string(), "", &format!("{value:?}")])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
    }

    pub fn save_csv(&self, path: &Path, table: &FeasibilityTable) -> Result<()> {
        std::fs::write(path, self.to_csv(table)?)?;
        Ok(())
    }
}

/// One JSON object per line.
pub fn write_predictions<W: Write>(mut w: W, triplets: &[ScoredTriplet]) -> Result<()> {
    for t in triplets {
        writeln!(w, "{}", serde_json::to_string(t)?)?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(r: R) -> Result<Vec<ScoredTriplet>> {
    let mut out = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: ScoredTriplet = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: k + 1,
            msg: e.to_string(),
        })?;
        out.push(t);
    }
    Ok(out)
}
