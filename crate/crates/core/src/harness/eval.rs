//! Detection post-processing and metrics: NMS, all-points interpolated AP,
//! CorLoc and mean top-detection IoU.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{CpeError, Result};
use crate::geometry::BBox;
use crate::harness::scene::{GroundTruth, SyntheticScene};
use crate::model::CpeModel;
use crate::tensor::Tensor;

/// IoU above which a detection counts as correct.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Greedy suppression per class: in descending score order (earlier entries
/// first on ties), keep a box unless it overlaps a kept box of the same
/// class with IoU above `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if kept
            .iter()
            .all(|k| k.class_id != d.class_id || k.bbox.iou(&d.bbox) <= iou_thresh)
        {
            kept.push(d);
        }
    }
    kept
}

/// Detections of one image, tagged with the image index.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDetections {
    pub image: usize,
    pub detections: Vec<Detection>,
}

/// All-points interpolated average precision of `class_id`. Detections are
/// matched greedily in descending score order; each ground truth matches
/// once. Returns `None` when the class has no ground truth.
pub fn average_precision(
    dets: &[ImageDetections],
    gts: &[Vec<GroundTruth>],
    class_id: usize,
    iou_thresh: f64,
) -> Option<f64> {
    let npos: usize = gts
        .iter()
        .map(|g| g.iter().filter(|x| x.class_id == class_id).count())
        .sum();
    if npos == 0 {
        return None;
    }
    let mut all: Vec<(usize, Detection)> = dets
        .iter()
        .flat_map(|im| {
            im.detections
                .iter()
                .filter(|d| d.class_id == class_id)
                .map(move |d| (im.image, *d))
        })
        .collect();
    all.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(all.len());
    for (img, d) in &all {
        let mut best = (f64::NEG_INFINITY, None);
        for (j, g) in gts[*img].iter().enumerate() {
            if g.class_id != class_id {
                continue;
            }
            let o = d.bbox.iou(&g.bbox);
            if o > best.0 {
                best = (o, Some(j));
            }
        }
        let hit = match best {
            (o, Some(j)) if o > iou_thresh && !used[*img][j] => {
                used[*img][j] = true;
                true
            }
            _ => false,
        };
        tp.push(hit);
    }
    let mut rec = Vec::with_capacity(tp.len());
    let mut prec = Vec::with_capacity(tp.len());
    let (mut ctp, mut cfp) = (0usize, 0usize);
    for &hit in &tp {
        if hit {
            ctp += 1;
        } else {
            cfp += 1;
        }
        rec.push(ctp as f64 / npos as f64);
        prec.push(ctp as f64 / (ctp + cfp) as f64);
    }
    Some(interpolated_area(&rec, &prec))
}

/// Area under the precision envelope `max_{r' ≥ r} p(r')`.
pub fn interpolated_area(rec: &[f64], prec: &[f64]) -> f64 {
    let mut mrec = vec![0.0];
    mrec.extend_from_slice(rec);
    mrec.push(1.0);
    let mut mpre = vec![0.0];
    mpre.extend_from_slice(prec);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len())
        .filter(|&i| mrec[i] != mrec[i - 1])
        .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
        .sum()
}

/// Top-scoring proposal of `class_id` (lowest index on ties).
pub fn top_box(scores: &Tensor, boxes: &[BBox], class_id: usize) -> Option<BBox> {
    let n = scores.rows().min(boxes.len());
    let mut best: Option<usize> = None;
    for i in 0..n {
        if best.is_none_or(|b| scores.at(i, class_id) > scores.at(b, class_id)) {
            best = Some(i);
        }
    }
    best.map(|i| boxes[i])
}

fn best_iou(b: &BBox, gts: &[GroundTruth], class_id: usize) -> f64 {
    gts.iter()
        .filter(|g| g.class_id == class_id)
        .map(|g| b.iou(&g.bbox))
        .fold(0.0, f64::max)
}

/// Scores and boxes of one evaluated image.
#[derive(Debug, Clone)]
pub struct ImageScores {
    pub image: usize,
    pub scores: Tensor,
    pub proposals: Vec<BBox>,
    pub ground_truth: Vec<GroundTruth>,
    pub positives: Vec<usize>,
}

/// Per-class CorLoc in percent over images where the class is present:
/// the top-scoring box must overlap a ground truth of the class with IoU
/// above 0.5.
pub fn corloc(images: &[ImageScores], classes: usize) -> Vec<Option<f64>> {
    (0..classes)
        .map(|c| {
            let (mut hits, mut total) = (0usize, 0usize);
            for im in images.iter().filter(|im| im.positives.contains(&c)) {
                total += 1;
                if top_box(&im.scores, &im.proposals, c).is_some_and(|b| best_iou(&b, &im.ground_truth, c) > MATCH_IOU)
                {
                    hits += 1;
                }
            }
            (total > 0).then(|| 100.0 * hits as f64 / total as f64)
        })
        .collect()
}

/// Per-class mean IoU between the top-scoring box and the best-matching
/// ground truth of the class, over images where the class is present.
pub fn top_detection_iou(images: &[ImageScores], classes: usize) -> Vec<Option<f64>> {
    (0..classes)
        .map(|c| {
            let ious: Vec<f64> = images
                .iter()
                .filter(|im| im.positives.contains(&c))
                .map(|im| top_box(&im.scores, &im.proposals, c).map_or(0.0, |b| best_iou(&b, &im.ground_truth, c)))
                .collect();
            (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub ap: Option<f64>,
    pub corloc: Option<f64>,
    pub top_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub classes: Vec<ClassMetrics>,
    /// Mean AP in percent over classes with ground truth.
    pub map: f64,
    pub mean_corloc: f64,
    /// Mean over all (image, present class) pairs.
    pub mean_top_iou: f64,
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> f64 {
    let vals: Vec<f64> = v.flatten().collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Detection scores for every scene, computed in parallel; the result is in
/// scene order regardless of scheduling.
pub fn score_scenes(model: &CpeModel, scenes: &[SyntheticScene]) -> Result<Vec<ImageScores>> {
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let prepared = model.prepare(&s.sample())?;
            Ok(ImageScores {
                image: i,
                scores: model.predict(&prepared)?,
                proposals: s.proposals.clone(),
                ground_truth: s.ground_truth.clone(),
                positives: s.label.positives().collect(),
            })
        })
        .collect()
}

pub fn metrics_from_scores(images: &[ImageScores], classes: usize, nms_iou: f64) -> Metrics {
    let dets: Vec<ImageDetections> = images
        .iter()
        .map(|im| {
            let raw: Vec<Detection> = (0..classes)
                .flat_map(|c| {
                    im.proposals.iter().enumerate().map(move |(i, b)| Detection {
                        bbox: *b,
                        class_id: c,
                        score: im.scores.at(i, c),
                    })
                })
                .collect();
            ImageDetections {
                image: im.image,
                detections: nms(&raw, nms_iou),
            }
        })
        .collect();
    let gts: Vec<Vec<GroundTruth>> = images.iter().map(|im| im.ground_truth.clone()).collect();
    let cor = corloc(images, classes);
    let top = top_detection_iou(images, classes);
    let per: Vec<ClassMetrics> = (0..classes)
        .map(|c| ClassMetrics {
            class_id: c,
            ap: average_precision(&dets, &gts, c, MATCH_IOU).map(|v| 100.0 * v),
            corloc: cor[c],
            top_iou: top[c],
        })
        .collect();
    let pairs: Vec<f64> = images
        .iter()
        .flat_map(|im| {
            im.positives
                .iter()
                .map(|&c| top_box(&im.scores, &im.proposals, c).map_or(0.0, |b| best_iou(&b, &im.ground_truth, c)))
        })
        .collect();
    Metrics {
        map: mean_defined(per.iter().map(|m| m.ap)),
        mean_corloc: mean_defined(per.iter().map(|m| m.corloc)),
        mean_top_iou: if pairs.is_empty() {
            0.0
        } else {
            pairs.iter().sum::<f64>() / pairs.len() as f64
        },
        classes: per,
    }
}

pub fn evaluate(model: &CpeModel, scenes: &[SyntheticScene], nms_iou: f64) -> Result<Metrics> {
    if scenes.is_empty() {
        return Err(CpeError::InvalidInput("no scenes to evaluate".into()));
    }
    let images = score_scenes(model, scenes)?;
    Ok(metrics_from_scores(&images, model.config.classes, nms_iou))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.6}"))
}

/// `class,ap,corloc,top_iou`, one row per class, then the `mean` row.
pub fn write_metrics_csv(w: &mut impl Write, m: &Metrics) -> Result<()> {
    writeln!(w, "class,ap,corloc,top_iou")?;
    for c in &m.classes {
        writeln!(
            w,
            "{},{},{},{}",
            c.class_id,
            cell(c.ap),
            cell(c.corloc),
            cell(c.top_iou)
        )?;
    }
    writeln!(w, "mean,{:.6},{:.6},{:.6}", m.map, m.mean_corloc, m.mean_top_iou)?;
    Ok(())
}

/// Worker pool sized by `CPE_THREADS` (all cores when unset).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("CPE_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| CpeError::InvalidParameter(format!("CPE_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(CpeError::InvalidParameter("CPE_THREADS must be positive".into()));
        }
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| CpeError::InvalidParameter(format!("thread pool: {e}")))
}
