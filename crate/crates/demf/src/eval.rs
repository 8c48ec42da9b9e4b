//! Axis-aligned 3D IoU, per-class average precision, and the greedy
//! score-ordered label assignment behind the confusion matrix.

use thiserror::Error;

use crate::geometry::Point3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("box record parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Axis-aligned 3D box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3 {
    pub center: Point3,
    pub size: [f64; 3],
}

impl Box3 {
    pub fn new(center: Point3, size: [f64; 3]) -> Box3 {
        Box3 { center, size }
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthBox {
    pub bbox: Box3,
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: Box3,
    pub class_id: usize,
    pub score: f64,
}

/// Detections and ground truths of one scene.
#[derive(Debug, Clone, Default)]
pub struct SceneResult {
    pub detections: Vec<Detection>,
    pub gts: Vec<GroundTruthBox>,
}

/// Intersection over union of two axis-aligned boxes, in [0, 1].
pub fn iou3d(a: &Box3, b: &Box3) -> f64 {
    let mut inter = 1.0;
    let ac = [a.center.x, a.center.y, a.center.z];
    let bc = [b.center.x, b.center.y, b.center.z];
    for i in 0..3 {
        let lo = (ac[i] - a.size[i] / 2.0).max(bc[i] - b.size[i] / 2.0);
        let hi = (ac[i] + a.size[i] / 2.0).min(bc[i] + b.size[i] / 2.0);
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    let union = a.volume() + b.volume() - inter;
    inter / union
}

/// Greedy score-ordered assignment of predictions to ground truths.
///
/// Predictions are processed in descending score order; each is matched
/// to its highest-IoU ground truth if that IoU clears the threshold and
/// the ground truth is still unused, otherwise it goes to background
/// (`None`). Matching is class-agnostic so misclassifications stay
/// visible in the confusion matrix.
pub fn confusion_assign(
    preds: &[Detection],
    gts: &[GroundTruthBox],
    iou_thresh: f64,
) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let mut used = vec![false; gts.len()];
    let mut assign = vec![None; preds.len()];
    for &pi in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            let iou = iou3d(&preds[pi].bbox, &gt.bbox);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, iou)) = best {
            if iou >= iou_thresh && !used[gi] {
                assign[pi] = Some(gi);
                used[gi] = true;
            }
        }
    }
    assign
}

/// Row = ground-truth class (last row background), column = predicted
/// class (last column background).
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            num_classes,
            counts: vec![vec![0; num_classes + 1]; num_classes + 1],
        }
    }

    pub fn accumulate(&mut self, scene: &SceneResult, iou_thresh: f64) {
        let assign = confusion_assign(&scene.detections, &scene.gts, iou_thresh);
        let bg = self.num_classes;
        let mut gt_matched = vec![false; scene.gts.len()];
        for (pi, a) in assign.iter().enumerate() {
            let pc = scene.detections[pi].class_id.min(bg);
            match a {
                Some(gi) => {
                    gt_matched[*gi] = true;
                    self.counts[scene.gts[*gi].class_id.min(bg)][pc] += 1;
                }
                None => self.counts[bg][pc] += 1,
            }
        }
        for (gi, matched) in gt_matched.iter().enumerate() {
            if !matched {
                self.counts[scene.gts[gi].class_id.min(bg)][bg] += 1;
            }
        }
    }

    /// Associative merge for scene-parallel accumulation.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (r, row) in other.counts.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                self.counts[r][c] += v;
            }
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("# demf-confusion v1: rows gt class + background, cols predicted class + background\n");
        for row in &self.counts {
            let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(scenes: &[SceneResult], num_classes: usize, iou_thresh: f64) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::new(num_classes);
    for s in scenes {
        cm.accumulate(s, iou_thresh);
    }
    cm
}

/// Per-class average precision at the given IoU threshold, all-point
/// (precision-envelope) interpolation, class-aware greedy matching.
/// Classes without ground truths return None.
pub fn average_precision(
    scenes: &[SceneResult],
    num_classes: usize,
    iou_thresh: f64,
) -> Vec<Option<f64>> {
    let mut per_class = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        // (scene index, det index) of this class, globally score-sorted.
        let mut dets: Vec<(usize, usize, f64)> = Vec::new();
        let mut gt_count = 0usize;
        for (si, s) in scenes.iter().enumerate() {
            for (di, d) in s.detections.iter().enumerate() {
                if d.class_id == class {
                    dets.push((si, di, d.score));
                }
            }
            gt_count += s.gts.iter().filter(|g| g.class_id == class).count();
        }
        if gt_count == 0 {
            per_class.push(None);
            continue;
        }
        dets.sort_by(|a, b| b.2.total_cmp(&a.2));
        let mut used: Vec<Vec<bool>> = scenes
            .iter()
            .map(|s| vec![false; s.gts.len()])
            .collect();
        let mut tp = Vec::with_capacity(dets.len());
        for (si, di, _) in &dets {
            let det = &scenes[*si].detections[*di];
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in scenes[*si].gts.iter().enumerate() {
                if gt.class_id != class || used[*si][gi] {
                    continue;
                }
                let iou = iou3d(&det.bbox, &gt.bbox);
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            match best {
                Some((gi, iou)) if iou >= iou_thresh => {
                    used[*si][gi] = true;
                    tp.push(true);
                }
                _ => tp.push(false),
            }
        }
        // Precision-recall sweep with the all-point envelope.
        let mut cum_tp = 0.0;
        let mut points: Vec<(f64, f64)> = Vec::with_capacity(tp.len());
        for (i, t) in tp.iter().enumerate() {
            if *t {
                cum_tp += 1.0;
            }
            points.push((cum_tp / gt_count as f64, cum_tp / (i + 1) as f64));
        }
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for i in 0..points.len() {
            let (r, _) = points[i];
            if r > prev_recall {
                let max_p = points[i..]
                    .iter()
                    .map(|(_, p)| *p)
                    .fold(0.0_f64, f64::max);
                ap += (r - prev_recall) * max_p;
                prev_recall = r;
            }
        }
        per_class.push(Some(ap));
    }
    per_class
}

/// Mean AP over classes that have ground truths.
pub fn mean_average_precision(scenes: &[SceneResult], num_classes: usize, iou_thresh: f64) -> f64 {
    let aps = average_precision(scenes, num_classes, iou_thresh);
    let present: Vec<f64> = aps.into_iter().flatten().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// One record in the interchange format: scene_id, class_id, center,
/// size, and a score for detections (omitted for ground truths).
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRecord {
    pub scene_id: u64,
    pub class_id: usize,
    pub bbox: Box3,
    pub score: Option<f64>,
}

/// Parses the line-oriented box interchange format. Records with a score
/// have 10 whitespace-separated fields, ground truths have 9. Blank lines
/// and `#` comments are skipped.
pub fn parse_box_file(text: &str) -> Result<Vec<BoxRecord>, EvalError> {
    let mut records = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 && fields.len() != 9 {
            return Err(EvalError::Parse {
                line: ln + 1,
                message: format!("expected 8 or 9 fields, got {}", fields.len()),
            });
        }
        let num = |i: usize| -> Result<f64, EvalError> {
            fields[i].parse().map_err(|_| EvalError::Parse {
                line: ln + 1,
                message: format!("invalid number '{}'", fields[i]),
            })
        };
        let scene_id: u64 = fields[0].parse().map_err(|_| EvalError::Parse {
            line: ln + 1,
            message: format!("invalid scene id '{}'", fields[0]),
        })?;
        let class_id: usize = fields[1].parse().map_err(|_| EvalError::Parse {
            line: ln + 1,
            message: format!("invalid class id '{}'", fields[1]),
        })?;
        let bbox = Box3::new(
            Point3::new(num(2)?, num(3)?, num(4)?),
            [num(5)?, num(6)?, num(7)?],
        );
        let score = if fields.len() == 9 {
            let s = num(8)?;
            if !s.is_finite() {
                return Err(EvalError::Parse {
                    line: ln + 1,
                    message: "score must be finite".into(),
                });
            }
            Some(s)
        } else {
            None
        };
        records.push(BoxRecord {
            scene_id,
            class_id,
            bbox,
            score,
        });
    }
    Ok(records)
}

/// Writes records in the format `parse_box_file` reads, with round-trip
/// float precision.
pub fn write_box_file(records: &[BoxRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {}",
            r.scene_id,
            r.class_id,
            r.bbox.center.x,
            r.bbox.center.y,
            r.bbox.center.z,
            r.bbox.size[0],
            r.bbox.size[1],
            r.bbox.size[2]
        ));
        if let Some(s) = r.score {
            out.push_str(&format!(" {s}"));
        }
        out.push('\n');
    }
    out
}
