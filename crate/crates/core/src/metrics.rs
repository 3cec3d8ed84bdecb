//! Temporal IoU, per-class average precision and mean AP over tIoU thresholds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::SegmentAnnotation;
use crate::error::{Error, Result};
use crate::head::{detection_order, Detection};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tiou_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tiou_thresholds: vec![0.3, 0.4, 0.5, 0.6, 0.7],
        }
    }
}

impl EvalConfig {
    pub fn activitynet() -> Self {
        Self {
            tiou_thresholds: vec![0.5, 0.75, 0.95],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.tiou_thresholds;
        if t.is_empty() || t.iter().any(|&x| !(x > 0.0 && x <= 1.0)) || t.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "eval.tiou_thresholds",
                "need a nonempty, strictly ascending list in (0, 1]",
            ));
        }
        Ok(())
    }
}

pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    if !(a.0 < a.1) || !(b.0 < b.1) {
        return Err(Error::Contract(format!("degenerate segment in tIoU: {a:?}, {b:?}")));
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    Ok(inter / ((a.1 - a.0) + (b.1 - b.0) - inter))
}

fn tiou(d: &Detection, g: &SegmentAnnotation) -> f64 {
    let inter = (d.end.min(g.end) - d.start.max(g.start)).max(0.0);
    let union = (d.end - d.start) + (g.end - g.start) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Class-`class` detections of every video in evaluation order, tagged with
/// their video index.
fn ranked(dets: &[Vec<Detection>], class: usize) -> Vec<(usize, Detection)> {
    let mut out: Vec<(usize, Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(v, ds)| ds.iter().filter(|d| d.class_id == class).map(move |d| (v, *d)))
        .collect();
    out.sort_by(|a, b| detection_order(&a.1, &b.1).then(a.0.cmp(&b.0)));
    out
}

/// All-point interpolated area under the precision/recall curve, written as
/// the mean over ground truths of the best precision at or after the rank
/// where each was recalled.
pub fn interpolated_ap(tp: &[bool], npos: usize) -> f64 {
    let mut prec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        prec.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let total: f64 = tp.iter().zip(&prec).filter(|(t, _)| **t).map(|(_, p)| p).sum();
    total / npos as f64
}

/// AP of one class at one threshold over a set of videos. `None` when the
/// class has neither ground truth nor detections.
pub fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<SegmentAnnotation>], class: usize, threshold: f64) -> Option<f64> {
    let npos: usize = gts.iter().map(|g| g.iter().filter(|a| a.class_id == class).count()).sum();
    let order = ranked(dets, class);
    if npos == 0 {
        return (!order.is_empty()).then_some(0.0);
    }
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(order.len());
    for (v, d) in &order {
        let Some(video_gts) = gts.get(*v) else {
            tp.push(false);
            continue;
        };
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in video_gts.iter().enumerate() {
            if g.class_id != class || used[*v][j] {
                continue;
            }
            let o = tiou(d, g);
            if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            used[*v][j] = true;
        }
        tp.push(best.is_some());
    }
    Some(interpolated_ap(&tp, npos))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    /// `(threshold index, class, AP)` for every present class.
    pub per_class: Vec<(usize, usize, f64)>,
    pub map: Vec<f64>,
    pub avg_map: f64,
}

impl MapReport {
    /// Rows `threshold,class,ap` followed by per-threshold and average mAP.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,class,ap\n");
        for &(ti, k, ap) in &self.per_class {
            let _ = writeln!(s, "{:.2},{k},{ap:.6}", self.thresholds[ti]);
        }
        for (t, m) in self.thresholds.iter().zip(&self.map) {
            let _ = writeln!(s, "{t:.2},mAP,{m:.6}");
        }
        let _ = writeln!(s, "avg,mAP,{:.6}", self.avg_map);
        s
    }
}

pub fn mean_ap(dets: &[Vec<Detection>], gts: &[Vec<SegmentAnnotation>], cfg: &EvalConfig) -> Result<MapReport> {
    cfg.validate()?;
    if gts.iter().all(Vec::is_empty) {
        return Err(Error::Contract("mean AP needs at least one ground-truth segment".into()));
    }
    let num_classes = gts
        .iter()
        .flatten()
        .map(|a| a.class_id)
        .chain(dets.iter().flatten().map(|d| d.class_id))
        .max()
        .map_or(0, |k| k + 1);
    let mut per_class = vec![];
    let mut map = vec![];
    for (ti, &t) in cfg.tiou_thresholds.iter().enumerate() {
        let aps: Vec<f64> = (0..num_classes)
            .filter_map(|k| {
                let ap = average_precision(dets, gts, k, t)?;
                per_class.push((ti, k, ap));
                Some(ap)
            })
            .collect();
        map.push(aps.iter().sum::<f64>() / aps.len() as f64);
    }
    let avg_map = map.iter().sum::<f64>() / map.len() as f64;
    Ok(MapReport {
        thresholds: cfg.tiou_thresholds.clone(),
        per_class,
        map,
        avg_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(start: f64, end: f64, class_id: usize, score: f64) -> Detection {
        Detection {
            start,
            end,
            class_id,
            score,
        }
    }

    #[test]
    fn tiou_examples() {
        assert_eq!(temporal_iou((0.0, 10.0), (0.0, 10.0)).unwrap(), 1.0);
        assert_eq!(temporal_iou((0.0, 10.0), (20.0, 30.0)).unwrap(), 0.0);
        assert!((temporal_iou((10.0, 20.0), (15.0, 25.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(temporal_iou((5.0, 5.0), (0.0, 1.0)), Err(Error::Contract(_))));
    }

    #[test]
    fn hand_computed_ap() {
        let gt = vec![vec![SegmentAnnotation::new(0.0, 10.0, 0)]];
        assert_eq!(average_precision(&[vec![det(0.0, 10.0, 0, 0.9)]], &gt, 0, 0.5), Some(1.0));
        let good_first = vec![vec![det(0.0, 10.0, 0, 0.9), det(40.0, 50.0, 0, 0.5)]];
        assert_eq!(average_precision(&good_first, &gt, 0, 0.5), Some(1.0));
        let bad_first = vec![vec![det(0.0, 10.0, 0, 0.5), det(40.0, 50.0, 0, 0.9)]];
        assert_eq!(average_precision(&bad_first, &gt, 0, 0.5), Some(0.5));
        assert_eq!(average_precision(&good_first, &gt, 1, 0.5), None);
        assert_eq!(average_precision(&[vec![det(0.0, 1.0, 2, 0.3)]], &gt, 2, 0.5), Some(0.0));
    }

    #[test]
    fn mean_ap_edge_cases() {
        let gts = vec![
            vec![SegmentAnnotation::new(0.0, 10.0, 0), SegmentAnnotation::new(20.0, 30.0, 1)],
            vec![SegmentAnnotation::new(5.0, 9.0, 1)],
        ];
        let perfect: Vec<Vec<Detection>> = gts
            .iter()
            .map(|g| g.iter().map(|a| det(a.start, a.end, a.class_id, 0.9)).collect())
            .collect();
        let r = mean_ap(&perfect, &gts, &EvalConfig::default()).unwrap();
        assert_eq!(r.avg_map, 1.0);
        let r = mean_ap(&[vec![], vec![]], &gts, &EvalConfig::default()).unwrap();
        assert_eq!(r.avg_map, 0.0);
        assert!(matches!(mean_ap(&[vec![]], &[vec![]], &EvalConfig::default()), Err(Error::Contract(_))));
        let csv = mean_ap(&perfect, &gts, &EvalConfig::activitynet()).unwrap().to_csv();
        assert!(csv.starts_with("threshold,class,ap\n0.50,0,1.000000\n"));
        assert!(csv.ends_with("0.95,mAP,1.000000\navg,mAP,1.000000\n"));
        assert!(EvalConfig { tiou_thresholds: vec![0.5, 0.3] }.validate().is_err());
    }
}
