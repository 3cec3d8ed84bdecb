//! Anchor-free temporal localization head and detection decoding.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::Timeline;
use crate::data::SegmentAnnotation;
use crate::error::{Error, Result};
use crate::params::Parameterized;
use crate::rng;
use crate::tensor::kernels::sigmoid;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub num_classes: usize,
    /// Number of kernel-3 temporal conv layers before the predictors.
    pub tower: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    /// Initial foreground probability encoded in the class bias.
    pub prior: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            tower: 2,
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
            prior: 0.01,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("head.num_classes", "must be >= 1"));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::config("head.nms_iou", "must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.score_threshold) {
            return Err(Error::config("head.score_threshold", "must lie in [0, 1)"));
        }
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err(Error::config("head.prior", "must lie in (0, 1)"));
        }
        if self.max_detections == 0 {
            return Err(Error::config("head.max_detections", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub start: f64,
    pub end: f64,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub score: f64,
}

/// Score descending, then earlier start, then lower class, then earlier end.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.total_cmp(&b.start))
        .then(a.class_id.cmp(&b.class_id))
        .then(a.end.total_cmp(&b.end))
}

/// Detections JSON document: `{video_id: [detection, ...]}`.
pub fn detections_json(per_video: &BTreeMap<String, Vec<Detection>>) -> Result<String> {
    Ok(serde_json::to_string_pretty(per_video)?)
}

#[derive(Clone, Debug)]
pub struct Head {
    cfg: HeadConfig,
    pub tower: Vec<(Tensor, Tensor)>,
    pub cls_weight: Tensor,
    pub cls_bias: Tensor,
    pub reg_weight: Tensor,
    pub reg_bias: Tensor,
}

impl Head {
    pub fn new(cfg: &HeadConfig, width: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, "head");
        let tower = (0..cfg.tower)
            .map(|_| {
                (
                    rng::fan_in_uniform(&mut r, vec![3, width, width], 3 * width),
                    rng::fan_in_uniform(&mut r, vec![width], 3 * width),
                )
            })
            .collect();
        let k = cfg.num_classes;
        let prior_bias = -((1.0 - cfg.prior) / cfg.prior).ln();
        Ok(Self {
            cfg: cfg.clone(),
            tower,
            cls_weight: rng::fan_in_uniform(&mut r, vec![width, k], width),
            cls_bias: Tensor::full(vec![k], prior_bias).with_requires_grad(true),
            reg_weight: rng::fan_in_uniform(&mut r, vec![width, 2], width),
            reg_bias: Tensor::full(vec![2], 1.0).with_requires_grad(true),
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    /// `ft: [S × C]` → `(logits [S × K], offsets [S × 2])`, offsets in
    /// timestep units and nonnegative.
    pub fn forward(&self, tape: &mut Tape, ft: Var) -> Result<(Var, Var)> {
        let mut x = ft;
        for (i, (w, b)) in self.tower.iter().enumerate() {
            let w = tape.param(format!("head.tower.{i}.weight"), w);
            let b = tape.param(format!("head.tower.{i}.bias"), b);
            x = tape.conv1d(x, w, b)?;
            x = tape.gelu(x)?;
        }
        let cw = tape.param("head.cls.weight", &self.cls_weight);
        let cb = tape.param("head.cls.bias", &self.cls_bias);
        let rw = tape.param("head.reg.weight", &self.reg_weight);
        let rb = tape.param("head.reg.bias", &self.reg_bias);
        let logits = tape.linear(x, cw, Some(cb))?;
        let reg = tape.linear(x, rw, Some(rb))?;
        Ok((logits, tape.softplus(reg)?))
    }
}

impl Parameterized for Head {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, (w, b)) in self.tower.iter().enumerate() {
            f(&format!("head.tower.{i}.weight"), w);
            f(&format!("head.tower.{i}.bias"), b);
        }
        f("head.cls.weight", &self.cls_weight);
        f("head.cls.bias", &self.cls_bias);
        f("head.reg.weight", &self.reg_weight);
        f("head.reg.bias", &self.reg_bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, (w, b)) in self.tower.iter_mut().enumerate() {
            f(&format!("head.tower.{i}.weight"), w);
            f(&format!("head.tower.{i}.bias"), b);
        }
        f("head.cls.weight", &mut self.cls_weight);
        f("head.cls.bias", &mut self.cls_bias);
        f("head.reg.weight", &mut self.reg_weight);
        f("head.reg.bias", &mut self.reg_bias);
    }
}

/// Per-timestep training targets derived from frame-unit annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// `[S × K]` one-hot foreground labels.
    pub classes: Vec<f64>,
    /// Positive timesteps and their (start, end) distances in timestep units.
    pub rows: Vec<usize>,
    pub distances: Vec<[f64; 2]>,
}

pub fn build_targets(anns: &[SegmentAnnotation], timeline: &Timeline, num_classes: usize) -> Result<Targets> {
    let len = timeline.video_len as f64;
    for a in anns {
        if !(a.start >= 0.0 && a.start < a.end && a.end <= len) {
            return Err(Error::Input(format!(
                "segment [{}, {}] outside video of {len} frames",
                a.start, a.end
            )));
        }
        if a.class_id >= num_classes {
            return Err(Error::Input(format!("class {} out of range", a.class_id)));
        }
    }
    let s = timeline.len();
    let mut classes = vec![0.0; s * num_classes];
    let mut rows = vec![];
    let mut distances = vec![];
    for (tau, &p) in timeline.positions.iter().enumerate() {
        // overlapping clips can repeat a position, every copy is a positive
        if let Some(a) = anns.iter().find(|a| p >= a.start && p < a.end) {
            classes[tau * num_classes + a.class_id] = 1.0;
            rows.push(tau);
            distances.push([
                (p - a.start) / timeline.frames_per_step,
                (a.end - p) / timeline.frames_per_step,
            ]);
        }
    }
    Ok(Targets {
        classes,
        rows,
        distances,
    })
}

/// Classification BCE summed over classes and averaged over timesteps, plus
/// the mean `1 − IoU` over positive timesteps.
pub fn head_loss(tape: &mut Tape, logits: Var, offsets: Var, targets: &Targets) -> Result<Var> {
    let s = tape.shape(logits)[0] as f64;
    let bce = tape.bce_with_logits(logits, &targets.classes)?;
    let cls = tape.scale(bce, 1.0 / s)?;
    if targets.rows.is_empty() {
        return Ok(cls);
    }
    let iou = tape.iou_loss(offsets, &targets.rows, &targets.distances)?;
    let reg = tape.scale(iou, 1.0 / targets.rows.len() as f64)?;
    tape.add(cls, reg)
}

fn segment_iou(a: &Detection, b: &Detection) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = (a.end - a.start) + (b.end - b.start) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Greedy hard NMS within each class; survivors sorted by [`detection_order`].
pub fn nms(mut cands: Vec<Detection>, iou: f64) -> Vec<Detection> {
    cands.sort_by(detection_order);
    let mut kept: Vec<Detection> = vec![];
    for d in cands {
        if kept
            .iter()
            .filter(|k| k.class_id == d.class_id)
            .all(|k| segment_iou(k, &d) <= iou)
        {
            kept.push(d);
        }
    }
    kept
}

/// Turns per-timestep outputs into at most `max_detections` segments in
/// frame units, clipped to the video.
pub fn decode(logits: &Tensor, offsets: &Tensor, timeline: &Timeline, cfg: &HeadConfig) -> Result<Vec<Detection>> {
    let k = cfg.num_classes;
    let s = timeline.len();
    if logits.shape() != [s, k] || offsets.shape() != [s, 2] {
        return Err(Error::dim(
            "decode",
            format!("logits {:?}, offsets {:?} for {s} timesteps", logits.shape(), offsets.shape()),
        ));
    }
    let len = timeline.video_len as f64;
    let mut cands = vec![];
    for tau in 0..s {
        let p = timeline.positions[tau];
        let (ds, de) = (offsets.data()[2 * tau], offsets.data()[2 * tau + 1]);
        let start = (p - ds * timeline.frames_per_step).clamp(0.0, len);
        let end = (p + de * timeline.frames_per_step).clamp(0.0, len);
        if start >= end {
            continue;
        }
        for c in 0..k {
            let score = sigmoid(logits.data()[tau * k + c]);
            if score > cfg.score_threshold {
                cands.push(Detection {
                    start,
                    end,
                    class_id: c,
                    score,
                });
            }
        }
    }
    let mut kept = nms(cands, cfg.nms_iou);
    kept.truncate(cfg.max_detections);
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ClipSpec;
    use crate::tensor::gradcheck::{max_rel_error, FD_EPS, FD_TOL};

    fn timeline(len: usize) -> Timeline {
        ClipSpec::default().timeline(len, 8)
    }

    #[test]
    fn shapes_and_nonnegative_offsets() {
        let head = Head::new(&HeadConfig::default(), 8, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(rng::uniform(&mut rng::seeded(1), vec![24, 8], -5.0, 5.0));
        let (l, o) = head.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(l), &[24, 4]);
        assert_eq!(tape.shape(o), &[24, 2]);
        assert!(tape.value(o).data().iter().all(|&v| v >= 0.0));
        let p = crate::tensor::kernels::sigmoid(head.cls_bias.data()[0]);
        assert!((p - 0.01).abs() < 1e-12);
    }

    #[test]
    fn perfect_outputs_give_near_zero_loss() {
        let tl = timeline(32);
        let anns = [SegmentAnnotation::new(4.0, 20.0, 1)];
        let t = build_targets(&anns, &tl, 3).unwrap();
        let logits = Tensor::from_fn(vec![16, 3], |i| if t.classes[i] > 0.5 { 30.0 } else { -30.0 });
        let mut off = vec![1.0; 32];
        for (r, d) in t.rows.iter().zip(&t.distances) {
            off[2 * r] = d[0];
            off[2 * r + 1] = d[1];
        }
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let o = tape.constant(Tensor::new(vec![16, 2], off).unwrap());
        let loss = head_loss(&mut tape, l, o, &t).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-3);
        assert_eq!(t.rows, (2..10).collect::<Vec<_>>());
    }

    #[test]
    fn empty_annotations_leave_only_background_bce() {
        let tl = timeline(16);
        let t = build_targets(&[], &tl, 2).unwrap();
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(vec![8, 2]));
        let o = tape.constant(Tensor::zeros(vec![8, 2]));
        let loss = head_loss(&mut tape, l, o, &t).unwrap();
        assert!((tape.value(loss).data()[0] - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn single_positive_matches_hand_formula() {
        // one clip of 8 steps, 2 frames each; step 3 sits at frame 7
        let tl = timeline(16);
        let anns = [SegmentAnnotation::new(6.5, 8.0, 0)];
        let t = build_targets(&anns, &tl, 1).unwrap();
        assert_eq!(t.rows, vec![3]);
        assert_eq!(t.distances, vec![[0.25, 0.5]]);
        let z: Vec<f64> = (0..8).map(|i| 0.3 * i as f64 - 1.0).collect();
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::new(vec![8, 1], z.clone()).unwrap());
        let o = tape.constant(Tensor::new(vec![8, 2], vec![0.4; 16]).unwrap());
        let lv = head_loss(&mut tape, l, o, &t).unwrap();
        let loss = tape.value(lv).data()[0];
        let bce: f64 = z
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let p = 1.0 / (1.0 + (-x).exp());
                if i == 3 {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum::<f64>()
            / 8.0;
        // pred (0.4, 0.4) vs target (0.25, 0.5): inter 0.65, union 0.9
        let want = bce + (1.0 - 0.65 / 0.9);
        assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
    }

    #[test]
    fn out_of_extent_annotation_is_an_input_error() {
        let err = build_targets(&[SegmentAnnotation::new(0.0, 40.0, 0)], &timeline(32), 1).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn loss_gradient_through_head_matches_finite_differences() {
        let head = Head::new(
            &HeadConfig {
                num_classes: 2,
                ..Default::default()
            },
            4,
            3,
        )
        .unwrap();
        let tl = timeline(16);
        let t = build_targets(&[SegmentAnnotation::new(3.0, 11.0, 1)], &tl, 2).unwrap();
        let mut params = vec![];
        head.visit(&mut |_, p| params.push(p.clone()));
        let x = rng::uniform(&mut rng::seeded(2), vec![8, 4], -1.0, 1.0);
        let err = max_rel_error(&params, FD_EPS, None, |tape, vars| {
            let xi = tape.constant(x.clone());
            let mut y = xi;
            for i in 0..2 {
                y = tape.conv1d(y, vars[2 * i], vars[2 * i + 1])?;
                y = tape.gelu(y)?;
            }
            let l = tape.linear(y, vars[4], Some(vars[5]))?;
            let r = tape.linear(y, vars[6], Some(vars[7]))?;
            let o = tape.softplus(r)?;
            head_loss(tape, l, o, &t)
        })
        .unwrap();
        assert!(err < FD_TOL, "{err}");
    }

    fn det(start: f64, end: f64, class_id: usize, score: f64) -> Detection {
        Detection {
            start,
            end,
            class_id,
            score,
        }
    }

    #[test]
    fn nms_drops_duplicates() {
        let kept = nms(vec![det(0.0, 10.0, 0, 0.8), det(0.0, 10.0, 0, 0.9)], 0.5);
        assert_eq!(kept, vec![det(0.0, 10.0, 0, 0.9)]);
        let kept = nms(vec![det(0.0, 10.0, 1, 0.8), det(0.0, 10.0, 0, 0.9)], 0.5);
        assert_eq!(kept.len(), 2);
    }

    /// Brute force: a candidate survives iff no higher-ranked survivor of its
    /// class overlaps it above the threshold.
    fn nms_oracle(c: &[Detection], thr: f64) -> Vec<Detection> {
        let mut idx: Vec<usize> = (0..c.len()).collect();
        idx.sort_by(|&a, &b| detection_order(&c[a], &c[b]));
        let mut alive = vec![true; c.len()];
        for (pos, &i) in idx.iter().enumerate() {
            for &j in &idx[..pos] {
                if alive[j] && c[j].class_id == c[i].class_id && segment_iou(&c[i], &c[j]) > thr {
                    alive[i] = false;
                }
            }
        }
        idx.into_iter().filter(|&i| alive[i]).map(|i| c[i]).collect()
    }

    #[test]
    fn nms_matches_oracle_and_ignores_input_order() {
        use rand::seq::SliceRandom;
        use rand::Rng as _;
        let mut r = rng::seeded(77);
        for _ in 0..200 {
            let c: Vec<Detection> = (0..5)
                .map(|_| {
                    let s = r.random_range(0.0..20.0);
                    det(s, s + r.random_range(1.0..10.0), r.random_range(0..2), (r.random_range(0..10) as f64) / 10.0)
                })
                .collect();
            let want = nms_oracle(&c, 0.5);
            assert_eq!(nms(c.clone(), 0.5), want);
            let mut shuffled = c.clone();
            shuffled.shuffle(&mut r);
            assert_eq!(nms(shuffled, 0.5), want);
        }
    }

    #[test]
    fn decode_singleton_and_bounds() {
        let tl = timeline(16);
        let cfg = HeadConfig {
            num_classes: 2,
            ..Default::default()
        };
        let mut logits = Tensor::full(vec![8, 2], -20.0);
        logits.data_mut()[4 * 2 + 1] = 2.0;
        let offsets = Tensor::full(vec![8, 2], 1.5);
        let dets = decode(&logits, &offsets, &tl, &cfg).unwrap();
        assert_eq!(dets.len(), 1);
        let d = dets[0];
        assert_eq!((d.start, d.end, d.class_id), (6.0, 12.0, 1));
        assert!((d.score - sigmoid(2.0)).abs() < 1e-15);

        let logits = Tensor::full(vec![8, 2], 5.0);
        let offsets = Tensor::full(vec![8, 2], 100.0);
        for d in decode(&logits, &offsets, &tl, &cfg).unwrap() {
            assert!(0.0 <= d.start && d.start < d.end && d.end <= 16.0);
            assert!((0.0..=1.0).contains(&d.score));
        }
    }

    #[test]
    fn detection_json_shape() {
        let mut m = BTreeMap::new();
        m.insert("v".to_owned(), vec![det(1.0, 2.0, 3, 0.5)]);
        let v: serde_json::Value = serde_json::from_str(&detections_json(&m).unwrap()).unwrap();
        assert_eq!(v["v"][0]["class"], 3);
        assert_eq!(v["v"][0]["start"], 1.0);
    }
}
