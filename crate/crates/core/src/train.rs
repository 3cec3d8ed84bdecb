//! AdamW, the warmup-cosine schedule and the per-video training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::audit::{audit_report, AuditReport};
use crate::backbone::{split_clips, Clip, LayerFeatures, Timeline};
use crate::data::{augment, Dataset, SegmentAnnotation, UntrimmedVideo};
use crate::error::{Error, Result};
use crate::head::{build_targets, decode, head_loss, Detection, Targets};
use crate::metrics::{mean_ap, EvalConfig, MapReport};
use crate::model::{Mode, Model, ModelConfig, VideoInput};
use crate::params::{ParamSet, Parameterized};
use crate::rng;
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub warmup_epochs: f64,
    pub total_epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            weight_decay: 0.05,
            betas: [0.9, 0.999],
            eps: 1e-8,
            warmup_epochs: 5.0,
            total_epochs: 30,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::config("optim.base_lr", "must be > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("optim.weight_decay", "must be >= 0"));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::config("optim.betas", "must lie in [0, 1)"));
        }
        if self.total_epochs == 0 {
            return Err(Error::config("optim.total_epochs", "must be >= 1"));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.total_epochs as f64) {
            return Err(Error::config("optim.warmup_epochs", "must satisfy 0 <= warmup < total_epochs"));
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_epochs`.
pub fn lr_at(epoch: f64, cfg: &OptimConfig) -> f64 {
    let total = cfg.total_epochs as f64;
    let e = epoch.clamp(0.0, total);
    if e < cfg.warmup_epochs {
        return cfg.base_lr * e / cfg.warmup_epochs;
    }
    let span = total - cfg.warmup_epochs;
    let progress = if span > 0.0 { (e - cfg.warmup_epochs) / span } else { 1.0 };
    0.5 * cfg.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW with decoupled weight decay applied before the moment step.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    state: BTreeMap<String, Moments>,
    steps: u64,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Updates every learnable tensor from its gradient buffer and clears the
    /// buffer. A learnable tensor without a gradient is an audit failure.
    pub fn step(&mut self, model: &mut dyn Parameterized, lr: f64, cfg: &OptimConfig) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let [b1, b2] = cfg.betas;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let mut missing = None;
        model.visit_mut(&mut |path, p| {
            if !p.requires_grad() || missing.is_some() {
                return;
            }
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                missing = Some(path.to_owned());
                return;
            };
            let st = self.state.entry(path.to_owned()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                *x -= lr * cfg.weight_decay * *x;
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * g[i];
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = st.m[i] / c1;
                let vh = st.v[i] / c2;
                *x -= lr * mh / (vh.sqrt() + cfg.eps);
            }
            p.zero_grad();
        });
        match missing {
            Some(path) => Err(Error::Audit(format!("learnable parameter `{path}` received no gradient"))),
            None => Ok(()),
        }
    }
}

/// One video ready for training or evaluation.
#[derive(Clone, Debug)]
pub struct PreparedVideo {
    pub video: UntrimmedVideo,
    pub annotations: Vec<SegmentAnnotation>,
    pub timeline: Timeline,
    pub targets: Targets,
    /// Detached backbone features; absent when the backbone is trainable.
    pub features: Option<LayerFeatures>,
}

impl PreparedVideo {
    pub fn clips(&self, model: &Model) -> Result<Vec<Clip>> {
        split_clips(&self.video, &model.config().clip)
    }
}

/// Splits, extracts frozen features (in parallel across videos when
/// available) and builds per-timestep targets.
pub fn prepare(ds: &Dataset, model: &Model, with_features: bool) -> Result<Vec<PreparedVideo>> {
    let spec = model.config().clip;
    let steps = model.steps_per_clip();
    let k = model.config().head.num_classes;
    if ds.num_classes > k {
        return Err(Error::Mismatch(format!(
            "dataset has {} classes, head predicts {k}",
            ds.num_classes
        )));
    }
    crate::par::map_collect(&ds.samples, |s| {
        let timeline = spec.timeline(s.video.len(), steps);
        let targets = build_targets(&s.annotations, &timeline, k)?;
        let features = if with_features {
            Some(model.backbone.extract_video(&s.video)?)
        } else {
            None
        };
        Ok(PreparedVideo {
            video: s.video.clone(),
            annotations: s.annotations.clone(),
            timeline,
            targets,
            features,
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    /// Evaluate the test split every this many epochs (0: final epoch only).
    pub eval_every: usize,
    /// Temporally consistent crop size; `None` disables augmentation.
    pub augment_crop: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            eval_every: 1,
            augment_crop: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub avg_map: Option<f64>,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("epoch,split,loss,avg_mAP\n");
    for r in rows {
        let m = r.avg_map.map(|m| format!("{m:.6}")).unwrap_or_default();
        let _ = writeln!(s, "{},{},{:.9},{m}", r.epoch, r.split, r.loss);
    }
    s
}

pub fn gate_report_csv(rows: &[(&'static str, usize, f64)]) -> String {
    let mut s = String::from("range,layer,gate\n");
    for (r, l, g) in rows {
        let _ = writeln!(s, "{r},{l},{g:.9}");
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub audit: AuditReport,
    pub history: Vec<MetricRow>,
    pub final_eval: Option<Evaluation>,
}

impl TrainOutcome {
    pub fn test_avg_map(&self) -> Option<f64> {
        self.final_eval.as_ref().map(|e| e.report.avg_map)
    }
}

fn video_loss(model: &Model, tape: &mut Tape, pv: &PreparedVideo, aug: Option<(usize, &mut rng::Rng)>) -> Result<crate::tensor::Var> {
    let fwd = match (model.mode(), aug) {
        (Mode::FullBackbone, aug) => {
            let video = match aug {
                Some((crop, r)) => augment(&pv.video, crop, r)?,
                None => pv.video.clone(),
            };
            let clips = split_clips(&video, &model.config().clip)?;
            model.forward(tape, VideoInput::Clips(&clips))?
        }
        (_, Some((crop, r))) => {
            let feats = model.backbone.extract_video(&augment(&pv.video, crop, r)?)?;
            model.forward(tape, VideoInput::Features(&feats))?
        }
        (_, None) => match &pv.features {
            Some(f) => model.forward(tape, VideoInput::Features(f))?,
            None => {
                let clips = pv.clips(model)?;
                model.forward(tape, VideoInput::Clips(&clips))?
            }
        },
    };
    head_loss(tape, fwd.logits, fwd.offsets, &pv.targets)
}

/// Gradients of every parameter recorded on `tape`, summed per path.
pub fn collect_grads(tape: &Tape, loss: crate::tensor::Var) -> Result<BTreeMap<String, Vec<f64>>> {
    let grads = tape.backward(loss)?;
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (path, v) in tape.params() {
        let Some(g) = grads.get(v) else { continue };
        match out.get_mut(path) {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => {
                out.insert(path.to_owned(), g.to_vec());
            }
        }
    }
    Ok(out)
}

/// Writes gradients into the model's buffers. Any gradient addressed to a
/// frozen tensor (in particular a frozen backbone) is an audit failure.
pub fn route_grads(model: &mut Model, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    if model.backbone.is_frozen() {
        if let Some(p) = grads.keys().find(|p| p.starts_with("backbone.")) {
            return Err(Error::Audit(format!("gradient reached frozen backbone parameter `{p}`")));
        }
    }
    let mut err = None;
    model.visit_mut(&mut |path, t| {
        if let Some(g) = grads.get(path) {
            if let Err(e) = t.set_grad(g.clone()) {
                err.get_or_insert(Error::Audit(format!("cannot route gradient to `{path}`: {e}")));
            }
        }
    });
    err.map_or(Ok(()), Err)
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub detections: Vec<Vec<Detection>>,
    pub report: MapReport,
    pub loss: f64,
}

pub fn evaluate(model: &Model, videos: &[PreparedVideo], eval: &EvalConfig) -> Result<Evaluation> {
    let per_video = crate::par::map_collect(videos, |pv| {
        let mut tape = Tape::new();
        let fwd = match &pv.features {
            Some(f) if model.backbone.is_frozen() => model.forward(&mut tape, VideoInput::Features(f))?,
            _ => {
                let clips = pv.clips(model)?;
                model.forward(&mut tape, VideoInput::Clips(&clips))?
            }
        };
        let loss = head_loss(&mut tape, fwd.logits, fwd.offsets, &pv.targets)?;
        let dets = decode(
            tape.value(fwd.logits),
            tape.value(fwd.offsets),
            &pv.timeline,
            model.head.config(),
        )?;
        Ok::<_, Error>((dets, tape.value(loss).data()[0]))
    })?;
    let loss = per_video.iter().map(|(_, l)| l).sum::<f64>() / videos.len().max(1) as f64;
    let detections: Vec<Vec<Detection>> = per_video.into_iter().map(|(d, _)| d).collect();
    let gts: Vec<Vec<SegmentAnnotation>> = videos.iter().map(|v| v.annotations.clone()).collect();
    let report = mean_ap(&detections, &gts, eval)?;
    Ok(Evaluation {
        detections,
        report,
        loss,
    })
}

/// Trains `cfg.mode` for `optim.total_epochs` epochs, one video per step.
pub fn train(
    cfg: &ModelConfig,
    optim: &OptimConfig,
    eval: &EvalConfig,
    opts: &TrainOptions,
    train_set: &[PreparedVideo],
    test_set: &[PreparedVideo],
    seed: u64,
) -> Result<TrainOutcome> {
    optim.validate()?;
    eval.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut model = Model::new(cfg, seed)?;
    let backbone_before = ParamSet::snapshot(&model.backbone);
    let mut opt = AdamW::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle = rng::stream(seed, "shuffle");
    let mut aug_rng = rng::stream(seed, "augment");
    let mut history = vec![];
    let mut final_eval = None;
    let n = train_set.len() as f64;
    for epoch in 0..optim.total_epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for (i, &vi) in order.iter().enumerate() {
            let lr = lr_at(epoch as f64 + i as f64 / n, optim);
            let mut tape = Tape::new();
            let aug = opts.augment_crop.map(|c| (c, &mut aug_rng));
            let loss = video_loss(&model, &mut tape, &train_set[vi], aug)?;
            total += tape.value(loss).data()[0];
            let grads = collect_grads(&tape, loss)?;
            drop(tape);
            route_grads(&mut model, &grads)?;
            opt.step(&mut model, lr, optim)?;
        }
        history.push(MetricRow {
            epoch: epoch + 1,
            split: "train",
            loss: total / n,
            avg_map: None,
        });
        let last = epoch + 1 == optim.total_epochs;
        let due = opts.eval_every > 0 && (epoch + 1) % opts.eval_every == 0;
        if !test_set.is_empty() && (last || due) {
            let ev = evaluate(&model, test_set, eval)?;
            history.push(MetricRow {
                epoch: epoch + 1,
                split: "test",
                loss: ev.loss,
                avg_map: Some(ev.report.avg_map),
            });
            if last {
                final_eval = Some(ev);
            }
        }
    }
    let audit = audit_report(&model, train_set, &backbone_before)?;
    if model.mode() != Mode::FullBackbone && (audit.backbone_grad_buffers != 0 || !audit.backbone_unchanged) {
        return Err(Error::Audit(format!(
            "frozen backbone touched: {} gradient buffers, unchanged={}",
            audit.backbone_grad_buffers, audit.backbone_unchanged
        )));
    }
    Ok(TrainOutcome {
        model,
        audit,
        history,
        final_eval,
    })
}

pub fn train_losa(
    cfg: &ModelConfig,
    optim: &OptimConfig,
    eval: &EvalConfig,
    opts: &TrainOptions,
    train_set: &[PreparedVideo],
    test_set: &[PreparedVideo],
    seed: u64,
) -> Result<TrainOutcome> {
    if cfg.mode != Mode::Losa {
        return Err(Error::config("mode", "train_losa needs mode = losa"));
    }
    train(cfg, optim, eval, opts, train_set, test_set, seed)
}

pub fn train_baseline(
    cfg: &ModelConfig,
    optim: &OptimConfig,
    eval: &EvalConfig,
    opts: &TrainOptions,
    train_set: &[PreparedVideo],
    test_set: &[PreparedVideo],
    seed: u64,
) -> Result<TrainOutcome> {
    if cfg.mode == Mode::Losa {
        return Err(Error::config("mode", "baselines are head_only or full_backbone"));
    }
    train(cfg, optim, eval, opts, train_set, test_set, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    struct One(Tensor);

    impl Parameterized for One {
        fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
            f("p", &self.0);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f("p", &mut self.0);
        }
    }

    #[test]
    fn decay_only_step() {
        let mut p = One(Tensor::full(vec![1], 1.0).with_requires_grad(true));
        p.0.set_grad(vec![0.0]).unwrap();
        let cfg = OptimConfig {
            weight_decay: 0.01,
            ..Default::default()
        };
        AdamW::new().step(&mut p, 0.1, &cfg).unwrap();
        assert!((p.0.data()[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn matches_scalar_reference() {
        let cfg = OptimConfig::default();
        let (mut x, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        let mut p = One(Tensor::full(vec![1], 0.7).with_requires_grad(true));
        let mut opt = AdamW::new();
        for (t, g) in [0.3, -1.2, 0.05].into_iter().enumerate() {
            let lr = 0.01;
            x -= lr * 0.05 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            x -= lr * mh / (vh.sqrt() + 1e-8);
            p.0.set_grad(vec![g]).unwrap();
            opt.step(&mut p, lr, &cfg).unwrap();
            assert!((p.0.data()[0] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_gradient_descends() {
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = One(Tensor::full(vec![1], 0.0).with_requires_grad(true));
        let mut opt = AdamW::new();
        for _ in 0..50 {
            p.0.set_grad(vec![2.5]).unwrap();
            opt.step(&mut p, 0.01, &cfg).unwrap();
        }
        assert!(p.0.data()[0] < -0.4);
    }

    #[test]
    fn missing_gradient_is_an_audit_error() {
        let mut p = One(Tensor::full(vec![1], 0.0).with_requires_grad(true));
        let err = AdamW::new().step(&mut p, 0.1, &OptimConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Audit(ref m) if m.contains("`p`")));
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = OptimConfig {
            base_lr: 1e-4,
            ..Default::default()
        };
        assert_eq!(lr_at(0.0, &cfg), 0.0);
        assert!((lr_at(5.0, &cfg) - 1e-4).abs() < 1e-18);
        assert!(lr_at(30.0, &cfg).abs() < 1e-18);
        assert!((lr_at(2.5, &cfg) - 5e-5).abs() < 1e-18);
        assert!((lr_at(17.5, &cfg) - 5e-5).abs() < 1e-15);
        let bad = OptimConfig {
            warmup_epochs: 30.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn csv_shapes() {
        let rows = [
            MetricRow {
                epoch: 1,
                split: "train",
                loss: 0.5,
                avg_map: None,
            },
            MetricRow {
                epoch: 1,
                split: "test",
                loss: 0.25,
                avg_map: Some(0.125),
            },
        ];
        assert_eq!(
            metrics_csv(&rows),
            "epoch,split,loss,avg_mAP\n1,train,0.500000000,\n1,test,0.250000000,0.125000\n"
        );
        assert_eq!(gate_report_csv(&[("short", 1, 0.5)]), "range,layer,gate\nshort,1,0.500000000\n");
    }
}
