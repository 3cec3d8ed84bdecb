//! Parameter and memory accounting, plus the end-to-end gradient check of
//! adapters, fusion and head.

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, AdapterInputs, AdapterStack};
use crate::backbone::{ClipSpec, LayerDims};
use crate::data::SegmentAnnotation;
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig, GateInit, Range};
use crate::head::{build_targets, head_loss, Head, HeadConfig, Targets};
use crate::model::{Mode, Model, ModelConfig, VideoInput};
use crate::params::{count_learnable, count_params, grad_buffers, ParamSet, Parameterized};
use crate::rng;
use crate::tensor::gradcheck::{rel_err, CheckOutcome, FD_EPS, FD_TOL};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{collect_grads, PreparedVideo};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub mode: Mode,
    pub learnable_params: usize,
    pub frozen_params: usize,
    pub learnable_fraction: f64,
    /// Video whose forward pass is measured: the one with the most clips.
    pub peak_video: String,
    pub peak_clips: usize,
    pub tape_nodes_head_only: usize,
    pub tape_nodes_losa: usize,
    pub tape_nodes_fullbackbone: usize,
    pub backbone_grad_buffers: usize,
    pub backbone_unchanged: bool,
}

/// Nodes recorded by one forward pass and loss on `pv`.
pub fn count_nodes(model: &Model, pv: &PreparedVideo) -> Result<usize> {
    let mut tape = Tape::new();
    let fwd = match (&pv.features, model.backbone.is_frozen()) {
        (Some(f), true) => model.forward(&mut tape, VideoInput::Features(f))?,
        _ => {
            let clips = pv.clips(model)?;
            model.forward(&mut tape, VideoInput::Clips(&clips))?
        }
    };
    head_loss(&mut tape, fwd.logits, fwd.offsets, &pv.targets)?;
    Ok(tape.node_count())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct NodeCounts {
    pub head_only: usize,
    pub losa: usize,
    pub full_backbone: usize,
}

impl NodeCounts {
    /// `head_only ≤ losa < full_backbone`.
    pub fn ordered(&self) -> bool {
        self.head_only <= self.losa && self.losa < self.full_backbone
    }

    pub fn losa_ratio(&self) -> f64 {
        self.losa as f64 / self.full_backbone as f64
    }
}

/// Builds all three variants of `cfg` and counts nodes on the same video.
pub fn node_counts(cfg: &ModelConfig, pv: &PreparedVideo, seed: u64) -> Result<NodeCounts> {
    let variant = |mode: Mode| -> Result<Model> {
        let mut c = cfg.clone();
        c.mode = mode;
        if cfg.mode != Mode::Losa {
            c.adapter = AdapterConfig::default();
            c.fusion = FusionConfig::default();
        }
        Model::new(&c, seed)
    };
    Ok(NodeCounts {
        head_only: count_nodes(&variant(Mode::HeadOnly)?, pv)?,
        losa: count_nodes(&variant(Mode::Losa)?, pv)?,
        full_backbone: count_nodes(&variant(Mode::FullBackbone)?, pv)?,
    })
}

/// The video with the most clips; first one wins ties.
pub fn peak_video(videos: &[PreparedVideo]) -> Option<&PreparedVideo> {
    videos.iter().rev().max_by_key(|v| v.timeline.len())
}

pub fn audit_report(model: &Model, train_set: &[PreparedVideo], backbone_before: &ParamSet) -> Result<AuditReport> {
    let peak = peak_video(train_set).ok_or_else(|| Error::Input("no videos to audit".into()))?;
    let counts = node_counts(model.config(), peak, 0)?;
    let learnable = count_learnable(model);
    let total = count_params(model);
    Ok(AuditReport {
        mode: model.mode(),
        learnable_params: learnable,
        frozen_params: total - learnable,
        learnable_fraction: learnable as f64 / total as f64,
        peak_video: peak.video.video_id.clone(),
        peak_clips: peak.timeline.len() / model.steps_per_clip(),
        tape_nodes_head_only: counts.head_only,
        tape_nodes_losa: counts.losa,
        tape_nodes_fullbackbone: counts.full_backbone,
        backbone_grad_buffers: grad_buffers(&model.backbone),
        backbone_unchanged: ParamSet::snapshot(&model.backbone).bit_eq(backbone_before),
    })
}

/// A small adapter + fusion + head stack with fixed random inputs.
#[derive(Clone, Debug)]
pub struct Composite {
    pub adapters: AdapterStack,
    pub fusion: Fusion,
    pub head: Head,
    inputs: Vec<Tensor>,
    targets: Targets,
    clips: usize,
}

impl Composite {
    /// Three backbone layers of `2 × 2 × 2 × 4`, two clips, two classes.
    pub fn small(seed: u64) -> Result<Self> {
        let dims = vec![LayerDims { t: 2, h: 2, w: 2, c: 4 }; 3];
        let cfg = AdapterConfig {
            heads: 2,
            ..Default::default()
        };
        let mut adapters = AdapterStack::new(&cfg, &dims, seed)?;
        // Training-scale init gives near-uniform attention, whose query and key
        // gradients vanish below finite-difference resolution.
        let mut r = rng::stream(seed, "composite-weights");
        adapters.visit_mut(&mut |_, t| {
            let fresh = rng::uniform(&mut r, t.shape().to_vec(), -0.8, 0.8);
            t.data_mut().copy_from_slice(fresh.data());
        });
        let mut fusion = Fusion::new(
            &FusionConfig {
                gate_init: GateInit::Random,
                gated: true,
            },
            &dims,
            adapters.layers(),
            &[Range::Short, Range::Long],
            seed,
        );
        // Order-one gates keep adapter gradients well above finite-difference noise.
        for (i, &layer) in adapters.layers().iter().enumerate() {
            fusion.gates.set(Range::Short, layer, 0.6 + 0.1 * i as f64)?;
            fusion.gates.set(Range::Long, layer, -0.7 + 0.1 * i as f64)?;
        }
        let mut head = Head::new(
            &HeadConfig {
                num_classes: 2,
                ..Default::default()
            },
            4,
            seed,
        )?;
        head.visit_mut(&mut |_, t| {
            let fresh = rng::uniform(&mut r, t.shape().to_vec(), -0.8, 0.8);
            t.data_mut().copy_from_slice(fresh.data());
        });
        let clips = 2;
        let mut r = rng::stream(seed, "composite-inputs");
        let inputs = (0..3).map(|_| rng::uniform(&mut r, vec![clips * 2, 2, 2, 4], -1.0, 1.0)).collect();
        let spec = ClipSpec { clip_len: 4, stride: 4 };
        let timeline = spec.timeline(8, 2);
        let targets = build_targets(&[SegmentAnnotation::new(1.0, 5.0, 1)], &timeline, 2)?;
        Ok(Self {
            adapters,
            fusion,
            head,
            inputs,
            targets,
            clips,
        })
    }

    pub fn loss(&self, tape: &mut Tape) -> Result<Var> {
        let layers: Vec<Var> = self.inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let f_n = tape.mean(layers[2], &[1, 2])?;
        let outs = self.adapters.forward(
            tape,
            &AdapterInputs {
                layers,
                clips: self.clips,
            },
        )?;
        let ft = self.fusion.forward(tape, &outs, f_n, self.clips)?;
        let (l, o) = self.head.forward(tape, ft)?;
        head_loss(tape, l, o, &self.targets)
    }

    fn loss_value(&self) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.loss(&mut tape)?;
        Ok(tape.value(l).data()[0])
    }
}

impl Parameterized for Composite {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.adapters.visit(f);
        self.fusion.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.adapters.visit_mut(f);
        self.fusion.visit_mut(f);
        self.head.visit_mut(f);
    }
}

fn nudge(c: &mut Composite, index: usize, delta: f64) {
    let mut seen = 0;
    c.visit_mut(&mut |_, t| {
        let n = t.numel();
        if index >= seen && index < seen + n {
            t.data_mut()[index - seen] += delta;
        }
        seen += n;
    });
}

/// Central differences over every parameter of [`Composite::small`] against
/// the tape's gradients. `fault` corrupts one op's backward rule.
pub fn composite_gradcheck(fault: Option<&'static str>) -> Result<CheckOutcome> {
    let mut c = Composite::small(5)?;
    let mut tape = Tape::new();
    if let Some(op) = fault {
        tape.inject_backward_fault(op);
    }
    let loss = c.loss(&mut tape)?;
    let grads = collect_grads(&tape, loss)?;
    let mut analytic = vec![];
    let mut spans = vec![];
    let mut missing = None;
    c.visit(&mut |p, t| {
        spans.push(analytic.len()..analytic.len() + t.numel());
        match grads.get(p) {
            Some(g) => analytic.extend_from_slice(g),
            None => {
                missing.get_or_insert(p.to_owned());
                analytic.extend(std::iter::repeat_n(0.0, t.numel()));
            }
        }
    });
    if let Some(p) = missing {
        return Err(Error::Audit(format!("composite parameter `{p}` received no gradient")));
    }
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..analytic.len() {
        nudge(&mut c, i, FD_EPS);
        let up = c.loss_value()?;
        nudge(&mut c, i, -2.0 * FD_EPS);
        let down = c.loss_value()?;
        nudge(&mut c, i, FD_EPS);
        numeric.push((up - down) / (2.0 * FD_EPS));
    }
    // Per tensor, so small attention gradients are not drowned out by the head.
    let err = spans
        .into_iter()
        .map(|r| rel_err(&analytic[r.clone()], &numeric[r]))
        .fold(0.0, f64::max);
    Ok(CheckOutcome {
        name: "adapter+fusion+head".into(),
        max_rel_err: err,
        params: analytic.len(),
        passed: err < FD_TOL,
    })
}
