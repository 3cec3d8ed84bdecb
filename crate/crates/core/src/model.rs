//! The assembled detector in one of three training modes.

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, AdapterInputs, AdapterStack};
use crate::backbone::{Backbone, BackboneConfig, Clip, ClipSpec, LayerFeatures};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig, Range};
use crate::head::{Head, HeadConfig};
use crate::params::Parameterized;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Frozen backbone, adapters + fusion + head trained on detached features.
    #[default]
    Losa,
    /// Frozen backbone, head trained on the pooled last layer.
    HeadOnly,
    /// Backbone and head trained end to end.
    FullBackbone,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Losa => "losa",
            Mode::HeadOnly => "head_only",
            Mode::FullBackbone => "full_backbone",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "losa" => Some(Mode::Losa),
            "head_only" => Some(Mode::HeadOnly),
            "full_backbone" => Some(Mode::FullBackbone),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: Mode,
    pub clip: ClipSpec,
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub fusion: FusionConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate(&self.clip)?;
        self.head.validate()?;
        if self.mode == Mode::Losa {
            self.adapter.validate(self.backbone.channels, self.backbone.num_layers)?;
        }
        Ok(())
    }
}

/// Backbone output for one video: cached detached features or raw clips.
#[derive(Clone, Copy, Debug)]
pub enum VideoInput<'a> {
    Features(&'a LayerFeatures),
    Clips(&'a [Clip]),
}

#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub logits: Var,
    pub offsets: Var,
    /// Features consumed by the head, `[(T·T_N) × C]`.
    pub ft: Var,
    /// Spatially pooled last layer, `[(T·T_N) × C]`.
    pub f_n: Var,
    pub clips: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    pub backbone: Backbone,
    pub adapters: Option<AdapterStack>,
    pub fusion: Option<Fusion>,
    pub head: Head,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut cfg = cfg.clone();
        cfg.backbone.frozen = cfg.mode != Mode::FullBackbone;
        let backbone = Backbone::new(&cfg.backbone, &cfg.clip)?;
        let dims = backbone.layer_dims();
        let (adapters, fusion) = if cfg.mode == Mode::Losa {
            let stack = AdapterStack::new(&cfg.adapter, &dims, seed)?;
            let mut ranges = vec![];
            if cfg.adapter.short {
                ranges.push(Range::Short);
            }
            if cfg.adapter.long {
                ranges.push(Range::Long);
            }
            let fusion = Fusion::new(&cfg.fusion, &dims, stack.layers(), &ranges, seed);
            (Some(stack), Some(fusion))
        } else {
            (None, None)
        };
        let head = Head::new(&cfg.head, cfg.backbone.channels, seed)?;
        Ok(Self {
            cfg,
            backbone,
            adapters,
            fusion,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn mode(&self) -> Mode {
        self.cfg.mode
    }

    /// Timesteps per clip at the last layer.
    pub fn steps_per_clip(&self) -> usize {
        self.backbone.layer_dims().last().expect("at least two layers").t
    }

    pub fn forward(&self, tape: &mut Tape, input: VideoInput<'_>) -> Result<Forward> {
        let n = self.cfg.backbone.num_layers;
        let (layers, clips) = match input {
            VideoInput::Features(f) => {
                if !self.backbone.is_frozen() {
                    return Err(Error::Contract("cached features need a frozen backbone".into()));
                }
                if f.num_layers() != n {
                    return Err(Error::Contract(format!(
                        "features have {} layers, backbone has {n}",
                        f.num_layers()
                    )));
                }
                let needed = |i: usize| i == n || self.adapters.as_ref().is_some_and(|a| a.layers().contains(&i));
                let vars = (1..=n)
                    .map(|i| {
                        let t = if needed(i) {
                            f.concatenated(i - 1)
                        } else {
                            Tensor::zeros(vec![1])
                        };
                        tape.constant(t)
                    })
                    .collect::<Vec<_>>();
                (vars, f.num_clips())
            }
            VideoInput::Clips(cs) => {
                if cs.is_empty() {
                    return Err(Error::Input("video has no clips".into()));
                }
                let per_layer = self.backbone.forward_all_layers(tape, cs)?;
                let mut vars = Vec::with_capacity(n);
                for (i, maps) in per_layer.into_iter().enumerate() {
                    let used = i + 1 == n || self.adapters.as_ref().is_some_and(|a| a.layers().contains(&(i + 1)));
                    vars.push(if used {
                        tape.concat(&maps, 0)?
                    } else {
                        maps[0]
                    });
                }
                (vars, cs.len())
            }
        };
        let f_n = tape.mean(layers[n - 1], &[1, 2])?;
        let ft = match (&self.adapters, &self.fusion) {
            (Some(a), Some(f)) => {
                let outs = a.forward(
                    tape,
                    &AdapterInputs {
                        layers: layers.clone(),
                        clips,
                    },
                )?;
                f.forward(tape, &outs, f_n, clips)?
            }
            _ => f_n,
        };
        let (logits, offsets) = self.head.forward(tape, ft)?;
        Ok(Forward {
            logits,
            offsets,
            ft,
            f_n,
            clips,
        })
    }

    pub fn gate_report(&self) -> Vec<(&'static str, usize, f64)> {
        self.fusion.as_ref().map(|f| f.gates.report()).unwrap_or_default()
    }

    /// Every parameter outside the backbone.
    pub fn visit_trainable_side(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        if let Some(a) = &self.adapters {
            a.visit(f);
        }
        if let Some(x) = &self.fusion {
            x.visit(f);
        }
        self.head.visit(f);
    }
}

impl Parameterized for Model {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.backbone.visit(f);
        self.visit_trainable_side(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.backbone.visit_mut(f);
        if let Some(a) = &mut self.adapters {
            a.visit_mut(f);
        }
        if let Some(x) = &mut self.fusion {
            x.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::split_clips;
    use crate::data::{generate, GeneratorConfig};
    use crate::params::{count_learnable, count_params};

    #[test]
    fn default_losa_is_parameter_efficient() {
        let m = Model::new(&ModelConfig::default(), 0).unwrap();
        let (l, all) = (count_learnable(&m), count_params(&m));
        assert!((l as f64) / (all as f64) <= 0.20, "{l}/{all}");
        let h = Model::new(
            &ModelConfig {
                mode: Mode::HeadOnly,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let mut paths = vec![];
        h.visit(&mut |p, t| {
            if t.requires_grad() {
                paths.push(p.to_owned())
            }
        });
        assert!(paths.iter().all(|p| p.starts_with("head.")));
    }

    #[test]
    fn zero_init_ft_equals_pooled_last_layer() {
        let ds = generate(&GeneratorConfig {
            num_videos: 2,
            max_len: 100,
            ..Default::default()
        })
        .unwrap();
        let m = Model::new(&ModelConfig::default(), 9).unwrap();
        for s in &ds.samples {
            let clips = split_clips(&s.video, &m.config().clip).unwrap();
            let mut tape = Tape::new();
            let f = m.forward(&mut tape, VideoInput::Clips(&clips)).unwrap();
            assert!(tape.value(f.ft).bit_eq(tape.value(f.f_n)));
            let feats = m.backbone.extract(&clips).unwrap();
            let mut t2 = Tape::new();
            let g = m.forward(&mut t2, VideoInput::Features(&feats)).unwrap();
            assert!(tape.value(f.logits).bit_eq(t2.value(g.logits)));
            assert!(t2.value(g.f_n).bit_eq(&feats.pooled_last()));
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [Mode::Losa, Mode::HeadOnly, Mode::FullBackbone] {
            assert_eq!(Mode::parse(m.name()), Some(m));
        }
        assert_eq!(Mode::parse("nope"), None);
    }
}
