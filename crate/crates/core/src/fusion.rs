//! Gated fusion of adapter outputs into the last-layer features.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterOutputs;
use crate::backbone::LayerDims;
use crate::error::{Error, Result};
use crate::params::Parameterized;
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateInit {
    #[default]
    Zero,
    /// Uniform in `[-0.1, 0.1]`.
    Random,
    Ones,
}

impl GateInit {
    pub const ALL: [GateInit; 3] = [GateInit::Zero, GateInit::Random, GateInit::Ones];

    pub fn name(self) -> &'static str {
        match self {
            GateInit::Zero => "zero",
            GateInit::Random => "random",
            GateInit::Ones => "ones",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub gate_init: GateInit,
    /// Without gating the adapter outputs are simply added to `F_N^X`.
    pub gated: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            gate_init: GateInit::Zero,
            gated: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Range {
    Short,
    Long,
}

impl Range {
    fn tag(self) -> &'static str {
        match self {
            Range::Short => "short",
            Range::Long => "long",
        }
    }
}

/// One scalar gate per adapted layer and range.
#[derive(Clone, Debug, Default)]
pub struct GateBank {
    pub short: Vec<(usize, Tensor)>,
    pub long: Vec<(usize, Tensor)>,
}

impl GateBank {
    fn side(&self, range: Range) -> &[(usize, Tensor)] {
        match range {
            Range::Short => &self.short,
            Range::Long => &self.long,
        }
    }

    pub fn get(&self, range: Range, layer: usize) -> Option<f64> {
        self.side(range).iter().find(|(i, _)| *i == layer).map(|(_, t)| t.data()[0])
    }

    pub fn set(&mut self, range: Range, layer: usize, value: f64) -> Result<()> {
        let side = match range {
            Range::Short => &mut self.short,
            Range::Long => &mut self.long,
        };
        let (_, t) = side
            .iter_mut()
            .find(|(i, _)| *i == layer)
            .ok_or_else(|| Error::Contract(format!("no {} gate on layer {layer}", range.tag())))?;
        t.data_mut()[0] = value;
        Ok(())
    }

    /// `(range, layer, value)` rows.
    pub fn report(&self) -> Vec<(&'static str, usize, f64)> {
        let mut rows = vec![];
        for range in [Range::Short, Range::Long] {
            for (i, t) in self.side(range) {
                rows.push((range.tag(), *i, t.data()[0]));
            }
        }
        rows
    }
}

/// Per-layer `T_i → T_N` maps applied clip by clip; absent when `T_i = T_N`.
#[derive(Clone, Debug, Default)]
pub struct TemporalProjection {
    pub short: Vec<(usize, Option<Tensor>)>,
    pub long: Vec<(usize, Option<Tensor>)>,
}

/// Block-averaging resampler from `from` to `to` timesteps.
fn resample_matrix(to: usize, from: usize) -> Tensor {
    let mut w = vec![0.0; to * from];
    for c in 0..from {
        let r = c * to / from;
        w[r * from + c] = 1.0;
    }
    for row in w.chunks_mut(from) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        } else {
            row.fill(1.0 / from as f64);
        }
    }
    Tensor::new(vec![to, from], w).expect("shape matches").with_requires_grad(true)
}

impl TemporalProjection {
    fn side(&self, range: Range) -> &[(usize, Option<Tensor>)] {
        match range {
            Range::Short => &self.short,
            Range::Long => &self.long,
        }
    }

    pub fn apply(&self, tape: &mut Tape, range: Range, layer: usize, x: Var, clips: usize) -> Result<Var> {
        let map = self
            .side(range)
            .iter()
            .find(|(i, _)| *i == layer)
            .ok_or_else(|| Error::Contract(format!("no {} projection for layer {layer}", range.tag())))?;
        match &map.1 {
            None => Ok(x),
            Some(w) => {
                let w = tape.param(format!("fusion.tproj.{}.{layer}", range.tag()), w);
                tape.clip_mix(x, w, clips)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Fusion {
    cfg: FusionConfig,
    layers: Vec<usize>,
    ranges: Vec<Range>,
    pub gates: GateBank,
    pub tproj: TemporalProjection,
    /// `[2C × C]`, initialized to `[½I; ½I]`.
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
}

impl Fusion {
    /// `layers` are the adapted layers, `ranges` the enabled adapter ranges.
    pub fn new(cfg: &FusionConfig, dims: &[LayerDims], layers: &[usize], ranges: &[Range], seed: u64) -> Self {
        let n = dims.len();
        let (t_n, c) = (dims[n - 1].t, dims[n - 1].c);
        let mut r = rng::stream(seed, "gates");
        let mut gates = GateBank::default();
        let mut tproj = TemporalProjection::default();
        for &range in ranges {
            for &i in layers {
                let map = (dims[i - 1].t != t_n).then(|| resample_matrix(t_n, dims[i - 1].t));
                match range {
                    Range::Short => tproj.short.push((i, map)),
                    Range::Long => tproj.long.push((i, map)),
                }
                if cfg.gated {
                    let v = match cfg.gate_init {
                        GateInit::Zero => 0.0,
                        GateInit::Random => r.random_range(-0.1..=0.1),
                        GateInit::Ones => 1.0,
                    };
                    let g = Tensor::full(vec![1], v).with_requires_grad(true);
                    match range {
                        Range::Short => gates.short.push((i, g)),
                        Range::Long => gates.long.push((i, g)),
                    }
                }
            }
        }
        let proj_weight = Tensor::from_fn(vec![2 * c, c], |k| {
            let (row, col) = (k / c, k % c);
            if row % c == col {
                0.5
            } else {
                0.0
            }
        })
        .with_requires_grad(cfg.gated);
        let proj_bias = Tensor::zeros(vec![c]).with_requires_grad(cfg.gated);
        Self {
            cfg: cfg.clone(),
            layers: layers.to_vec(),
            ranges: ranges.to_vec(),
            gates,
            tproj,
            proj_weight,
            proj_bias,
        }
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    fn has(&self, range: Range) -> bool {
        self.ranges.contains(&range)
    }

    /// `Σ_i p_i · project(x_i)` over the configured layers, or `None` when
    /// the range is disabled.
    pub fn gate_and_sum(&self, tape: &mut Tape, range: Range, outs: &[(usize, Var)], clips: usize) -> Result<Option<Var>> {
        if !self.has(range) {
            return Ok(None);
        }
        let mut acc: Option<Var> = None;
        for &i in &self.layers {
            let x = outs
                .iter()
                .find(|(l, _)| *l == i)
                .map(|&(_, v)| v)
                .ok_or_else(|| Error::Contract(format!("missing {} output of layer {i}", range.tag())))?;
            let x = self.tproj.apply(tape, range, i, x, clips)?;
            let term = if self.cfg.gated {
                let g = self
                    .gates
                    .side(range)
                    .iter()
                    .find(|(l, _)| *l == i)
                    .map(|(_, t)| t)
                    .expect("gate exists for every configured layer");
                let g = tape.param(format!("fusion.gate.{}.{i}", range.tag()), g);
                tape.scale_by(x, g)?
            } else {
                x
            };
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        Ok(acc)
    }

    pub fn gate_and_sum_short(&self, tape: &mut Tape, outs: &[(usize, Var)], clips: usize) -> Result<Option<Var>> {
        self.gate_and_sum(tape, Range::Short, outs, clips)
    }

    pub fn gate_and_sum_long(&self, tape: &mut Tape, outs: &[(usize, Var)], clips: usize) -> Result<Option<Var>> {
        self.gate_and_sum(tape, Range::Long, outs, clips)
    }

    /// `Proj([FS + F_N, FL + F_N])`, or the plain sum when ungated. A missing
    /// range contributes nothing beyond the residual.
    pub fn fuse(&self, tape: &mut Tape, fs: Option<Var>, fl: Option<Var>, f_n: Var) -> Result<Var> {
        for v in [fs, fl].into_iter().flatten() {
            if tape.shape(v) != tape.shape(f_n) {
                return Err(Error::dim(
                    "fuse",
                    format!("{:?} vs residual {:?}", tape.shape(v), tape.shape(f_n)),
                ));
            }
        }
        if !self.cfg.gated {
            let mut acc = f_n;
            for v in [fs, fl].into_iter().flatten() {
                acc = tape.add(acc, v)?;
            }
            return Ok(acc);
        }
        let c = self.proj_bias.numel();
        if tape.shape(f_n).get(1) != Some(&c) {
            return Err(Error::dim("fuse", format!("residual {:?} vs width {c}", tape.shape(f_n))));
        }
        let fs = match fs {
            Some(v) => tape.add(v, f_n)?,
            None => f_n,
        };
        let fl = match fl {
            Some(v) => tape.add(v, f_n)?,
            None => f_n,
        };
        let cat = tape.concat(&[fs, fl], 1)?;
        let w = tape.param("fusion.proj.weight", &self.proj_weight);
        let b = tape.param("fusion.proj.bias", &self.proj_bias);
        tape.linear(cat, w, Some(b))
    }

    pub fn forward(&self, tape: &mut Tape, outs: &AdapterOutputs, f_n: Var, clips: usize) -> Result<Var> {
        let fs = self.gate_and_sum_short(tape, &outs.short, clips)?;
        let fl = self.gate_and_sum_long(tape, &outs.long, clips)?;
        self.fuse(tape, fs, fl, f_n)
    }
}

impl Parameterized for Fusion {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for range in [Range::Short, Range::Long] {
            for (i, g) in self.gates.side(range) {
                f(&format!("fusion.gate.{}.{i}", range.tag()), g);
            }
            for (i, m) in self.tproj.side(range) {
                if let Some(m) = m {
                    f(&format!("fusion.tproj.{}.{i}", range.tag()), m);
                }
            }
        }
        if self.cfg.gated {
            f("fusion.proj.weight", &self.proj_weight);
            f("fusion.proj.bias", &self.proj_bias);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, g) in &mut self.gates.short {
            f(&format!("fusion.gate.short.{i}"), g);
        }
        for (i, m) in &mut self.tproj.short {
            if let Some(m) = m {
                f(&format!("fusion.tproj.short.{i}"), m);
            }
        }
        for (i, g) in &mut self.gates.long {
            f(&format!("fusion.gate.long.{i}"), g);
        }
        for (i, m) in &mut self.tproj.long {
            if let Some(m) = m {
                f(&format!("fusion.tproj.long.{i}"), m);
            }
        }
        if self.cfg.gated {
            f("fusion.proj.weight", &mut self.proj_weight);
            f("fusion.proj.bias", &mut self.proj_bias);
        }
    }
}
