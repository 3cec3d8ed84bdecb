//! Short- and long-range cross-attention adapters on intermediate layers.
//!
//! Each adapted layer owns a [`ReductionBlock`] that collapses the spatial
//! grid and maps channels to the common width; the last layer owns one too
//! and supplies keys and values for every adapter.

use serde::{Deserialize, Serialize};

use crate::backbone::LayerDims;
use crate::error::{Error, Result};
use crate::params::Parameterized;
use crate::rng::{self, Rng};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub heads: usize,
    /// 1-based intermediate layers carrying adapters; empty means all.
    pub layers: Vec<usize>,
    pub short: bool,
    pub long: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            layers: vec![],
            short: true,
            long: true,
        }
    }
}

impl AdapterConfig {
    /// Active layers, sorted, for a backbone of `num_layers`.
    pub fn active_layers(&self, num_layers: usize) -> Result<Vec<usize>> {
        if self.layers.is_empty() {
            return Ok((1..num_layers).collect());
        }
        let mut l = self.layers.clone();
        l.sort_unstable();
        l.dedup();
        if l.iter().any(|&i| i == 0 || i >= num_layers) {
            return Err(Error::config(
                "adapter.layers",
                format!("layers must lie in 1..={}", num_layers - 1),
            ));
        }
        Ok(l)
    }

    pub fn validate(&self, channels: usize, num_layers: usize) -> Result<()> {
        if self.heads == 0 || !channels.is_multiple_of(self.heads) {
            return Err(Error::config(
                "adapter.heads",
                format!("{channels} channels are not divisible by {} heads", self.heads),
            ));
        }
        if !self.short && !self.long {
            return Err(Error::config("adapter.short", "at least one adapter range must be enabled"));
        }
        self.active_layers(num_layers).map(|_| ())
    }
}

/// Depthwise 3×3 conv, GELU, spatial mean, then a channel map to width C.
#[derive(Clone, Debug)]
pub struct ReductionBlock {
    pub dw_weight: Tensor,
    pub dw_bias: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ReductionBlock {
    pub fn new(r: &mut Rng, c_in: usize, c: usize) -> Self {
        Self {
            dw_weight: rng::fan_in_uniform(r, vec![3, 3, c_in], 9),
            dw_bias: rng::fan_in_uniform(r, vec![c_in], 9),
            weight: rng::fan_in_uniform(r, vec![c_in, c], c_in),
            bias: rng::fan_in_uniform(r, vec![c], c_in),
        }
    }

    /// `[n × H × W × C_i]` → `[n × C]`.
    pub fn forward(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 4 || s[3] != self.dw_weight.shape()[2] {
            return Err(Error::dim(
                "reduce",
                format!("input {s:?} vs {} channels", self.dw_weight.shape()[2]),
            ));
        }
        let dw = tape.param(format!("{prefix}.dw.weight"), &self.dw_weight);
        let db = tape.param(format!("{prefix}.dw.bias"), &self.dw_bias);
        let w = tape.param(format!("{prefix}.weight"), &self.weight);
        let b = tape.param(format!("{prefix}.bias"), &self.bias);
        let h = tape.depthwise_conv2d(x, dw, db)?;
        let h = tape.gelu(h)?;
        let h = tape.mean(h, &[1, 2])?;
        tape.linear(h, w, Some(b))
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.dw.weight"), &self.dw_weight);
        f(&format!("{prefix}.dw.bias"), &self.dw_bias);
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.dw.weight"), &mut self.dw_weight);
        f(&format!("{prefix}.dw.bias"), &mut self.dw_bias);
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Multi-head cross-attention without biases: `W_O · concat_h softmax(Q_h K_hᵀ/√d_h) V_h`.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub heads: usize,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl CrossAttention {
    pub fn new(r: &mut Rng, c: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !c.is_multiple_of(heads) {
            return Err(Error::dim("cross_attend", format!("width {c} with {heads} heads")));
        }
        let mut w = || rng::fan_in_uniform(r, vec![c, c], c);
        Ok(Self {
            heads,
            wq: w(),
            wk: w(),
            wv: w(),
            wo: w(),
        })
    }

    pub fn width(&self) -> usize {
        self.wq.shape()[0]
    }

    fn project(&self, tape: &mut Tape, prefix: &str, q: Var, kv: Var) -> Result<(Var, Var, Var)> {
        let c = self.width();
        for v in [q, kv] {
            match *tape.shape(v) {
                [n, w] if w == c && n >= 1 => {}
                ref s => return Err(Error::dim("cross_attend", format!("input {s:?} vs width {c}"))),
            }
        }
        let wq = tape.param(format!("{prefix}.wq"), &self.wq);
        let wk = tape.param(format!("{prefix}.wk"), &self.wk);
        let wv = tape.param(format!("{prefix}.wv"), &self.wv);
        let q = tape.linear(q, wq, None)?;
        let k = tape.linear(kv, wk, None)?;
        let v = tape.linear(kv, wv, None)?;
        Ok((
            tape.split_heads(q, self.heads)?,
            tape.split_heads(k, self.heads)?,
            tape.split_heads(v, self.heads)?,
        ))
    }

    fn alpha(&self) -> f64 {
        1.0 / ((self.width() / self.heads) as f64).sqrt()
    }

    /// `q: [m × C]`, `kv: [n × C]` → `[m × C]`.
    pub fn forward(&self, tape: &mut Tape, prefix: &str, q: Var, kv: Var) -> Result<Var> {
        let (qh, kh, vh) = self.project(tape, prefix, q, kv)?;
        let s = tape.batched_matmul(qh, kh, true, self.alpha())?;
        let a = tape.softmax_rows(s)?;
        let o = tape.batched_matmul(a, vh, false, 1.0)?;
        let o = tape.merge_heads(o)?;
        let wo = tape.param(format!("{prefix}.wo"), &self.wo);
        tape.linear(o, wo, None)
    }

    /// Attention weights `[heads × m × n]`, computed off the caller's tape.
    pub fn weights(&self, q: &Tensor, kv: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (q, kv) = (tape.constant(q.detached()), tape.constant(kv.detached()));
        let frozen = self.detached();
        let (qh, kh, _) = frozen.project(&mut tape, "", q, kv)?;
        let s = tape.batched_matmul(qh, kh, true, self.alpha())?;
        let a = tape.softmax_rows(s)?;
        Ok(tape.value(a).detached())
    }

    fn detached(&self) -> Self {
        Self {
            heads: self.heads,
            wq: self.wq.detached(),
            wk: self.wk.detached(),
            wv: self.wv.detached(),
            wo: self.wo.detached(),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.wq"), &self.wq);
        f(&format!("{prefix}.wk"), &self.wk);
        f(&format!("{prefix}.wv"), &self.wv);
        f(&format!("{prefix}.wo"), &self.wo);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.wq"), &mut self.wq);
        f(&format!("{prefix}.wk"), &mut self.wk);
        f(&format!("{prefix}.wv"), &mut self.wv);
        f(&format!("{prefix}.wo"), &mut self.wo);
    }
}

/// Tape-level cross-attention on plain tensors.
pub fn cross_attend(q: &Tensor, k_v: &Tensor, attn: &CrossAttention) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (q, kv) = (tape.constant(q.detached()), tape.constant(k_v.detached()));
    let out = attn.detached().forward(&mut tape, "", q, kv)?;
    Ok(tape.value(out).detached())
}

/// Layer inputs for one video: `F^X_i` for every backbone layer, each the
/// clip maps concatenated along time, `[(T·T_i) × H_i × W_i × C_i]`.
#[derive(Clone, Debug)]
pub struct AdapterInputs {
    pub layers: Vec<Var>,
    pub clips: usize,
}

/// Reduced features `F′^X_i` keyed by 1-based layer, plus adapter outputs.
#[derive(Clone, Debug, Default)]
pub struct AdapterOutputs {
    pub reduced: Vec<(usize, Var)>,
    /// `FS^X_i` (concatenated over clips), `[(T·T_i) × C]`.
    pub short: Vec<(usize, Var)>,
    /// `FL^X_i`, `[(T·T_i) × C]`.
    pub long: Vec<(usize, Var)>,
}

impl AdapterOutputs {
    pub fn reduced(&self, layer: usize) -> Option<Var> {
        self.reduced.iter().find(|(i, _)| *i == layer).map(|&(_, v)| v)
    }
}

#[derive(Clone, Debug)]
pub struct AdapterStack {
    cfg: AdapterConfig,
    num_layers: usize,
    dims: Vec<LayerDims>,
    layers: Vec<usize>,
    reduce: Vec<(usize, ReductionBlock)>,
    short: Vec<(usize, CrossAttention)>,
    long: Vec<(usize, CrossAttention)>,
}

impl AdapterStack {
    pub fn new(cfg: &AdapterConfig, dims: &[LayerDims], seed: u64) -> Result<Self> {
        let n = dims.len();
        let c = dims[n - 1].c;
        cfg.validate(c, n)?;
        let layers = cfg.active_layers(n)?;
        let mut r = rng::stream(seed, "adapters");
        let reduce = layers
            .iter()
            .chain(std::iter::once(&n))
            .map(|&i| (i, ReductionBlock::new(&mut r, dims[i - 1].c, c)))
            .collect();
        let mut attn = |on: bool| -> Result<Vec<(usize, CrossAttention)>> {
            if !on {
                return Ok(vec![]);
            }
            layers
                .iter()
                .map(|&i| Ok((i, CrossAttention::new(&mut r, c, cfg.heads)?)))
                .collect()
        };
        let short = attn(cfg.short)?;
        let long = attn(cfg.long)?;
        Ok(Self {
            cfg: cfg.clone(),
            num_layers: n,
            dims: dims.to_vec(),
            layers,
            reduce,
            short,
            long,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn dims(&self) -> &[LayerDims] {
        &self.dims
    }

    pub fn short_attention(&self, layer: usize) -> Option<&CrossAttention> {
        self.short.iter().find(|(i, _)| *i == layer).map(|(_, a)| a)
    }

    pub fn long_attention(&self, layer: usize) -> Option<&CrossAttention> {
        self.long.iter().find(|(i, _)| *i == layer).map(|(_, a)| a)
    }

    pub fn short_attention_mut(&mut self, layer: usize) -> Option<&mut CrossAttention> {
        self.short.iter_mut().find(|(i, _)| *i == layer).map(|(_, a)| a)
    }

    pub fn long_attention_mut(&mut self, layer: usize) -> Option<&mut CrossAttention> {
        self.long.iter_mut().find(|(i, _)| *i == layer).map(|(_, a)| a)
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == self.num_layers {
            return Err(Error::Contract(format!("layer {layer} is the last layer and has no adapter")));
        }
        if !self.layers.contains(&layer) {
            return Err(Error::Contract(format!("layer {layer} carries no adapter")));
        }
        Ok(())
    }

    /// `F′^X_i` for layer `layer` (1-based).
    pub fn reduce(&self, tape: &mut Tape, layer: usize, x: Var) -> Result<Var> {
        let block = self
            .reduce
            .iter()
            .find(|(i, _)| *i == layer)
            .map(|(_, b)| b)
            .ok_or_else(|| Error::Contract(format!("no reduction block for layer {layer}")))?;
        block.forward(tape, &format!("adapter.reduce.{layer}"), x)
    }

    /// `FS_i^{x_t}` for one clip: its own queries against every clip's
    /// last-layer keys and values.
    pub fn short_range_forward(&self, tape: &mut Tape, layer: usize, t: usize, reduced_i: Var, reduced_last: Var, clips: usize) -> Result<Var> {
        self.check_layer(layer)?;
        let attn = self
            .short_attention(layer)
            .ok_or_else(|| Error::Contract("short-range adapter disabled".into()))?;
        let steps = self.dims[layer - 1].t;
        if t >= clips || tape.shape(reduced_i)[0] != clips * steps {
            return Err(Error::Contract(format!("clip {t} of {clips} out of range")));
        }
        let q = tape.narrow(reduced_i, 0, t * steps, steps)?;
        attn.forward(tape, &format!("adapter.short.{layer}"), q, reduced_last)
    }

    /// Short-range outputs of all clips at once. Query rows are independent,
    /// so this equals concatenating [`Self::short_range_forward`] over clips.
    pub fn short_range_all(&self, tape: &mut Tape, layer: usize, reduced_i: Var, reduced_last: Var) -> Result<Var> {
        self.check_layer(layer)?;
        let attn = self
            .short_attention(layer)
            .ok_or_else(|| Error::Contract("short-range adapter disabled".into()))?;
        attn.forward(tape, &format!("adapter.short.{layer}"), reduced_i, reduced_last)
    }

    /// `FL^X_i`: the full concatenated sequence of layer `layer` as queries.
    pub fn long_range_forward(&self, tape: &mut Tape, layer: usize, reduced_i: Var, reduced_last: Var) -> Result<Var> {
        self.check_layer(layer)?;
        let attn = self
            .long_attention(layer)
            .ok_or_else(|| Error::Contract("long-range adapter disabled".into()))?;
        attn.forward(tape, &format!("adapter.long.{layer}"), reduced_i, reduced_last)
    }

    pub fn forward(&self, tape: &mut Tape, inputs: &AdapterInputs) -> Result<AdapterOutputs> {
        if inputs.layers.len() != self.num_layers {
            return Err(Error::Contract(format!(
                "expected {} layer inputs, got {}",
                self.num_layers,
                inputs.layers.len()
            )));
        }
        let n = self.num_layers;
        let last = self.reduce(tape, n, inputs.layers[n - 1])?;
        let mut out = AdapterOutputs::default();
        for &i in &self.layers {
            let r = self.reduce(tape, i, inputs.layers[i - 1])?;
            out.reduced.push((i, r));
            if self.cfg.short {
                out.short.push((i, self.short_range_all(tape, i, r, last)?));
            }
            if self.cfg.long {
                out.long.push((i, self.long_range_forward(tape, i, r, last)?));
            }
        }
        out.reduced.push((n, last));
        Ok(out)
    }
}

impl Parameterized for AdapterStack {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, b) in &self.reduce {
            b.visit(&format!("adapter.reduce.{i}"), f);
        }
        for (i, a) in &self.short {
            a.visit(&format!("adapter.short.{i}"), f);
        }
        for (i, a) in &self.long {
            a.visit(&format!("adapter.long.{i}"), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, b) in &mut self.reduce {
            b.visit_mut(&format!("adapter.reduce.{i}"), f);
        }
        for (i, a) in &mut self.short {
            a.visit_mut(&format!("adapter.short.{i}"), f);
        }
        for (i, a) in &mut self.long {
            a.visit_mut(&format!("adapter.long.{i}"), f);
        }
    }
}
