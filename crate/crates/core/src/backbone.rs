//! Frozen toy video backbone and the untrimmed-video clip splitter.
//!
//! Layer 1 is a per-frame spatial stem followed by spatio-temporal pooling;
//! layers 2…N are residual blocks of two 3×3×3 convolutions, a pointwise
//! channel mix and layer normalization. Every layer emits a
//! `T_i × H_i × W_i × C` map per clip, and clips never see each other.

use serde::{Deserialize, Serialize};

use crate::data::UntrimmedVideo;
use crate::error::{Error, Result};
use crate::params::{ParamSet, Parameterized};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipSpec {
    /// Frames per clip (T′).
    pub clip_len: usize,
    /// Frames between consecutive clip starts.
    pub stride: usize,
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self {
            clip_len: 16,
            stride: 16,
        }
    }
}

impl ClipSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 {
            return Err(Error::config("clip.clip_len", "must be >= 1"));
        }
        if self.stride == 0 {
            return Err(Error::config("clip.stride", "must be >= 1"));
        }
        Ok(())
    }

    /// Number of clips needed to cover `len` frames.
    pub fn num_clips(&self, len: usize) -> usize {
        let span = len.max(self.clip_len) - self.clip_len;
        span.div_ceil(self.stride) + 1
    }

    pub fn clip_start(&self, t: usize) -> usize {
        t * self.stride
    }

    /// Frame-space centres of every feature timestep when each clip yields
    /// `steps_per_clip` timesteps.
    pub fn timeline(&self, len: usize, steps_per_clip: usize) -> Timeline {
        let frames_per_step = self.clip_len as f64 / steps_per_clip as f64;
        let positions = (0..self.num_clips(len))
            .flat_map(|t| {
                let start = self.clip_start(t) as f64;
                (0..steps_per_clip).map(move |j| start + (j as f64 + 0.5) * frames_per_step)
            })
            .collect();
        Timeline {
            positions,
            frames_per_step,
            video_len: len,
        }
    }
}

/// Maps the concatenated feature sequence back to frame indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Timeline {
    pub positions: Vec<f64>,
    pub frames_per_step: f64,
    pub video_len: usize,
}

impl Timeline {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub index: usize,
    pub start: usize,
    /// Frames appended by repeating the last frame of the video.
    pub padded: usize,
    /// `[T′ × H × W × channels]`
    pub frames: Tensor,
}

/// Cuts a video into `T′`-frame clips every `stride` frames, padding the
/// final clip by repeating the last frame.
pub fn split_clips(video: &UntrimmedVideo, spec: &ClipSpec) -> Result<Vec<Clip>> {
    spec.validate()?;
    let len = video.len();
    if len == 0 {
        return Err(Error::Input(format!("video `{}` has no frames", video.video_id)));
    }
    let frame = video.frame_size();
    let data = video.frames.data();
    let [_, h, w, c] = *video.frames.shape() else {
        unreachable!("UntrimmedVideo enforces rank 4")
    };
    (0..spec.num_clips(len))
        .map(|t| {
            let start = spec.clip_start(t);
            let mut buf = Vec::with_capacity(spec.clip_len * frame);
            let mut padded = 0;
            for f in start..start + spec.clip_len {
                let src = if f < len {
                    f
                } else {
                    padded += 1;
                    len - 1
                };
                buf.extend_from_slice(&data[src * frame..(src + 1) * frame]);
            }
            Ok(Clip {
                index: t,
                start,
                padded,
                frames: Tensor::new(vec![spec.clip_len, h, w, c], buf)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// N: the stem counts as layer 1.
    pub num_layers: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub in_channels: usize,
    /// C_i, shared by every layer.
    pub channels: usize,
    /// H_i = W_i after the stem.
    pub feature_size: usize,
    /// T_i = T′ / temporal_pool.
    pub temporal_pool: usize,
    pub frozen: bool,
    /// Seed of the (stand-in for pretrained) weights; independent of run seeds.
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            frame_height: 16,
            frame_width: 16,
            in_channels: 3,
            channels: 32,
            feature_size: 4,
            temporal_pool: 2,
            frozen: true,
            seed: 2024,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerDims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl BackboneConfig {
    pub fn validate(&self, clip: &ClipSpec) -> Result<()> {
        clip.validate()?;
        let checks: [(&str, bool, &str); 7] = [
            ("backbone.num_layers", self.num_layers >= 2, "must be >= 2"),
            ("backbone.channels", self.channels >= 1, "must be >= 1"),
            ("backbone.in_channels", self.in_channels >= 1, "must be >= 1"),
            ("backbone.feature_size", self.feature_size >= 1, "must be >= 1"),
            (
                "backbone.frame_height",
                self.frame_height >= 1 && self.frame_height.is_multiple_of(self.feature_size.max(1)),
                "must be a positive multiple of feature_size",
            ),
            (
                "backbone.frame_width",
                self.frame_width >= 1 && self.frame_width.is_multiple_of(self.feature_size.max(1)),
                "must be a positive multiple of feature_size",
            ),
            (
                "backbone.temporal_pool",
                self.temporal_pool >= 1 && clip.clip_len.is_multiple_of(self.temporal_pool.max(1)),
                "must divide clip.clip_len",
            ),
        ];
        for (field, ok, reason) in checks {
            if !ok {
                return Err(Error::config(field, reason));
            }
        }
        if self.frame_height > 32 || self.frame_width > 32 {
            return Err(Error::config("backbone.frame_height", "frames above 32x32 are not supported"));
        }
        Ok(())
    }

    /// Per-layer feature dims, identical for every layer of this backbone.
    pub fn layer_dims(&self, clip: &ClipSpec) -> Vec<LayerDims> {
        let d = LayerDims {
            t: clip.clip_len / self.temporal_pool,
            h: self.feature_size,
            w: self.feature_size,
            c: self.channels,
        };
        vec![d; self.num_layers]
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv_a_w: Tensor,
    conv_a_b: Tensor,
    conv_b_w: Tensor,
    conv_b_b: Tensor,
    mix_w: Tensor,
    mix_b: Tensor,
    ln_gamma: Tensor,
    ln_beta: Tensor,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    clip: ClipSpec,
    stem_w: Tensor,
    stem_b: Tensor,
    stem_gamma: Tensor,
    stem_beta: Tensor,
    blocks: Vec<Block>,
}

/// Per-layer, per-clip backbone outputs `F_i^{x_t}` (detached).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFeatures {
    /// `maps[i][t]`, shape `[T_i × H_i × W_i × C]`.
    pub maps: Vec<Vec<Tensor>>,
}

impl LayerFeatures {
    pub fn num_layers(&self) -> usize {
        self.maps.len()
    }

    pub fn num_clips(&self) -> usize {
        self.maps.first().map_or(0, Vec::len)
    }

    pub fn map(&self, layer: usize, clip: usize) -> &Tensor {
        &self.maps[layer][clip]
    }

    /// `F^X_i`: the layer's maps concatenated along time in clip order.
    pub fn concatenated(&self, layer: usize) -> Tensor {
        let parts: Vec<&Tensor> = self.maps[layer].iter().collect();
        Tensor::concat(&parts, 0).expect("clip maps share a shape")
    }

    /// Spatially mean-pooled last layer, `[(T·T_N) × C]`.
    pub fn pooled_last(&self) -> Tensor {
        let last = self.concatenated(self.num_layers() - 1);
        spatial_mean(&last)
    }
}

/// Parameter-free spatial mean of a `[T × H × W × C]` map into `[T × C]`.
pub fn spatial_mean(x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(x.detached());
    let m = tape.mean(v, &[1, 2]).expect("rank-4 feature map");
    tape.value(m).detached()
}

fn prefixed(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, clip: &ClipSpec) -> Result<Self> {
        cfg.validate(clip)?;
        let mut r = rng::stream(cfg.seed, "backbone");
        let c = cfg.channels;
        let stem_fan = 9 * cfg.in_channels;
        let stem_w = rng::fan_in_uniform(&mut r, vec![3, 3, cfg.in_channels, c], stem_fan);
        let stem_b = rng::fan_in_uniform(&mut r, vec![c], stem_fan);
        let blocks = (1..cfg.num_layers)
            .map(|_| Block {
                conv_a_w: rng::fan_in_uniform(&mut r, vec![3, 3, 3, c, c], 27 * c),
                conv_a_b: rng::fan_in_uniform(&mut r, vec![c], 27 * c),
                conv_b_w: rng::fan_in_uniform(&mut r, vec![3, 3, 3, c, c], 27 * c),
                conv_b_b: rng::fan_in_uniform(&mut r, vec![c], 27 * c),
                mix_w: rng::fan_in_uniform(&mut r, vec![1, 1, 1, c, c], c),
                mix_b: rng::fan_in_uniform(&mut r, vec![c], c),
                ln_gamma: Tensor::full(vec![c], 1.0).with_requires_grad(true),
                ln_beta: Tensor::zeros(vec![c]).with_requires_grad(true),
            })
            .collect();
        let mut bb = Self {
            cfg: cfg.clone(),
            clip: *clip,
            stem_w,
            stem_b,
            stem_gamma: Tensor::full(vec![c], 1.0).with_requires_grad(true),
            stem_beta: Tensor::zeros(vec![c]).with_requires_grad(true),
            blocks,
        };
        bb.set_frozen(cfg.frozen);
        Ok(bb)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn clip_spec(&self) -> &ClipSpec {
        &self.clip
    }

    pub fn layer_dims(&self) -> Vec<LayerDims> {
        self.cfg.layer_dims(&self.clip)
    }

    pub fn is_frozen(&self) -> bool {
        self.cfg.frozen
    }

    /// Freezing drops every gradient buffer and stops parameter recording.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.cfg.frozen = frozen;
        self.visit_mut(&mut |_, t| t.set_requires_grad(!frozen));
    }

    fn check_clip(&self, frames: &Tensor) -> Result<()> {
        let expect = [
            self.clip.clip_len,
            self.cfg.frame_height,
            self.cfg.frame_width,
            self.cfg.in_channels,
        ];
        if frames.shape() != expect {
            return Err(Error::Input(format!(
                "clip frames {:?} do not match backbone input {expect:?}",
                frames.shape()
            )));
        }
        Ok(())
    }

    /// Runs one clip through every layer, recording on `tape` only if the
    /// backbone is trainable. Returns one var per layer.
    pub fn forward_clip(&self, tape: &mut Tape, frames: &Tensor) -> Result<Vec<Var>> {
        self.check_clip(frames)?;
        let x = tape.constant(frames.detached());
        let w = tape.param("backbone.stem.weight", &self.stem_w);
        let b = tape.param("backbone.stem.bias", &self.stem_b);
        let s = tape.conv2d(x, w, b)?;
        let s = tape.gelu(s)?;
        let window = [
            self.cfg.temporal_pool,
            self.cfg.frame_height / self.cfg.feature_size,
            self.cfg.frame_width / self.cfg.feature_size,
        ];
        let s = tape.avg_pool(s, window)?;
        let g = tape.param("backbone.stem.ln.gamma", &self.stem_gamma);
        let be = tape.param("backbone.stem.ln.beta", &self.stem_beta);
        let mut h = tape.layer_norm(s, g, be)?;
        let mut outs = vec![h];
        for (i, blk) in self.blocks.iter().enumerate() {
            let p = format!("backbone.block.{i}");
            let wa = tape.param(prefixed(&p, "conv_a.weight"), &blk.conv_a_w);
            let ba = tape.param(prefixed(&p, "conv_a.bias"), &blk.conv_a_b);
            let wb = tape.param(prefixed(&p, "conv_b.weight"), &blk.conv_b_w);
            let bb = tape.param(prefixed(&p, "conv_b.bias"), &blk.conv_b_b);
            let wm = tape.param(prefixed(&p, "mix.weight"), &blk.mix_w);
            let bm = tape.param(prefixed(&p, "mix.bias"), &blk.mix_b);
            let gm = tape.param(prefixed(&p, "ln.gamma"), &blk.ln_gamma);
            let bt = tape.param(prefixed(&p, "ln.beta"), &blk.ln_beta);
            let a = tape.conv3d(h, wa, ba)?;
            let a = tape.gelu(a)?;
            let a = tape.conv3d(a, wb, bb)?;
            let a = tape.gelu(a)?;
            let a = tape.conv3d(a, wm, bm)?;
            let r = tape.add(h, a)?;
            h = tape.layer_norm(r, gm, bt)?;
            outs.push(h);
        }
        Ok(outs)
    }

    /// Forward of every clip on `tape`: `out[i][t]`.
    pub fn forward_all_layers(&self, tape: &mut Tape, clips: &[Clip]) -> Result<Vec<Vec<Var>>> {
        let mut per_layer = vec![Vec::with_capacity(clips.len()); self.cfg.num_layers];
        for clip in clips {
            for (i, v) in self.forward_clip(tape, &clip.frames)?.into_iter().enumerate() {
                per_layer[i].push(v);
            }
        }
        Ok(per_layer)
    }

    /// Detached features of one clip, computed on a private tape.
    pub fn clip_features(&self, frames: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let outs = self.forward_clip(&mut tape, frames)?;
        Ok(outs.into_iter().map(|v| tape.value(v).detached()).collect())
    }

    /// Detached `F_i^{x_t}` for every layer and clip. Clips are independent,
    /// so they are evaluated in parallel when the `parallel` feature is on.
    pub fn extract(&self, clips: &[Clip]) -> Result<LayerFeatures> {
        let per_clip: Vec<Vec<Tensor>> = crate::par::map_collect(clips, |c| self.clip_features(&c.frames))?;
        let mut maps = vec![Vec::with_capacity(clips.len()); self.cfg.num_layers];
        for outs in per_clip {
            for (i, t) in outs.into_iter().enumerate() {
                maps[i].push(t);
            }
        }
        Ok(LayerFeatures { maps })
    }

    /// Splits and extracts in one go.
    pub fn extract_video(&self, video: &UntrimmedVideo) -> Result<LayerFeatures> {
        let clips = split_clips(video, &self.clip)?;
        self.extract(&clips)
    }
}

impl Parameterized for Backbone {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("backbone.stem.weight", &self.stem_w);
        f("backbone.stem.bias", &self.stem_b);
        f("backbone.stem.ln.gamma", &self.stem_gamma);
        f("backbone.stem.ln.beta", &self.stem_beta);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("backbone.block.{i}");
            f(&prefixed(&p, "conv_a.weight"), &b.conv_a_w);
            f(&prefixed(&p, "conv_a.bias"), &b.conv_a_b);
            f(&prefixed(&p, "conv_b.weight"), &b.conv_b_w);
            f(&prefixed(&p, "conv_b.bias"), &b.conv_b_b);
            f(&prefixed(&p, "mix.weight"), &b.mix_w);
            f(&prefixed(&p, "mix.bias"), &b.mix_b);
            f(&prefixed(&p, "ln.gamma"), &b.ln_gamma);
            f(&prefixed(&p, "ln.beta"), &b.ln_beta);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("backbone.stem.weight", &mut self.stem_w);
        f("backbone.stem.bias", &mut self.stem_b);
        f("backbone.stem.ln.gamma", &mut self.stem_gamma);
        f("backbone.stem.ln.beta", &mut self.stem_beta);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("backbone.block.{i}");
            f(&prefixed(&p, "conv_a.weight"), &mut b.conv_a_w);
            f(&prefixed(&p, "conv_a.bias"), &mut b.conv_a_b);
            f(&prefixed(&p, "conv_b.weight"), &mut b.conv_b_w);
            f(&prefixed(&p, "conv_b.bias"), &mut b.conv_b_b);
            f(&prefixed(&p, "mix.weight"), &mut b.mix_w);
            f(&prefixed(&p, "mix.bias"), &mut b.mix_b);
            f(&prefixed(&p, "ln.gamma"), &mut b.ln_gamma);
            f(&prefixed(&p, "ln.beta"), &mut b.ln_beta);
        }
    }
}

impl Backbone {
    pub fn param_set(&self) -> ParamSet {
        ParamSet::snapshot(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::count_params;

    fn video(len: usize) -> UntrimmedVideo {
        let frames = Tensor::from_fn(vec![len, 16, 16, 3], |i| ((i * 7919) % 1000) as f64 / 1000.0);
        UntrimmedVideo::new("v", frames).unwrap()
    }

    /// Brute-force coverage oracle: enumerate every start on the stride grid
    /// until all frames are covered.
    fn enumerate_clips(len: usize, clip_len: usize, stride: usize) -> (usize, usize) {
        let mut starts = vec![];
        let mut s = 0;
        loop {
            starts.push(s);
            if s + clip_len >= len {
                break;
            }
            s += stride;
        }
        let last = *starts.last().unwrap();
        (starts.len(), (last + clip_len).saturating_sub(len))
    }

    #[test]
    fn clip_counts_match_enumeration() {
        for (len, stride, expect) in [(64, 16, 4), (64, 8, 7), (70, 16, 5)] {
            let spec = ClipSpec { clip_len: 16, stride };
            let (n, pad) = enumerate_clips(len, 16, stride);
            assert_eq!(n, expect);
            let clips = split_clips(&video(len), &spec).unwrap();
            assert_eq!(clips.len(), n, "L={len} stride={stride}");
            assert_eq!(clips.last().unwrap().padded, pad);
        }
        let spec = ClipSpec::default();
        assert_eq!(split_clips(&video(70), &spec).unwrap()[4].padded, 10);
        for len in 1..100 {
            for stride in 1..20 {
                let spec = ClipSpec { clip_len: 16, stride };
                assert_eq!(spec.num_clips(len), enumerate_clips(len, 16, stride).0);
            }
        }
    }

    #[test]
    fn padding_repeats_last_frame() {
        let v = video(70);
        let clips = split_clips(&v, &ClipSpec::default()).unwrap();
        let last = &clips[4].frames;
        let frame = 16 * 16 * 3;
        let final_frame = &v.frames.data()[69 * frame..70 * frame];
        for f in 6..16 {
            assert_eq!(&last.data()[f * frame..(f + 1) * frame], final_frame);
        }
    }

    #[test]
    fn every_frame_is_covered() {
        for (len, stride) in [(70, 16), (33, 5), (10, 16), (200, 12)] {
            let spec = ClipSpec { clip_len: 16, stride };
            let n = spec.num_clips(len);
            let mut covered = vec![false; len];
            for t in 0..n {
                for f in spec.clip_start(t)..(spec.clip_start(t) + 16).min(len) {
                    covered[f] = true;
                }
            }
            assert!(covered.iter().all(|&c| c), "L={len} stride={stride}");
        }
    }

    #[test]
    fn frozen_forward_has_declared_shapes_and_records_nothing() {
        let cfg = BackboneConfig {
            num_layers: 3,
            ..Default::default()
        };
        let spec = ClipSpec::default();
        let bb = Backbone::new(&cfg, &spec).unwrap();
        let clips = split_clips(&video(32), &spec).unwrap();
        let mut tape = Tape::new();
        let outs = bb.forward_all_layers(&mut tape, &clips).unwrap();
        assert_eq!(tape.node_count(), 0);
        assert_eq!(outs.len(), 3);
        assert_eq!(outs.iter().map(Vec::len).sum::<usize>(), 6);
        for layer in &outs {
            for &v in layer {
                assert_eq!(tape.shape(v), &[8, 4, 4, 32]);
                assert!(!tape.requires_grad(v));
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_clip_local() {
        let spec = ClipSpec::default();
        let bb = Backbone::new(&BackboneConfig::default(), &spec).unwrap();
        let v = video(48);
        let a = bb.extract_video(&v).unwrap();
        let b = bb.extract_video(&v).unwrap();
        assert_eq!(a, b);

        // the same clip content at two positions yields the same features
        let clips = split_clips(&v, &spec).unwrap();
        let swapped = vec![
            Clip { index: 0, ..clips[2].clone() },
            clips[1].clone(),
            Clip { index: 2, ..clips[0].clone() },
        ];
        let c = bb.extract(&swapped).unwrap();
        for i in 0..4 {
            assert!(a.map(i, 0).bit_eq(c.map(i, 2)));
            assert!(a.map(i, 2).bit_eq(c.map(i, 0)));
            assert!(a.map(i, 1).bit_eq(c.map(i, 1)));
        }
    }

    #[test]
    fn rejects_bad_frames_and_empty_video() {
        let bb = Backbone::new(&BackboneConfig::default(), &ClipSpec::default()).unwrap();
        let bad = Tensor::zeros(vec![16, 8, 8, 3]);
        assert!(matches!(bb.clip_features(&bad), Err(Error::Input(_))));
        let bad_video = UntrimmedVideo::new("x", Tensor::zeros(vec![20, 8, 8, 3])).unwrap();
        assert!(bb.extract_video(&bad_video).is_err());
    }

    #[test]
    fn trainable_mode_records_and_freezing_clears_grads() {
        let spec = ClipSpec::default();
        let mut bb = Backbone::new(
            &BackboneConfig {
                frozen: false,
                num_layers: 2,
                ..Default::default()
            },
            &spec,
        )
        .unwrap();
        let clips = split_clips(&video(16), &spec).unwrap();
        let mut tape = Tape::new();
        bb.forward_all_layers(&mut tape, &clips).unwrap();
        assert_eq!(tape.node_count(), 4 + 7);
        bb.visit_mut(&mut |_, t| t.set_grad(vec![0.0; t.numel()]).unwrap());
        bb.set_frozen(true);
        let mut any = false;
        bb.visit(&mut |_, t| any |= t.grad().is_some() || t.requires_grad());
        assert!(!any);
        assert!(count_params(&bb) > 100_000 / 3);
    }
}
