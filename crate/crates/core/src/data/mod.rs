//! Synthetic untrimmed videos with planted action patterns.
//!
//! Every class is a spatiotemporal pattern on a noisy grey background. The
//! two classes of a long-range pair share one pattern and are told apart
//! only by a coloured flash shown well before the action starts.

mod io;
pub mod probe;

pub use io::{load, save, FORMAT_VERSION};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Hard ceiling on video length in frames.
pub const MAX_VIDEO_LEN: usize = 576;

#[derive(Clone, Debug, PartialEq)]
pub struct UntrimmedVideo {
    pub video_id: String,
    /// `[L × H × W × 3]`, values in `[0, 1]`.
    pub frames: Tensor,
}

impl UntrimmedVideo {
    pub fn new(video_id: impl Into<String>, frames: Tensor) -> Result<Self> {
        let video_id = video_id.into();
        if frames.rank() != 4 || frames.shape()[3] != 3 {
            return Err(Error::Input(format!(
                "video `{video_id}` frames must be [L, H, W, 3], got {:?}",
                frames.shape()
            )));
        }
        if let Some(v) = frames.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("video `{video_id}` has pixel value {v} outside [0, 1]")));
        }
        Ok(Self { video_id, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    /// Values per frame.
    pub fn frame_size(&self) -> usize {
        self.frames.shape()[1..].iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentAnnotation {
    pub start: f64,
    pub end: f64,
    pub class_id: usize,
}

impl SegmentAnnotation {
    pub fn new(start: f64, end: f64, class_id: usize) -> Self {
        Self { start, end, class_id }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Checks bounds, ordering, class range and pairwise disjointness.
pub fn validate_annotations(anns: &[SegmentAnnotation], len: usize, num_classes: usize) -> Result<()> {
    for a in anns {
        if !(a.start >= 0.0 && a.start < a.end && a.end <= len as f64) {
            return Err(Error::Input(format!(
                "segment [{}, {}] outside video of {len} frames",
                a.start, a.end
            )));
        }
        if a.class_id >= num_classes {
            return Err(Error::Input(format!(
                "class {} out of range for {num_classes} classes",
                a.class_id
            )));
        }
    }
    let mut sorted: Vec<_> = anns.iter().collect();
    sorted.sort_by(|a, b| a.start.total_cmp(&b.start));
    if let Some(w) = sorted.windows(2).find(|w| w[1].start < w[0].end) {
        return Err(Error::Input(format!(
            "segments [{}, {}] and [{}, {}] overlap",
            w[0].start, w[0].end, w[1].start, w[1].end
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub video: UntrimmedVideo,
    pub annotations: Vec<SegmentAnnotation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            validate_annotations(&s.annotations, s.video.len(), self.num_classes)?;
        }
        Ok(())
    }

    pub fn annotations(&self) -> Vec<Vec<SegmentAnnotation>> {
        self.samples.iter().map(|s| s.annotations.clone()).collect()
    }

    pub fn subset(&self, n: usize) -> Dataset {
        Dataset {
            num_classes: self.num_classes,
            samples: self.samples.iter().take(n).cloned().collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Pattern {
    /// Bright square bouncing off the frame edges, velocity in pixels/frame.
    Square { vx: f64, vy: f64, size: usize },
    /// Whole-frame brightness sinusoid.
    Oscillation { period: f64, amplitude: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_videos: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Background noise standard deviation.
    pub noise: f64,
    pub background: f64,
    pub max_segments: usize,
    pub min_segment_len: usize,
    pub max_segment_len: usize,
    /// One pattern per class.
    pub patterns: Vec<Pattern>,
    pub long_range_pairs: Vec<(usize, usize)>,
    pub cue_len: usize,
    /// Minimum frames between the end of a cue and the segment onset.
    pub cue_min_gap: usize,
    pub cue_max_gap: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_videos: 200,
            min_len: 64,
            max_len: 256,
            num_classes: 4,
            height: 16,
            width: 16,
            noise: 0.05,
            background: 0.3,
            max_segments: 4,
            min_segment_len: 8,
            max_segment_len: 96,
            patterns: vec![
                Pattern::Square { vx: 1.0, vy: 0.0, size: 4 },
                Pattern::Oscillation {
                    period: 8.0,
                    amplitude: 0.25,
                },
                Pattern::Square { vx: 0.0, vy: 1.0, size: 4 },
                Pattern::Square { vx: 0.0, vy: 1.0, size: 4 },
            ],
            long_range_pairs: vec![(2, 3)],
            cue_len: 4,
            cue_min_gap: 17,
            cue_max_gap: 40,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::config(format!("data.generator.{field}"), reason));
        if self.num_classes == 0 {
            return bad("num_classes", "must be >= 1");
        }
        if self.num_videos == 0 {
            return bad("num_videos", "must be >= 1");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("min_len", "must satisfy 1 <= min_len <= max_len");
        }
        if self.max_len > MAX_VIDEO_LEN {
            return bad("max_len", "must be <= 576");
        }
        if self.height == 0 || self.width == 0 {
            return bad("height", "frame extents must be >= 1");
        }
        if !(self.noise >= 0.0) {
            return bad("noise", "must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.background) {
            return bad("background", "must lie in [0, 1]");
        }
        if self.max_segments == 0 {
            return bad("max_segments", "must be >= 1");
        }
        if self.min_segment_len == 0 || self.min_segment_len > self.max_segment_len {
            return bad("min_segment_len", "must satisfy 1 <= min_segment_len <= max_segment_len");
        }
        if self.patterns.len() != self.num_classes {
            return bad("patterns", "need exactly one pattern per class");
        }
        for p in &self.patterns {
            match *p {
                Pattern::Square { size, .. } if size == 0 || size > self.height.min(self.width) => {
                    return bad("patterns", "square size must fit the frame");
                }
                Pattern::Oscillation { period, .. } if !(period > 0.0) => {
                    return bad("patterns", "oscillation period must be > 0");
                }
                _ => {}
            }
        }
        let mut seen = vec![false; self.num_classes];
        for &(a, b) in &self.long_range_pairs {
            if a >= self.num_classes || b >= self.num_classes || a == b {
                return bad("long_range_pairs", "pairs need two distinct valid classes");
            }
            if seen[a] || seen[b] {
                return bad("long_range_pairs", "a class may belong to at most one pair");
            }
            seen[a] = true;
            seen[b] = true;
            if self.patterns[a] != self.patterns[b] {
                return bad("long_range_pairs", "paired classes must share one pattern");
            }
        }
        if !self.long_range_pairs.is_empty() && (self.cue_len == 0 || self.cue_min_gap > self.cue_max_gap) {
            return bad("cue_len", "cues need cue_len >= 1 and cue_min_gap <= cue_max_gap");
        }
        Ok(())
    }

    fn pair_of(&self, class: usize) -> Option<(usize, bool)> {
        self.long_range_pairs.iter().enumerate().find_map(|(i, &(a, b))| {
            if class == a {
                Some((i, true))
            } else if class == b {
                Some((i, false))
            } else {
                None
            }
        })
    }
}

/// A planted segment and, for paired classes, its cue window.
#[derive(Clone, Copy, Debug)]
struct Plan {
    start: usize,
    end: usize,
    class: usize,
    cue: Option<(usize, usize, bool)>,
}

const PLACEMENT_ATTEMPTS: usize = 2000;

fn plan_video(cfg: &GeneratorConfig, len: usize, r: &mut Rng) -> Option<Vec<Plan>> {
    // which member of every pair this video may use
    let members: Vec<bool> = cfg.long_range_pairs.iter().map(|_| r.random_bool(0.5)).collect();
    let allowed: Vec<usize> = (0..cfg.num_classes)
        .filter(|&k| cfg.pair_of(k).is_none_or(|(p, first)| members[p] == first))
        .collect();
    for _ in 0..PLACEMENT_ATTEMPTS {
        let n = r.random_range(1..=cfg.max_segments);
        let mut plans: Vec<Plan> = vec![];
        let mut ok = true;
        for _ in 0..n {
            let class = allowed[r.random_range(0..allowed.len())];
            let max_seg = cfg.max_segment_len.min(len);
            if cfg.min_segment_len > max_seg {
                ok = false;
                break;
            }
            let seg = r.random_range(cfg.min_segment_len..=max_seg);
            let start = r.random_range(0..=len - seg);
            let mut plan = Plan {
                start,
                end: start + seg,
                class,
                cue: None,
            };
            if let Some((_, first)) = cfg.pair_of(class) {
                let gap = r.random_range(cfg.cue_min_gap..=cfg.cue_max_gap);
                if start < gap + cfg.cue_len {
                    ok = false;
                    break;
                }
                let cue_start = start - gap - cfg.cue_len;
                plan.cue = Some((cue_start, cue_start + cfg.cue_len, first));
            }
            plans.push(plan);
        }
        if ok && placement_is_valid(&plans) {
            plans.sort_by_key(|p| p.start);
            return Some(plans);
        }
    }
    None
}

fn placement_is_valid(plans: &[Plan]) -> bool {
    let overlaps = |a: (usize, usize), b: (usize, usize)| a.0 < b.1 && b.0 < a.1;
    for (i, p) in plans.iter().enumerate() {
        for (j, q) in plans.iter().enumerate() {
            if i != j {
                if i < j && overlaps((p.start, p.end), (q.start, q.end)) {
                    return false;
                }
                if let Some((cs, ce, _)) = p.cue {
                    if overlaps((cs, ce), (q.start, q.end)) {
                        return false;
                    }
                }
            }
        }
    }
    true
}

fn render(cfg: &GeneratorConfig, len: usize, plans: &[Plan], r: &mut Rng) -> Result<Tensor> {
    let (h, w) = (cfg.height, cfg.width);
    let frame = h * w * 3;
    let mut data = vec![cfg.background; len * frame];
    for p in plans {
        match cfg.patterns[p.class] {
            Pattern::Square { vx, vy, size } => {
                let x0 = r.random_range(0..=w - size) as f64;
                let y0 = r.random_range(0..=h - size) as f64;
                for f in p.start..p.end {
                    let t = (f - p.start) as f64;
                    let x = bounce(x0 + vx * t, (w - size) as f64);
                    let y = bounce(y0 + vy * t, (h - size) as f64);
                    let (xi, yi) = (x.round() as usize, y.round() as usize);
                    for yy in yi..yi + size {
                        for xx in xi..xi + size {
                            let o = f * frame + (yy * w + xx) * 3;
                            data[o..o + 3].fill(0.95);
                        }
                    }
                }
            }
            Pattern::Oscillation { period, amplitude } => {
                for f in p.start..p.end {
                    let t = (f - p.start) as f64;
                    let delta = amplitude * (std::f64::consts::TAU * t / period).sin();
                    for v in &mut data[f * frame..(f + 1) * frame] {
                        *v += delta;
                    }
                }
            }
        }
        if let Some((cs, ce, first)) = p.cue {
            let channel = if first { 0 } else { 2 };
            for f in cs..ce {
                for px in 0..h * w {
                    data[f * frame + px * 3 + channel] = 0.95;
                }
            }
        }
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).map_err(|e| Error::Generation(e.to_string()))?;
        for v in &mut data {
            *v += normal.sample(r);
        }
    }
    for v in &mut data {
        // stored as f32 on disk, so keep values exactly representable
        *v = f64::from(v.clamp(0.0, 1.0) as f32);
    }
    Tensor::new(vec![len, h, w, 3], data)
}

/// Reflects `x` into `[0, span]`.
fn bounce(x: f64, span: f64) -> f64 {
    if span <= 0.0 {
        return 0.0;
    }
    let period = 2.0 * span;
    let m = x.rem_euclid(period);
    if m <= span {
        m
    } else {
        period - m
    }
}

/// Generates `cfg.num_videos` videos. Fully determined by `cfg`.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.seed, "generate");
    let mut samples = Vec::with_capacity(cfg.num_videos);
    for i in 0..cfg.num_videos {
        let len = r.random_range(cfg.min_len..=cfg.max_len);
        let plans = plan_video(cfg, len, &mut r).ok_or_else(|| {
            Error::Generation(format!(
                "could not place segments in video {i} of {len} frames after {PLACEMENT_ATTEMPTS} attempts"
            ))
        })?;
        let frames = render(cfg, len, &plans, &mut r)?;
        let annotations = plans
            .iter()
            .map(|p| SegmentAnnotation::new(p.start as f64, p.end as f64, p.class))
            .collect();
        samples.push(Sample {
            video: UntrimmedVideo::new(format!("vid_{:05}", i), frames)?,
            annotations,
        });
    }
    let ds = Dataset {
        num_classes: cfg.num_classes,
        samples,
    };
    ds.validate()?;
    Ok(ds)
}

/// Train/test pair generated from independent seeds.
pub fn generate_split(cfg: &GeneratorConfig, num_test: usize) -> Result<(Dataset, Dataset)> {
    let train = generate(cfg)?;
    let test_cfg = GeneratorConfig {
        num_videos: num_test,
        seed: cfg.seed ^ 0x7e57_7e57_7e57_7e57,
        ..cfg.clone()
    };
    let test = generate(&test_cfg)?;
    let test = Dataset {
        samples: test
            .samples
            .into_iter()
            .map(|mut s| {
                s.video.video_id = s.video.video_id.replace("vid_", "test_");
                s
            })
            .collect(),
        ..test
    };
    Ok((train, test))
}

/// Temporally consistent random crop of `crop`×`crop` pixels resized back to
/// the original frame size with nearest-neighbour sampling.
pub fn augment(video: &UntrimmedVideo, crop: usize, r: &mut Rng) -> Result<UntrimmedVideo> {
    let (len, h, w) = (video.len(), video.height(), video.width());
    if crop == 0 || crop > h.min(w) {
        return Err(Error::Input(format!("crop {crop} does not fit {h}x{w} frames")));
    }
    let oy = r.random_range(0..=h - crop);
    let ox = r.random_range(0..=w - crop);
    let src = video.frames.data();
    let mut out = Vec::with_capacity(src.len());
    for f in 0..len {
        for y in 0..h {
            let sy = oy + y * crop / h;
            for x in 0..w {
                let sx = ox + x * crop / w;
                let o = ((f * h + sy) * w + sx) * 3;
                out.extend_from_slice(&src[o..o + 3]);
            }
        }
    }
    UntrimmedVideo::new(video.video_id.clone(), Tensor::new(video.frames.shape().to_vec(), out)?)
}
