//! Linear probes that measure how separable a long-range class pair is from
//! one clip of backbone features versus the whole sequence.

use serde::Serialize;

use super::{Dataset, SegmentAnnotation};
use crate::backbone::{Backbone, ClipSpec, LayerFeatures};
use crate::error::{Error, Result};
use crate::tensor::kernels::sigmoid;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSample {
    /// Mean and max of the last-layer features of the clip holding the
    /// segment midpoint.
    pub clip: Vec<f64>,
    /// `clip` followed by the sequence-wide mean and max.
    pub sequence: Vec<f64>,
    pub label: bool,
}

fn mean_max(rows: &[f64], c: usize) -> Vec<f64> {
    let n = rows.len() / c;
    let mut mean = vec![0.0; c];
    let mut max = vec![f64::NEG_INFINITY; c];
    for r in rows.chunks_exact(c) {
        for j in 0..c {
            mean[j] += r[j] / n as f64;
            max[j] = max[j].max(r[j]);
        }
    }
    mean.extend(max);
    mean
}

pub fn probe_sample(features: &LayerFeatures, spec: &ClipSpec, ann: &SegmentAnnotation, label: bool) -> ProbeSample {
    let pooled = features.pooled_last();
    let [rows, c] = *pooled.shape() else {
        unreachable!("pooled features are a matrix")
    };
    let steps = rows / features.num_clips();
    let mid = 0.5 * (ann.start + ann.end);
    let clip = (0..features.num_clips())
        .rev()
        .find(|&t| spec.clip_start(t) as f64 <= mid)
        .unwrap_or(0);
    let d = pooled.data();
    let clip_feats = mean_max(&d[clip * steps * c..(clip + 1) * steps * c], c);
    let mut sequence = clip_feats.clone();
    sequence.extend(mean_max(d, c));
    ProbeSample {
        clip: clip_feats,
        sequence,
        label,
    }
}

/// One sample per segment of either class of `pair`; label is `class == pair.0`.
pub fn probe_samples(ds: &Dataset, backbone: &Backbone, pair: (usize, usize)) -> Result<Vec<ProbeSample>> {
    let mut out = vec![];
    for s in &ds.samples {
        let anns: Vec<_> = s
            .annotations
            .iter()
            .filter(|a| a.class_id == pair.0 || a.class_id == pair.1)
            .collect();
        if anns.is_empty() {
            continue;
        }
        let feats = backbone.extract_video(&s.video)?;
        for a in anns {
            out.push(probe_sample(&feats, backbone.clip_spec(), a, a.class_id == pair.0));
        }
    }
    Ok(out)
}

/// L2-regularized logistic regression on standardized inputs.
#[derive(Clone, Debug)]
pub struct LogisticProbe {
    w: Vec<f64>,
    b: f64,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl LogisticProbe {
    pub fn fit(xs: &[Vec<f64>], ys: &[bool], l2: f64, iters: usize) -> Result<Self> {
        let Some(first) = xs.first() else {
            return Err(Error::Input("probe needs at least one sample".into()));
        };
        let d = first.len();
        let n = xs.len() as f64;
        let mut mean = vec![0.0; d];
        for x in xs {
            for j in 0..d {
                mean[j] += x[j] / n;
            }
        }
        let mut scale = vec![0.0; d];
        for x in xs {
            for j in 0..d {
                scale[j] += (x[j] - mean[j]).powi(2) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-12 { 1.0 / s.sqrt() } else { 0.0 };
        }
        let z: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| (0..d).map(|j| (x[j] - mean[j]) * scale[j]).collect())
            .collect();
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let lr = 0.5;
        for _ in 0..iters {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (x, &y) in z.iter().zip(ys) {
                let p = sigmoid(b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>());
                let e = p - f64::from(u8::from(y));
                gb += e / n;
                for j in 0..d {
                    gw[j] += e * x[j] / n;
                }
            }
            for j in 0..d {
                w[j] -= lr * (gw[j] + l2 * w[j]);
            }
            b -= lr * gb;
        }
        Ok(Self { w, b, mean, scale })
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        let s: f64 = x
            .iter()
            .enumerate()
            .map(|(j, v)| (v - self.mean[j]) * self.scale[j] * self.w[j])
            .sum();
        s + self.b > 0.0
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[bool]) -> f64 {
        let hits = xs.iter().zip(ys).filter(|(x, &y)| self.predict(x) == y).count();
        hits as f64 / xs.len().max(1) as f64
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeReport {
    pub clip_accuracy: f64,
    pub sequence_accuracy: f64,
    pub train_samples: usize,
    pub test_samples: usize,
}

impl ProbeReport {
    pub fn gap(&self) -> f64 {
        self.sequence_accuracy - self.clip_accuracy
    }
}

/// Fits both probes on `train` and scores them on held-out `test`.
pub fn separability(train: &[ProbeSample], test: &[ProbeSample]) -> Result<ProbeReport> {
    let ys: Vec<bool> = train.iter().map(|s| s.label).collect();
    let yt: Vec<bool> = test.iter().map(|s| s.label).collect();
    let pick = |set: &[ProbeSample], seq: bool| -> Vec<Vec<f64>> {
        set.iter()
            .map(|s| if seq { s.sequence.clone() } else { s.clip.clone() })
            .collect()
    };
    let clip = LogisticProbe::fit(&pick(train, false), &ys, 1e-3, 1500)?;
    let seq = LogisticProbe::fit(&pick(train, true), &ys, 1e-3, 1500)?;
    Ok(ProbeReport {
        clip_accuracy: clip.accuracy(&pick(test, false), &yt),
        sequence_accuracy: seq.accuracy(&pick(test, true), &yt),
        train_samples: train.len(),
        test_samples: test.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_probe_separates_a_linear_rule() {
        let xs: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, (i % 7) as f64]).collect();
        let ys: Vec<bool> = (0..40).map(|i| i >= 20).collect();
        let p = LogisticProbe::fit(&xs, &ys, 0.0, 2000).unwrap();
        assert_eq!(p.accuracy(&xs, &ys), 1.0);
        assert!(LogisticProbe::fit(&[], &[], 0.0, 1).is_err());
    }

    #[test]
    fn mean_max_of_rows() {
        assert_eq!(mean_max(&[1.0, 4.0, 3.0, 2.0], 2), vec![2.0, 3.0, 3.0, 4.0]);
    }
}
