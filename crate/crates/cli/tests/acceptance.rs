//! Acceptance suite. Every test prints one `PASS`/`FAIL` line tagged with its
//! criterion number, then asserts; the two ablation orderings are reported
//! only. Trained models are shared through caches so each (variant, seed)
//! pair is trained once per process.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use losa::adapters::{AdapterConfig, AdapterStack, CrossAttention};
use losa::audit::{node_counts, peak_video};
use losa::backbone::{split_clips, Backbone, LayerDims};
use losa::data::probe::{probe_samples, separability};
use losa::data::{generate, generate_split, GeneratorConfig, SegmentAnnotation};
use losa::fusion::GateInit;
use losa::head::Detection;
use losa::metrics::{average_precision, mean_ap, EvalConfig};
use losa::model::{Mode, Model, ModelConfig, VideoInput};
use losa::params::ParamSet;
use losa::rng;
use losa::tensor::gradcheck::FD_TOL;
use losa::train::{prepare, train, OptimConfig, PreparedVideo, TrainOptions};
use losa::{Tape, Tensor};
use losa_cli::{ablation_csv, cmd_train, gradcheck_outcomes, memreport, AblationRow, RunConfig};
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

/// Written past the harness capture so the lines show up without `--nocapture`.
fn report(id: u32, name: &str, pass: bool, detail: impl std::fmt::Display) {
    let line = format!("criterion {id:>2} {} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

/// Runs criteria one at a time so timings are not shared with training.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

struct Bench {
    generator: GeneratorConfig,
    train: Vec<PreparedVideo>,
    test: Vec<PreparedVideo>,
}

/// Default synthetic split with frozen-backbone features extracted once.
fn bench() -> &'static Bench {
    static B: OnceLock<Bench> = OnceLock::new();
    B.get_or_init(|| {
        let generator = GeneratorConfig::default();
        let (tr, te) = generate_split(&generator, RunConfig::default().data.num_test).unwrap();
        let probe = Model::new(&ModelConfig::default(), 0).unwrap();
        Bench {
            train: prepare(&tr, &probe, true).unwrap(),
            test: prepare(&te, &probe, true).unwrap(),
            generator,
        }
    })
}

fn optim() -> OptimConfig {
    OptimConfig::default()
}

/// Test Avg mAP of one (variant, seed) training run, memoised.
fn trained(variant: &str, cfg: &ModelConfig, seed: u64) -> f64 {
    static RUNS: OnceLock<Mutex<BTreeMap<(String, u64), f64>>> = OnceLock::new();
    let runs = RUNS.get_or_init(Default::default);
    if let Some(m) = runs.lock().unwrap().get(&(variant.to_owned(), seed)) {
        return *m;
    }
    let b = bench();
    let opts = TrainOptions {
        eval_every: 0,
        ..Default::default()
    };
    let t0 = Instant::now();
    let out = train(cfg, &optim(), &EvalConfig::default(), &opts, &b.train, &b.test, seed).unwrap();
    let m = out.test_avg_map().unwrap();
    println!("    trained {variant} seed {seed}: avg_mAP={m:.4} ({:.0?})", t0.elapsed());
    runs.lock().unwrap().insert((variant.to_owned(), seed), m);
    m
}

fn variant(name: &str) -> ModelConfig {
    let mut c = ModelConfig::default();
    match name {
        "losa" | "full" | "zero" => {}
        "head_only" => c.mode = Mode::HeadOnly,
        "-long" => c.adapter.long = false,
        "-short" => c.adapter.short = false,
        "-fusion" => c.fusion.gated = false,
        "random" => c.fusion.gate_init = GateInit::Random,
        "ones" => c.fusion.gate_init = GateInit::Ones,
        other => panic!("unknown variant {other}"),
    }
    c
}

fn row(name: &str) -> AblationRow {
    let cfg = variant(name);
    let key = if matches!(name, "losa" | "zero") { "full" } else { name };
    AblationRow {
        variant: name.to_owned(),
        avg_maps: SEEDS.iter().map(|&s| trained(key, &cfg, s)).collect(),
    }
}

#[test]
fn c01_zero_init_identity() {
    let _serial = serial();
    let t0 = Instant::now();
    let ds = generate(&GeneratorConfig {
        num_videos: 10,
        seed: 77,
        ..Default::default()
    })
    .unwrap();
    let m = Model::new(&ModelConfig::default(), 0).unwrap();
    let mut identical = 0;
    for s in &ds.samples {
        let clips = split_clips(&s.video, &m.config().clip).unwrap();
        let mut tape = Tape::new();
        let f = m.forward(&mut tape, VideoInput::Clips(&clips)).unwrap();
        identical += usize::from(tape.value(f.ft).bit_eq(tape.value(f.f_n)));
    }
    let elapsed = t0.elapsed();
    let pass = identical == 10 && elapsed.as_secs_f64() < 5.0;
    report(1, "zero-init identity", pass, format!("{identical}/10 videos bitwise equal in {elapsed:.2?}"));
    assert!(pass);
}

#[test]
fn c02_c05_gradient_audit_and_parameter_budget() {
    let _serial = serial();
    let b = bench();
    let t0 = Instant::now();
    let cfg = ModelConfig::default();
    let before = ParamSet::snapshot(&Model::new(&cfg, 0).unwrap().backbone);
    let one_epoch = OptimConfig {
        total_epochs: 1,
        warmup_epochs: 0.5,
        ..optim()
    };
    let out = train(&cfg, &one_epoch, &EvalConfig::default(), &TrainOptions::default(), &b.train, &[], 0);
    let elapsed = t0.elapsed();
    let out = match out {
        Ok(o) => o,
        Err(e) => {
            report(2, "gradient audit", false, &e);
            panic!("{e}");
        }
    };
    let a = &out.audit;
    let unchanged = ParamSet::snapshot(&out.model.backbone).bit_eq(&before);
    let pass2 = a.backbone_grad_buffers == 0 && a.backbone_unchanged && unchanged && elapsed.as_secs() < 120;
    report(
        2,
        "gradient audit",
        pass2,
        format!(
            "backbone_grad_buffers={} unchanged={} after one epoch over {} videos in {elapsed:.1?}",
            a.backbone_grad_buffers,
            a.backbone_unchanged && unchanged,
            b.train.len()
        ),
    );
    let json = serde_json::to_value(a).unwrap();
    let pass5 = a.learnable_fraction <= 0.20 && json.get("learnable_fraction").is_some();
    report(
        5,
        "parameter budget",
        pass5,
        format!(
            "learnable_fraction={:.4} ({} of {})",
            a.learnable_fraction,
            a.learnable_params,
            a.learnable_params + a.frozen_params
        ),
    );
    assert!(pass2 && pass5);
}

#[test]
fn c03_finite_differences() {
    let _serial = serial();
    let t0 = Instant::now();
    let outcomes = gradcheck_outcomes(None).unwrap();
    let elapsed = t0.elapsed();
    let worst = outcomes.iter().map(|o| o.max_rel_err).fold(0.0, f64::max);
    let bad: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.passed || o.max_rel_err >= FD_TOL || o.params > 1000)
        .map(|o| o.name.as_str())
        .collect();
    let composite = outcomes.iter().any(|o| o.name == "adapter+fusion+head" && o.passed);
    let pass = bad.is_empty() && composite && elapsed.as_secs() < 60;
    report(
        3,
        "finite-difference suite",
        pass,
        format!("{} checks, worst rel err {worst:.2e}, failing {bad:?}, {elapsed:.1?}", outcomes.len()),
    );
    assert!(pass);
}

/// Plain loops over heads, queries and keys.
fn naive_attention(attn: &CrossAttention, q: &Tensor, kv: &Tensor) -> Vec<f64> {
    let c = attn.width();
    let (m, n, h) = (q.shape()[0], kv.shape()[0], attn.heads);
    let dh = c / h;
    let proj = |x: &Tensor, w: &Tensor, rows: usize| -> Vec<f64> {
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            for j in 0..c {
                for k in 0..c {
                    out[r * c + j] += x.data()[r * c + k] * w.data()[k * c + j];
                }
            }
        }
        out
    };
    let (qp, kp, vp) = (proj(q, &attn.wq, m), proj(kv, &attn.wk, n), proj(kv, &attn.wv, n));
    let mut merged = vec![0.0; m * c];
    for head in 0..h {
        for i in 0..m {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|d| qp[i * c + head * dh + d] * kp[j * c + head * dh + d]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..dh {
                merged[i * c + head * dh + d] = (0..n).map(|j| e[j] / z * vp[j * c + head * dh + d]).sum();
            }
        }
    }
    let mut out = vec![0.0; m * c];
    for i in 0..m {
        for j in 0..c {
            for k in 0..c {
                out[i * c + j] += merged[i * c + k] * attn.wo.data()[k * c + j];
            }
        }
    }
    out
}

#[test]
fn c04_attention_oracle() {
    let _serial = serial();
    let mut r = rng::seeded(404);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for heads in [1, 4] {
        for _ in 0..20 {
            let c = if heads == 4 { [4, 8][r.random_range(0..2)] } else { r.random_range(1..=8) };
            let clips = r.random_range(1..=2);
            let steps_i = r.random_range(1..=8 / clips);
            let steps_n = r.random_range(1..=8 / clips);
            let dims = vec![
                LayerDims { t: steps_i, h: 1, w: 1, c },
                LayerDims { t: steps_n, h: 1, w: 1, c },
            ];
            let cfg = AdapterConfig {
                heads,
                ..Default::default()
            };
            let mut stack = AdapterStack::new(&cfg, &dims, r.random()).unwrap();
            for long in [false, true] {
                let a = if long { stack.long_attention_mut(1) } else { stack.short_attention_mut(1) }.unwrap();
                for w in [&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo] {
                    let fresh = rng::uniform(&mut r, vec![c, c], -1.0, 1.0);
                    w.data_mut().copy_from_slice(fresh.data());
                }
            }
            let q = rng::uniform(&mut r, vec![clips * steps_i, c], -2.0, 2.0);
            let kv = rng::uniform(&mut r, vec![clips * steps_n, c], -2.0, 2.0);
            let mut tape = Tape::new();
            let (vq, vkv) = (tape.constant(q.clone()), tape.constant(kv.clone()));
            let long = stack.long_range_forward(&mut tape, 1, vq, vkv).unwrap();
            let short = stack.short_range_all(&mut tape, 1, vq, vkv).unwrap();
            let want_long = naive_attention(stack.long_attention(1).unwrap(), &q, &kv);
            let want_short = naive_attention(stack.short_attention(1).unwrap(), &q, &kv);
            for (got, want) in [(tape.value(long).data(), &want_long), (tape.value(short).data(), &want_short)] {
                worst = got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
            }
            for t in 0..clips {
                let one = stack.short_range_forward(&mut tape, 1, t, vq, vkv, clips).unwrap();
                let want = &want_short[t * steps_i * c..(t + 1) * steps_i * c];
                worst = tape.value(one).data().iter().zip(want).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
            }
            cases += 1;
        }
    }
    let pass = worst <= 1e-10;
    report(4, "attention oracle", pass, format!("{cases} instances, max abs diff {worst:.2e}"));
    assert!(pass);
}

#[test]
fn c06_memory_ordering() {
    let _serial = serial();
    let t0 = Instant::now();
    let b = bench();
    let peak = peak_video(&b.train).unwrap();
    let counts = node_counts(&ModelConfig::default(), peak, 0).unwrap();
    let long = memreport(&RunConfig::default(), 256).unwrap();
    let elapsed = t0.elapsed();
    let pass = counts.ordered()
        && counts.losa_ratio() <= 0.5
        && long.ordered
        && long.losa_over_full <= 0.5
        && elapsed.as_secs() < 30;
    report(
        6,
        "memory ordering",
        pass,
        format!(
            "{} ({} clips): head_only={} losa={} full={} ratio={:.3}; L=256: ratio={:.3}; {elapsed:.1?}",
            peak.video.video_id,
            peak.timeline.len() / 8,
            counts.head_only,
            counts.losa,
            counts.full_backbone,
            counts.losa_ratio(),
            long.losa_over_full
        ),
    );
    assert!(pass);
}

#[test]
fn c07_losa_beats_head_only() {
    let _serial = serial();
    let b = bench();
    let t0 = Instant::now();
    let (tr, te) = generate_split(&b.generator, 50).unwrap();
    let backbone = Backbone::new(&ModelConfig::default().backbone, &ModelConfig::default().clip).unwrap();
    let pair = b.generator.long_range_pairs[0];
    let probe = separability(
        &probe_samples(&tr, &backbone, pair).unwrap(),
        &probe_samples(&te, &backbone, pair).unwrap(),
    )
    .unwrap();
    println!(
        "    probe calibration: clip {:.3} vs sequence {:.3} ({:.0?})",
        probe.clip_accuracy,
        probe.sequence_accuracy,
        t0.elapsed()
    );
    let losa = row("losa");
    let head = row("head_only");
    let margin = 100.0 * (losa.mean() - head.mean());
    let pass = margin >= 3.0;
    report(
        7,
        "end-to-end benefit",
        pass,
        format!(
            "losa {:.4} vs head_only {:.4} (+{margin:.1} points), per seed {:?} vs {:?}, probe gap {:.1} points",
            losa.mean(),
            head.mean(),
            losa.avg_maps,
            head.avg_maps,
            100.0 * probe.gap()
        ),
    );
    assert!(pass);
}

#[test]
fn c08_component_ablation() {
    let _serial = serial();
    let rows: Vec<AblationRow> = ["full", "-long", "-short", "-fusion"].into_iter().map(row).collect();
    let csv = ablation_csv(&SEEDS, &rows);
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("ablation_components.csv"), &csv).unwrap();
    print!("{csv}");
    let full = rows[0].mean();
    let pass = rows[1..].iter().all(|r| full >= r.mean());
    let means: Vec<String> = rows.iter().map(|r| format!("{}={:.4}", r.variant, r.mean())).collect();
    report(8, "component ablation", pass, means.join(" "));
    // orderings within seed noise at this scale are reported, not asserted
    assert_eq!(csv.lines().count(), rows.len() + 1);
    assert!(rows.iter().flat_map(|r| &r.avg_maps).all(|m| (0.0..=1.0).contains(m)));
}

#[test]
fn c09_gating_ablation() {
    let _serial = serial();
    let rows: Vec<AblationRow> = ["zero", "random", "ones"].into_iter().map(row).collect();
    let csv = ablation_csv(&SEEDS, &rows);
    print!("{csv}");
    let pass = rows[0].mean() >= rows[2].mean();
    let means: Vec<String> = rows.iter().map(|r| format!("{}={:.4}", r.variant, r.mean())).collect();
    report(9, "gating ablation", pass, format!("{} (random not pinned)", means.join(" ")));
    assert_eq!(csv.lines().count(), rows.len() + 1);
    assert!(rows.iter().flat_map(|r| &r.avg_maps).all(|m| (0.0..=1.0).contains(m)));
}

fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    inter / ((a.1 - a.0) + (b.1 - b.0) - inter)
}

/// Exhaustive rank order, greedy highest-overlap matching, interpolated AP.
fn brute_ap(dets: &[Vec<Detection>], gts: &[Vec<SegmentAnnotation>], k: usize, thr: f64) -> Option<f64> {
    let mut all: Vec<(usize, Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(v, d)| d.iter().filter(|x| x.class_id == k).map(move |x| (v, *x)))
        .collect();
    let key = |(v, d): &(usize, Detection)| (-d.score, d.start, d.class_id, d.end, *v);
    let mut ranked = vec![];
    while !all.is_empty() {
        let i = (0..all.len())
            .reduce(|a, b| if key(&all[b]).partial_cmp(&key(&all[a])) == Some(std::cmp::Ordering::Less) { b } else { a })
            .unwrap();
        ranked.push(all.remove(i));
    }
    let npos = gts.iter().flatten().filter(|g| g.class_id == k).count();
    if npos == 0 {
        return (!ranked.is_empty()).then_some(0.0);
    }
    let mut used = vec![];
    let tp: Vec<bool> = ranked
        .iter()
        .map(|(v, d)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts[*v].iter().enumerate() {
                let o = tiou((d.start, d.end), (g.start, g.end));
                if g.class_id == k && !used.contains(&(*v, j)) && o >= thr && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            best.map(|(j, _)| used.push((*v, j))).is_some()
        })
        .collect();
    let precision = |i: usize| tp[..=i].iter().filter(|t| **t).count() as f64 / (i + 1) as f64;
    let sum: f64 = (0..tp.len())
        .filter(|&i| tp[i])
        .map(|i| (i..tp.len()).map(precision).fold(0.0, f64::max))
        .sum();
    Some(sum / npos as f64)
}

#[test]
fn c10_map_evaluator() {
    let _serial = serial();
    let mut r = rng::seeded(1010);
    let mut agree = 0;
    for _ in 0..100 {
        let videos = r.random_range(1..=3);
        let mut gts: Vec<Vec<SegmentAnnotation>> = (0..videos)
            .map(|_| {
                (0..r.random_range(0..=3))
                    .map(|_| {
                        let s = r.random_range(0..16) as f64;
                        SegmentAnnotation::new(s, s + r.random_range(1..6) as f64, r.random_range(0..2))
                    })
                    .collect()
            })
            .collect();
        if gts.iter().all(Vec::is_empty) {
            gts[0].push(SegmentAnnotation::new(1.0, 4.0, 0));
        }
        let dets: Vec<Vec<Detection>> = (0..videos)
            .map(|_| {
                (0..r.random_range(0..=5))
                    .map(|_| {
                        let s = r.random_range(0..32) as f64 * 0.5;
                        Detection {
                            start: s,
                            end: s + r.random_range(1..12) as f64 * 0.5,
                            class_id: r.random_range(0..2),
                            score: r.random_range(1..5) as f64 * 0.25,
                        }
                    })
                    .collect()
            })
            .collect();
        let eval = EvalConfig::default();
        let ok = (0..2).all(|k| {
            eval.tiou_thresholds
                .iter()
                .all(|&t| average_precision(&dets, &gts, k, t) == brute_ap(&dets, &gts, k, t))
        });
        agree += usize::from(ok && mean_ap(&dets, &gts, &eval).is_ok());
    }
    let d = |s: f64, e: f64, score: f64| Detection {
        start: s,
        end: e,
        class_id: 0,
        score,
    };
    let gt = vec![vec![SegmentAnnotation::new(0.0, 10.0, 0)]];
    let hand = [
        average_precision(&[vec![d(0.0, 10.0, 0.9)]], &gt, 0, 0.5) == Some(1.0),
        average_precision(&[vec![d(0.0, 10.0, 0.9), d(40.0, 50.0, 0.5)]], &gt, 0, 0.5) == Some(1.0),
        average_precision(&[vec![d(0.0, 10.0, 0.5), d(40.0, 50.0, 0.9)]], &gt, 0, 0.5) == Some(0.5),
    ];
    let pass = agree == 100 && hand.iter().all(|&h| h);
    report(10, "mAP evaluator", pass, format!("{agree}/100 random instances exact, hand examples {hand:?}"));
    assert!(pass);
}

fn tiny_run(dir: &Path, out: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 21;
    cfg.output_dir = dir.join(out);
    cfg.data.train_dir = dir.join("train");
    cfg.data.test_dir = dir.join("test");
    cfg.data.num_test = 2;
    cfg.data.generator.num_videos = 4;
    cfg.data.generator.max_len = 96;
    cfg.optim.total_epochs = 2;
    cfg.optim.warmup_epochs = 1.0;
    cfg
}

#[test]
fn c11_determinism() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let a = tiny_run(dir.path(), "a");
    losa_cli::cmd_generate(&a).unwrap();
    cmd_train(&a).unwrap();
    cmd_train(&tiny_run(dir.path(), "b")).unwrap();
    let same: Vec<(&str, bool)> = ["model.ckpt", "metrics.csv", "audit.json"]
        .into_iter()
        .map(|f| {
            let x = fs::read(dir.path().join("a").join(f)).unwrap();
            let y = fs::read(dir.path().join("b").join(f)).unwrap();
            (f, x == y)
        })
        .collect();
    let pass = same.iter().all(|s| s.1);
    report(11, "determinism", pass, format!("{same:?}"));
    assert!(pass);
}
