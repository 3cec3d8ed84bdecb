use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use losa::backbone::{split_clips, Backbone, BackboneConfig, ClipSpec};
use losa::data::{generate, GeneratorConfig};
use losa::metrics::{mean_ap, EvalConfig};
use losa::par;

fn clip_extraction(c: &mut Criterion) {
    let ds = generate(&GeneratorConfig {
        num_videos: 1,
        min_len: 128,
        max_len: 128,
        ..Default::default()
    })
    .unwrap();
    let spec = ClipSpec::default();
    let backbone = Backbone::new(&BackboneConfig::default(), &spec).unwrap();
    let clips = split_clips(&ds.samples[0].video, &spec).unwrap();

    let mut g = c.benchmark_group("clip_features");
    g.sample_size(10);
    g.throughput(Throughput::Elements(clips.len() as u64));
    g.bench_function(BenchmarkId::new("sequential", clips.len()), |b| {
        b.iter(|| par::map_collect_seq(black_box(&clips), |c| backbone.clip_features(&c.frames)).unwrap())
    });
    #[cfg(feature = "parallel")]
    g.bench_function(BenchmarkId::new("rayon", clips.len()), |b| {
        b.iter(|| par::map_collect_par(black_box(&clips), |c| backbone.clip_features(&c.frames)).unwrap())
    });
    g.finish();
}

fn map_evaluation(c: &mut Criterion) {
    use losa::data::SegmentAnnotation;
    use losa::head::Detection;

    let videos = 64;
    let gts: Vec<Vec<SegmentAnnotation>> = (0..videos)
        .map(|v| {
            (0..4)
                .map(|k| SegmentAnnotation::new((k * 40 + v % 7) as f64, (k * 40 + 20 + v % 5) as f64, k % 4))
                .collect()
        })
        .collect();
    let dets: Vec<Vec<Detection>> = gts
        .iter()
        .map(|g| {
            g.iter()
                .flat_map(|a| {
                    (0..25).map(move |j| Detection {
                        start: a.start + j as f64 * 0.5,
                        end: a.end + j as f64 * 0.3,
                        class_id: a.class_id,
                        score: 1.0 / (1.0 + j as f64),
                    })
                })
                .collect()
        })
        .collect();
    let eval = EvalConfig::default();
    let mut g = c.benchmark_group("mean_ap");
    g.bench_function("64_videos", |b| b.iter(|| mean_ap(black_box(&dets), &gts, &eval).unwrap()));
    g.finish();
}

criterion_group!(benches, clip_extraction, map_evaluation);
criterion_main!(benches);
