use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lain_core::category::ZeroShotSplit;
use lain_core::config::RunConfig;
use lain_core::dataset::generate_records;
use lain_core::eval::evaluate;
use lain_core::gradcheck::{grad_check, GradCheckOptions};
use lain_core::runner;
use lain_core::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench(c: &mut Criterion) {
    let cfg = RunConfig::resolve("", &["layers=2".into()]).unwrap();
    let spec = cfg.scene_spec().unwrap();
    let det = cfg.detector();

    let mut group = c.benchmark_group("generate_32_scenes");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_records(&spec, &det, 32, 7, exec).unwrap())
        });
    }
    group.finish();

    let model = runner::perturbed_model(&cfg, 1).unwrap();
    let records = generate_records(&spec, &det, 16, 8, Exec::Sequential).unwrap();
    let split = ZeroShotSplit::full(model.space.num_categories());
    let mut group = c.benchmark_group("evaluate_16_scenes");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate(&model, &records, &split, &cfg.eval(), "", exec).unwrap())
        });
    }
    group.finish();

    let (pixels, dets, gt) = runner::two_pair_scene(&model, 2);
    let names: Vec<String> = model.params.trainable_names().into_iter().filter(|n| n.starts_with("ia.0")).collect();
    let mut group = c.benchmark_group("gradcheck_ia_layer0");
    group.sample_size(10);
    for (name, exec) in MODES {
        let opts = GradCheckOptions {
            max_entries_per_param: Some(2),
            exec,
            ..GradCheckOptions::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                grad_check(&model.params, &names, |g, s| runner::scene_loss(g, &model, s, &pixels, &dets, &gt, &cfg), &opts)
                    .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
