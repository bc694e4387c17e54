use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use pmce_bench::workload;
use pmce_core::enhancer::{backward, forward};
use pmce_core::eval::{
    fit_logistic, run_episode, sample_episode, AblationFlags, ClassifierKind, EvalConfig,
};
use pmce_core::linalg::{widen, Matrix};
use pmce_core::prior::calibrate_prototype;
use pmce_core::trainer::{batch_objective, samples_from_split, TrainableModel};
use pmce_core::{LossWeights, PriorConfig};

fn enhancer(c: &mut Criterion) {
    let w = workload();
    let rec = &w.novel.records[0];
    let v = widen(&rec.visual);
    let e = &w.enhancer;
    let mut group = c.benchmark_group("enhancer");
    for tokens in [1usize, 8] {
        let s = Matrix::from_vec(tokens, e.config.d_t, widen(&rec.caption_emb).repeat(tokens));
        group.bench_function(format!("forward/T={tokens}"), |b| {
            b.iter(|| forward(black_box(&v), black_box(&s), &e.params, &e.config).unwrap())
        });
        let (out, cache) = forward(&v, &s, &e.params, &e.config).unwrap();
        group.bench_function(format!("backward/T={tokens}"), |b| {
            b.iter(|| backward(&e.params, black_box(&cache), black_box(&out)).unwrap())
        });
    }
    group.finish();
}

fn training_batch(c: &mut Criterion) {
    let w = workload();
    let samples = samples_from_split(&w.base);
    let model = TrainableModel::init(&w.enhancer.config, w.bank.len(), 0).unwrap();
    c.bench_function("train/batch128", |b| {
        b.iter(|| {
            batch_objective(
                &model,
                &w.enhancer.config,
                &samples[..128],
                w.bank.means(),
                &LossWeights::default(),
            )
            .unwrap()
        })
    });
}

fn calibration(c: &mut Criterion) {
    let w = workload();
    let support = vec![widen(&w.novel.records[0].visual)];
    let name = widen(&w.novel.name_embs[0]);
    let cfg = PriorConfig::for_shots(1);
    c.bench_function("calibrate_prototype/1-shot", |b| {
        b.iter(|| {
            calibrate_prototype(black_box(&support), black_box(&name), &w.bank, &cfg).unwrap()
        })
    });
}

fn episodes(c: &mut Criterion) {
    let w = workload();
    let mut group = c.benchmark_group("run_episode");
    for (label, flags, classifier) in [
        ("baseline/EU", AblationFlags::BASELINE, ClassifierKind::Eu),
        ("full/EU", AblationFlags::FULL, ClassifierKind::Eu),
        ("full/LR", AblationFlags::FULL, ClassifierKind::Lr),
    ] {
        let cfg = EvalConfig {
            flags,
            classifier,
            ..EvalConfig::for_shots(1)
        };
        group.bench_function(label, |b| {
            b.iter_batched(
                || sample_episode(&w.novel, 5, 1, 15, 0, 3).unwrap(),
                |ep| run_episode(&ep, &w.bank, Some(&w.enhancer), &cfg).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();

    let protos: Vec<Vec<f64>> = (0..5)
        .map(|c| widen(&w.novel.records[c * 60].visual))
        .collect();
    let labels: Vec<usize> = (0..5).collect();
    c.bench_function("fit_logistic/5x32", |b| {
        b.iter(|| fit_logistic(black_box(&protos), &labels, 5, 1.0).unwrap())
    });
}

criterion_group!(benches, enhancer, training_batch, calibration, episodes);
criterion_main!(benches);
