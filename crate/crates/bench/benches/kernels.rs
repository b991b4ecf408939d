use std::hint::black_box;

use asa_bench::phantom;
use asa_core::asa::{volume_loss, AsaConfig, AsaModel};
use asa_core::informativeness::informativeness_weights;
use asa_core::metrics::hd95_metric;
use asa_core::patching::{make_mask_plan, PatchGrid};
use asa_core::seg::{seg_volume_loss, SegConfig, SegModel};
use asa_core::{Tape, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};

fn matmul(c: &mut Criterion) {
    let a = Tensor::new(vec![64, 64], (0..4096).map(|i| (i % 13) as f64 * 0.1).collect());
    c.bench_function("matmul_64_fwd_bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let x = tape.variable(a.clone());
            let y = tape.matmul(x, x);
            let s = tape.sum(y);
            black_box(tape.backward(s).unwrap());
        })
    });
}

fn informativeness(c: &mut Criterion) {
    let v = phantom(1);
    let grid = PatchGrid::for_dims(v.dims, 8).unwrap();
    let plan = make_mask_plan(64, 0.75, 3).unwrap();
    c.bench_function("informativeness_32", |b| {
        b.iter(|| black_box(informativeness_weights(&v, &grid, &plan, 8).unwrap()))
    });
}

fn models(c: &mut Criterion) {
    let v = phantom(2);
    let asa = AsaModel::new(AsaConfig::default(), 0).unwrap();
    let plan = make_mask_plan(64, 0.75, 3).unwrap();
    c.bench_function("asa_loss_fwd_bwd_32", |b| b.iter(|| black_box(volume_loss(&asa, &v, &plan).unwrap())));
    let seg = SegModel::new(SegConfig::default(), 0).unwrap();
    let mut g = c.benchmark_group("seg");
    g.sample_size(10);
    g.bench_function("seg_loss_fwd_bwd_32", |b| b.iter(|| black_box(seg_volume_loss(&seg, &v).unwrap())));
    g.finish();
}

fn hd95(c: &mut Criterion) {
    let a = phantom(3);
    let b_vol = phantom(4);
    let (la, lb) = (a.labels.unwrap(), b_vol.labels.unwrap());
    c.bench_function("hd95_32", |b| b.iter(|| black_box(hd95_metric(&la, &lb, [32, 32, 32], 1).unwrap())));
}

criterion_group!(benches, matmul, informativeness, models, hd95);
criterion_main!(benches);
