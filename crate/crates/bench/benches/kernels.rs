use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use incseg_core::backbone::{images_tensor, SegConfig, SegModel};
use incseg_core::datagen::{preset_domains, synth_sample};
use incseg_core::kernels::{conv2d_forward, ConvGeometry};
use incseg_core::metrics::{dsc, hd95};
use incseg_core::whitening::kmeans_1d;

fn conv(c: &mut Criterion) {
    let g = ConvGeometry { c_in: 16, c_out: 16, kernel: 3, stride: 1, pad: 1, h: 64, w: 64 };
    let n = 16;
    let x: Vec<f32> = (0..n * 16 * 64 * 64).map(|i| (i % 97) as f32 / 97.0).collect();
    let w: Vec<f32> = (0..16 * 16 * 9).map(|i| (i % 13) as f32 / 13.0 - 0.5).collect();
    let b = vec![0.0f32; 16];
    let mut out = vec![0.0f32; n * 16 * 64 * 64];
    c.bench_function("conv3x3_16ch_64px_batch16", |bench| {
        bench.iter(|| conv2d_forward(black_box(&x), n, &w, &b, &g, &mut out))
    });
}

fn kmeans(c: &mut Criterion) {
    let values: Vec<f64> = (0..64 * 64).map(|i| ((i * 7919) % 4099) as f64 / 4099.0).collect();
    c.bench_function("kmeans_1d_4096_k3", |bench| bench.iter(|| kmeans_1d(black_box(&values), 3)));
    c.bench_function("kmeans_1d_4096_k20", |bench| bench.iter(|| kmeans_1d(black_box(&values), 20)));
}

fn model(c: &mut Criterion) {
    let domain = &preset_domains()[0];
    let samples: Vec<_> = (0..16).map(|s| synth_sample(domain, 64, 0, s).unwrap()).collect();
    let refs: Vec<_> = samples.iter().collect();
    let x = images_tensor::<f32>(&refs).unwrap();
    let m = SegModel::<f32>::new(SegConfig::with_widths(&[8, 16, 32, 64]), 0).unwrap();
    c.bench_function("segmentation_forward_batch16_64px", |bench| bench.iter(|| m.forward(black_box(&x)).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let domain = &preset_domains()[0];
    let a = synth_sample(domain, 64, 0, 1).unwrap();
    let b = synth_sample(domain, 64, 0, 2).unwrap();
    c.bench_function("dsc_64px", |bench| bench.iter(|| dsc(black_box(&a.label), &b.label).unwrap()));
    c.bench_function("hd95_64px", |bench| bench.iter(|| hd95(black_box(&a.label), &b.label, 64).unwrap()));
}

criterion_group!(benches, conv, kmeans, model, metrics);
criterion_main!(benches);
