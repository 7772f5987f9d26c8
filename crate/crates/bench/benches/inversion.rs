use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mapinv_core::codeops::{fmi_modify, gram_descriptor, random_reallocate, sample_simplex, style_descriptor};
use mapinv_core::inversion::{build_fmi_objective, build_pmci_objective, objective_gradient, Priors, StyleSetup};
use mapinv_core::nn::Conv3x3;
use mapinv_core::{Backbone, Code, ImageBuffer, LayerId};
use ndarray::Array3;

fn pattern(c: usize, h: usize, w: usize, scale: f64) -> Array3<f64> {
    Array3::from_shape_fn((c, h, w), |(k, y, x)| {
        ((k * 31 + y * 7 + x * 13) % 17) as f64 * scale - 8.0 * scale
    })
}

fn image(side: usize) -> ImageBuffer {
    ImageBuffer::from_pixels(pattern(3, side, side, 6.0)).unwrap()
}

fn conv(c: &mut Criterion) {
    let n = 64 * 64 * 9;
    let layer = Conv3x3::new(64, 64, (0..n).map(|i| (i % 7) as f64 * 0.01).collect(), vec![0.1; 64]);
    let x = pattern(64, 56, 56, 0.1);
    c.bench_function("conv3x3 64->64 @56 forward", |b| {
        b.iter(|| layer.forward(black_box(x.view())))
    });
    let g = pattern(64, 56, 56, 0.01);
    c.bench_function("conv3x3 64->64 @56 backward", |b| {
        b.iter(|| layer.backward_input(black_box(g.view())))
    });
}

fn codeops(c: &mut Criterion) {
    let relu5_1 = LayerId::relu(5, 1).unwrap();
    let code = Code::new(relu5_1, pattern(512, 14, 14, 1.0).mapv(|v| v.max(0.0)), "bench");
    let v = sample_simplex(512, 1).unwrap();
    c.bench_function("fmi 512x14x14", |b| b.iter(|| fmi_modify(black_box(&code), 7).unwrap()));
    c.bench_function("reallocate 512x14x14", |b| {
        b.iter(|| random_reallocate(black_box(&code), &v).unwrap())
    });
    c.bench_function("channel sums 512x14x14", |b| {
        b.iter(|| style_descriptor(black_box(&code)))
    });
    c.bench_function("gram 512x14x14", |b| b.iter(|| gram_descriptor(black_box(&code))));
}

fn network(c: &mut Criterion) {
    let toy = Backbone::toy(0);
    let img = image(8);
    let setup = StyleSetup {
        content_layer: LayerId::relu(2, 1).unwrap(),
        style_layers: vec![
            LayerId::relu(1, 1).unwrap(),
            LayerId::relu(2, 1).unwrap(),
            LayerId::relu(3, 1).unwrap(),
        ],
        ..StyleSetup::default()
    };
    let obj = build_pmci_objective(&toy, &img, &image(8), &setup, Priors::default()).unwrap();
    let probe = ImageBuffer::from_pixels(pattern(3, 8, 8, 1.0)).unwrap();
    c.bench_function("toy pmci value+gradient", |b| {
        b.iter(|| objective_gradient(&toy, black_box(&probe), &obj).unwrap())
    });

    let vgg = Backbone::vgg19_synthetic(0);
    let mut group = c.benchmark_group("vgg19");
    group.sample_size(10);
    let img = image(64);
    let relu5_2 = LayerId::relu(5, 2).unwrap();
    group.bench_function("forward to relu5_2 @64", |b| {
        b.iter(|| vgg.extract_codes(black_box(&img), &[relu5_2]).unwrap())
    });
    let obj = build_fmi_objective(&vgg, &img, relu5_2, 0, Priors::default()).unwrap();
    group.bench_function("fmi value+gradient relu5_2 @64", |b| {
        b.iter(|| objective_gradient(&vgg, black_box(&img), &obj).unwrap())
    });
    group.finish();
}

criterion_group!(benches, conv, codeops, network);
criterion_main!(benches);
