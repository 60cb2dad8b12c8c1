use criterion::{black_box, criterion_group, criterion_main, Criterion};
use effcrn_core::autodiff::{kernels, ConvGeometry};
use effcrn_core::dsp::{istft, stft, FrameConfig};
use effcrn_core::Tensor;

fn filled(shape: &[usize], seed: f32) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|i| (i as f32 * 0.618 + seed).sin() * 0.5).collect()).unwrap()
}

fn convolution(c: &mut Criterion) {
    // One frame through a stride-2 encoder layer, as in the first EffCRN23
    // block, and a wider FCRN15-like layer.
    for (name, freq, kernel, cin, cout) in [("effcrn23_enc1", 260, 4, 2, 27), ("fcrn15_enc2", 132, 12, 32, 64)] {
        let geom = ConvGeometry::same(freq, kernel, 2).unwrap();
        let fo = geom.out_len(freq).unwrap();
        let x = filled(&[1, 1, freq, cin], 0.1);
        let w = filled(&[kernel, 1, cin, cout], 0.2);
        let dy = filled(&[1, 1, fo, cout], 0.3);
        c.bench_function(&format!("conv_forward/{name}"), |b| {
            b.iter(|| kernels::conv_forward(black_box(&x), &w, None, geom).unwrap())
        });
        c.bench_function(&format!("conv_backward_weight/{name}"), |b| {
            b.iter(|| kernels::conv_backward_weight(black_box(&x), &dy, geom).unwrap())
        });
    }
}

fn transforms(c: &mut Criterion) {
    let cfg = FrameConfig::default();
    let signal: Vec<f64> = (0..16_000).map(|n| (n as f64 * 0.05).sin()).collect();
    c.bench_function("stft/1s", |b| b.iter(|| stft::<f32>(black_box(&signal), cfg).unwrap()));
    let spec = stft::<f32>(&signal, cfg).unwrap();
    c.bench_function("istft/1s", |b| b.iter(|| istft(black_box(&spec), cfg).unwrap()));
}

criterion_group!(benches, convolution, transforms);
criterion_main!(benches);
