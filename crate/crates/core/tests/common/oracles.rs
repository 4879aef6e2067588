//! Independent reference implementations. None of these call into the
//! library's own kernels, so agreement is evidence rather than tautology.

use jdd::cfa::ColorImage;
use jdd::models::{DiscriminatorSpec, GeneratorSpec};

/// Colour plane sampled at (y, x), read off the pattern's name.
pub fn bayer_plane(pattern: &str, y: usize, x: usize) -> usize {
    let letter = pattern.as_bytes()[(y % 2) * 2 + (x % 2)].to_ascii_uppercase();
    match letter {
        b'R' => 0,
        b'G' => 1,
        b'B' => 2,
        other => panic!("bad pattern letter {}", other as char),
    }
}

/// Per-pixel mosaic, row-major.
pub fn brute_mosaic(img: &ColorImage, pattern: &str) -> Vec<f32> {
    let mut out = Vec::new();
    for y in 0..img.height() {
        for x in 0..img.width() {
            out.push(img.get(bayer_plane(pattern, y, x), y, x));
        }
    }
    out
}

pub fn naive_mse(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        s += d * d;
    }
    s / a.len() as f64
}

/// Mean SSIM by direct summation over every full 11×11 window, with the
/// 2-D Gaussian weights built in place.
pub fn naive_ssim(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    const N: usize = 11;
    let sigma = 1.5f64;
    let mut weights = [[0.0f64; N]; N];
    let mut total = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let c1 = 0.0001f64;
    let c2 = 0.0009f64;
    let px = |v: &[f32], y: usize, x: usize| (v[y * w + x] as f64).clamp(0.0, 1.0);
    let mut sum = 0.0;
    let mut count = 0;
    for y0 in 0..=h - N {
        for x0 in 0..=w - N {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..N {
                for j in 0..N {
                    let k = weights[i][j] / total;
                    let (p, q) = (px(a, y0 + i, x0 + j), px(b, y0 + i, x0 + j));
                    ma += k * p;
                    mb += k * q;
                    saa += k * p * p;
                    sbb += k * q * q;
                    sab += k * p * q;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

fn conv_params(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

/// Trainable parameter count from the layer table.
pub fn generator_params(spec: &GeneratorSpec) -> usize {
    let (w, k) = (spec.trunk_width, spec.kernel);
    conv_params(4, w, k)
        + spec.res_blocks * 2 * conv_params(w, w, k)
        + conv_params(w, w, k)
        + conv_params(w, 4 * w, k)
        + conv_params(w, 3, k)
}

/// Trainable parameter count from the layer table (running statistics are
/// not trainable).
pub fn discriminator_params(spec: &DiscriminatorSpec) -> usize {
    let mut cin = 3;
    let mut total = 0;
    for i in 0..spec.conv_layers {
        let cout = (spec.base_width << (i / 2)).min(spec.max_width);
        total += conv_params(cin, cout, 3);
        if i > 0 || spec.first_layer_bn {
            total += 2 * cout;
        }
        cin = cout;
    }
    total + conv_params(cin, 1, 3)
}

/// Spatial side after each discriminator conv, from `floor((n + 2 - 3) / s) + 1`.
pub fn discriminator_sizes(n: usize, strides: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut s = n;
    for &st in strides {
        s = (s - 1) / st + 1;
        out.push(s);
    }
    out
}
