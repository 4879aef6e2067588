//! Full-reference quality metrics on the [0, 1] scale.

use std::fmt::Write as _;

use crate::cfa::{self, BayerPattern, ColorImage, DegradationSpec};
use crate::error::{Error, Result};
use crate::models::Generator;
use crate::tensor::Tensor;

/// PSNR reported when two images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_len(op: &'static str, a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(op, format!("{} vs {} samples", a.len(), b.len())));
    }
    Ok(())
}

fn sse(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.clamp(0.0, 1.0) as f64 - y.clamp(0.0, 1.0) as f64;
            d * d
        })
        .sum()
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// PSNR of one plane; inputs are clipped to [0, 1] first.
pub fn psnr(reference: &[f32], test: &[f32]) -> Result<f64> {
    check_len("psnr", reference, test)?;
    Ok(psnr_from_mse(sse(reference, test) / reference.len() as f64))
}

fn same_dims(op: &'static str, a: &ColorImage, b: &ColorImage) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.tensor().shape(), b.tensor().shape())));
    }
    Ok(())
}

/// PSNR of the MSE pooled over all three channels.
pub fn cpsnr(reference: &ColorImage, test: &ColorImage) -> Result<f64> {
    same_dims("cpsnr", reference, test)?;
    let (a, b) = (reference.tensor().data(), test.tensor().data());
    Ok(psnr_from_mse(sse(a, b) / a.len() as f64))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" Gaussian filtering of an h×w plane.
fn filter_valid(src: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = win.iter().enumerate().map(|(k, &c)| c * src[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = win.iter().enumerate().map(|(k, &c)| c * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two h×w planes (11×11 Gaussian window, σ = 1.5, no padding).
pub fn ssim(reference: &[f32], test: &[f32], height: usize, width: usize) -> Result<f64> {
    check_len("ssim", reference, test)?;
    if reference.len() != height * width {
        return Err(Error::shape("ssim", format!("{} samples for {height}x{width}", reference.len())));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {height}x{width}"
        )));
    }
    let a: Vec<f64> = reference.iter().map(|&v| v.clamp(0.0, 1.0) as f64).collect();
    let b: Vec<f64> = test.iter().map(|&v| v.clamp(0.0, 1.0) as f64).collect();
    let win = gaussian_window();
    let f = |v: &[f64]| filter_valid(v, height, width, &win);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = f(&a);
    let mu_b = f(&b);
    let e_aa = f(&prod(&a, &a));
    let e_bb = f(&prod(&b, &b));
    let e_ab = f(&prod(&a, &b));
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean of the per-channel SSIMs.
pub fn ssim_color(reference: &ColorImage, test: &ColorImage) -> Result<f64> {
    same_dims("ssim_color", reference, test)?;
    let (h, w) = (reference.height(), reference.width());
    let mut s = 0.0;
    for c in 0..3 {
        s += ssim(reference.plane(c), test.plane(c), h, w)?;
    }
    Ok(s / 3.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub image: String,
    pub sigma: f32,
    pub rpsnr: f64,
    pub gpsnr: f64,
    pub bpsnr: f64,
    pub cpsnr: f64,
    pub ssim: f64,
}

impl MetricsRow {
    pub fn compute(image: impl Into<String>, sigma: f32, reference: &ColorImage, test: &ColorImage) -> Result<Self> {
        same_dims("metrics", reference, test)?;
        Ok(Self {
            image: image.into(),
            sigma,
            rpsnr: psnr(reference.plane(0), test.plane(0))?,
            gpsnr: psnr(reference.plane(1), test.plane(1))?,
            bpsnr: psnr(reference.plane(2), test.plane(2))?,
            cpsnr: cpsnr(reference, test)?,
            ssim: ssim_color(reference, test)?,
        })
    }
}

/// Column-wise arithmetic mean, labelled `AVG`.
pub fn average(rows: &[MetricsRow]) -> Option<MetricsRow> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Some(MetricsRow {
        image: "AVG".into(),
        sigma: (rows.iter().map(|r| r.sigma as f64).sum::<f64>() / n) as f32,
        rpsnr: mean(|r| r.rpsnr),
        gpsnr: mean(|r| r.gpsnr),
        bpsnr: mean(|r| r.bpsnr),
        cpsnr: mean(|r| r.cpsnr),
        ssim: mean(|r| r.ssim),
    })
}

pub const REPORT_HEADER: &str = "image,sigma,rpsnr,gpsnr,bpsnr,cpsnr,ssim";

/// CSV report: header, one line per row, then the `AVG` row.
pub fn format_report(rows: &[MetricsRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows.iter().chain(average(rows).as_ref()) {
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.6}",
            r.image, r.sigma, r.rpsnr, r.gpsnr, r.bpsnr, r.cpsnr, r.ssim
        );
    }
    out
}

/// Settings for reconstructing and scoring a set of images.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub pattern: BayerPattern,
    pub degradation: DegradationSpec,
    /// Border pixels dropped before scoring.
    pub crop: usize,
}

/// Degrade → pack → reconstruct with `generator`, clipped to [0, 1].
///
/// The noise stream of image `index` depends only on `(seed, index)`.
pub fn reconstruct(generator: &Generator<f32>, img: &ColorImage, settings: &EvalSettings, index: u64) -> Result<ColorImage> {
    let (_, packed) = cfa::degrade(img, settings.pattern, &settings.degradation, index)?;
    let batch = Tensor::stack(&[packed.tensor()])?;
    let out = generator.infer(&batch)?;
    let out = out.unstack().pop().expect("batch of one");
    Ok(ColorImage::from_tensor(out)?.clipped())
}

/// One metrics row per image, in the given order (without the `AVG` row).
pub fn evaluate_images(
    generator: &Generator<f32>,
    images: &[(String, ColorImage)],
    settings: &EvalSettings,
) -> Result<Vec<MetricsRow>> {
    images
        .iter()
        .enumerate()
        .map(|(i, (name, img))| {
            let rec = reconstruct(generator, img, settings, i as u64)?;
            let (reference, rec) = if settings.crop > 0 {
                (img.crop(settings.crop)?, rec.crop(settings.crop)?)
            } else {
                (img.clone(), rec)
            };
            MetricsRow::compute(name.clone(), settings.degradation.sigma, &reference, &rec)
        })
        .collect()
}
