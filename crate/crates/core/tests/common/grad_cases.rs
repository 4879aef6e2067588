//! Gradient-check cases shared by the gradient tests and the acceptance suite.

use super::{grad_check, grad_report, randn, rng, uniform};
use jdd::losses::{self, FeatureExtractor, FeatureExtractorSpec};
use jdd::models::{Bound, Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
use jdd::tensor::{BatchNormConfig, Graph, Mode, RunningStats, Scalar, Tensor, Var};

pub trait Precision: Scalar {
    const H: f64;
    const TOL: f64;
}

impl Precision for f32 {
    const H: f64 = 1e-3;
    const TOL: f64 = 1e-2;
}

impl Precision for f64 {
    const H: f64 = 1e-6;
    const TOL: f64 = 1e-5;
}

pub const PROBES: usize = 24;

/// Named relative errors collected by one case.
pub type Errors = Vec<(String, f64)>;

fn record(out: &mut Errors, what: &str, err: f64) {
    out.push((what.to_string(), err));
}

/// Entries of `errors` at or above the tolerance of `T`, formatted for a panic message.
pub fn failures<T: Precision>(errors: &Errors) -> Vec<String> {
    errors
        .iter()
        .filter(|(_, e)| !(*e < T::TOL))
        .map(|(w, e)| format!("{w} ({}): relative error {e:.3e} >= {:.0e}", std::any::type_name::<T>(), T::TOL))
        .collect()
}

fn bind(names: &[String], vars: &[Var]) -> Bound {
    names.iter().cloned().zip(vars.iter().copied()).collect()
}

pub fn conv_cases<T: Precision>(errs: &mut Errors) {
    let mut r = rng(1);
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 3), (2, 0, 1), (1, 2, 3)] {
        let x = randn::<T>(&mut r, &[2, 4, 6, 6], 1.0);
        let w = randn::<T>(&mut r, &[3, 4, k, k], 0.3);
        let b = randn::<T>(&mut r, &[3], 0.5);
        let err = grad_check(&[x, w, b], &[0, 1, 2], |g: &mut Graph<T>, v: &[Var]| g.conv2d(v[0], v[1], v[2], stride, pad), T::H, PROBES, 11);
        record(errs, &format!("conv2d stride {stride} pad {pad} k {k}"), err);
    }
}

pub fn activation_cases<T: Precision>(errs: &mut Errors) {
    let mut r = rng(2);
    // Keep samples away from the kink so a step of h never crosses it.
    let away = |t: Tensor<T>| t.map(|v| if v.as_f64().abs() < 0.05 { v + T::lit(0.1) } else { v });
    let x = away(randn::<T>(&mut r, &[2, 4, 6, 6], 1.0));
    record(errs, "relu", grad_check(&[x.clone()], &[0], |g: &mut Graph<T>, v: &[Var]| g.relu(v[0]), T::H, PROBES, 3));
    record(errs, 
        "leaky_relu",
        grad_check(&[x.clone()], &[0], |g: &mut Graph<T>, v: &[Var]| g.leaky_relu(v[0], 0.2), T::H, PROBES, 4),
    );
    let x = randn::<T>(&mut r, &[2, 4, 6, 6], 2.0);
    record(errs, "sigmoid", grad_check(&[x], &[0], |g: &mut Graph<T>, v: &[Var]| g.sigmoid(v[0]), T::H, PROBES, 5));
}

pub fn batch_norm_cases<T: Precision>(errs: &mut Errors) {
    let mut r = rng(3);
    let x = randn::<T>(&mut r, &[2, 4, 6, 6], 1.5);
    let gamma = uniform::<T>(&mut r, &[4], 0.5, 1.5);
    let beta = randn::<T>(&mut r, &[4], 0.5);
    let cfg = BatchNormConfig::default();
    let train = |g: &mut Graph<T>, v: &[Var]| Ok(g.batch_norm(v[0], v[1], v[2], None, Mode::Train, cfg)?.0);
    let err = grad_check(&[x.clone(), gamma.clone(), beta.clone()], &[0, 1, 2], train, T::H, PROBES, 6);
    record(errs, "batch_norm train", err);

    let running = RunningStats {
        mean: (0..4).map(|c| T::lit(0.1 * c as f64)).collect(),
        var: (0..4).map(|c| T::lit(0.5 + 0.25 * c as f64)).collect(),
    };
    let eval = |g: &mut Graph<T>, v: &[Var]| Ok(g.batch_norm(v[0], v[1], v[2], Some(&running), Mode::Eval, cfg)?.0);
    let err = grad_check(&[x, gamma, beta], &[0, 1, 2], eval, T::H, PROBES, 7);
    record(errs, "batch_norm eval", err);
}

pub fn rearrange_cases<T: Precision>(errs: &mut Errors) {
    let mut r = rng(4);
    let x = randn::<T>(&mut r, &[2, 4, 3, 3], 1.0);
    record(errs, 
        "pixel_shuffle",
        grad_check(&[x], &[0], |g: &mut Graph<T>, v: &[Var]| g.pixel_shuffle(v[0], 2), T::H, PROBES, 8),
    );
    let x = randn::<T>(&mut r, &[2, 1, 6, 6], 1.0);
    record(errs, 
        "pixel_unshuffle",
        grad_check(&[x], &[0], |g: &mut Graph<T>, v: &[Var]| g.pixel_unshuffle(v[0], 2), T::H, PROBES, 9),
    );
}

pub fn elementwise_cases<T: Precision>(errs: &mut Errors) {
    let mut r = rng(5);
    let a = randn::<T>(&mut r, &[2, 4, 6, 6], 1.0);
    let b = randn::<T>(&mut r, &[2, 4, 6, 6], 1.0);
    record(errs, 
        "add",
        grad_check(&[a.clone(), b.clone()], &[0, 1], |g: &mut Graph<T>, v: &[Var]| g.add(v[0], v[1]), T::H, PROBES, 10),
    );
    record(errs, 
        "scale",
        grad_check(&[a.clone()], &[0], |g: &mut Graph<T>, v: &[Var]| g.scale(v[0], -1.7), T::H, PROBES, 11),
    );
    record(errs, 
        "mean_square",
        grad_check(&[a.clone(), b], &[0, 1], |g: &mut Graph<T>, v: &[Var]| g.mean_square(v[0], v[1]), T::H, PROBES, 12),
    );
    record(errs, 
        "mean_per_sample",
        grad_check(&[a.clone()], &[0], |g: &mut Graph<T>, v: &[Var]| g.mean_per_sample(v[0]), T::H, PROBES, 13),
    );
    let dropout = |g: &mut Graph<T>, v: &[Var]| g.dropout(v[0], 0.5, Mode::Train, &mut rng(99));
    record(errs, "dropout", grad_check(&[a], &[0], dropout, T::H, PROBES, 14));
}

pub fn loss_cases<T: Precision>(errs: &mut Errors) {
    let mut r = rng(6);
    let scores = uniform::<T>(&mut r, &[5], 0.05, 0.95);
    let fake = uniform::<T>(&mut r, &[5], 0.05, 0.95);
    record(errs, 
        "bce real",
        grad_check(&[scores.clone()], &[0], |g: &mut Graph<T>, v: &[Var]| g.bce_mean(v[0], true, 1e-7), T::H, PROBES, 15),
    );
    record(errs, 
        "bce fake",
        grad_check(&[scores.clone()], &[0], |g: &mut Graph<T>, v: &[Var]| g.bce_mean(v[0], false, 1e-7), T::H, PROBES, 16),
    );
    record(errs, 
        "adversarial_loss",
        grad_check(&[scores.clone()], &[0], |g: &mut Graph<T>, v: &[Var]| losses::adversarial_loss(g, v[0]), T::H, PROBES, 17),
    );
    record(errs, 
        "discriminator_loss",
        grad_check(
            &[scores, fake],
            &[0, 1],
            |g: &mut Graph<T>, v: &[Var]| losses::discriminator_loss(g, v[0], v[1]),
            T::H,
            PROBES,
            18,
        ),
    );

    let out = uniform::<T>(&mut r, &[2, 3, 6, 6], 0.0, 1.0);
    let target = uniform::<T>(&mut r, &[2, 3, 6, 6], 0.0, 1.0);
    record(errs, 
        "mse_loss",
        grad_check(&[out.clone(), target.clone()], &[0], |g: &mut Graph<T>, v: &[Var]| losses::mse_loss(g, v[0], v[1]), T::H, PROBES, 19),
    );
    // A narrow extractor keeps the check fast; the default layout is covered in f64 below.
    let fx = FeatureExtractor::<T>::new(FeatureExtractorSpec { seed: 3, widths: vec![8, 8], strides: vec![1, 2] }).unwrap();
    record(errs, 
        "perceptual_loss",
        grad_check(
            &[out.clone(), target.clone()],
            &[0],
            |g: &mut Graph<T>, v: &[Var]| losses::perceptual_loss(g, v[0], v[1], &fx),
            T::H,
            PROBES,
            20,
        ),
    );
    let fx = FeatureExtractor::<T>::default();
    let weights = losses::LossWeights { lambda_p: 0.5, lambda_a: 0.3 };
    let scores = uniform::<T>(&mut r, &[2], 0.2, 0.8);
    record(errs, 
        "total_loss",
        grad_check(
            &[out, target, scores],
            &[0, 2],
            |g: &mut Graph<T>, v: &[Var]| Ok(losses::total_loss(g, v[0], v[1], Some(v[2]), weights, &fx)?.total),
            T::H,
            PROBES,
            21,
        ),
    );
}

// Whole networks are judged on the relative error of the full probed gradient
// vector: conv biases feeding a batch norm have an exactly zero gradient, and
// per-tensor ratios for them measure only rounding noise.
pub fn generator_case<T: Precision>(errs: &mut Errors) {
    let gen = Generator::<T>::new(GeneratorSpec::default(), 5).unwrap();
    let names: Vec<String> = gen.params.iter().map(|(n, _)| n.to_string()).collect();
    let mut inputs = vec![uniform::<T>(&mut rng(7), &[2, 4, 6, 6], 0.0, 1.0)];
    inputs.extend(gen.params.iter().map(|(_, e)| e.tensor.clone()));
    let check: Vec<usize> = (0..inputs.len()).collect();
    let f = |g: &mut Graph<T>, v: &[Var]| {
        let b = bind(&names, &v[1..]);
        gen.forward(g, &b, v[0], Mode::Train, &mut rng(0))
    };
    let report = grad_report(&inputs, &check, f, T::H, 3, 22);
    record(errs, "generator", report.combined);
}

// The smallest input the default discriminator accepts is 16x16, where the
// last batch norm sees a single pixel per sample; 24x24 leaves it 2x2.
pub fn discriminator_case<T: Precision>(errs: &mut Errors) {
    let disc = Discriminator::<T>::new(DiscriminatorSpec::default(), 6).unwrap();
    let trainable: Vec<String> = disc.params.trainable().map(|(n, _)| n.to_string()).collect();
    let mut inputs = vec![uniform::<T>(&mut rng(8), &[2, 3, 24, 24], 0.0, 1.0)];
    inputs.extend(disc.params.trainable().map(|(_, t)| t.clone()));
    let check: Vec<usize> = (0..inputs.len()).collect();
    let f = |g: &mut Graph<T>, v: &[Var]| {
        let b = bind(&trainable, &v[1..]);
        Ok(disc.forward(g, &b, v[0], Mode::Train)?.scores)
    };
    let report = grad_report(&inputs, &check, f, T::H, 3, 23);
    record(errs, "discriminator", report.combined);
}

/// Every operation-level case.
pub fn op_cases<T: Precision>(errs: &mut Errors) {
    conv_cases::<T>(errs);
    activation_cases::<T>(errs);
    batch_norm_cases::<T>(errs);
    rearrange_cases::<T>(errs);
    elementwise_cases::<T>(errs);
    loss_cases::<T>(errs);
}
