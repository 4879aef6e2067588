mod common;

use common::oracles::{discriminator_params, discriminator_sizes, generator_params};
use common::{rng, uniform};
use jdd::models::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
use jdd::tensor::{kernels, Graph, Mode, Tensor};
use jdd::Error;

#[test]
fn generator_shapes() {
    let spec = GeneratorSpec { res_blocks: 2, trunk_width: 8, ..GeneratorSpec::default() };
    let gen = Generator::<f32>::new(spec, 0).unwrap();
    let out = gen.infer(&Tensor::zeros([2, 4, 10, 6])).unwrap();
    assert_eq!(out.shape(), &[2, 3, 20, 12]);
    assert!(gen.infer(&Tensor::zeros([1, 3, 10, 10])).is_err());
}

#[test]
fn default_generator_on_full_patch() {
    let gen = Generator::<f32>::new(GeneratorSpec::default(), 0).unwrap();
    let x = uniform(&mut rng(1), &[1, 4, 50, 50], 0.0, 1.0);
    let out = gen.infer(&x).unwrap();
    assert_eq!(out.shape(), &[1, 3, 100, 100]);
    assert!(out.data().iter().all(|v| v.is_finite()));
}

#[test]
fn parameter_counts_match_layer_tables() {
    let g = Generator::<f32>::new(GeneratorSpec::default(), 0).unwrap();
    assert_eq!(g.params.count_parameters(), 1_370_435);
    assert_eq!(g.params.count_parameters(), generator_params(&g.spec));
    let d = Discriminator::<f32>::new(DiscriminatorSpec::default(), 0).unwrap();
    assert_eq!(d.params.count_parameters(), 4_693_697);
    assert_eq!(d.params.count_parameters(), discriminator_params(&d.spec));
    for (b, w) in [(0, 4), (3, 16), (1, 7)] {
        let spec = GeneratorSpec { res_blocks: b, trunk_width: w, ..GeneratorSpec::default() };
        let g = Generator::<f32>::new(spec.clone(), 0).unwrap();
        assert_eq!(g.params.count_parameters(), generator_params(&spec));
    }
    let small = DiscriminatorSpec::with_widths(16, 128);
    let d = Discriminator::<f32>::new(small.clone(), 0).unwrap();
    assert_eq!(d.params.count_parameters(), discriminator_params(&small));
}

#[test]
fn single_trunk_conv_count() {
    let g = Generator::<f32>::new(GeneratorSpec::default(), 0).unwrap();
    let n = g.params.get("res.0.conv1.weight").unwrap().len() + g.params.get("res.0.conv1.bias").unwrap().len();
    assert_eq!(n, 64 * 64 * 9 + 64);
    let head = g.params.get("head.weight").unwrap().len() + g.params.get("head.bias").unwrap().len();
    assert_eq!(head, 2368);
}

#[test]
fn zero_weight_res_blocks_are_identity() {
    let spec = GeneratorSpec { res_blocks: 3, trunk_width: 8, ..GeneratorSpec::default() };
    let mut with_blocks = Generator::<f64>::new(spec.clone(), 5).unwrap();
    let names: Vec<String> =
        with_blocks.params.iter().map(|(n, _)| n.to_string()).filter(|n| n.starts_with("res.")).collect();
    for n in &names {
        let shape = with_blocks.params.get(n).unwrap().shape().to_vec();
        with_blocks.params.set(n, Tensor::zeros(shape)).unwrap();
    }
    let mut without = Generator::<f64>::new(GeneratorSpec { res_blocks: 0, ..spec }, 5).unwrap();
    for (name, entry) in with_blocks.params.iter() {
        if !name.starts_with("res.") {
            without.params.set(name, entry.tensor.clone()).unwrap();
        }
    }
    let x = uniform(&mut rng(3), &[2, 4, 6, 6], 0.0, 1.0);
    assert_eq!(with_blocks.infer(&x).unwrap(), without.infer(&x).unwrap());

    let mut g = Graph::new();
    let b = with_blocks.params.bind(&mut g, false);
    let head_only = {
        let xv = g.input(x.clone());
        let feats = with_blocks.features(&mut g, &b, xv, Mode::Eval, &mut rng(0)).unwrap();
        g.value(feats).clone()
    };
    let mut g = Graph::new();
    let b2 = without.params.bind(&mut g, false);
    let xv = g.input(x);
    let feats = without.features(&mut g, &b2, xv, Mode::Eval, &mut rng(0)).unwrap();
    assert_eq!(&head_only, g.value(feats));
}

#[test]
fn generator_init_is_deterministic() {
    let spec = GeneratorSpec { res_blocks: 1, trunk_width: 4, ..GeneratorSpec::default() };
    let a = Generator::<f32>::new(spec.clone(), 9).unwrap();
    let b = Generator::<f32>::new(spec.clone(), 9).unwrap();
    let c = Generator::<f32>::new(spec, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn eval_mode_dropout_is_deterministic() {
    let spec = GeneratorSpec { res_blocks: 2, trunk_width: 4, dropout_keep: 0.5, ..GeneratorSpec::default() };
    let gen = Generator::<f32>::new(spec, 1).unwrap();
    let x = uniform(&mut rng(2), &[1, 4, 5, 5], 0.0, 1.0);
    assert_eq!(gen.infer(&x).unwrap(), gen.infer(&x).unwrap());
}

#[test]
fn discriminator_scores_are_probabilities() {
    let d = Discriminator::<f32>::new(DiscriminatorSpec::with_widths(8, 64), 0).unwrap();
    let x = uniform(&mut rng(4), &[3, 3, 100, 100], 0.0, 1.0);
    let mut g = Graph::new();
    let b = d.params.bind(&mut g, false);
    let xv = g.input(x.clone());
    let out = d.forward(&mut g, &b, xv, Mode::Train).unwrap();
    let scores = g.value(out.scores);
    assert_eq!(scores.shape(), &[3]);
    assert!(scores.data().iter().all(|&s| s > 0.0 && s < 1.0));
    assert_eq!(out.batch_stats.len(), 7);

    let eval = d.score(&x).unwrap();
    assert_eq!(eval.len(), 3);
    assert!(eval.iter().all(|&s| s > 0.0 && s < 1.0));
}

#[test]
fn default_discriminator_scores() {
    let d = Discriminator::<f32>::new(DiscriminatorSpec::default(), 0).unwrap();
    let x = uniform(&mut rng(5), &[2, 3, 100, 100], 0.0, 1.0);
    let s = d.score(&x).unwrap();
    assert_eq!(s.len(), 2);
    assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn discriminator_spatial_sizes() {
    let spec = DiscriminatorSpec::default();
    assert_eq!(discriminator_sizes(100, &spec.strides), vec![100, 50, 50, 25, 25, 13, 13, 7]);
    let mut side = 100;
    let chained: Vec<usize> = spec
        .strides
        .iter()
        .map(|&st| {
            side = kernels::conv_output_size(side, 3, st, 1).unwrap();
            side
        })
        .collect();
    assert_eq!(chained, discriminator_sizes(100, &spec.strides));
}

#[test]
fn discriminator_rejects_small_inputs() {
    let d = Discriminator::<f32>::new(DiscriminatorSpec::with_widths(2, 4), 0).unwrap();
    let err = d.score(&Tensor::zeros([1, 3, 8, 8])).unwrap_err();
    assert!(matches!(err, Error::SpatialTooSmall { height: 8, width: 8, min: 16 }), "{err}");
    assert!(d.score(&Tensor::zeros([1, 3, 16, 16])).is_ok());
    assert!(d.score(&Tensor::zeros([1, 4, 16, 16])).is_err());
}

#[test]
fn committing_batch_stats_moves_running_averages() {
    let mut d = Discriminator::<f32>::new(DiscriminatorSpec::with_widths(2, 4), 0).unwrap();
    let before = d.params.get("bn.1.running_mean").unwrap().clone();
    let mut g = Graph::new();
    let b = d.params.bind(&mut g, true);
    let xv = g.input(uniform(&mut rng(6), &[2, 3, 16, 16], 0.0, 1.0));
    let out = d.forward(&mut g, &b, xv, Mode::Train).unwrap();
    assert_eq!(d.params.get("bn.1.running_mean").unwrap(), &before);
    d.commit_batch_stats(&out.batch_stats).unwrap();
    assert_ne!(d.params.get("bn.1.running_mean").unwrap(), &before);
}
