//! Training objectives.
//!
//! The generator minimises `mse + lambda_p * perceptual + lambda_a * adversarial`;
//! the discriminator minimises binary cross-entropy on real/fake scores.
//!
//! The perceptual term compares feature maps from a [`FeatureExtractor`]: a
//! frozen, randomly initialised conv/ReLU stack drawn from a fixed seed. It
//! stands in for pretrained VGG19 features; any other frozen network can be
//! plugged in by building a `FeatureExtractor` from its weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Probabilities are clamped to `[LOG_EPS, 1 - LOG_EPS]` before taking logs.
pub const LOG_EPS: f64 = 1e-7;

/// Seed of the default perceptual feature network.
pub const DEFAULT_FX_SEED: u64 = 0x4A44_445F_5645_4753;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_a: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_p: 1.0, lambda_a: 0.001 }
    }
}

impl LossWeights {
    pub const SUPERVISED: Self = Self { lambda_p: 0.0, lambda_a: 0.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_p >= 0.0 && self.lambda_a >= 0.0) {
            return Err(Error::InvalidArgument(format!("loss weights must be >= 0, got {self:?}")));
        }
        Ok(())
    }
}

/// Layout of the frozen feature network, recorded alongside checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureExtractorSpec {
    pub seed: u64,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for FeatureExtractorSpec {
    fn default() -> Self {
        Self { seed: DEFAULT_FX_SEED, widths: vec![32, 64, 128, 128], strides: vec![1, 2, 2, 2] }
    }
}

struct FxLayer<T> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    stride: usize,
}

/// Frozen conv3x3 + ReLU stack; features are tapped after the last block.
pub struct FeatureExtractor<T: Scalar = f32> {
    spec: FeatureExtractorSpec,
    layers: Vec<FxLayer<T>>,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new(spec: FeatureExtractorSpec) -> Result<Self> {
        if spec.widths.len() != spec.strides.len() || spec.widths.is_empty() || spec.strides.contains(&0) {
            return Err(Error::InvalidArgument("feature extractor needs matching, non-empty widths/strides".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut cin = 3;
        let mut layers = Vec::new();
        for (&cout, &stride) in spec.widths.iter().zip(&spec.strides) {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let weight = Tensor::from_fn([cout, cin, 3, 3], |_| {
                let z: f64 = rng.sample(StandardNormal);
                T::lit(std * z)
            });
            layers.push(FxLayer { weight, bias: Tensor::zeros([cout]), stride });
            cin = cout;
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &FeatureExtractorSpec {
        &self.spec
    }

    pub fn features(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            let w = g.input(layer.weight.clone());
            let b = g.input(layer.bias.clone());
            h = g.conv2d(h, w, b, layer.stride, 1)?;
            h = g.relu(h)?;
        }
        Ok(h)
    }
}

impl<T: Scalar> Default for FeatureExtractor<T> {
    fn default() -> Self {
        Self::new(FeatureExtractorSpec::default()).expect("default feature extractor spec is valid")
    }
}

fn detached<T: Scalar>(g: &mut Graph<T>, v: Var) -> Var {
    if g.requires_grad(v) {
        g.input(g.value(v).clone())
    } else {
        v
    }
}

/// Mean squared error over all elements of the batch.
pub fn mse_loss<T: Scalar>(g: &mut Graph<T>, output: Var, target: Var) -> Result<Var> {
    g.mean_square(output, target)
}

/// Squared feature distance summed over channels and divided by the feature
/// map area, averaged over the batch. The target branch is detached.
pub fn perceptual_loss<T: Scalar>(g: &mut Graph<T>, output: Var, target: Var, fx: &FeatureExtractor<T>) -> Result<Var> {
    if g.value(output).shape() != g.value(target).shape() {
        return Err(Error::shape(
            "perceptual_loss",
            format!("{:?} vs {:?}", g.value(output).shape(), g.value(target).shape()),
        ));
    }
    let target = detached(g, target);
    let fo = fx.features(g, output)?;
    let ft = fx.features(g, target)?;
    let channels = g.value(fo).dims4()?.1;
    let per_element = g.mean_square(fo, ft)?;
    g.scale(per_element, channels as f64)
}

/// `-(1/N) Σ log d_i` over per-sample probabilities.
pub fn adversarial_loss<T: Scalar>(g: &mut Graph<T>, d_scores: Var) -> Result<Var> {
    g.bce_mean(d_scores, true, LOG_EPS)
}

/// `-(1/N) Σ [log real_i + log(1 - fake_i)]`.
pub fn discriminator_loss<T: Scalar>(g: &mut Graph<T>, real_scores: Var, fake_scores: Var) -> Result<Var> {
    let real = g.bce_mean(real_scores, true, LOG_EPS)?;
    let fake = g.bce_mean(fake_scores, false, LOG_EPS)?;
    g.add(real, fake)
}

/// Handles to the composite loss and the terms it was built from.
///
/// Terms with zero weight are not evaluated and are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub mse: Var,
    pub perceptual: Option<Var>,
    pub adversarial: Option<Var>,
}

pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    output: Var,
    target: Var,
    d_scores: Option<Var>,
    weights: LossWeights,
    fx: &FeatureExtractor<T>,
) -> Result<LossTerms> {
    weights.validate()?;
    let mse = mse_loss(g, output, target)?;
    let mut total = mse;
    let mut perceptual = None;
    if weights.lambda_p > 0.0 {
        let p = perceptual_loss(g, output, target, fx)?;
        let scaled = g.scale(p, weights.lambda_p)?;
        total = g.add(total, scaled)?;
        perceptual = Some(p);
    }
    let mut adversarial = None;
    if weights.lambda_a > 0.0 {
        let scores = d_scores.ok_or_else(|| {
            Error::InvalidArgument("adversarial weight is non-zero but no discriminator scores were given".into())
        })?;
        let a = adversarial_loss(g, scores)?;
        let scaled = g.scale(a, weights.lambda_a)?;
        total = g.add(total, scaled)?;
        adversarial = Some(a);
    }
    Ok(LossTerms { total, mse, perceptual, adversarial })
}
