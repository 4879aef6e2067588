//! Adam and the alternating generator/discriminator training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cfa::{self, BayerPattern, ColorImage, D4};
use crate::error::{Error, Result};
use crate::io::checkpoint::{self, CheckpointMetadata};
use crate::losses::{self, FeatureExtractor, FeatureExtractorSpec, LossWeights};
use crate::models::{Bound, Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, ParameterStore};
use crate::tensor::{Graph, Mode, Scalar, Tensor};

pub const LOG_HEADER: &str = "step,d_loss,g_total,g_mse,g_perc,g_adv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub d_steps_per_g: usize,
    /// Write a checkpoint every this many steps; 0 writes only the first and last.
    pub checkpoint_every: usize,
    /// Noise standard deviation range on the 0–255 scale, sampled per example.
    pub sigma_range: [f32; 2],
    pub clip: bool,
    pub patch_size: usize,
    /// Apply a random dihedral transform to each sampled patch.
    pub augment: bool,
    pub pattern: BayerPattern,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub feature_extractor: FeatureExtractorSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            steps: 1000,
            seed: 0,
            loss_weights: LossWeights::default(),
            d_steps_per_g: 1,
            checkpoint_every: 0,
            sigma_range: [0.0, 20.0],
            clip: true,
            patch_size: 100,
            augment: true,
            pattern: BayerPattern::Rggb,
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            feature_extractor: FeatureExtractorSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("eps must be > 0".into());
        }
        if self.batch_size == 0 || self.d_steps_per_g == 0 {
            return bad("batch_size and d_steps_per_g must be >= 1".into());
        }
        let [lo, hi] = self.sigma_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("invalid sigma_range {:?}", self.sigma_range));
        }
        if self.patch_size == 0 || self.patch_size % 2 != 0 {
            return bad(format!("patch_size must be even and positive, got {}", self.patch_size));
        }
        if self.adversarial() && self.patch_size < self.discriminator.min_input_size() {
            return bad(format!(
                "patch_size {} is below the discriminator minimum {}",
                self.patch_size,
                self.discriminator.min_input_size()
            ));
        }
        self.loss_weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    /// Whether the discriminator takes part in training at all.
    pub fn adversarial(&self) -> bool {
        self.loss_weights.lambda_a > 0.0
    }

    fn generator_seed(&self) -> u64 {
        self.seed ^ 0x6E6E_0001
    }

    fn discriminator_seed(&self) -> u64 {
        self.seed ^ 0x6E6E_0002
    }

    fn noise_seed(&self) -> u64 {
        self.seed ^ 0x6E6E_0003
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First/second moment estimates per parameter and the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
    pub t: u64,
}

#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f32> {
    pub cfg: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, state: AdamState { m: IndexMap::new(), v: IndexMap::new(), t: 0 } }
    }

    /// One bias-corrected Adam update of every trainable tensor in `params`.
    pub fn step(&mut self, params: &mut ParameterStore<T>, grads: &IndexMap<String, Tensor<T>>) -> Result<()> {
        let names: Vec<String> = params.trainable().map(|(n, _)| n.to_string()).collect();
        for name in &names {
            let g = grads.get(name).ok_or_else(|| Error::MissingGrad(name.clone()))?;
            let p = params.get(name).expect("listed above");
            if g.shape() != p.shape() {
                return Err(Error::shape("adam_step", format!("grad of `{name}` is {:?}, parameter {:?}", g.shape(), p.shape())));
            }
        }
        self.state.t += 1;
        let t = self.state.t as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = T::lit(1.0 - b1.powi(t));
        let bc2 = T::lit(1.0 - b2.powi(t));
        let (b1, b2) = (T::lit(b1), T::lit(b2));
        let (lr, eps) = (T::lit(self.cfg.lr), T::lit(self.cfg.eps));
        let one = T::one();
        for name in names {
            let g = &grads[&name];
            let p = params.get_mut(&name).expect("listed above");
            let m = self.state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let v = self.state.v.entry(name).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Collects gradients of every bound parameter after a backward pass.
pub fn collect_grads<T: Scalar>(g: &mut Graph<T>, bound: &Bound) -> IndexMap<String, Tensor<T>> {
    bound
        .iter()
        .filter_map(|(name, &v)| g.take_grad(v).map(|t| (name.clone(), t)))
        .collect()
}

/// Clean targets (N, 3, H, W) and packed degraded inputs (N, 4, H/2, W/2).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub real: Tensor<f32>,
    pub input: Tensor<f32>,
}

impl Batch {
    pub fn from_pairs(pairs: &[(ColorImage, cfa::PackedInput)]) -> Result<Self> {
        let real: Vec<_> = pairs.iter().map(|(c, _)| c.tensor()).collect();
        let input: Vec<_> = pairs.iter().map(|(_, p)| p.tensor()).collect();
        Ok(Self { real: Tensor::stack(&real)?, input: Tensor::stack(&input)? })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeneratorLosses {
    pub total: f32,
    pub mse: f32,
    pub perceptual: f32,
    pub adversarial: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub d_loss: f32,
    pub g: GeneratorLosses,
}

impl StepLog {
    pub fn is_finite(&self) -> bool {
        [self.d_loss, self.g.total, self.g.mse, self.g.perceptual, self.g.adversarial]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.d_loss, self.g.total, self.g.mse, self.g.perceptual, self.g.adversarial
        )
    }
}

fn finite(what: &str, step: u64, v: f32) -> Result<f32> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} at step {step} ({v})")))
    }
}

fn tag_step(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {step}")),
        other => other,
    }
}

/// Networks, optimizers and RNG state of one training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    fx: FeatureExtractor<f32>,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    rng: ChaCha8Rng,
    samples_drawn: u64,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let generator = Generator::new(cfg.generator.clone(), cfg.generator_seed())?;
        let discriminator = Discriminator::new(cfg.discriminator.clone(), cfg.discriminator_seed())?;
        let fx = FeatureExtractor::new(cfg.feature_extractor.clone())?;
        Ok(Self {
            opt_g: Adam::new(cfg.adam()),
            opt_d: Adam::new(cfg.adam()),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            generator,
            discriminator,
            fx,
            samples_drawn: 0,
            step: 0,
            cfg,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn feature_extractor(&self) -> &FeatureExtractor<f32> {
        &self.fx
    }

    /// Draws a batch: random image, random crop, optional dihedral transform,
    /// per-example sigma, then mosaic + noise + packing.
    pub fn sample_batch(&mut self, dataset: &[ColorImage]) -> Result<Batch> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset("no training images".into()));
        }
        let ps = self.cfg.patch_size;
        let [lo, hi] = self.cfg.sigma_range;
        let mut pairs = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let img = &dataset[self.rng.random_range(0..dataset.len())];
            let (h, w) = (img.height(), img.width());
            if h < ps || w < ps {
                return Err(Error::InvalidArgument(format!("training image {h}x{w} smaller than patch size {ps}")));
            }
            let y0 = self.rng.random_range(0..=h - ps);
            let x0 = self.rng.random_range(0..=w - ps);
            let mut patch = if (h, w) == (ps, ps) {
                img.clone()
            } else {
                ColorImage::from_fn(ps, ps, |c, y, x| img.get(c, y0 + y, x0 + x))
            };
            if self.cfg.augment {
                patch = D4::ALL[self.rng.random_range(0..8)].apply(&patch);
            }
            let sigma = if hi > lo { self.rng.random_range(lo..=hi) } else { lo };
            let m = cfa::mosaic(&patch, self.cfg.pattern)?;
            let mut noise_rng = cfa::degradation_rng(self.cfg.noise_seed(), self.samples_drawn);
            self.samples_drawn += 1;
            let m = cfa::add_gaussian_noise_with(&m, sigma, self.cfg.clip, &mut noise_rng);
            let packed = cfa::pack_raw(&m, self.cfg.pattern)?;
            pairs.push((patch, packed));
        }
        Batch::from_pairs(&pairs)
    }

    /// One Adam step on the discriminator; the generator output is detached.
    pub fn train_step_discriminator(&mut self, batch: &Batch) -> Result<f32> {
        let step = self.step;
        let fake = {
            let mut g = Graph::new();
            let b = self.generator.params.bind(&mut g, false);
            let x = g.input(batch.input.clone());
            let y = self
                .generator
                .forward(&mut g, &b, x, Mode::Train, &mut self.rng)
                .map_err(|e| tag_step(step, e))?;
            g.value(y).clone()
        };

        let mut g = Graph::new();
        let bound = self.discriminator.params.bind(&mut g, true);
        let real = g.input(batch.real.clone());
        let fake = g.input(fake);
        let run = |g: &mut Graph<f32>, x| self.discriminator.forward(g, &bound, x, Mode::Train);
        let out_real = run(&mut g, real).map_err(|e| tag_step(step, e))?;
        let out_fake = run(&mut g, fake).map_err(|e| tag_step(step, e))?;
        let loss = losses::discriminator_loss(&mut g, out_real.scores, out_fake.scores).map_err(|e| tag_step(step, e))?;
        let value = finite("discriminator loss", step, g.value(loss).item()?)?;
        g.backward(loss)?;
        let grads = collect_grads(&mut g, &bound);
        self.opt_d.step(&mut self.discriminator.params, &grads)?;
        self.discriminator.commit_batch_stats(&out_real.batch_stats)?;
        self.discriminator.commit_batch_stats(&out_fake.batch_stats)?;
        Ok(value)
    }

    /// One Adam step on the generator against the composite loss.
    /// The discriminator is evaluated in train mode but left untouched.
    pub fn train_step_generator(&mut self, batch: &Batch) -> Result<GeneratorLosses> {
        let step = self.step;
        let weights = self.cfg.loss_weights;
        let mut g = Graph::new();
        let bound = self.generator.params.bind(&mut g, true);
        let x = g.input(batch.input.clone());
        let target = g.input(batch.real.clone());
        let out = self
            .generator
            .forward(&mut g, &bound, x, Mode::Train, &mut self.rng)
            .map_err(|e| tag_step(step, e))?;
        let scores = if weights.lambda_a > 0.0 {
            let bd = self.discriminator.params.bind(&mut g, false);
            let d = self.discriminator.forward(&mut g, &bd, out, Mode::Train).map_err(|e| tag_step(step, e))?;
            Some(d.scores)
        } else {
            None
        };
        let terms = losses::total_loss(&mut g, out, target, scores, weights, &self.fx).map_err(|e| tag_step(step, e))?;
        let read = |v: Option<_>| -> Result<f32> { v.map_or(Ok(0.0), |v| g.value(v).item()) };
        let losses = GeneratorLosses {
            total: finite("generator loss", step, g.value(terms.total).item()?)?,
            mse: read(Some(terms.mse))?,
            perceptual: read(terms.perceptual)?,
            adversarial: read(terms.adversarial)?,
        };
        g.backward(terms.total)?;
        let grads = collect_grads(&mut g, &bound);
        self.opt_g.step(&mut self.generator.params, &grads)?;
        Ok(losses)
    }

    /// One iteration: sample a batch, discriminator step(s), generator step.
    /// The discriminator is skipped entirely when the adversarial weight is 0.
    pub fn train_iteration(&mut self, dataset: &[ColorImage]) -> Result<StepLog> {
        let batch = self.sample_batch(dataset)?;
        let mut d_loss = 0.0;
        if self.cfg.adversarial() {
            for _ in 0..self.cfg.d_steps_per_g {
                d_loss = self.train_step_discriminator(&batch)?;
            }
        }
        let g = self.train_step_generator(&batch)?;
        let log = StepLog { step: self.step as usize, d_loss, g };
        self.step += 1;
        Ok(log)
    }

    pub fn metadata(&self) -> CheckpointMetadata {
        CheckpointMetadata::new(
            self.cfg.generator.clone(),
            Some(self.cfg.discriminator.clone()),
            self.cfg.pattern,
            self.cfg.feature_extractor.clone(),
            self.step,
        )
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save_models(path, &self.generator, Some(&self.discriminator), &self.metadata())
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint_{step:08}.bjdd"))
}

pub const LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub logs: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
    pub log_path: PathBuf,
}

fn existing_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_ckpt = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("checkpoint_") && n.ends_with(".bjdd"));
        if is_ckpt {
            found.push(path);
        }
    }
    found.sort();
    Ok(found)
}

/// Runs `cfg.steps` iterations, writing `train_log.csv` and checkpoints to `out_dir`.
///
/// A checkpoint is written before the first step, every `checkpoint_every`
/// steps, and after the last step. Existing checkpoints in `out_dir` are only
/// replaced when `force` is set.
pub fn train_loop(dataset: &[ColorImage], cfg: &TrainConfig, out_dir: &Path, force: bool) -> Result<TrainSummary> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("no training images".into()));
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    if let Some(first) = existing_checkpoints(out_dir)?.into_iter().next() {
        if !force {
            return Err(Error::WouldOverwrite(first));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut checkpoints = Vec::new();
    let mut save = |trainer: &Trainer| -> Result<()> {
        let path = checkpoint_path(out_dir, trainer.step_count());
        trainer.save_checkpoint(&path)?;
        checkpoints.push(path);
        Ok(())
    };
    save(&trainer)?;

    let mut log = String::from(LOG_HEADER);
    log.push('\n');
    let log_path = out_dir.join(LOG_FILE);
    let mut logs = Vec::with_capacity(cfg.steps);
    let result = (|| -> Result<()> {
        for _ in 0..cfg.steps {
            let entry = trainer.train_iteration(dataset)?;
            let _ = writeln!(log, "{}", entry.csv_row());
            logs.push(entry);
            let done = trainer.step_count();
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every as u64 == 0 && done < cfg.steps as u64 {
                save(&trainer)?;
            }
        }
        if cfg.steps > 0 {
            save(&trainer)?;
        }
        Ok(())
    })();
    fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
    result?;
    Ok(TrainSummary { logs, checkpoints, log_path })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn adam_cfg() -> AdamConfig {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    fn store(values: &[f64]) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        for (i, &v) in values.iter().enumerate() {
            s.insert(format!("p{i}"), Tensor::scalar(v), true).unwrap();
        }
        s
    }

    fn grads(values: &[f64]) -> IndexMap<String, Tensor<f64>> {
        values.iter().enumerate().map(|(i, &v)| (format!("p{i}"), Tensor::scalar(v))).collect()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(&[1.5, -2.0]);
        let before = s.clone();
        let mut opt = Adam::new(adam_cfg());
        opt.step(&mut s, &grads(&[0.0, 0.0])).unwrap();
        assert_eq!(s, before);
        assert_eq!(opt.state.t, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut s = store(&[0.0]);
        let mut opt = Adam::new(adam_cfg());
        opt.step(&mut s, &grads(&[0.5])).unwrap();
        let got = s.get("p0").unwrap().item().unwrap();
        // m̂ = 0.5, v̂ = 0.25 after bias correction.
        let expected = -1e-4 * 0.5 / (0.5 + 1e-8);
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn equal_grads_give_equal_updates() {
        let mut s = store(&[0.3, 0.3]);
        let mut opt = Adam::new(adam_cfg());
        for _ in 0..3 {
            opt.step(&mut s, &grads(&[0.7, 0.7])).unwrap();
        }
        assert_eq!(s.get("p0"), s.get("p1"));
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut s = store(&[0.0, 0.0]);
        let mut opt = Adam::new(adam_cfg());
        let g: IndexMap<_, _> = grads(&[1.0]);
        assert!(matches!(opt.step(&mut s, &g), Err(Error::MissingGrad(n)) if n == "p1"));
        assert_eq!(opt.state.t, 0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { beta2: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { patch_size: 99, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { sigma_range: [5.0, 1.0], ..Default::default() }.validate().is_err());
    }
}
