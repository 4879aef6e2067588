//! Generator and discriminator networks.
//!
//! Generator, on a packed (N, 4, H, W) input:
//!
//! ```text
//! head   conv3x3 4→w, ReLU                          ──┐
//! res×B  [conv3x3 w→w, ReLU, dropout, conv3x3 w→w] + x │ global skip
//! tail   conv3x3 w→w                                 + ┘
//! expand conv3x3 w→4w, pixel shuffle ×2
//! out    conv3x3 w→3                                 → (N, 3, 2H, 2W)
//! ```
//!
//! Discriminator: eight conv3x3 + batch norm + LeakyReLU units (no batch norm
//! on the first), widths doubling every two layers and strides alternating
//! 1, 2; then conv3x3 → 1 channel, sigmoid, and a spatial mean giving one
//! probability per sample.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormConfig, BatchStats, Graph, Mode, RunningStats, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub res_blocks: usize,
    pub trunk_width: usize,
    pub upscale: usize,
    pub kernel: usize,
    pub dropout_keep: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self { res_blocks: 16, trunk_width: 64, upscale: 2, kernel: 3, dropout_keep: 1.0 }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trunk_width == 0 {
            return Err(Error::InvalidArgument("trunk_width must be positive".into()));
        }
        if self.upscale != 2 {
            return Err(Error::InvalidArgument(format!("upscale is fixed at 2, got {}", self.upscale)));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel must be odd, got {}", self.kernel)));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "dropout_keep must lie in (0, 1], got {}",
                self.dropout_keep
            )));
        }
        Ok(())
    }

    /// Channels produced by the convolution feeding the pixel shuffle.
    pub fn expand_width(&self) -> usize {
        self.trunk_width * self.upscale * self.upscale
    }

    /// (name, in, out) for every convolution, in forward order.
    pub fn conv_layers(&self) -> Vec<(String, usize, usize)> {
        let w = self.trunk_width;
        let mut layers = vec![("head".to_string(), 4, w)];
        for i in 0..self.res_blocks {
            layers.push((format!("res.{i}.conv1"), w, w));
            layers.push((format!("res.{i}.conv2"), w, w));
        }
        layers.push(("tail".into(), w, w));
        layers.push(("expand".into(), w, self.expand_width()));
        layers.push(("out".into(), w, 3));
        layers
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorSpec {
    pub conv_layers: usize,
    pub base_width: usize,
    pub max_width: usize,
    pub lrelu_alpha: f64,
    pub strides: Vec<usize>,
    pub first_layer_bn: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            conv_layers: 8,
            base_width: 64,
            max_width: 512,
            lrelu_alpha: 0.2,
            strides: vec![1, 2, 1, 2, 1, 2, 1, 2],
            first_layer_bn: false,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl DiscriminatorSpec {
    /// Default layout with narrower feature maps.
    pub fn with_widths(base_width: usize, max_width: usize) -> Self {
        Self { base_width, max_width, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.len() != self.conv_layers {
            return Err(Error::InvalidArgument(format!(
                "{} strides given for {} conv layers",
                self.strides.len(),
                self.conv_layers
            )));
        }
        if self.strides.contains(&0) || self.base_width == 0 || self.max_width < self.base_width {
            return Err(Error::InvalidArgument("invalid discriminator widths or strides".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) || self.bn_eps <= 0.0 {
            return Err(Error::InvalidArgument("batch norm needs eps > 0 and momentum in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn width(&self, layer: usize) -> usize {
        let doublings = (layer / 2).min(usize::BITS as usize - 1);
        self.base_width.saturating_mul(1 << doublings).min(self.max_width)
    }

    pub fn has_bn(&self, layer: usize) -> bool {
        layer > 0 || self.first_layer_bn
    }

    /// Smallest input side that survives every strided layer.
    pub fn min_input_size(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn bn_config(&self) -> BatchNormConfig {
        BatchNormConfig { eps: self.bn_eps, momentum: self.bn_momentum }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoreEntry<T> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Named tensors of one network in construction order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T: Scalar = f32> {
    entries: IndexMap<String, StoreEntry<T>>,
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self { entries: IndexMap::new() }
    }
}

/// Graph handles for every trainable tensor of a store.
pub type Bound = IndexMap<String, Var>;

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, StoreEntry { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    pub fn is_trainable(&self, name: &str) -> Option<bool> {
        self.entries.get(name).map(|e| e.trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &StoreEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().filter(|(_, e)| e.trainable).map(|(k, e)| (k, &e.tensor))
    }

    /// Element count of trainable tensors.
    pub fn count_parameters(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    /// Puts every trainable tensor on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Bound {
        self.trainable()
            .map(|(name, t)| (name.to_string(), g.leaf(t.clone(), requires_grad)))
            .collect()
    }

    /// Replaces a tensor's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "ParameterStore::set",
                format!("`{name}` is {:?}, got {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| (k.clone(), StoreEntry { tensor: e.tensor.cast(), trainable: e.trainable }))
                .collect(),
        }
    }
}

fn he_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<T> {
    let fan_in = shape[1] * shape[2] * shape[3];
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        T::lit(std * z)
    })
}

fn add_conv<T: Scalar>(
    store: &mut ParameterStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
) -> Result<()> {
    store.insert(format!("{name}.weight"), he_normal(rng, [cout, cin, k, k]), true)?;
    store.insert(format!("{name}.bias"), Tensor::zeros([cout]), true)
}

fn conv<T: Scalar>(g: &mut Graph<T>, b: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = lookup(b, &format!("{name}.weight"))?;
    let bias = lookup(b, &format!("{name}.bias"))?;
    g.conv2d(x, w, bias, stride, pad)
}

fn lookup(b: &Bound, name: &str) -> Result<Var> {
    b.get(name)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("parameter `{name}` not bound")))
}

/// Multiplier on the He-normal weights of the last conv in each residual
/// block. Without it the activation variance roughly doubles per block and a
/// 16-block trunk starts out with outputs in the thousands.
pub const RES_BRANCH_INIT_SCALE: f64 = 0.1;

pub fn build_generator<T: Scalar>(spec: &GeneratorSpec, init_seed: u64) -> Result<ParameterStore<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut store = ParameterStore::new();
    for (name, cin, cout) in spec.conv_layers() {
        add_conv(&mut store, &mut rng, &name, cin, cout, spec.kernel)?;
        if name.starts_with("res.") && name.ends_with(".conv2") {
            let w = store.get_mut(&format!("{name}.weight")).expect("just inserted");
            let scale = T::lit(RES_BRANCH_INIT_SCALE);
            w.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    Ok(store)
}

pub fn build_discriminator<T: Scalar>(spec: &DiscriminatorSpec, init_seed: u64) -> Result<ParameterStore<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut store = ParameterStore::new();
    let mut cin = 3;
    for i in 0..spec.conv_layers {
        let cout = spec.width(i);
        add_conv(&mut store, &mut rng, &format!("conv.{i}"), cin, cout, 3)?;
        if spec.has_bn(i) {
            store.insert(format!("bn.{i}.gamma"), Tensor::ones([cout]), true)?;
            store.insert(format!("bn.{i}.beta"), Tensor::zeros([cout]), true)?;
            store.insert(format!("bn.{i}.running_mean"), Tensor::zeros([cout]), false)?;
            store.insert(format!("bn.{i}.running_var"), Tensor::ones([cout]), false)?;
        }
        cin = cout;
    }
    add_conv(&mut store, &mut rng, "score", cin, 1, 3)?;
    Ok(store)
}

pub fn count_parameters<T: Scalar>(store: &ParameterStore<T>) -> usize {
    store.count_parameters()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T: Scalar = f32> {
    pub spec: GeneratorSpec,
    pub params: ParameterStore<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(spec: GeneratorSpec, init_seed: u64) -> Result<Self> {
        let params = build_generator(&spec, init_seed)?;
        Ok(Self { spec, params })
    }

    /// Trunk output with the global skip applied, i.e. the input of the
    /// expansion convolution before the pixel shuffle.
    pub fn features<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        input: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let (_, c, _, _) = g.value(input).dims4()?;
        if c != 4 {
            return Err(Error::shape("generator_forward", format!("expected 4 input channels, got {c}")));
        }
        let pad = self.spec.kernel / 2;
        let head = conv(g, b, "head", input, 1, pad)?;
        let head = g.relu(head)?;
        let mut x = head;
        for i in 0..self.spec.res_blocks {
            let t = conv(g, b, &format!("res.{i}.conv1"), x, 1, pad)?;
            let t = g.relu(t)?;
            let t = g.dropout(t, self.spec.dropout_keep, mode, rng)?;
            let t = conv(g, b, &format!("res.{i}.conv2"), t, 1, pad)?;
            x = g.add(x, t)?;
        }
        let tail = conv(g, b, "tail", x, 1, pad)?;
        g.add(tail, head)
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        input: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let pad = self.spec.kernel / 2;
        let feats = self.features(g, b, input, mode, rng)?;
        let up = conv(g, b, "expand", feats, 1, pad)?;
        let up = g.pixel_shuffle(up, self.spec.upscale)?;
        conv(g, b, "out", up, 1, pad)
    }

    /// Eval-mode forward without gradient tracking.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.input(input.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = self.forward(&mut g, &b, x, Mode::Eval, &mut rng)?;
        Ok(g.value(y).clone())
    }
}

/// Scores plus the batch statistics each batch-norm layer saw (train mode).
pub struct DiscriminatorOutput<T> {
    pub scores: Var,
    pub batch_stats: Vec<(usize, BatchStats<T>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T: Scalar = f32> {
    pub spec: DiscriminatorSpec,
    pub params: ParameterStore<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(spec: DiscriminatorSpec, init_seed: u64) -> Result<Self> {
        let params = build_discriminator(&spec, init_seed)?;
        Ok(Self { spec, params })
    }

    fn running_stats(&self, layer: usize) -> Result<RunningStats<T>> {
        Ok(RunningStats {
            mean: self.params.require(&format!("bn.{layer}.running_mean"))?.data().to_vec(),
            var: self.params.require(&format!("bn.{layer}.running_var"))?.data().to_vec(),
        })
    }

    /// Per-sample probability that each image is real, shape (N).
    ///
    /// Train mode normalizes with batch statistics and does not touch the
    /// running averages; pass the returned stats to
    /// [`Discriminator::commit_batch_stats`] to fold them in.
    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, img: Var, mode: Mode) -> Result<DiscriminatorOutput<T>> {
        let (_, c, h, w) = g.value(img).dims4()?;
        if c != 3 {
            return Err(Error::shape("discriminator_forward", format!("expected 3 channels, got {c}")));
        }
        let min = self.spec.min_input_size();
        if h < min || w < min {
            return Err(Error::SpatialTooSmall { height: h, width: w, min });
        }
        let bn_cfg = self.spec.bn_config();
        let mut batch_stats = Vec::new();
        let mut x = img;
        for (i, &stride) in self.spec.strides.iter().enumerate() {
            x = conv(g, b, &format!("conv.{i}"), x, stride, 1)?;
            if self.spec.has_bn(i) {
                let gamma = lookup(b, &format!("bn.{i}.gamma"))?;
                let beta = lookup(b, &format!("bn.{i}.beta"))?;
                let running = match mode {
                    Mode::Eval => Some(self.running_stats(i)?),
                    Mode::Train => None,
                };
                let (y, stats) = g.batch_norm(x, gamma, beta, running.as_ref(), mode, bn_cfg)?;
                if let Some(s) = stats {
                    batch_stats.push((i, s));
                }
                x = y;
            }
            x = g.leaky_relu(x, self.spec.lrelu_alpha)?;
        }
        let logits = conv(g, b, "score", x, 1, 1)?;
        let probs = g.sigmoid(logits)?;
        let scores = g.mean_per_sample(probs)?;
        Ok(DiscriminatorOutput { scores, batch_stats })
    }

    pub fn commit_batch_stats(&mut self, stats: &[(usize, BatchStats<T>)]) -> Result<()> {
        for (layer, s) in stats {
            let mut rs = self.running_stats(*layer)?;
            rs.update(s, self.spec.bn_momentum);
            let c = rs.mean.len();
            self.params.set(&format!("bn.{layer}.running_mean"), Tensor::new([c], rs.mean)?)?;
            self.params.set(&format!("bn.{layer}.running_var"), Tensor::new([c], rs.var)?)?;
        }
        Ok(())
    }

    /// Eval-mode scores without gradient tracking.
    pub fn score(&self, img: &Tensor<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.input(img.clone());
        let out = self.forward(&mut g, &b, x, Mode::Eval)?;
        Ok(g.value(out.scores).data().to_vec())
    }
}
