//! Bayer colour-filter-array degradation.
//!
//! A clean [`ColorImage`] is sampled through a 2×2 [`BayerPattern`] into a
//! single-plane [`BayerMosaic`], optionally corrupted with Gaussian noise,
//! and rearranged into the half-resolution 4-channel [`PackedInput`] the
//! generator consumes. Packed channel order is (R, first G, second G, B),
//! with the two greens taken in raster order inside the 2×2 cell; for RGGB
//! that is (R, G at (0,1), G at (1,0), B).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    R,
    G,
    B,
}

impl Channel {
    pub fn plane(self) -> usize {
        match self {
            Channel::R => 0,
            Channel::G => 1,
            Channel::B => 2,
        }
    }
}

/// 2×2 Bayer arrangement, listed in raster order (0,0), (0,1), (1,0), (1,1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BayerPattern {
    #[default]
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

impl BayerPattern {
    pub fn cells(self) -> [Channel; 4] {
        use Channel::*;
        match self {
            BayerPattern::Rggb => [R, G, G, B],
            BayerPattern::Bggr => [B, G, G, R],
            BayerPattern::Grbg => [G, R, B, G],
            BayerPattern::Gbrg => [G, B, R, G],
        }
    }

    /// Colour sampled at pixel (y, x).
    pub fn channel_at(self, y: usize, x: usize) -> Channel {
        self.cells()[(y % 2) * 2 + x % 2]
    }

    /// Cell offsets (dy, dx) in packed channel order (R, G1, G2, B).
    pub fn packing_offsets(self) -> [(usize, usize); 4] {
        let cells = self.cells();
        let pos = |i: usize| (i / 2, i % 2);
        let find = |c: Channel, skip: usize| {
            cells
                .iter()
                .enumerate()
                .filter(|(_, &cc)| cc == c)
                .nth(skip)
                .map(|(i, _)| pos(i))
                .expect("every Bayer pattern has one R, one B and two G")
        };
        [find(Channel::R, 0), find(Channel::G, 0), find(Channel::G, 1), find(Channel::B, 0)]
    }

    /// Human-readable packed channel order, recorded in checkpoint metadata.
    pub fn packing_order(self) -> [String; 4] {
        let names = ["R", "G1", "G2", "B"];
        let offs = self.packing_offsets();
        std::array::from_fn(|i| format!("{}@({},{})", names[i], offs[i].0, offs[i].1))
    }
}

impl fmt::Display for BayerPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BayerPattern::Rggb => "rggb",
            BayerPattern::Bggr => "bggr",
            BayerPattern::Grbg => "grbg",
            BayerPattern::Gbrg => "gbrg",
        };
        f.write_str(s)
    }
}

impl FromStr for BayerPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rggb" => Ok(BayerPattern::Rggb),
            "bggr" => Ok(BayerPattern::Bggr),
            "grbg" => Ok(BayerPattern::Grbg),
            "gbrg" => Ok(BayerPattern::Gbrg),
            other => Err(Error::InvalidArgument(format!("unknown Bayer pattern `{other}`"))),
        }
    }
}

/// Noise settings for one degradation run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    /// Noise standard deviation on the 0–255 scale.
    pub sigma: f32,
    pub seed: u64,
    #[serde(default = "default_clip")]
    pub clip: bool,
}

fn default_clip() -> bool {
    true
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self { sigma: 0.0, seed: 0, clip: true }
    }
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Counter-based RNG stream for image `index` under `seed`.
pub fn degradation_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn check_even(op: &'static str, h: usize, w: usize) -> Result<()> {
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::shape(op, format!("dimensions {h}x{w} must be even and non-zero")));
    }
    Ok(())
}

macro_rules! image_newtype {
    ($name:ident, $channels:expr, $what:literal) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(Tensor<f32>);

        impl $name {
            pub fn from_tensor(t: Tensor<f32>) -> Result<Self> {
                let (c, _, _) = t.dims3()?;
                if c != $channels {
                    return Err(Error::shape(
                        $what,
                        format!("expected {} channels, got {c}", $channels),
                    ));
                }
                Ok(Self(t))
            }

            pub fn tensor(&self) -> &Tensor<f32> {
                &self.0
            }

            pub fn into_tensor(self) -> Tensor<f32> {
                self.0
            }

            pub fn height(&self) -> usize {
                self.0.shape()[1]
            }

            pub fn width(&self) -> usize {
                self.0.shape()[2]
            }

            pub fn plane(&self, c: usize) -> &[f32] {
                let n = self.height() * self.width();
                &self.0.data()[c * n..(c + 1) * n]
            }
        }
    };
}

image_newtype!(ColorImage, 3, "ColorImage");
image_newtype!(BayerMosaic, 1, "BayerMosaic");
image_newtype!(PackedInput, 4, "PackedInput");

impl ColorImage {
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let t = Tensor::from_fn([3, height, width], |i| {
            let c = i / (height * width);
            let r = i % (height * width);
            f(c, r / width, r % width)
        });
        Self(t)
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.0.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn clipped(&self) -> Self {
        Self(self.0.map(|v| v.clamp(0.0, 1.0)))
    }

    /// Removes `border` pixels from every side.
    pub fn crop(&self, border: usize) -> Result<Self> {
        let (h, w) = (self.height(), self.width());
        if 2 * border >= h || 2 * border >= w {
            return Err(Error::InvalidArgument(format!("crop {border} too large for {h}x{w}")));
        }
        Ok(Self::from_fn(h - 2 * border, w - 2 * border, |c, y, x| self.get(c, y + border, x + border)))
    }

    /// Every channel set to the mosaic value at that pixel.
    pub fn gray_from_mosaic(m: &BayerMosaic) -> Self {
        Self::from_fn(m.height(), m.width(), |_, y, x| m.get(y, x))
    }
}

impl BayerMosaic {
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.0.data()[y * self.width() + x]
    }
}

/// Samples one colour per pixel according to `pattern`.
pub fn mosaic(img: &ColorImage, pattern: BayerPattern) -> Result<BayerMosaic> {
    let (h, w) = (img.height(), img.width());
    check_even("mosaic", h, w)?;
    let data = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            img.get(pattern.channel_at(y, x).plane(), y, x)
        })
        .collect();
    Ok(BayerMosaic(Tensor::new([1, h, w], data)?))
}

/// Adds i.i.d. N(0, (sigma/255)²) noise drawn from `rng`.
pub fn add_gaussian_noise_with<R: Rng + ?Sized>(m: &BayerMosaic, sigma: f32, clip: bool, rng: &mut R) -> BayerMosaic {
    if sigma == 0.0 {
        return m.clone();
    }
    let std = sigma as f64 / 255.0;
    let t = m.0.map(|v| {
        let n: f64 = rng.sample(StandardNormal);
        let y = (v as f64 + std * n) as f32;
        if clip {
            y.clamp(0.0, 1.0)
        } else {
            y
        }
    });
    BayerMosaic(t)
}

/// Adds noise for the image with the given index under `spec.seed`.
pub fn add_gaussian_noise(m: &BayerMosaic, spec: &DegradationSpec, index: u64) -> Result<BayerMosaic> {
    spec.validate()?;
    let mut rng = degradation_rng(spec.seed, index);
    Ok(add_gaussian_noise_with(m, spec.sigma, spec.clip, &mut rng))
}

pub fn pack_raw(m: &BayerMosaic, pattern: BayerPattern) -> Result<PackedInput> {
    let (h, w) = (m.height(), m.width());
    check_even("pack_raw", h, w)?;
    let (ph, pw) = (h / 2, w / 2);
    let offs = pattern.packing_offsets();
    let data = (0..4 * ph * pw)
        .map(|i| {
            let ch = i / (ph * pw);
            let r = i % (ph * pw);
            let (dy, dx) = offs[ch];
            m.get(2 * (r / pw) + dy, 2 * (r % pw) + dx)
        })
        .collect();
    Ok(PackedInput(Tensor::new([4, ph, pw], data)?))
}

pub fn unpack(p: &PackedInput, pattern: BayerPattern) -> Result<BayerMosaic> {
    let (ph, pw) = (p.height(), p.width());
    let (h, w) = (2 * ph, 2 * pw);
    let offs = pattern.packing_offsets();
    let mut data = vec![0.0f32; h * w];
    for (ch, &(dy, dx)) in offs.iter().enumerate() {
        let plane = p.plane(ch);
        for y in 0..ph {
            for x in 0..pw {
                data[(2 * y + dy) * w + 2 * x + dx] = plane[y * pw + x];
            }
        }
    }
    Ok(BayerMosaic(Tensor::new([1, h, w], data)?))
}

/// Mosaic, noise and packing in one step, keyed by image index.
pub fn degrade(img: &ColorImage, pattern: BayerPattern, spec: &DegradationSpec, index: u64) -> Result<(BayerMosaic, PackedInput)> {
    let m = add_gaussian_noise(&mosaic(img, pattern)?, spec, index)?;
    let p = pack_raw(&m, pattern)?;
    Ok((m, p))
}

/// One element of the dihedral group of the square. Output pixel (y, x)
/// reads the input at (y, x) after the requested flips, with the two
/// coordinates swapped when `transpose` is set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct D4 {
    pub transpose: bool,
    pub flip_ud: bool,
    pub flip_lr: bool,
}

impl D4 {
    pub const ALL: [D4; 8] = {
        let mut all = [D4 { transpose: false, flip_ud: false, flip_lr: false }; 8];
        let mut i = 0;
        while i < 8 {
            all[i] = D4 { transpose: i & 4 != 0, flip_ud: i & 2 != 0, flip_lr: i & 1 != 0 };
            i += 1;
        }
        all
    };

    /// Applies the transform to a square image.
    pub fn apply(self, img: &ColorImage) -> ColorImage {
        let n = img.height();
        ColorImage::from_fn(n, n, |c, y, x| {
            let (y, x) = (if self.flip_ud { n - 1 - y } else { y }, if self.flip_lr { n - 1 - x } else { x });
            let (y, x) = if self.transpose { (x, y) } else { (y, x) };
            img.get(c, y, x)
        })
    }
}

/// The eight dihedral variants of a square patch (identity first).
pub fn augment8(img: &ColorImage) -> Result<Vec<ColorImage>> {
    if img.height() != img.width() {
        return Err(Error::shape(
            "augment8",
            format!("patch must be square, got {}x{}", img.height(), img.width()),
        ));
    }
    Ok(D4::ALL.iter().map(|t| t.apply(img)).collect())
}
