//! Raw compute kernels shared by the graph ops.
//!
//! Convolution lowers each batch item to an im2col matrix and runs a single
//! GEMM against the flattened kernel. Columns are rebuilt during backward
//! instead of being cached, which keeps memory flat for deep trunks.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Geometry of one 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

pub fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn new<T: Scalar>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (batch, in_ch, height, width) = input.dims4()?;
        let (out_ch, w_in, kh, kw) = weight.dims4()?;
        if kh != kw {
            return Err(Error::shape("conv2d", format!("non-square kernel {kh}x{kw}")));
        }
        if w_in != in_ch {
            return Err(Error::shape(
                "conv2d",
                format!("input has {in_ch} channels, weight expects {w_in}"),
            ));
        }
        if bias.shape() != [out_ch] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{out_ch}]", bias.shape()),
            ));
        }
        let too_small = || {
            Error::shape("conv2d", format!("{height}x{width} input smaller than {kh}x{kh} kernel"))
        };
        let out_height = conv_output_size(height, kh, stride, padding).ok_or_else(too_small)?;
        let out_width = conv_output_size(width, kh, stride, padding).ok_or_else(too_small)?;
        Ok(Self {
            batch,
            in_ch,
            out_ch,
            height,
            width,
            kernel: kh,
            stride,
            padding,
            out_height,
            out_width,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_height * self.out_width
    }

    fn in_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.out_height, self.out_width]
    }

    /// Input coordinate sampled by output index `o` and kernel tap `t`, if inside.
    #[inline]
    fn source(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    /// Output indices `lo..hi` whose tap `t` lands inside `0..limit`.
    fn valid_range(&self, t: usize, limit: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if p > t { (p - t).div_ceil(s) } else { 0 };
        let hi = if limit + p > t { ((limit - 1 + p - t) / s + 1).min(out) } else { 0 };
        (lo.min(hi), hi)
    }

    fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        let k = self.kernel;
        let (ow, s) = (self.out_width, self.stride);
        let opix = self.out_pixels();
        for c in 0..self.in_ch {
            let plane = &image[c * self.in_pixels()..(c + 1) * self.in_pixels()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * opix..(row + 1) * opix];
                    let (x_lo, x_hi) = self.valid_range(kx, self.width, ow);
                    for oy in 0..self.out_height {
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        let Some(iy) = self.source(oy, ky, self.height) else {
                            line.fill(T::zero());
                            continue;
                        };
                        line[..x_lo].fill(T::zero());
                        line[x_hi..].fill(T::zero());
                        if x_lo < x_hi {
                            let src = &plane[iy * self.width..(iy + 1) * self.width];
                            let ix0 = x_lo * s + kx - self.padding;
                            if s == 1 {
                                line[x_lo..x_hi].copy_from_slice(&src[ix0..ix0 + (x_hi - x_lo)]);
                            } else {
                                for (v, &x) in line[x_lo..x_hi].iter_mut().zip(src[ix0..].iter().step_by(s)) {
                                    *v = x;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        let k = self.kernel;
        let (ow, s) = (self.out_width, self.stride);
        let opix = self.out_pixels();
        for c in 0..self.in_ch {
            let plane = &mut image[c * self.in_pixels()..(c + 1) * self.in_pixels()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * opix..(row + 1) * opix];
                    let (x_lo, x_hi) = self.valid_range(kx, self.width, ow);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let ix0 = x_lo * s + kx - self.padding;
                    for oy in 0..self.out_height {
                        let Some(iy) = self.source(oy, ky, self.height) else {
                            continue;
                        };
                        let line = &src[oy * ow + x_lo..oy * ow + x_hi];
                        let dst = &mut plane[iy * self.width + ix0..(iy + 1) * self.width];
                        if s == 1 {
                            for (d, &v) in dst[..line.len()].iter_mut().zip(line) {
                                *d += v;
                            }
                        } else {
                            for (d, &v) in dst.iter_mut().step_by(s).zip(line) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    geo: &ConvGeometry,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Tensor<T> {
    let (plen, opix) = (geo.patch_len(), geo.out_pixels());
    let in_stride = geo.in_ch * geo.in_pixels();
    let out_stride = geo.out_ch * opix;
    let mut out = vec![T::zero(); geo.batch * out_stride];
    let mut cols = vec![T::zero(); plen * opix];
    for n in 0..geo.batch {
        geo.im2col(&input.data()[n * in_stride..(n + 1) * in_stride], &mut cols);
        let dst = &mut out[n * out_stride..(n + 1) * out_stride];
        T::gemm(
            geo.out_ch,
            plen,
            opix,
            T::one(),
            weight.data(),
            plen as isize,
            1,
            &cols,
            opix as isize,
            1,
            T::zero(),
            dst,
            opix as isize,
            1,
        );
        for (o, plane) in dst.chunks_exact_mut(opix).enumerate() {
            let b = bias.data()[o];
            plane.iter_mut().for_each(|v| *v += b);
        }
    }
    Tensor::new(geo.output_shape(), out).expect("conv output shape")
}

/// Gradients of a convolution. Each entry is computed only when requested.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    geo: &ConvGeometry,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    want: [bool; 3],
) -> ConvGrads<T> {
    let [want_input, want_weight, want_bias] = want;
    let (plen, opix) = (geo.patch_len(), geo.out_pixels());
    let in_stride = geo.in_ch * geo.in_pixels();
    let out_stride = geo.out_ch * opix;

    let bias = want_bias.then(|| {
        let mut gb = vec![T::zero(); geo.out_ch];
        for n in 0..geo.batch {
            let g = &grad_out.data()[n * out_stride..(n + 1) * out_stride];
            for (o, plane) in g.chunks_exact(opix).enumerate() {
                gb[o] += plane.iter().copied().sum::<T>();
            }
        }
        Tensor::new([geo.out_ch], gb).expect("bias grad shape")
    });

    let mut gw = want_weight.then(|| vec![T::zero(); geo.out_ch * plen]);
    let mut gx = want_input.then(|| vec![T::zero(); geo.batch * in_stride]);
    if gw.is_some() || gx.is_some() {
        let mut cols = vec![T::zero(); plen * opix];
        for n in 0..geo.batch {
            let g = &grad_out.data()[n * out_stride..(n + 1) * out_stride];
            if let Some(gw) = gw.as_mut() {
                geo.im2col(&input.data()[n * in_stride..(n + 1) * in_stride], &mut cols);
                // dW += dY (O x P) * cols^T (P x CKK)
                T::gemm(
                    geo.out_ch,
                    opix,
                    plen,
                    T::one(),
                    g,
                    opix as isize,
                    1,
                    &cols,
                    1,
                    opix as isize,
                    T::one(),
                    gw,
                    plen as isize,
                    1,
                );
            }
            if let Some(gx) = gx.as_mut() {
                // dcols = W^T (CKK x O) * dY (O x P)
                T::gemm(
                    plen,
                    geo.out_ch,
                    opix,
                    T::one(),
                    weight.data(),
                    1,
                    plen as isize,
                    g,
                    opix as isize,
                    1,
                    T::zero(),
                    &mut cols,
                    opix as isize,
                    1,
                );
                geo.col2im(&cols, &mut gx[n * in_stride..(n + 1) * in_stride]);
            }
        }
    }

    ConvGrads {
        input: gx.map(|d| Tensor::new(input.shape().to_vec(), d).expect("input grad shape")),
        weight: gw.map(|d| Tensor::new(weight.shape().to_vec(), d).expect("weight grad shape")),
        bias,
    }
}

/// (N, C·r², H, W) → (N, C, rH, rW).
pub fn pixel_shuffle<T: Scalar>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, c_in, h, w) = input.dims4()?;
    if r == 0 || c_in % (r * r) != 0 {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("{c_in} channels not divisible by r²={}", r * r),
        ));
    }
    let c = c_in / (r * r);
    let (oh, ow) = (h * r, w * r);
    let src = input.data();
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let plane = ((b * c_in) + ch * r * r + dy * r + dx) * h * w;
                    for y in 0..h {
                        let row = ((b * c + ch) * oh + y * r + dy) * ow;
                        for x in 0..w {
                            out[row + x * r + dx] = src[plane + y * w + x];
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, c, oh, ow], out)
}

/// Inverse of [`pixel_shuffle`]: (N, C, rH, rW) → (N, C·r², H, W).
pub fn pixel_unshuffle<T: Scalar>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = input.dims4()?;
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(Error::shape(
            "pixel_unshuffle",
            format!("{oh}x{ow} not divisible by r={r}"),
        ));
    }
    let (h, w) = (oh / r, ow / r);
    let c_out = c * r * r;
    let src = input.data();
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let plane = ((b * c_out) + ch * r * r + dy * r + dx) * h * w;
                    for y in 0..h {
                        let row = ((b * c + ch) * oh + y * r + dy) * ow;
                        for x in 0..w {
                            out[plane + y * w + x] = src[row + x * r + dx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, c_out, h, w], out)
}
