//! Convolution and pooling kernels on raw NCHW buffers.
//!
//! `conv2d` lowers each sample to an im2col matrix and runs one GEMM per
//! sample. Samples are processed in order and weight gradients accumulate
//! sample by sample, so results do not depend on scheduling.

use crate::error::{dim_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Resolved extents of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[n, c, h, w], &[o, i, kh, kw]) = (input, weight) else {
            return Err(dim_err("conv2d", input, weight, "expected NCHW input and OIKhKw weight"));
        };
        if c != i {
            return Err(dim_err(
                "conv2d",
                input,
                weight,
                format!("input has {c} channels, weight expects {i}"),
            ));
        }
        if stride == 0 {
            return Err(dim_err("conv2d", input, weight, "stride must be positive"));
        }
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if ph < kh || pw < kw {
            return Err(dim_err(
                "conv2d",
                input,
                weight,
                format!("padded extent {ph}x{pw} smaller than kernel {kh}x{kw}"),
            ));
        }
        Ok(Self {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Columns of the im2col matrix.
    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_sample(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn out_sample(&self) -> usize {
        self.out_channels * self.out_plane()
    }

    /// 1×1 stride-1 unpadded convolutions use the input directly as the patch matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Range of output columns whose input column `ox*stride + kx - pad` is in bounds.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p, w) = (self.stride, self.padding, self.width);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        // largest ox with ox*s + kx - p <= w - 1
        let hi = if w + p > kx { ((w + p - kx - 1) / s + 1).min(self.out_w) } else { 0 };
        (lo.min(hi), hi)
    }
}

/// Unfolds one sample into a `patch_len × out_plane` matrix.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (kh, kw, s, p) = (g.kernel_h, g.kernel_w, g.stride, g.padding);
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.in_channels {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.out_h {
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    for ox in lo..hi {
                        out_row[ox] = src[ox * s + kx - p];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Folds a patch matrix back onto one sample, accumulating into `dx`.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (kh, kw, s, p) = (g.kernel_h, g.kernel_w, g.stride, g.padding);
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.in_channels {
        let dxc = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let src_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in lo..hi {
                        dst[ox * s + kx - p] += src_row[ox];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation forward pass.
///
/// Returns the output and, when `keep_cols` is set and the layer is not
/// pointwise, the per-sample patch matrices for reuse in the weight gradient.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    keep_cols: bool,
) -> Result<(Tensor<T>, ConvGeometry, Option<Vec<T>>)> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, padding)?;
    if let Some(b) = b {
        if b.shape() != [g.out_channels] {
            return Err(dim_err("conv2d", w.shape(), b.shape(), "bias must have one value per output channel"));
        }
    }
    let (k, plane) = (g.patch_len(), g.out_plane());
    let mut out = vec![T::zero(); g.batch * g.out_sample()];
    let mut saved = if keep_cols && !g.is_pointwise() {
        Some(vec![T::zero(); g.batch * k * plane])
    } else {
        None
    };
    let mut scratch = if saved.is_none() && !g.is_pointwise() {
        vec![T::zero(); k * plane]
    } else {
        Vec::new()
    };
    for n in 0..g.batch {
        let xn = &x.data()[n * g.in_sample()..(n + 1) * g.in_sample()];
        let cols: &[T] = if g.is_pointwise() {
            xn
        } else {
            let buf = match saved.as_mut() {
                Some(all) => &mut all[n * k * plane..(n + 1) * k * plane],
                None => &mut scratch[..],
            };
            im2col(xn, &g, buf);
            buf
        };
        let yn = &mut out[n * g.out_sample()..(n + 1) * g.out_sample()];
        if let Some(b) = b {
            for (o, chunk) in yn.chunks_exact_mut(plane).enumerate() {
                chunk.fill(b.data()[o]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.out_channels,
            k,
            plane,
            T::one(),
            w.data(),
            (k as isize, 1),
            cols,
            (plane as isize, 1),
            beta,
            yn,
            (plane as isize, 1),
        );
    }
    Ok((Tensor::new(g.out_shape(), out)?, g, saved))
}

/// Gradients of a convolution given the upstream gradient `dy`.
///
/// `cols` are the patch matrices kept by the forward pass (absent for
/// pointwise layers or when they were not kept, in which case they are rebuilt).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    cols: Option<&[T]>,
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (k, plane) = (g.patch_len(), g.out_plane());
    let mut scratch = Vec::new();
    let mut dcols = if dx.is_some() && !g.is_pointwise() {
        vec![T::zero(); k * plane]
    } else {
        Vec::new()
    };
    for n in 0..g.batch {
        let dyn_ = &dy[n * g.out_sample()..(n + 1) * g.out_sample()];
        if let Some(db) = db.as_deref_mut() {
            for (o, chunk) in dyn_.chunks_exact(plane).enumerate() {
                db[o] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let xn = &x[n * g.in_sample()..(n + 1) * g.in_sample()];
            let cols_n: &[T] = if g.is_pointwise() {
                xn
            } else if let Some(all) = cols {
                &all[n * k * plane..(n + 1) * k * plane]
            } else {
                scratch.resize(k * plane, T::zero());
                im2col(xn, g, &mut scratch);
                &scratch
            };
            // dW (O×K) += dY_n (O×P) · cols_nᵀ (P×K)
            T::gemm(
                g.out_channels,
                plane,
                k,
                T::one(),
                dyn_,
                (plane as isize, 1),
                cols_n,
                (1, plane as isize),
                T::one(),
                dw,
                (k as isize, 1),
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * g.in_sample()..(n + 1) * g.in_sample()];
            // dcols (K×P) = Wᵀ (K×O) · dY_n (O×P)
            if g.is_pointwise() {
                T::gemm(
                    k,
                    g.out_channels,
                    plane,
                    T::one(),
                    w,
                    (1, k as isize),
                    dyn_,
                    (plane as isize, 1),
                    T::one(),
                    dxn,
                    (plane as isize, 1),
                );
            } else {
                T::gemm(
                    k,
                    g.out_channels,
                    plane,
                    T::one(),
                    w,
                    (1, k as isize),
                    dyn_,
                    (plane as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (plane as isize, 1),
                );
                col2im(&dcols, g, dxn);
            }
        }
    }
}

/// Direct nested-loop cross-correlation, kept as the reference the GEMM path is tested against.
pub fn conv2d_reference<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, padding)?;
    let mut out = Tensor::zeros(g.out_shape());
    let (xd, wd) = (x.data(), w.data());
    let od = out.data_mut();
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = b.map_or(T::zero(), |b| b.data()[o]);
                    for c in 0..g.in_channels {
                        for ky in 0..g.kernel_h {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= g.height as isize {
                                continue;
                            }
                            for kx in 0..g.kernel_w {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= g.width as isize {
                                    continue;
                                }
                                let xi = ((n * g.in_channels + c) * g.height + iy as usize) * g.width + ix as usize;
                                let wi = ((o * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx;
                                acc += xd[xi] * wd[wi];
                            }
                        }
                    }
                    od[((n * g.out_channels + o) * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// 2×2 stride-2 max pooling. Returns the output and the flat input index of
/// each window's maximum (first in row-major order on ties).
pub fn max_pool2_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(dim_err("max_pool2d", x.shape(), &[2, 2], "spatial extents must be even"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}
