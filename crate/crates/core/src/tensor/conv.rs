use super::ops::gemm_acc;
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidArgument("kernel and stride must be positive".into()));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Geometry of one 2-D convolution over a single instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (c_in, h, w) = match *input {
            [_, c, h, w] => (c, h, w),
            _ => return Err(Error::Shape(format!("conv input must be NCHW, got {input:?}"))),
        };
        let (c_out, k) = match *weight {
            [o, i, kh, kw] if i == c_in && kh == kw => (o, kh),
            _ => {
                return Err(Error::Shape(format!(
                    "conv weight {weight:?} incompatible with input {input:?}"
                )))
            }
        };
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kernel: k,
            stride,
            padding,
            ho: conv_output_size(h, k, stride, padding)?,
            wo: conv_output_size(w, k, stride, padding)?,
        })
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.out_plane()
    }
}

/// Unfolds one instance into `cols` of shape `[c_in·k·k, ho·wo]`.
pub fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let k = g.kernel;
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back, accumulating into `dx`.
pub fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let k = g.kernel;
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Bias-free 2-D convolution, `x: [B, Cin, H, W]`, `w: [Cout, Cin, k, k]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, padding)?;
    let b = x.shape()[0];
    let mut cols = vec![T::zero(); g.patch_len() * g.out_plane()];
    let mut out = vec![T::zero(); b * g.out_len()];
    for i in 0..b {
        im2col(&g, &x.data()[i * g.in_len()..(i + 1) * g.in_len()], &mut cols);
        gemm_acc(
            g.c_out,
            g.patch_len(),
            g.out_plane(),
            w.data(),
            &cols,
            &mut out[i * g.out_len()..(i + 1) * g.out_len()],
        );
    }
    Ok(Tensor::from_parts(vec![b, g.c_out, g.ho, g.wo], out))
}

fn pool_dims(shape: &[usize], k: usize) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = match *shape {
        [b, c, h, w] => (b, c, h, w),
        _ => return Err(Error::Shape(format!("pooling needs NCHW, got {shape:?}"))),
    };
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::Shape(format!("pool kernel {k} does not tile {h}x{w}")));
    }
    Ok((b * c, h, w, k))
}

/// Non-overlapping average pooling with window and stride `k`.
pub fn avg_pool2d<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (planes, h, w, k) = pool_dims(x.shape(), k)?;
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0f64;
                for dy in 0..k {
                    for dx in 0..k {
                        acc += src[(oy * k + dy) * w + ox * k + dx].as_f64();
                    }
                }
                out.push(T::from_f64(acc * inv));
            }
        }
    }
    let s = x.shape();
    Ok(Tensor::from_parts(vec![s[0], s[1], ho, wo], out))
}

/// Non-overlapping max pooling; also returns the flat input index of each
/// selected element (first maximum wins).
pub fn max_pool2d<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (planes, h, w, k) = pool_dims(x.shape(), k)?;
    let (ho, wo) = (h / k, w / k);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * k * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * k + dy) * w + ox * k + dx;
                        if x.data()[idx] > x.data()[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x.data()[best]);
                arg.push(best);
            }
        }
    }
    let s = x.shape();
    Ok((Tensor::from_parts(vec![s[0], s[1], ho, wo], out), arg))
}
