//! Patch unfolding for convolution as a batched matrix product.
//!
//! `[B, C, H, W]` unfolds to `[B, C*k*k + 1, OH*OW]`, the last row being ones
//! so the bias rides along as an extra weight column. Folding with accumulation
//! is the gradient.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    fn taps(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn rows(&self) -> usize {
        self.taps() + 1
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output columns `ox` whose tap `kx` lands inside the image, as a half-open range.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.pad_left.saturating_sub(kx).div_ceil(s);
        let hi = (self.width + self.pad_left)
            .saturating_sub(kx)
            .div_ceil(s)
            .min(self.out_w);
        (lo, hi.max(lo))
    }

    /// Source row for output row `oy` and tap `ky`, if inside the image.
    #[inline]
    fn source_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky)
            .checked_sub(self.pad_top)
            .filter(|&y| y < self.height)
    }

    fn unfold<T: Copy + Default>(&self, src: &[T], batch: usize, one: T) -> Vec<T> {
        let (k, l, s) = (self.kernel, self.cols(), self.stride);
        let plane = self.height * self.width;
        let mut out = vec![T::default(); batch * self.rows() * l];
        for b in 0..batch {
            let ones = (b * self.rows() + self.taps()) * l;
            out[ones..ones + l].fill(one);
            for c in 0..self.channels {
                let img = &src[(b * self.channels + c) * plane..][..plane];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (b * self.rows() + (c * k + ky) * k + kx) * l;
                        let (lo, hi) = self.valid_cols(kx);
                        for oy in 0..self.out_h {
                            let Some(y) = self.source_row(oy, ky) else { continue };
                            let dst = &mut out[row + oy * self.out_w..][lo..hi];
                            let x0 = y * self.width + lo * s + kx - self.pad_left;
                            if s == 1 {
                                dst.copy_from_slice(&img[x0..x0 + (hi - lo)]);
                            } else {
                                for (j, d) in dst.iter_mut().enumerate() {
                                    *d = img[x0 + j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn fold<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T], batch: usize) -> Vec<T> {
        let (k, l, s) = (self.kernel, self.cols(), self.stride);
        let plane = self.height * self.width;
        let mut out = vec![T::default(); batch * self.channels * plane];
        for b in 0..batch {
            for c in 0..self.channels {
                let img = &mut out[(b * self.channels + c) * plane..][..plane];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (b * self.rows() + (c * k + ky) * k + kx) * l;
                        let (lo, hi) = self.valid_cols(kx);
                        for oy in 0..self.out_h {
                            let Some(y) = self.source_row(oy, ky) else { continue };
                            let src = &cols[row + oy * self.out_w..][lo..hi];
                            let x0 = y * self.width + lo * s + kx - self.pad_left;
                            if s == 1 {
                                for (d, &v) in img[x0..x0 + (hi - lo)].iter_mut().zip(src) {
                                    *d += v;
                                }
                            } else {
                                for (j, &v) in src.iter().enumerate() {
                                    img[x0 + j * s] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn contiguous<'a, T: candle_core::WithDType>(storage: &'a CpuStorage, layout: &Layout) -> candle_core::Result<&'a [T]> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("im2col expects a contiguous tensor".into()))?;
    Ok(&storage.as_slice::<T>()?[start..end])
}

struct Unfold(Geometry);
struct Fold(Geometry);

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let batch = layout.dims()[0];
        let out = match storage {
            CpuStorage::F32(_) => CpuStorage::F32(g.unfold(contiguous::<f32>(storage, layout)?, batch, 1.0)),
            CpuStorage::F64(_) => CpuStorage::F64(g.unfold(contiguous::<f64>(storage, layout)?, batch, 1.0)),
            _ => return Err(candle_core::Error::Msg("im2col supports f32 and f64".into())),
        };
        Ok((out, Shape::from((batch, g.rows(), g.cols()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Fold(self.0))?))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let batch = layout.dims()[0];
        let out = match storage {
            CpuStorage::F32(_) => CpuStorage::F32(g.fold(contiguous::<f32>(storage, layout)?, batch)),
            CpuStorage::F64(_) => CpuStorage::F64(g.fold(contiguous::<f64>(storage, layout)?, batch)),
            _ => return Err(candle_core::Error::Msg("col2im supports f32 and f64".into())),
        };
        Ok((out, Shape::from((batch, g.channels, g.height, g.width))))
    }
}

/// Convolution of `x` `[B, C, H, W]` with `weight` `[O, C, k, k]` plus `bias` `[O]`.
pub(crate) fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, g: Geometry) -> candle_core::Result<Tensor> {
    let batch = x.dim(0)?;
    let out_ch = weight.dim(0)?;
    let cols = x.contiguous()?.apply_op1(Unfold(g))?;
    let w = Tensor::cat(&[&weight.reshape((out_ch, g.taps()))?, &bias.reshape((out_ch, 1))?], 1)?;
    let w = w
        .reshape((1, out_ch, g.rows()))?
        .broadcast_as((batch, out_ch, g.rows()))?
        .contiguous()?;
    w.matmul(&cols)?.reshape((batch, out_ch, g.out_h, g.out_w))
}
