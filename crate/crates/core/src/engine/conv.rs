//! Transposed 2-D convolution (the generator direction) and its adjoint.
//!
//! Layouts: input `B×Cin×H×W`, kernel `Cin×Cout×K×K`, output `B×Cout×H'×W'`
//! with `H' = (H−1)·stride − 2·padding + K`. Each sample is lowered to one
//! GEMM (`cols = Wᵀ·x`) followed by a scatter-add of `cols` into the output.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn infer(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::Shape(format!(
                "conv_transpose2d input must be B×C×H×W, got {input:?}"
            )));
        }
        if kernel.len() != 4 || kernel[2] != kernel[3] {
            return Err(Error::Shape(format!(
                "conv_transpose2d kernel must be Cin×Cout×K×K, got {kernel:?}"
            )));
        }
        if input[1] != kernel[0] {
            return Err(Error::Shape(format!(
                "conv_transpose2d channel mismatch: input has {} channels, kernel expects {} (input {input:?}, kernel {kernel:?})",
                input[1], kernel[0]
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv_transpose2d stride must be ≥ 1".into()));
        }
        let g = Self {
            batch: input[0],
            in_channels: input[1],
            out_channels: kernel[1],
            in_h: input[2],
            in_w: input[3],
            kernel: kernel[2],
            stride,
            padding,
        };
        let span_h = (g.in_h - 1) * stride + g.kernel;
        let span_w = (g.in_w - 1) * stride + g.kernel;
        if span_h <= 2 * padding || span_w <= 2 * padding {
            return Err(Error::Shape(format!(
                "padding {padding} leaves no output for input {input:?} and kernel {kernel:?}"
            )));
        }
        Ok(g)
    }

    pub fn out_h(&self) -> usize {
        (self.in_h - 1) * self.stride + self.kernel - 2 * self.padding
    }

    pub fn out_w(&self) -> usize {
        (self.in_w - 1) * self.stride + self.kernel - 2 * self.padding
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h(), self.out_w()]
    }

    fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }

    fn out_plane(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn col_rows(&self) -> usize {
        self.out_channels * self.kernel * self.kernel
    }

    /// Output coordinate hit by input coordinate `i` through kernel tap `k`.
    #[inline]
    fn target(&self, i: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (i * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    mode: ExecMode,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::infer(input.shape(), kernel.shape(), stride, padding)?;
    let mut out = Tensor::zeros(g.output_shape());
    let per_in = g.in_channels * g.in_plane();
    let per_out = g.out_channels * g.out_plane();
    let x = input.data();
    let w = kernel.data();
    exec::for_each_chunk_mut(mode, out.data_mut(), per_out, |b, dst| {
        let mut cols = vec![T::zero(); g.col_rows() * g.in_plane()];
        T::gemm(
            g.col_rows(),
            g.in_channels,
            g.in_plane(),
            T::one(),
            w,
            1,
            g.col_rows() as isize,
            &x[b * per_in..(b + 1) * per_in],
            g.in_plane() as isize,
            1,
            T::zero(),
            &mut cols,
            g.in_plane() as isize,
            1,
        );
        scatter_cols(&g, &cols, dst);
    });
    Ok(out)
}

fn scatter_cols<T: Scalar>(g: &ConvGeometry, cols: &[T], dst: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for co in 0..g.out_channels {
        let plane = &mut dst[co * oh * ow..(co + 1) * oh * ow];
        for kh in 0..k {
            for kw in 0..k {
                let row = &cols[((co * k + kh) * k + kw) * g.in_plane()..][..g.in_plane()];
                for ih in 0..g.in_h {
                    let Some(y) = g.target(ih, kh, oh) else { continue };
                    for iw in 0..g.in_w {
                        if let Some(x) = g.target(iw, kw, ow) {
                            plane[y * ow + x] += row[ih * g.in_w + iw];
                        }
                    }
                }
            }
        }
    }
}

fn gather_cols<T: Scalar>(g: &ConvGeometry, src: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for co in 0..g.out_channels {
        let plane = &src[co * oh * ow..(co + 1) * oh * ow];
        for kh in 0..k {
            for kw in 0..k {
                let row = &mut cols[((co * k + kh) * k + kw) * g.in_plane()..][..g.in_plane()];
                for ih in 0..g.in_h {
                    let ty = g.target(ih, kh, oh);
                    for iw in 0..g.in_w {
                        row[ih * g.in_w + iw] = match (ty, g.target(iw, kw, ow)) {
                            (Some(y), Some(x)) => plane[y * ow + x],
                            _ => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Gradients of a transposed convolution w.r.t. its input and kernel.
///
/// Either gradient may be skipped. Kernel gradients are accumulated over the
/// batch in sample order regardless of `mode`.
pub fn conv_transpose2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    want_input: bool,
    want_kernel: bool,
    mode: ExecMode,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = ConvGeometry::infer(input.shape(), kernel.shape(), stride, padding)?;
    if grad_out.shape() != g.output_shape() {
        return Err(Error::Shape(format!(
            "conv_transpose2d grad shape {:?} != output {:?}",
            grad_out.shape(),
            g.output_shape()
        )));
    }
    let per_in = g.in_channels * g.in_plane();
    let per_out = g.out_channels * g.out_plane();
    let x = input.data();
    let w = kernel.data();
    let dy = grad_out.data();

    // Per-sample work: optional dX and optional kernel partial.
    let sample = |b: usize| -> (Option<Vec<T>>, Option<Vec<T>>) {
        let mut cols = vec![T::zero(); g.col_rows() * g.in_plane()];
        gather_cols(&g, &dy[b * per_out..(b + 1) * per_out], &mut cols);
        let dx = want_input.then(|| {
            let mut dx = vec![T::zero(); per_in];
            T::gemm(
                g.in_channels,
                g.col_rows(),
                g.in_plane(),
                T::one(),
                w,
                g.col_rows() as isize,
                1,
                &cols,
                g.in_plane() as isize,
                1,
                T::zero(),
                &mut dx,
                g.in_plane() as isize,
                1,
            );
            dx
        });
        let part = want_kernel.then(|| {
            let mut part = vec![T::zero(); kernel.len()];
            T::gemm(
                g.in_channels,
                g.in_plane(),
                g.col_rows(),
                T::one(),
                &x[b * per_in..(b + 1) * per_in],
                g.in_plane() as isize,
                1,
                &cols,
                1,
                g.in_plane() as isize,
                T::zero(),
                &mut part,
                g.col_rows() as isize,
                1,
            );
            part
        });
        (dx, part)
    };

    let mut dinput = want_input.then(|| Tensor::zeros(input.shape().to_vec()));
    let mut dkernel = want_kernel.then(|| Tensor::zeros(kernel.shape().to_vec()));

    // Samples run in windows so kernel partials stay bounded in memory; the
    // partials are always summed in sample order.
    let window = if mode.is_parallel() {
        exec::worker_count().max(1)
    } else {
        1
    };
    let mut start = 0;
    while start < g.batch {
        let end = (start + window).min(g.batch);
        let results = exec::map_indexed(mode, end - start, |i| sample(start + i));
        for (i, (dx, part)) in results.into_iter().enumerate() {
            if let (Some(dst), Some(dx)) = (dinput.as_mut(), dx) {
                let b = start + i;
                dst.data_mut()[b * per_in..(b + 1) * per_in].copy_from_slice(&dx);
            }
            if let (Some(dk), Some(part)) = (dkernel.as_mut(), part) {
                for (a, p) in dk.data_mut().iter_mut().zip(part) {
                    *a += p;
                }
            }
        }
        start = end;
    }
    Ok((dinput, dkernel))
}

/// Strided convolution `B×Cout×H'×W' → B×Cin×H×W`, the linear adjoint of
/// [`conv_transpose2d`] with the same kernel, stride and padding.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    in_h: usize,
    in_w: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let ks = kernel.shape();
    let ys = input.shape();
    if ys.len() != 4 || ks.len() != 4 || ys[1] != ks[1] {
        return Err(Error::Shape(format!(
            "conv2d input {ys:?} incompatible with kernel {ks:?}"
        )));
    }
    let g = ConvGeometry::infer(&[ys[0], ks[0], in_h, in_w], ks, stride, padding)?;
    if ys[2] != g.out_h() || ys[3] != g.out_w() {
        return Err(Error::Shape(format!(
            "conv2d input {ys:?} does not match geometry {:?}",
            g.output_shape()
        )));
    }
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let mut out = Tensor::zeros([g.batch, g.in_channels, in_h, in_w]);
    let y = input.data();
    let w = kernel.data();
    let o = out.data_mut();
    for b in 0..g.batch {
        for ci in 0..g.in_channels {
            for ih in 0..in_h {
                for iw in 0..in_w {
                    let mut acc = T::zero();
                    for co in 0..g.out_channels {
                        for kh in 0..k {
                            let Some(py) = g.target(ih, kh, oh) else { continue };
                            for kw in 0..k {
                                let Some(px) = g.target(iw, kw, ow) else { continue };
                                acc += y[((b * g.out_channels + co) * oh + py) * ow + px]
                                    * w[((ci * g.out_channels + co) * k + kh) * k + kw];
                            }
                        }
                    }
                    o[((b * g.in_channels + ci) * in_h + ih) * in_w + iw] = acc;
                }
            }
        }
    }
    Ok(out)
}
