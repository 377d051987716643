use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Layout, Real, Tensor};

/// Resolved sizes of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let (&[n, c, h, w], &[o, kc, kh, kw]) = (input, kernel) else {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        };
        if c != kc {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (ph, pw) = (h + 2 * padding.0, w + 2 * padding.1);
        if kh == 0 || kw == 0 || kh > ph || kw > pw {
            return Err(Error::EmptyOutput {
                op: "conv2d",
                detail: format!("kernel {kh}×{kw} exceeds padded input {ph}×{pw}"),
            });
        }
        Ok(Self {
            batch: n,
            in_channels: c,
            out_channels: o,
            in_h: h,
            in_w: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (ph - kh) / stride.0 + 1,
            out_w: (pw - kw) / stride.1 + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    /// 1×1, stride 1, no padding: the input plane is already the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1
            && self.kernel_w == 1
            && self.stride == (1, 1)
            && self.padding == (0, 0)
    }

    /// Input offset of kernel tap (ki, kj) for output (oy, ox), if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride.0 + ki).checked_sub(self.padding.0)?;
        let x = (ox * self.stride.1 + kj).checked_sub(self.padding.1)?;
        (y < self.in_h && x < self.in_w).then_some((y, x))
    }

    fn im2col<T: Real>(&self, input: &[T], cols: &mut [T]) {
        let plane = self.out_plane();
        let mut row = 0;
        for c in 0..self.in_channels {
            let chan = &input[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            dst[oy * self.out_w + ox] = match self.source(oy, ox, ki, kj) {
                                Some((y, x)) => chan[y * self.in_w + x],
                                None => T::zero(),
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], input_grad: &mut [T]) {
        let plane = self.out_plane();
        let mut row = 0;
        for c in 0..self.in_channels {
            let chan = &mut input_grad[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            if let Some((y, x)) = self.source(oy, ox, ki, kj) {
                                chan[y * self.in_w + x] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    g: &Conv2dGeometry,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let plane = g.out_plane();
    let out_sample = g.out_channels * plane;
    let mut out = vec![T::zero(); g.batch * out_sample];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_len() * plane]
    };
    for n in 0..g.batch {
        let x = &input[n * g.in_sample()..(n + 1) * g.in_sample()];
        let y = &mut out[n * out_sample..(n + 1) * out_sample];
        let cols_ref: &[T] = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut cols);
            &cols
        };
        gemm(
            g.out_channels,
            g.patch_len(),
            plane,
            kernel,
            Layout::Normal,
            cols_ref,
            Layout::Normal,
            y,
            false,
        );
        if let Some(b) = bias {
            for (o, chunk) in y.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    }
    out
}

impl<T: Real> Tape<T> {
    /// 2-D cross-correlation (no kernel flip) of an N×C×H×W input with an
    /// O×C×kH×kW kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let geom = Conv2dGeometry::new(
            self.value(input).shape(),
            self.value(kernel).shape(),
            stride,
            padding,
        )?;
        if let Some(b) = bias {
            if self.value(b).shape() != [geom.out_channels] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![geom.out_channels],
                    rhs: self.value(b).shape().to_vec(),
                });
            }
        }
        let out = conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(
            [geom.batch, geom.out_channels, geom.out_h, geom.out_w],
            out,
        )?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push_op(
            value,
            &inputs,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    pub(super) fn conv2d_backward(
        &self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        g: &Conv2dGeometry,
        upstream: &Tensor<T>,
        out: &mut Vec<(Var, Tensor<T>)>,
    ) {
        let plane = g.out_plane();
        let out_sample = g.out_channels * plane;
        let dy = upstream.data();
        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let want_input = self.requires_grad(input);
        let want_kernel = self.requires_grad(kernel);

        let mut dx = want_input.then(|| vec![T::zero(); x.len()]);
        let mut dw = want_kernel.then(|| vec![T::zero(); w.len()]);
        let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { g.patch_len() * plane }];
        let mut dcols = vec![T::zero(); if want_input { g.patch_len() * plane } else { 0 }];

        for n in 0..g.batch {
            let xn = &x[n * g.in_sample()..(n + 1) * g.in_sample()];
            let dyn_ = &dy[n * out_sample..(n + 1) * out_sample];
            if let Some(dw) = dw.as_mut() {
                let cols_ref: &[T] = if g.is_pointwise() {
                    xn
                } else {
                    g.im2col(xn, &mut cols);
                    &cols
                };
                gemm(
                    g.out_channels,
                    plane,
                    g.patch_len(),
                    dyn_,
                    Layout::Normal,
                    cols_ref,
                    Layout::Transposed,
                    dw,
                    true,
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx[n * g.in_sample()..(n + 1) * g.in_sample()];
                if g.is_pointwise() {
                    gemm(
                        g.patch_len(),
                        g.out_channels,
                        plane,
                        w,
                        Layout::Transposed,
                        dyn_,
                        Layout::Normal,
                        dxn,
                        false,
                    );
                } else {
                    gemm(
                        g.patch_len(),
                        g.out_channels,
                        plane,
                        w,
                        Layout::Transposed,
                        dyn_,
                        Layout::Normal,
                        &mut dcols,
                        false,
                    );
                    g.col2im(&dcols, dxn);
                }
            }
        }
        if let Some(dx) = dx {
            out.push((input, Tensor::new(self.value(input).shape().to_vec(), dx).unwrap()));
        }
        if let Some(dw) = dw {
            out.push((kernel, Tensor::new(self.value(kernel).shape().to_vec(), dw).unwrap()));
        }
        if let Some(b) = bias.filter(|b| self.requires_grad(*b)) {
            let mut db = vec![T::zero(); g.out_channels];
            for n in 0..g.batch {
                for (o, chunk) in dy[n * out_sample..(n + 1) * out_sample]
                    .chunks(plane)
                    .enumerate()
                {
                    db[o] += chunk.iter().copied().sum();
                }
            }
            out.push((b, Tensor::new([g.out_channels], db).unwrap()));
        }
    }
}
