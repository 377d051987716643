use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub batch: usize,
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub window: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(
        op: &'static str,
        shape: &[usize],
        window: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let &[n, c, h, w] = shape else {
            return Err(Error::invalid(
                op,
                format!("expected an N×C×H×W tensor, got shape {shape:?}"),
            ));
        };
        if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid(op, "window and stride must be positive"));
        }
        let (ph, pw) = (h + 2 * padding.0, w + 2 * padding.1);
        if window.0 > ph || window.1 > pw {
            return Err(Error::invalid(
                op,
                format!(
                    "window {}×{} larger than input {ph}×{pw}",
                    window.0, window.1
                ),
            ));
        }
        Ok(Self {
            batch: n,
            channels: c,
            in_h: h,
            in_w: w,
            window,
            stride,
            padding,
            out_h: (ph - window.0) / stride.0 + 1,
            out_w: (pw - window.1) / stride.1 + 1,
        })
    }

    fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.out_h, self.out_w]
    }

    /// In-bounds input positions covered by output cell (oy, ox).
    fn taps(&self, oy: usize, ox: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let y0 = oy * self.stride.0;
        let x0 = ox * self.stride.1;
        (y0..y0 + self.window.0).flat_map(move |py| {
            (x0..x0 + self.window.1).filter_map(move |px| {
                let y = py.checked_sub(self.padding.0)?;
                let x = px.checked_sub(self.padding.1)?;
                (y < self.in_h && x < self.in_w).then_some((y, x))
            })
        })
    }
}

impl<T: Real> Tape<T> {
    /// Average pooling without padding; windows divide by their full area.
    pub fn avg_pool2d(
        &mut self,
        input: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let geom = PoolGeometry::new(
            "avg_pool2d",
            self.value(input).shape(),
            window,
            stride,
            (0, 0),
        )?;
        let x = self.value(input).data();
        let area = T::from_f64((window.0 * window.1) as f64);
        let mut out = Vec::with_capacity(geom.out_shape().iter().product());
        for plane in x.chunks(geom.in_h * geom.in_w) {
            for oy in 0..geom.out_h {
                for ox in 0..geom.out_w {
                    let s: T = geom.taps(oy, ox).map(|(y, x)| plane[y * geom.in_w + x]).sum();
                    out.push(s / area);
                }
            }
        }
        let value = Tensor::new(geom.out_shape(), out)?;
        Ok(self.push_op(value, &[input], Op::AvgPool { input, geom }))
    }

    pub(super) fn avg_pool_backward(
        &self,
        input: Var,
        geom: &PoolGeometry,
        upstream: &Tensor<T>,
        out: &mut Vec<(Var, Tensor<T>)>,
    ) {
        if !self.requires_grad(input) {
            return;
        }
        let area = T::from_f64((geom.window.0 * geom.window.1) as f64);
        let in_plane = geom.in_h * geom.in_w;
        let out_plane = geom.out_h * geom.out_w;
        let mut dx = vec![T::zero(); geom.batch * geom.channels * in_plane];
        for (p, dplane) in dx.chunks_mut(in_plane).enumerate() {
            let dy = &upstream.data()[p * out_plane..(p + 1) * out_plane];
            for oy in 0..geom.out_h {
                for ox in 0..geom.out_w {
                    let g = dy[oy * geom.out_w + ox] / area;
                    for (y, x) in geom.taps(oy, ox) {
                        dplane[y * geom.in_w + x] += g;
                    }
                }
            }
        }
        out.push((
            input,
            Tensor::new(self.value(input).shape().to_vec(), dx).unwrap(),
        ));
    }

    /// Max pooling; padded positions never win. Gradient goes to the first
    /// maximal element in row-major window order.
    pub fn max_pool2d(
        &mut self,
        input: Var,
        window: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let geom = PoolGeometry::new(
            "max_pool2d",
            self.value(input).shape(),
            window,
            stride,
            padding,
        )?;
        let x = self.value(input).data();
        let in_plane = geom.in_h * geom.in_w;
        let total = geom.out_shape().iter().product();
        let mut out = Vec::with_capacity(total);
        let mut argmax = Vec::with_capacity(total);
        for (p, plane) in x.chunks(in_plane).enumerate() {
            for oy in 0..geom.out_h {
                for ox in 0..geom.out_w {
                    let mut best: Option<(usize, T)> = None;
                    for (y, xx) in geom.taps(oy, ox) {
                        let idx = y * geom.in_w + xx;
                        // NaN wins so that it propagates.
                        if best.is_none_or(|(_, b)| plane[idx] > b || (plane[idx].is_nan() && !b.is_nan())) {
                            best = Some((idx, plane[idx]));
                        }
                    }
                    let (idx, v) = best.ok_or_else(|| Error::EmptyOutput {
                        op: "max_pool2d",
                        detail: "window covers only padding".into(),
                    })?;
                    out.push(v);
                    argmax.push(p * in_plane + idx);
                }
            }
        }
        let value = Tensor::new(geom.out_shape(), out)?;
        Ok(self.push_op(value, &[input], Op::MaxPool { input, argmax }))
    }

    pub(super) fn max_pool_backward(
        &self,
        input: Var,
        argmax: &[usize],
        upstream: &Tensor<T>,
        out: &mut Vec<(Var, Tensor<T>)>,
    ) {
        if !self.requires_grad(input) {
            return;
        }
        let mut dx = vec![T::zero(); self.value(input).numel()];
        for (&src, &g) in argmax.iter().zip(upstream.data()) {
            dx[src] += g;
        }
        out.push((
            input,
            Tensor::new(self.value(input).shape().to_vec(), dx).unwrap(),
        ));
    }

    /// Mean over H×W: N×C×H×W → N×C.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("global_avg_pool")?;
        if h * w == 0 {
            return Err(Error::invalid("global_avg_pool", "empty spatial extent"));
        }
        let area = T::from_f64((h * w) as f64);
        let out = self
            .value(input)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() / area)
            .collect();
        let value = Tensor::new([n, c], out)?;
        Ok(self.push_op(value, &[input], Op::GlobalAvgPool { input }))
    }

    pub(super) fn global_avg_pool_backward(
        &self,
        input: Var,
        upstream: &Tensor<T>,
        out: &mut Vec<(Var, Tensor<T>)>,
    ) {
        if !self.requires_grad(input) {
            return;
        }
        let shape = self.value(input).shape().to_vec();
        let plane = shape[2] * shape[3];
        let area = T::from_f64(plane as f64);
        let mut dx = Vec::with_capacity(self.value(input).numel());
        for &g in upstream.data() {
            dx.extend(std::iter::repeat_n(g / area, plane));
        }
        out.push((input, Tensor::new(shape, dx).unwrap()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_pool_of_two_by_two() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.avg_pool2d(x, (2, 2), (2, 2)).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
    }

    #[test]
    fn avg_pool_floors_odd_sizes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([1, 1, 5, 5]));
        let y = tape.avg_pool2d(x, (2, 2), (2, 2)).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn global_pool_of_constant_channel() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full([2, 3, 4, 5], 1.75));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 1.75));
    }

    #[test]
    fn window_larger_than_input() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([1, 1, 2, 2]));
        assert!(tape.avg_pool2d(x, (3, 3), (1, 1)).is_err());
        assert!(tape.max_pool2d(x, (3, 3), (2, 2), (0, 0)).is_err());
    }

    #[test]
    fn max_pool_routes_to_first_maximum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new([1, 1, 2, 2], vec![5.0, 5.0, 1.0, 5.0]).unwrap());
        let y = tape.max_pool2d(x, (2, 2), (2, 2), (0, 0)).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_propagates_nan() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new([1, 1, 2, 2], vec![1.0, f32::NAN, 3.0, 2.0]).unwrap());
        let y = tape.max_pool2d(x, (2, 2), (2, 2), (0, 0)).unwrap();
        assert!(tape.value(y).data()[0].is_nan());
    }

    #[test]
    fn padded_max_pool_ignores_padding() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full([1, 1, 4, 4], -3.0));
        let y = tape.max_pool2d(x, (3, 3), (2, 2), (1, 1)).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == -3.0));
    }
}
