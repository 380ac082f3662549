//! Patch extraction for strided N-d convolution in channels-last layout.
//!
//! A convolution is expressed as `im2col` followed by a matrix product with
//! the `[out_channels, kernel^d * in_channels]` weight matrix. The resulting
//! `[batch * out_positions, out_channels]` matrix is already the channels-last
//! activation of the next layer. `col2im` is the exact adjoint of `im2col`.

use std::sync::Arc;

use super::Real;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_spatial: Vec<usize>,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_spatial: Vec<usize>,
}

impl ConvGeometry {
    pub fn new(
        batch: usize,
        in_spatial: &[usize],
        channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let mut out_spatial = Vec::with_capacity(in_spatial.len());
        for &s in in_spatial {
            let padded = s + 2 * pad;
            if padded < kernel || stride == 0 {
                return None;
            }
            out_spatial.push((padded - kernel) / stride + 1);
        }
        Some(Self {
            batch,
            in_spatial: in_spatial.to_vec(),
            channels,
            kernel,
            stride,
            pad,
            out_spatial,
        })
    }

    pub fn ndim(&self) -> usize {
        self.in_spatial.len()
    }

    pub fn in_positions(&self) -> usize {
        self.in_spatial.iter().product()
    }

    pub fn out_positions(&self) -> usize {
        self.out_spatial.iter().product()
    }

    pub fn kernel_positions(&self) -> usize {
        self.kernel.pow(self.ndim() as u32)
    }

    /// Rows of the column matrix: one per (sample, output position).
    pub fn rows(&self) -> usize {
        self.batch * self.out_positions()
    }

    /// Columns of the column matrix: kernel positions times input channels.
    pub fn cols(&self) -> usize {
        self.kernel_positions() * self.channels
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.in_positions() * self.channels
    }

    /// For every `(output position, kernel position)` pair, the input
    /// position it reads, or `-1` when the tap falls in the zero padding.
    fn tap_table(&self) -> Vec<i64> {
        let nd = self.ndim();
        let kp = self.kernel_positions();
        let op = self.out_positions();
        let mut table = Vec::with_capacity(op * kp);
        let mut out_idx = vec![0usize; nd];
        let mut k_idx = vec![0usize; nd];
        for o in 0..op {
            unravel(o, &self.out_spatial, &mut out_idx);
            for kk in 0..kp {
                unravel_uniform(kk, self.kernel, nd, &mut k_idx);
                let mut flat: i64 = 0;
                let mut inside = true;
                for d in 0..nd {
                    let pos = (out_idx[d] * self.stride + k_idx[d]) as i64 - self.pad as i64;
                    if pos < 0 || pos >= self.in_spatial[d] as i64 {
                        inside = false;
                        break;
                    }
                    flat = flat * self.in_spatial[d] as i64 + pos;
                }
                table.push(if inside { flat } else { -1 });
            }
        }
        table
    }

    pub fn plan(&self) -> Arc<ConvPlan> {
        Arc::new(ConvPlan {
            geom: self.clone(),
            taps: self.tap_table(),
        })
    }
}

fn unravel(mut flat: usize, dims: &[usize], out: &mut [usize]) {
    for d in (0..dims.len()).rev() {
        out[d] = flat % dims[d];
        flat /= dims[d];
    }
}

fn unravel_uniform(mut flat: usize, size: usize, nd: usize, out: &mut [usize]) {
    for d in (0..nd).rev() {
        out[d] = flat % size;
        flat /= size;
    }
}

/// Geometry plus precomputed tap table.
#[derive(Debug)]
pub struct ConvPlan {
    pub geom: ConvGeometry,
    taps: Vec<i64>,
}

impl ConvPlan {
    pub fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let g = &self.geom;
        assert_eq!(x.len(), g.input_len(), "im2col input length");
        let c = g.channels;
        let kp = g.kernel_positions();
        let op = g.out_positions();
        let ip = g.in_positions();
        let mut cols = vec![T::zero(); g.rows() * g.cols()];
        for n in 0..g.batch {
            let xs = &x[n * ip * c..(n + 1) * ip * c];
            for o in 0..op {
                let row = (n * op + o) * kp * c;
                for kk in 0..kp {
                    let tap = self.taps[o * kp + kk];
                    if tap >= 0 {
                        let src = tap as usize * c;
                        let dst = row + kk * c;
                        cols[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                    }
                }
            }
        }
        cols
    }

    pub fn col2im<T: Real>(&self, cols: &[T]) -> Vec<T> {
        let g = &self.geom;
        assert_eq!(cols.len(), g.rows() * g.cols(), "col2im input length");
        let c = g.channels;
        let kp = g.kernel_positions();
        let op = g.out_positions();
        let ip = g.in_positions();
        let mut x = vec![T::zero(); g.input_len()];
        for n in 0..g.batch {
            let xs = &mut x[n * ip * c..(n + 1) * ip * c];
            for o in 0..op {
                let row = (n * op + o) * kp * c;
                for kk in 0..kp {
                    let tap = self.taps[o * kp + kk];
                    if tap >= 0 {
                        let dst = tap as usize * c;
                        let src = row + kk * c;
                        for (d, s) in xs[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *d += *s;
                        }
                    }
                }
            }
        }
        x
    }
}
