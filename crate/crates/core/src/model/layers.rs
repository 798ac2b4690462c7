//! Point-wise and depth-wise convolution layers with explicit backward passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, Axis};

use super::params::{GradSlots, ParamId, ParameterStore, Weights};
use crate::error::Result;

/// How a parameter is drawn at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Zeros,
}

/// Parameter registry used while building a network.
pub struct Builder<'a> {
    pub store: &'a mut ParameterStore,
    pub inits: &'a mut Vec<(ParamId, Init)>,
}

impl Builder<'_> {
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let id = self.store.add(name, shape)?;
        self.inits.push((id, init));
        Ok(id)
    }
}

/// Point-wise (1x1) convolution: `y = x W^T + b` applied to every pixel row.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
    /// Multiplier on accumulated parameter gradients; 1 except under fault injection.
    pub grad_scale: f64,
}

impl Linear {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        zero_init: bool,
    ) -> Result<Self> {
        let init = if zero_init {
            Init::Zeros
        } else {
            Init::Uniform(1.0 / (in_features as f64).sqrt())
        };
        let weight = b.param(&format!("{name}.weight"), &[out_features, in_features], init)?;
        let bias = if bias {
            Some(b.param(&format!("{name}.bias"), &[out_features], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
            grad_scale: 1.0,
        })
    }

    pub fn num_params(in_features: usize, out_features: usize, bias: bool) -> usize {
        in_features * out_features + if bias { out_features } else { 0 }
    }

    pub fn forward(&self, w: &Weights<'_>, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&w.mat(self.weight).t());
        if let Some(b) = self.bias {
            y += &w.vec(b);
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient when asked.
    pub fn backward(
        &self,
        w: &Weights<'_>,
        g: &mut GradSlots<'_>,
        x: &ArrayView2<f64>,
        gy: &ArrayView2<f64>,
        need_input_grad: bool,
    ) -> Option<Array2<f64>> {
        general_mat_mul(self.grad_scale, &gy.t(), x, 1.0, &mut g.mat_mut(self.weight));
        if let Some(b) = self.bias {
            let sum = gy.sum_axis(Axis(0));
            g.vec_mut(b).scaled_add(self.grad_scale, &sum);
        }
        need_input_grad.then(|| gy.dot(&w.mat(self.weight)))
    }
}

pub const DW_KERNEL: usize = 5;
const DW_RADIUS: isize = 2;

/// Depth-wise 5x5 convolution with zero padding that preserves spatial size.
#[derive(Debug, Clone)]
pub struct DepthwiseConv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub grad_scale: f64,
}

/// Valid `(output row range, input row offset)` pairs for one kernel tap.
fn tap_rows(height: usize, width: usize, dy: isize, dx: isize) -> impl Iterator<Item = (usize, usize, usize)> {
    let y0 = (-dy).max(0) as usize;
    let y1 = (height as isize - dy.max(0)).max(0) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (width as isize - dx.max(0)).max(0) as usize;
    (y0..y1.max(y0)).map(move |y| {
        let out = y * width + x0;
        let inp = ((y as isize + dy) as usize) * width + (x0 as isize + dx) as usize;
        (out, inp, x1.saturating_sub(x0))
    })
}

impl DepthwiseConv {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize) -> Result<Self> {
        let taps = DW_KERNEL * DW_KERNEL;
        let kernel = b.param(
            &format!("{name}.weight"),
            &[channels, taps],
            Init::Uniform(1.0 / (taps as f64).sqrt()),
        )?;
        let bias = b.param(&format!("{name}.bias"), &[channels], Init::Zeros)?;
        Ok(Self {
            kernel,
            bias,
            channels,
            grad_scale: 1.0,
        })
    }

    pub fn num_params(channels: usize) -> usize {
        channels * (DW_KERNEL * DW_KERNEL + 1)
    }

    pub fn forward(&self, w: &Weights<'_>, x: &ArrayView2<f64>, height: usize, width: usize) -> Array2<f64> {
        let c = self.channels;
        let k = w.mat(self.kernel);
        let bias = w.vec(self.bias);
        let mut y = Array2::<f64>::zeros((height * width, c));
        for mut row in y.rows_mut() {
            row.assign(&bias);
        }
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let ys = y.as_slice_mut().unwrap();
        for dy in -DW_RADIUS..=DW_RADIUS {
            for dx in -DW_RADIUS..=DW_RADIUS {
                let t = ((dy + DW_RADIUS) * DW_KERNEL as isize + dx + DW_RADIUS) as usize;
                let tap: Vec<f64> = (0..c).map(|ch| k[[ch, t]]).collect();
                for (out, inp, len) in tap_rows(height, width, dy, dx) {
                    let yo = &mut ys[out * c..(out + len) * c];
                    let xi = &xs[inp * c..(inp + len) * c];
                    for (yp, xp) in yo.chunks_exact_mut(c).zip(xi.chunks_exact(c)) {
                        for ((yv, xv), kv) in yp.iter_mut().zip(xp).zip(&tap) {
                            *yv += kv * xv;
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(
        &self,
        w: &Weights<'_>,
        g: &mut GradSlots<'_>,
        x: &ArrayView2<f64>,
        gy: &ArrayView2<f64>,
        height: usize,
        width: usize,
        need_input_grad: bool,
    ) -> Option<Array2<f64>> {
        let c = self.channels;
        let k = w.mat(self.kernel);
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let gys = gy.as_standard_layout();
        let gys = gys.as_slice().unwrap();
        let mut gk = Array2::<f64>::zeros((c, DW_KERNEL * DW_KERNEL));
        let mut gx = need_input_grad.then(|| Array2::<f64>::zeros((height * width, c)));
        let mut acc = vec![0.0; c];
        for dy in -DW_RADIUS..=DW_RADIUS {
            for dx in -DW_RADIUS..=DW_RADIUS {
                let t = ((dy + DW_RADIUS) * DW_KERNEL as isize + dx + DW_RADIUS) as usize;
                let tap: Vec<f64> = (0..c).map(|ch| k[[ch, t]]).collect();
                acc.iter_mut().for_each(|a| *a = 0.0);
                for (out, inp, len) in tap_rows(height, width, dy, dx) {
                    let go = &gys[out * c..(out + len) * c];
                    let xi = &xs[inp * c..(inp + len) * c];
                    for (gp, xp) in go.chunks_exact(c).zip(xi.chunks_exact(c)) {
                        for ((a, gv), xv) in acc.iter_mut().zip(gp).zip(xp) {
                            *a += gv * xv;
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gxs = gx.as_slice_mut().unwrap();
                        let gi = &mut gxs[inp * c..(inp + len) * c];
                        for (gip, gp) in gi.chunks_exact_mut(c).zip(go.chunks_exact(c)) {
                            for ((gv, gov), kv) in gip.iter_mut().zip(gp).zip(&tap) {
                                *gv += gov * kv;
                            }
                        }
                    }
                }
                for ch in 0..c {
                    gk[[ch, t]] = acc[ch];
                }
            }
        }
        g.mat_mut(self.kernel).scaled_add(self.grad_scale, &gk);
        let gb = gy.sum_axis(Axis(0));
        g.vec_mut(self.bias).scaled_add(self.grad_scale, &gb);
        gx
    }
}
