//! Per-pixel MLP that turns fused features into a residual on the lit image.

use ndarray::Array2;

use super::layers::{Builder, Linear};
use super::params::{GradSlots, Weights};
use super::tensor::{gelu, gelu_grad, FeatureMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ReconstructionHead {
    pub fc_in: Linear,
    /// Zero-initialized so the untrained head returns the lit image.
    pub fc_out: Linear,
}

pub struct HeadCache {
    input: Array2<f64>,
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
}

impl ReconstructionHead {
    pub fn new(b: &mut Builder<'_>, name: &str, in_channels: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc_in: Linear::new(b, &format!("{name}.fc_in"), in_channels, hidden, true, false)?,
            fc_out: Linear::new(b, &format!("{name}.fc_out"), hidden, 3, true, true)?,
        })
    }

    /// `lit_rgb + MLP(x_fused)`, unclamped.
    pub fn forward(
        &self,
        w: &Weights<'_>,
        x_fused: &FeatureMap,
        lit_rgb: &FeatureMap,
    ) -> Result<(FeatureMap, HeadCache)> {
        if !x_fused.same_spatial(lit_rgb) || lit_rgb.channels() != 3 {
            return Err(Error::Shape(format!(
                "fused features {}x{} vs lit image {}x{}x{}",
                x_fused.height(),
                x_fused.width(),
                lit_rgb.height(),
                lit_rgb.width(),
                lit_rgb.channels()
            )));
        }
        super::tensor::check_cols(&x_fused.data().view(), self.fc_in.in_features, "reconstruction head")?;
        let hidden_pre = self.fc_in.forward(w, &x_fused.data().view());
        let hidden = hidden_pre.mapv(gelu);
        let residual = self.fc_out.forward(w, &hidden.view());
        let out = FeatureMap::new(lit_rgb.height(), lit_rgb.width(), lit_rgb.data() + &residual)?;
        Ok((
            out,
            HeadCache {
                input: x_fused.data().clone(),
                hidden_pre,
                hidden,
            },
        ))
    }

    /// Returns the gradient with respect to the fused features; the lit
    /// image receives `g_out` unchanged.
    pub fn backward(
        &self,
        w: &Weights<'_>,
        g: &mut GradSlots<'_>,
        cache: &HeadCache,
        g_out: &Array2<f64>,
    ) -> Array2<f64> {
        let g_hidden = self
            .fc_out
            .backward(w, g, &cache.hidden.view(), &g_out.view(), true)
            .unwrap();
        let g_pre = g_hidden * &cache.hidden_pre.mapv(gelu_grad);
        self.fc_in
            .backward(w, g, &cache.input.view(), &g_pre.view(), true)
            .unwrap()
    }
}
