//! Illumination estimator: predicts illumination features and, for the RGB
//! branch, a strictly positive illumination map.
//!
//! Input channels are concatenated with their per-pixel mean, then passed
//! through a point-wise conv, a depth-wise 5x5 conv (whose output is the
//! feature map) and a point-wise conv to one channel mapped through
//! `softplus(z) + eps`.

use ndarray::{concatenate, s, Array2, Axis};

use super::layers::{Builder, DepthwiseConv, Linear};
use super::params::{GradSlots, Weights};
use super::tensor::{sigmoid, softplus, FeatureMap};
use crate::error::{Error, Result};

/// Lower bound added to the softplus output of the illumination map.
pub const ILLUMINATION_EPS: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct IlluminationOutputs {
    pub features: FeatureMap,
    /// `H x W x 1`, strictly positive. Absent for feature-only estimators.
    pub map: Option<FeatureMap>,
}

#[derive(Debug, Clone)]
pub struct IlluminationEstimator {
    pub in_channels: usize,
    pub channels: usize,
    pub conv_in: Linear,
    pub depthwise: DepthwiseConv,
    pub conv_out: Option<Linear>,
}

pub struct EstimatorCache {
    height: usize,
    width: usize,
    input: Array2<f64>,
    mid: Array2<f64>,
    features: Array2<f64>,
    logits: Option<Array2<f64>>,
}

impl IlluminationEstimator {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        in_channels: usize,
        channels: usize,
        with_map: bool,
    ) -> Result<Self> {
        Ok(Self {
            in_channels,
            channels,
            conv_in: Linear::new(b, &format!("{name}.conv_in"), in_channels + 1, channels, true, false)?,
            depthwise: DepthwiseConv::new(b, &format!("{name}.depthwise"), channels)?,
            conv_out: if with_map {
                Some(Linear::new(b, &format!("{name}.map_out"), channels, 1, true, false)?)
            } else {
                None
            },
        })
    }

    pub fn num_params(in_channels: usize, channels: usize, with_map: bool) -> usize {
        Linear::num_params(in_channels + 1, channels, true)
            + DepthwiseConv::num_params(channels)
            + if with_map { Linear::num_params(channels, 1, true) } else { 0 }
    }

    pub fn forward(&self, w: &Weights<'_>, img: &FeatureMap) -> Result<(IlluminationOutputs, EstimatorCache)> {
        if img.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "estimator expects {} input channels, got {}",
                self.in_channels,
                img.channels()
            )));
        }
        let (h, wd) = (img.height(), img.width());
        let prior = img.data().mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
        let input = concatenate(Axis(1), &[img.data().view(), prior.view()]).unwrap();
        let mid = self.conv_in.forward(w, &input.view());
        let features = self.depthwise.forward(w, &mid.view(), h, wd);
        let (map, logits) = match &self.conv_out {
            Some(conv) => {
                let z = conv.forward(w, &features.view());
                let m = z.mapv(|v| softplus(v) + ILLUMINATION_EPS);
                (Some(FeatureMap::new(h, wd, m)?), Some(z))
            }
            None => (None, None),
        };
        let outputs = IlluminationOutputs {
            features: FeatureMap::new(h, wd, features.clone())?,
            map,
        };
        let cache = EstimatorCache {
            height: h,
            width: wd,
            input,
            mid,
            features,
            logits,
        };
        Ok((outputs, cache))
    }

    /// Accumulates parameter gradients given upstream gradients of the
    /// features and (optionally) the map. Input gradients are not needed:
    /// the estimator reads raw images only.
    pub fn backward(
        &self,
        w: &Weights<'_>,
        g: &mut GradSlots<'_>,
        cache: &EstimatorCache,
        g_features: Option<&Array2<f64>>,
        g_map: Option<&Array2<f64>>,
    ) {
        let mut g_feat = match g_features {
            Some(gf) => gf.clone(),
            None => Array2::zeros(cache.features.raw_dim()),
        };
        if let (Some(conv), Some(z), Some(gm)) = (&self.conv_out, &cache.logits, g_map) {
            let gz = gm * &z.mapv(sigmoid);
            g_feat += &conv
                .backward(w, g, &cache.features.view(), &gz.view(), true)
                .unwrap();
        }
        let g_mid = self
            .depthwise
            .backward(w, g, &cache.mid.view(), &g_feat.view(), cache.height, cache.width, true)
            .unwrap();
        self.conv_in.backward(w, g, &cache.input.view(), &g_mid.view(), false);
    }
}

/// Multiplies every channel of `img` by the single-channel map `m`.
pub fn light_up(img: &FeatureMap, m: &FeatureMap) -> Result<FeatureMap> {
    if !img.same_spatial(m) || m.channels() != 1 {
        return Err(Error::Shape(format!(
            "cannot light up {}x{}x{} with a {}x{}x{} map",
            img.height(),
            img.width(),
            img.channels(),
            m.height(),
            m.width(),
            m.channels()
        )));
    }
    let data = img.data() * &m.data().slice(s![.., 0..1]);
    FeatureMap::new(img.height(), img.width(), data)
}

/// Gradient of [`light_up`] with respect to the map.
pub(crate) fn light_up_map_grad(img: &Array2<f64>, g_out: &Array2<f64>) -> Array2<f64> {
    (img * g_out).sum_axis(Axis(1)).insert_axis(Axis(1))
}
