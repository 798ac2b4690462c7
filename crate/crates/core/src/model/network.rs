//! The full enhancement network: illumination estimation, per-modality
//! self-attention, cross-attention fusion, PCA reduction and the residual
//! reconstruction head, with an exact hand-written backward pass.

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;

use super::attention::{AttentionBlock, BlockCache};
use super::config::{ModelConfig, Variant};
use super::estimator::{light_up, light_up_map_grad, EstimatorCache, IlluminationEstimator};
use super::head::{HeadCache, ReconstructionHead};
use super::layers::{Builder, Init, Linear};
use super::params::{ParamId, ParameterStore};
use super::pca::{pca_reduce, pca_reduce_backward, PcaProjection};
use super::tensor::FeatureMap;
use crate::error::{Error, Result};
use crate::imageio::{Image, ThermalImage};

#[derive(Debug, Clone)]
pub struct Network {
    cfg: ModelConfig,
    variant: Variant,
    rgb_estimator: IlluminationEstimator,
    thermal_estimator: Option<IlluminationEstimator>,
    rgb_embed: Linear,
    thermal_embed: Option<Linear>,
    rgb_blocks: Vec<AttentionBlock>,
    thermal_blocks: Vec<AttentionBlock>,
    cross: Option<AttentionBlock>,
    head: ReconstructionHead,
    inits: Vec<(ParamId, Init)>,
    unit_illumination: bool,
}

/// Intermediate results of the trunk, before PCA.
#[derive(Debug, Clone)]
pub struct TrunkOutput {
    /// Features entering the PCA reduction.
    pub fused: FeatureMap,
    /// `rgb * M`, the residual base.
    pub lit: FeatureMap,
    /// The illumination map `M`.
    pub illumination: FeatureMap,
}

pub struct TrunkCache {
    height: usize,
    width: usize,
    rgb: Array2<f64>,
    rgb_est: EstimatorCache,
    thermal_est: Option<EstimatorCache>,
    rgb_illum: Array2<f64>,
    thermal_illum: Option<Array2<f64>>,
    embed_input: Array2<f64>,
    thermal_input: Option<Array2<f64>>,
    rgb_blocks: Vec<BlockCache>,
    thermal_blocks: Vec<BlockCache>,
    cross: Option<BlockCache>,
}

impl TrunkCache {
    pub fn rgb_block_caches(&self) -> &[BlockCache] {
        &self.rgb_blocks
    }

    pub fn thermal_block_caches(&self) -> &[BlockCache] {
        &self.thermal_blocks
    }

    pub fn cross_cache(&self) -> Option<&BlockCache> {
        self.cross.as_ref()
    }
}

pub struct ForwardCache {
    pub trunk: TrunkCache,
    head: HeadCache,
}

impl Network {
    /// Builds the network and a zero-valued parameter store; call
    /// [`Network::initialize`] to draw initial weights.
    pub fn new(cfg: ModelConfig, variant: Variant) -> Result<(Self, ParameterStore)> {
        cfg.validate_for(variant)?;
        let mut store = ParameterStore::new();
        let mut inits = Vec::new();
        let mut b = Builder {
            store: &mut store,
            inits: &mut inits,
        };
        let c = cfg.base_channels;
        let (branch, rgb_in) = match variant {
            Variant::Concat4 => ("rgbt", 4),
            _ => ("rgb", 3),
        };
        let rgb_estimator = IlluminationEstimator::new(&mut b, &format!("{branch}.estimator"), rgb_in, c, true)?;
        let rgb_embed = Linear::new(&mut b, &format!("{branch}.embed"), rgb_in, c, true, false)?;
        let rgb_blocks = (0..cfg.attention_blocks_per_branch)
            .map(|i| AttentionBlock::new(&mut b, &format!("{branch}.block{i}"), c, cfg.heads, cfg.ffn_hidden, true))
            .collect::<Result<Vec<_>>>()?;
        let (thermal_estimator, thermal_embed, thermal_blocks, cross) = if variant == Variant::CrossAttention {
            let est = IlluminationEstimator::new(&mut b, "thermal.estimator", 1, c, false)?;
            let embed = Linear::new(&mut b, "thermal.embed", 1, c, true, false)?;
            let blocks = (0..cfg.attention_blocks_per_branch)
                .map(|i| AttentionBlock::new(&mut b, &format!("thermal.block{i}"), c, cfg.heads, cfg.ffn_hidden, true))
                .collect::<Result<Vec<_>>>()?;
            let cross = AttentionBlock::new(&mut b, "fusion.cross", c, cfg.heads, cfg.ffn_hidden, false)?;
            (Some(est), Some(embed), blocks, Some(cross))
        } else {
            (None, None, Vec::new(), None)
        };
        let head = ReconstructionHead::new(&mut b, "head", cfg.fused_channels, cfg.head_hidden)?;
        let net = Self {
            cfg,
            variant,
            rgb_estimator,
            thermal_estimator,
            rgb_embed,
            thermal_embed,
            rgb_blocks,
            thermal_blocks,
            cross,
            head,
            inits,
            unit_illumination: false,
        };
        Ok((net, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// Draws every parameter according to its initialization rule.
    pub fn initialize<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) {
        for &(id, init) in &self.inits {
            let values = store.values_mut(id);
            match init {
                Init::Zeros => values.iter_mut().for_each(|v| *v = 0.0),
                Init::Uniform(bound) => values
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-bound..=bound)),
            }
        }
    }

    /// Forces the illumination map to 1 everywhere.
    pub fn set_unit_illumination(&mut self, on: bool) {
        self.unit_illumination = on;
    }

    pub fn attention_blocks(&self) -> impl Iterator<Item = &AttentionBlock> {
        self.rgb_blocks
            .iter()
            .chain(self.thermal_blocks.iter())
            .chain(self.cross.iter())
    }

    /// Scales the parameter gradients of every layer whose name starts with
    /// `prefix` by `factor`, corrupting that part of the backward pass.
    /// Returns the number of layers affected. Used for fault-injection tests.
    pub fn inject_gradient_fault(&mut self, prefix: &str, factor: f64) -> usize {
        let mut hits = 0;
        let matches = |name: &str| name.starts_with(prefix);
        let branch = if self.variant == Variant::Concat4 { "rgbt" } else { "rgb" };
        let mut linears: Vec<(String, &mut Linear)> = Vec::new();
        let mut depthwise = Vec::new();
        for (name, est) in [
            (format!("{branch}.estimator"), Some(&mut self.rgb_estimator)),
            ("thermal.estimator".to_string(), self.thermal_estimator.as_mut()),
        ] {
            if let Some(est) = est {
                linears.push((format!("{name}.conv_in"), &mut est.conv_in));
                if let Some(out) = est.conv_out.as_mut() {
                    linears.push((format!("{name}.map_out"), out));
                }
                depthwise.push((format!("{name}.depthwise"), &mut est.depthwise));
            }
        }
        linears.push((format!("{branch}.embed"), &mut self.rgb_embed));
        if let Some(e) = self.thermal_embed.as_mut() {
            linears.push(("thermal.embed".into(), e));
        }
        for (i, blk) in self.rgb_blocks.iter_mut().enumerate() {
            for l in blk.linears_mut() {
                linears.push((format!("{branch}.block{i}"), l));
            }
        }
        for (i, blk) in self.thermal_blocks.iter_mut().enumerate() {
            for l in blk.linears_mut() {
                linears.push((format!("thermal.block{i}"), l));
            }
        }
        if let Some(blk) = self.cross.as_mut() {
            for l in blk.linears_mut() {
                linears.push(("fusion.cross".into(), l));
            }
        }
        linears.push(("head".into(), &mut self.head.fc_in));
        linears.push(("head".into(), &mut self.head.fc_out));
        for (name, l) in linears {
            if matches(&name) {
                l.grad_scale = factor;
                hits += 1;
            }
        }
        for (name, d) in depthwise {
            if matches(&name) {
                d.grad_scale = factor;
                hits += 1;
            }
        }
        hits
    }

    fn check_inputs(&self, rgb: &FeatureMap, thermal: &FeatureMap) -> Result<()> {
        if rgb.channels() != 3 || thermal.channels() != 1 {
            return Err(Error::Shape(format!(
                "expected 3-channel RGB and 1-channel thermal, got {} and {}",
                rgb.channels(),
                thermal.channels()
            )));
        }
        if !rgb.same_spatial(thermal) {
            return Err(Error::Shape(format!(
                "RGB is {}x{} but thermal is {}x{}",
                rgb.height(),
                rgb.width(),
                thermal.height(),
                thermal.width()
            )));
        }
        Ok(())
    }

    /// Everything up to (not including) the PCA reduction.
    pub fn forward_trunk(
        &self,
        store: &ParameterStore,
        rgb: &FeatureMap,
        thermal: &FeatureMap,
    ) -> Result<(TrunkOutput, TrunkCache)> {
        self.check_inputs(rgb, thermal)?;
        let w = store.weights();
        let (h, wd) = (rgb.height(), rgb.width());

        let est_input = match self.variant {
            Variant::Concat4 => rgb.concat_channels(thermal)?,
            _ => rgb.clone(),
        };
        let (rgb_out, rgb_est) = self.rgb_estimator.forward(&w, &est_input)?;
        let illumination = if self.unit_illumination {
            FeatureMap::from_vec(h, wd, 1, vec![1.0; h * wd])?
        } else {
            rgb_out.map.expect("RGB estimator predicts a map")
        };
        let lit = light_up(rgb, &illumination)?;
        let embed_input = match self.variant {
            Variant::Concat4 => lit.concat_channels(thermal)?.into_data(),
            _ => lit.data().clone(),
        };
        let rgb_illum = rgb_out.features.into_data();

        let mut x = self.rgb_embed.forward(&w, &embed_input.view());
        let mut rgb_blocks = Vec::with_capacity(self.rgb_blocks.len());
        for blk in &self.rgb_blocks {
            let (y, cache) = blk.forward(&w, &x.view(), None, Some(&rgb_illum.view()))?;
            x = y;
            rgb_blocks.push(cache);
        }

        let mut thermal_blocks = Vec::new();
        let (fused, thermal_est, thermal_illum, thermal_input, cross) = match (
            &self.thermal_estimator,
            &self.thermal_embed,
            &self.cross,
        ) {
            (Some(est), Some(embed), Some(cross_blk)) => {
                let (t_out, t_cache) = est.forward(&w, thermal)?;
                let t_illum = t_out.features.into_data();
                let mut xt = embed.forward(&w, &thermal.data().view());
                for blk in &self.thermal_blocks {
                    let (y, cache) = blk.forward(&w, &xt.view(), None, Some(&t_illum.view()))?;
                    xt = y;
                    thermal_blocks.push(cache);
                }
                let (attended, cross_cache) = cross_blk.forward(&w, &x.view(), Some(&xt.view()), None)?;
                let fused = concatenate(Axis(1), &[attended.view(), xt.view()]).unwrap();
                (
                    fused,
                    Some(t_cache),
                    Some(t_illum),
                    Some(thermal.data().clone()),
                    Some(cross_cache),
                )
            }
            _ => (x, None, None, None, None),
        };

        let out = TrunkOutput {
            fused: FeatureMap::new(h, wd, fused)?,
            lit,
            illumination,
        };
        let cache = TrunkCache {
            height: h,
            width: wd,
            rgb: rgb.data().clone(),
            rgb_est,
            thermal_est,
            rgb_illum,
            thermal_illum,
            embed_input,
            thermal_input,
            rgb_blocks,
            thermal_blocks,
            cross,
        };
        Ok((out, cache))
    }

    /// Unclamped enhanced image and the cache needed for [`Network::backward`].
    pub fn forward(
        &self,
        store: &ParameterStore,
        proj: &PcaProjection,
        rgb: &FeatureMap,
        thermal: &FeatureMap,
    ) -> Result<(FeatureMap, ForwardCache)> {
        let (trunk, trunk_cache) = self.forward_trunk(store, rgb, thermal)?;
        if proj.out_channels() != self.cfg.fused_channels {
            return Err(Error::Shape(format!(
                "projection keeps {} channels, model expects {}",
                proj.out_channels(),
                self.cfg.fused_channels
            )));
        }
        let reduced = pca_reduce(&trunk.fused, proj)?;
        let (out, head) = self.head.forward(&store.weights(), &reduced, &trunk.lit)?;
        Ok((
            out,
            ForwardCache {
                trunk: trunk_cache,
                head,
            },
        ))
    }

    /// Clamped inference on images.
    pub fn enhance(
        &self,
        store: &ParameterStore,
        proj: &PcaProjection,
        rgb: &Image,
        thermal: &ThermalImage,
    ) -> Result<Image> {
        let (out, _) = self.forward(store, proj, &rgb.to_feature_map(), &thermal.to_feature_map())?;
        Image::from_feature_map(&out)
    }

    /// Accumulates `d loss / d params` into the store's gradient slots, given
    /// `g_out = d loss / d output`.
    pub fn backward(
        &self,
        store: &mut ParameterStore,
        proj: &PcaProjection,
        cache: &ForwardCache,
        g_out: &Array2<f64>,
    ) {
        let (w, mut g) = store.split();
        let tc = &cache.trunk;
        let g_reduced = self.head.backward(&w, &mut g, &cache.head, g_out);
        let g_fused = pca_reduce_backward(proj, &g_reduced);
        let mut g_lit = g_out.clone();

        let c = self.cfg.base_channels;
        let mut g_rgb_illum = Array2::<f64>::zeros(tc.rgb_illum.raw_dim());
        let g_x = match (&self.cross, &tc.cross) {
            (Some(cross_blk), Some(cross_cache)) => {
                let g_att = g_fused.slice(s![.., ..c]);
                let mut g_xt = g_fused.slice(s![.., c..]).to_owned();
                let cg = cross_blk.backward(&w, &mut g, cross_cache, &g_att);
                g_xt += cg.xkv.as_ref().expect("cross-attention has a key/value stream");

                let t_illum = tc.thermal_illum.as_ref().unwrap();
                let mut g_t_illum = Array2::<f64>::zeros(t_illum.raw_dim());
                for (blk, bc) in self.thermal_blocks.iter().zip(&tc.thermal_blocks).rev() {
                    let bg = blk.backward(&w, &mut g, bc, &g_xt.view());
                    g_xt = bg.xq;
                    if let Some(gi) = bg.illum {
                        g_t_illum += &gi;
                    }
                }
                self.thermal_embed.as_ref().unwrap().backward(
                    &w,
                    &mut g,
                    &tc.thermal_input.as_ref().unwrap().view(),
                    &g_xt.view(),
                    false,
                );
                self.thermal_estimator.as_ref().unwrap().backward(
                    &w,
                    &mut g,
                    tc.thermal_est.as_ref().unwrap(),
                    Some(&g_t_illum),
                    None,
                );
                cg.xq
            }
            _ => g_fused,
        };

        let mut g_x = g_x;
        for (blk, bc) in self.rgb_blocks.iter().zip(&tc.rgb_blocks).rev() {
            let bg = blk.backward(&w, &mut g, bc, &g_x.view());
            g_x = bg.xq;
            if let Some(gi) = bg.illum {
                g_rgb_illum += &gi;
            }
        }
        let g_embed_in = self
            .rgb_embed
            .backward(&w, &mut g, &tc.embed_input.view(), &g_x.view(), true)
            .unwrap();
        g_lit += &g_embed_in.slice(s![.., ..3]);

        let g_map = if self.unit_illumination {
            None
        } else {
            Some(light_up_map_grad(&tc.rgb, &g_lit))
        };
        debug_assert_eq!(tc.rgb.nrows(), tc.height * tc.width);
        self.rgb_estimator
            .backward(&w, &mut g, &tc.rgb_est, Some(&g_rgb_illum), g_map.as_ref());
    }

    /// Pre-PCA features of each input pair, stacked row-wise, for fitting
    /// the projection.
    pub fn calibration_features<'a>(
        &self,
        store: &ParameterStore,
        pairs: impl IntoIterator<Item = (&'a FeatureMap, &'a FeatureMap)>,
    ) -> Result<Array2<f64>> {
        let mut rows = Vec::new();
        for (rgb, thermal) in pairs {
            let (trunk, _) = self.forward_trunk(store, rgb, thermal)?;
            rows.push(trunk.fused.into_data());
        }
        if rows.is_empty() {
            return Err(Error::Rank("no calibration inputs".into()));
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        Ok(concatenate(Axis(0), &views).unwrap())
    }
}
