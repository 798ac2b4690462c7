//! Scaled dot-product attention and the channel-token transformer block used
//! for both per-modality self-attention and RGB-thermal cross-attention.
//!
//! Tokens are feature channels: within a head, each channel is a token whose
//! descriptor is its flattened spatial map, so the attention matrix is
//! `d x d` with `d = C / heads` and cost stays linear in the pixel count.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::layers::{Builder, Linear};
use super::params::{GradSlots, Weights};
use super::tensor::{gelu, gelu_grad, sigmoid};
use crate::error::{Error, Result};

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

/// `softmax(Q K^T / sqrt(d_k)) V` for `Q, K: n x d_k` and `V: n x d_v`.
///
/// Returns the output together with the row-stochastic weight matrix.
pub fn attention(
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    v: &ArrayView2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (n, dk) = q.dim();
    if dk == 0 {
        return Err(Error::Shape("attention needs d_k >= 1".into()));
    }
    if k.dim() != (n, dk) || v.nrows() != n {
        return Err(Error::Shape(format!(
            "attention shapes Q {:?}, K {:?}, V {:?} do not conform",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    let scale = 1.0 / (dk as f64).sqrt();
    let logits = q.dot(&k.t()) * scale;
    let weights = softmax_rows(&logits.view());
    Ok((weights.dot(v), weights))
}

/// Gradients of [`attention`] with respect to `Q`, `K`, `V`.
pub fn attention_backward(
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    v: &ArrayView2<f64>,
    weights: &ArrayView2<f64>,
    g_out: &ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let g_weights = g_out.dot(&v.t());
    let g_v = weights.t().dot(g_out);
    let mut g_logits = g_weights;
    Zip::from(g_logits.rows_mut())
        .and(weights.rows())
        .for_each(|mut gr, wr| {
            let dot = gr.dot(&wr);
            Zip::from(&mut gr).and(&wr).for_each(|gv, &wv| *gv = wv * (*gv - dot));
        });
    g_logits *= scale;
    let g_q = g_logits.dot(k);
    let g_k = g_logits.t().dot(q);
    (g_q, g_k, g_v)
}

/// Transformer block over channel tokens.
///
/// `x1 = xq + proj(MHA(q(xq), k(xkv), v(xkv) * gate))`, `out = x1 + FFN(x1)`,
/// where the optional gate is `2 * sigmoid(phi(F_illum))`.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub channels: usize,
    pub heads: usize,
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub gate: Option<Linear>,
    pub proj: Linear,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

pub struct BlockCache {
    xq: Array2<f64>,
    xkv: Option<Array2<f64>>,
    illum: Option<Array2<f64>>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    gate: Option<Array2<f64>>,
    v_mod: Array2<f64>,
    weights: Vec<Array2<f64>>,
    attended: Array2<f64>,
    x1: Array2<f64>,
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
}

impl BlockCache {
    /// Per-head attention weight matrices of the last forward call.
    pub fn attention_weights(&self) -> &[Array2<f64>] {
        &self.weights
    }
}

pub struct BlockGrads {
    pub xq: Array2<f64>,
    /// `None` when keys/values came from the query stream.
    pub xkv: Option<Array2<f64>>,
    pub illum: Option<Array2<f64>>,
}

impl AttentionBlock {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        channels: usize,
        heads: usize,
        ffn_hidden: usize,
        illumination_gate: bool,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Parameter(format!(
                "{channels} channels are not divisible into {heads} heads"
            )));
        }
        let c = channels;
        Ok(Self {
            channels,
            heads,
            to_q: Linear::new(b, &format!("{name}.to_q"), c, c, false, false)?,
            to_k: Linear::new(b, &format!("{name}.to_k"), c, c, false, false)?,
            to_v: Linear::new(b, &format!("{name}.to_v"), c, c, false, false)?,
            gate: if illumination_gate {
                Some(Linear::new(b, &format!("{name}.illum_gate"), c, c, true, false)?)
            } else {
                None
            },
            proj: Linear::new(b, &format!("{name}.proj"), c, c, true, false)?,
            ffn_in: Linear::new(b, &format!("{name}.ffn_in"), c, ffn_hidden, true, false)?,
            ffn_out: Linear::new(b, &format!("{name}.ffn_out"), ffn_hidden, c, true, false)?,
        })
    }

    /// Closed-form parameter count.
    pub fn num_params(channels: usize, ffn_hidden: usize, illumination_gate: bool) -> usize {
        let c = channels;
        3 * c * c
            + if illumination_gate { c * c + c } else { 0 }
            + (c * c + c)
            + Linear::num_params(c, ffn_hidden, true)
            + Linear::num_params(ffn_hidden, c, true)
    }

    pub fn linears_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        [
            Some(&mut self.to_q),
            Some(&mut self.to_k),
            Some(&mut self.to_v),
            self.gate.as_mut(),
            Some(&mut self.proj),
            Some(&mut self.ffn_in),
            Some(&mut self.ffn_out),
        ]
        .into_iter()
        .flatten()
    }

    /// Runs the block. `xkv = None` means self-attention on `xq`.
    pub fn forward(
        &self,
        w: &Weights<'_>,
        xq: &ArrayView2<f64>,
        xkv: Option<&ArrayView2<f64>>,
        illum: Option<&ArrayView2<f64>>,
    ) -> Result<(Array2<f64>, BlockCache)> {
        let c = self.channels;
        super::tensor::check_cols(xq, c, "attention query input")?;
        let kv_src = xkv.unwrap_or(xq);
        super::tensor::check_cols(kv_src, c, "attention key/value input")?;
        if kv_src.nrows() != xq.nrows() {
            return Err(Error::Shape(format!(
                "query stream has {} pixels, key/value stream has {}",
                xq.nrows(),
                kv_src.nrows()
            )));
        }
        let q = self.to_q.forward(w, xq);
        let k = self.to_k.forward(w, kv_src);
        let v = self.to_v.forward(w, kv_src);
        let gate = match (&self.gate, illum) {
            (Some(layer), Some(f)) => {
                if f.dim() != xq.dim() {
                    return Err(Error::Shape(format!(
                        "illumination features {:?} do not match input {:?}",
                        f.dim(),
                        xq.dim()
                    )));
                }
                Some(layer.forward(w, f).mapv(|z| 2.0 * sigmoid(z)))
            }
            (Some(_), None) => {
                return Err(Error::Shape("illumination features required".into()))
            }
            (None, _) => None,
        };
        let v_mod = match &gate {
            Some(g) => &v * g,
            None => v.clone(),
        };

        let d = c / self.heads;
        let mut attended = Array2::<f64>::zeros(xq.raw_dim());
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * d..(h + 1) * d];
            let (out, wts) = attention(
                &q.slice(cols).t(),
                &k.slice(cols).t(),
                &v_mod.slice(cols).t(),
            )?;
            attended.slice_mut(cols).assign(&out.t());
            weights.push(wts);
        }
        let x1 = xq + &self.proj.forward(w, &attended.view());
        let hidden_pre = self.ffn_in.forward(w, &x1.view());
        let hidden = hidden_pre.mapv(gelu);
        let out = &x1 + &self.ffn_out.forward(w, &hidden.view());

        let cache = BlockCache {
            xq: xq.to_owned(),
            xkv: xkv.map(|x| x.to_owned()),
            illum: illum.filter(|_| self.gate.is_some()).map(|f| f.to_owned()),
            q,
            k,
            v,
            gate,
            v_mod,
            weights,
            attended,
            x1,
            hidden_pre,
            hidden,
        };
        Ok((out, cache))
    }

    pub fn backward(
        &self,
        w: &Weights<'_>,
        g: &mut GradSlots<'_>,
        cache: &BlockCache,
        g_out: &ArrayView2<f64>,
    ) -> BlockGrads {
        // FFN
        let g_hidden = self
            .ffn_out
            .backward(w, g, &cache.hidden.view(), g_out, true)
            .unwrap();
        let g_hidden_pre = &g_hidden * &cache.hidden_pre.mapv(gelu_grad);
        let mut g_x1 = self
            .ffn_in
            .backward(w, g, &cache.x1.view(), &g_hidden_pre.view(), true)
            .unwrap();
        g_x1 += g_out;

        // attention
        let g_attended = self
            .proj
            .backward(w, g, &cache.attended.view(), &g_x1.view(), true)
            .unwrap();
        let d = self.channels / self.heads;
        let mut g_q = Array2::<f64>::zeros(cache.q.raw_dim());
        let mut g_k = Array2::<f64>::zeros(cache.k.raw_dim());
        let mut g_vmod = Array2::<f64>::zeros(cache.v_mod.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * d..(h + 1) * d];
            let (gq, gk, gv) = attention_backward(
                &cache.q.slice(cols).t(),
                &cache.k.slice(cols).t(),
                &cache.v_mod.slice(cols).t(),
                &cache.weights[h].view(),
                &g_attended.slice(cols).t(),
            );
            g_q.slice_mut(cols).assign(&gq.t());
            g_k.slice_mut(cols).assign(&gk.t());
            g_vmod.slice_mut(cols).assign(&gv.t());
        }

        let (g_v, g_illum) = match (&self.gate, &cache.gate, &cache.illum) {
            (Some(layer), Some(gate), Some(illum)) => {
                let g_v = &g_vmod * gate;
                let mut g_z = &g_vmod * &cache.v;
                // d(2 sigmoid(z))/dz = gate * (1 - gate / 2)
                Zip::from(&mut g_z)
                    .and(gate)
                    .for_each(|gz, &gt| *gz *= gt * (1.0 - 0.5 * gt));
                let g_illum = layer.backward(w, g, &illum.view(), &g_z.view(), true);
                (g_v, g_illum)
            }
            _ => (g_vmod, None),
        };

        let kv_src = cache.xkv.as_ref().unwrap_or(&cache.xq).view();
        let mut g_xq = g_x1;
        g_xq += &self
            .to_q
            .backward(w, g, &cache.xq.view(), &g_q.view(), true)
            .unwrap();
        let mut g_kv = self.to_k.backward(w, g, &kv_src, &g_k.view(), true).unwrap();
        g_kv += &self.to_v.backward(w, g, &kv_src, &g_v.view(), true).unwrap();
        if cache.xkv.is_none() {
            g_xq += &g_kv;
            BlockGrads {
                xq: g_xq,
                xkv: None,
                illum: g_illum,
            }
        } else {
            BlockGrads {
                xq: g_xq,
                xkv: Some(g_kv),
                illum: g_illum,
            }
        }
    }
}

/// Sum of each row, for checking row-stochasticity.
pub fn row_sums(m: &Array2<f64>) -> Vec<f64> {
    m.sum_axis(Axis(1)).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    #[test]
    fn zero_queries_give_uniform_weights() {
        let q = Array2::<f64>::zeros((3, 2));
        let k = array![[1.0, 2.0], [-1.0, 0.5], [3.0, 3.0]];
        let v = array![[1.0, 0.0], [2.0, 4.0], [3.0, 8.0]];
        let (out, wts) = attention(&q.view(), &k.view(), &v.view()).unwrap();
        for wv in wts.iter() {
            assert!((wv - 1.0 / 3.0).abs() < 1e-15);
        }
        for r in 0..3 {
            assert!((out[[r, 0]] - 2.0).abs() < 1e-12);
            assert!((out[[r, 1]] - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_returns_values() {
        let q = array![[0.3, -2.0]];
        let k = array![[5.0, 1.0]];
        let v = array![[7.0, 8.0, 9.0]];
        let (out, _) = attention(&q.view(), &k.view(), &v.view()).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn two_token_hand_computed() {
        let q = array![[1.0], [0.0]];
        let k = array![[1.0], [0.0]];
        let v = array![[1.0, 0.0], [0.0, 1.0]];
        let (out, wts) = attention(&q.view(), &k.view(), &v.view()).unwrap();
        let e = std::f64::consts::E;
        assert!((wts[[0, 0]] - e / (e + 1.0)).abs() < 1e-15);
        assert!((out[[0, 0]] - 0.7311).abs() < 1e-4);
        assert!((out[[0, 1]] - 0.2689).abs() < 1e-4);
        assert!((out[[1, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let q = Array2::<f64>::zeros((3, 2));
        let k = Array2::<f64>::zeros((3, 3));
        let v = Array2::<f64>::zeros((3, 1));
        assert!(matches!(attention(&q.view(), &k.view(), &v.view()), Err(Error::Shape(_))));
        let v = Array2::<f64>::zeros((2, 1));
        assert!(attention(&q.view(), &q.view(), &v.view()).is_err());
    }

    #[test]
    fn huge_logits_stay_finite() {
        let q = array![[1e4], [-1e4]];
        let k = array![[1e4], [1.0]];
        let v = array![[1.0], [2.0]];
        let (out, wts) = attention(&q.view(), &k.view(), &v.view()).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
        for s in row_sums(&wts) {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut m = |r, c| Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
        let (q, k, v, r) = (m(3, 4), m(3, 4), m(3, 2), m(3, 2));
        let f = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| {
            (attention(&q.view(), &k.view(), &v.view()).unwrap().0 * &r).sum()
        };
        let (_, wts) = attention(&q.view(), &k.view(), &v.view()).unwrap();
        let (gq, gk, gv) = attention_backward(&q.view(), &k.view(), &v.view(), &wts.view(), &r.view());
        let eps = 1e-6;
        for (which, grad) in [(0, &gq), (1, &gk), (2, &gv)] {
            for idx in ndarray::indices(grad.raw_dim()) {
                let bump = |delta: f64| {
                    let (mut q2, mut k2, mut v2) = (q.clone(), k.clone(), v.clone());
                    match which {
                        0 => q2[idx] += delta,
                        1 => k2[idx] += delta,
                        _ => v2[idx] += delta,
                    }
                    f(&q2, &k2, &v2)
                };
                let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
                assert!((fd - grad[idx]).abs() < 1e-8, "{which} {idx:?}");
            }
        }
    }
}
