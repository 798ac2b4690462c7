//! Finite-difference verification of the analytic backward pass.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::mae_with_grad;
use crate::error::Result;
use crate::model::{pca_fit, FeatureMap, ModelConfig, Network, ParameterStore, PcaProjection, Variant};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Central-difference step.
    pub step: f64,
    /// Side length of the random input pair.
    pub size: usize,
    /// Tensors with more scalars than this are checked on a random subset
    /// of this many entries (always including the largest analytic entry).
    pub max_entries_per_param: usize,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            step: 1e-5,
            size: 8,
            max_entries_per_param: 16,
            seed: 0,
            variant: Variant::CrossAttention,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradRow {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub tolerance: f64,
    pub rows: Vec<GradRow>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradRow> {
        self.rows.iter().filter(|r| !r.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for r in &self.rows {
            writeln!(
                f,
                "{:<40} {:>6} {:>12.3e} {}",
                r.name,
                r.entries_checked,
                r.max_rel_error,
                if r.passed { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "{} parameters, max relative error {:.3e}, tolerance {:.1e}: {}",
            self.rows.len(),
            self.max_rel_error(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps entries whose true
/// gradient is zero from dividing round-off by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `analytic` (which must fill the store's gradients) with central
/// differences of `loss` for every named tensor in `store`.
pub fn check_gradients(
    store: &mut ParameterStore,
    opts: &GradCheckOptions,
    mut loss: impl FnMut(&ParameterStore) -> Result<f64>,
    analytic: impl FnOnce(&mut ParameterStore) -> Result<()>,
) -> Result<GradReport> {
    store.zero_grads();
    analytic(store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut rows = Vec::with_capacity(store.len());
    for id in store.ids().collect::<Vec<_>>() {
        let grads = store.grad(id).to_vec();
        let n = grads.len();
        let entries: Vec<usize> = if n <= opts.max_entries_per_param {
            (0..n).collect()
        } else {
            let argmax = (0..n)
                .max_by(|&a, &b| grads[a].abs().total_cmp(&grads[b].abs()))
                .unwrap();
            let mut e: Vec<usize> = sample(&mut rng, n, opts.max_entries_per_param - 1).into_vec();
            if !e.contains(&argmax) {
                e.push(argmax);
            }
            e.sort_unstable();
            e
        };
        let mut worst = 0.0f64;
        for &i in &entries {
            let orig = store.values(id)[i];
            store.values_mut(id)[i] = orig + opts.step;
            let up = loss(store)?;
            store.values_mut(id)[i] = orig - opts.step;
            let down = loss(store)?;
            store.values_mut(id)[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let err = relative_error(grads[i], numeric);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
        rows.push(GradRow {
            name: store.name(id).to_string(),
            entries_checked: entries.len(),
            max_rel_error: worst,
            passed: worst < opts.tolerance,
        });
    }
    Ok(GradReport {
        tolerance: opts.tolerance,
        rows,
    })
}

fn random_pair(rng: &mut ChaCha8Rng, size: usize) -> (FeatureMap, FeatureMap) {
    let rgb = FeatureMap::from_vec(size, size, 3, (0..size * size * 3).map(|_| rng.random()).collect())
        .expect("consistent dims");
    let th = FeatureMap::from_vec(size, size, 1, (0..size * size).map(|_| rng.random()).collect())
        .expect("consistent dims");
    (rgb, th)
}

/// Checks `net` end to end on a random input pair.
///
/// Every parameter, including those whose initial value is zero, is drawn at
/// random so no gradient path is trivially inactive. The PCA projection is
/// fitted on a few extra random pairs. The MAE target is the initial output
/// shifted by at least 0.2 per element, keeping every residual far from the
/// kink of the absolute value.
pub fn gradient_check_network(net: &Network, store: &mut ParameterStore, opts: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for id in store.ids().collect::<Vec<_>>() {
        let fan_in = *store.meta(id).shape.last().unwrap_or(&1) as f64;
        let bound = 1.0 / fan_in.max(1.0).sqrt();
        store
            .values_mut(id)
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-bound..=bound));
    }
    let cfg = net.config();
    let width = cfg.fusion_width(net.variant());
    let calib_pairs = (2 * width).div_ceil(opts.size * opts.size).max(2);
    let calib: Vec<_> = (0..calib_pairs).map(|_| random_pair(&mut rng, opts.size)).collect();
    let features = net.calibration_features(store, calib.iter().map(|(a, b)| (a, b)))?;
    let proj: PcaProjection = pca_fit(&features.view(), cfg.fused_channels)?;

    let (rgb, th) = random_pair(&mut rng, opts.size);
    let (out0, _) = net.forward(store, &proj, &rgb, &th)?;
    let shift = Array2::from_shape_fn(out0.data().raw_dim(), |_| {
        let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
        s * rng.random_range(0.2..0.5)
    });
    let target = FeatureMap::new(opts.size, opts.size, out0.data() + &shift)?;

    let loss = |s: &ParameterStore| -> Result<f64> {
        let (out, _) = net.forward(s, &proj, &rgb, &th)?;
        Ok(mae_with_grad(&out, &target, None)?.0)
    };
    let analytic = |s: &mut ParameterStore| -> Result<()> {
        let (out, cache) = net.forward(s, &proj, &rgb, &th)?;
        let (_, g) = mae_with_grad(&out, &target, None)?;
        net.backward(s, &proj, &cache, &g);
        Ok(())
    };
    check_gradients(store, opts, loss, analytic)
}

pub fn gradient_check(cfg: &ModelConfig, opts: &GradCheckOptions) -> Result<GradReport> {
    let (net, mut store) = Network::new(*cfg, opts.variant)?;
    gradient_check_network(&net, &mut store, opts)
}
