//! Principal-component channel reduction of the fused RGB-thermal features.
//!
//! The projection is fitted once on calibration features and then used as a
//! fixed linear map; gradients pass through it but never update it.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::tensor::FeatureMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub mean: Array1<f64>,
    /// `C_f x C_in`, orthonormal rows in descending-variance order.
    pub basis: Array2<f64>,
    pub explained_variance_fraction: f64,
}

impl PcaProjection {
    /// Projection onto the first `out` coordinate axes with zero mean.
    pub fn identity(in_channels: usize, out: usize) -> Self {
        let mut basis = Array2::zeros((out, in_channels));
        for i in 0..out.min(in_channels) {
            basis[[i, i]] = 1.0;
        }
        Self {
            mean: Array1::zeros(in_channels),
            basis,
            explained_variance_fraction: out as f64 / in_channels as f64,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.basis.ncols()
    }

    pub fn out_channels(&self) -> usize {
        self.basis.nrows()
    }
}

/// Fits the top-`out_channels` principal directions of `samples`
/// (one sample per row).
pub fn pca_fit(samples: &ArrayView2<f64>, out_channels: usize) -> Result<PcaProjection> {
    let (n, c_in) = samples.dim();
    if out_channels == 0 || out_channels > c_in {
        return Err(Error::Parameter(format!(
            "cannot keep {out_channels} of {c_in} channels"
        )));
    }
    if n < c_in.max(2) {
        return Err(Error::Rank(format!(
            "{n} samples are not enough to fit {c_in} channels"
        )));
    }
    let mean = samples.mean_axis(Axis(0)).unwrap();
    let centered = samples - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(DMatrix::from_fn(c_in, c_in, |i, j| cov[[i, j]]));

    let mut order: Vec<usize> = (0..c_in).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let eigvals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = eigvals.iter().sum();
    let kept: f64 = eigvals[..out_channels].iter().sum();

    let mut basis = Array2::zeros((out_channels, c_in));
    for (row, &col) in order[..out_channels].iter().enumerate() {
        let v = eig.eigenvectors.column(col);
        // sign convention: largest-magnitude component positive
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        let norm = v.norm();
        for j in 0..c_in {
            basis[[row, j]] = sign * v[j] / norm;
        }
    }
    let explained_variance_fraction = if total > 0.0 {
        (kept / total).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok(PcaProjection {
        mean,
        basis,
        explained_variance_fraction,
    })
}

/// Per pixel: `basis * (x - mean)`.
pub fn pca_reduce(x: &FeatureMap, proj: &PcaProjection) -> Result<FeatureMap> {
    if x.channels() != proj.in_channels() {
        return Err(Error::Shape(format!(
            "projection expects {} channels, got {}",
            proj.in_channels(),
            x.channels()
        )));
    }
    let out = (x.data() - &proj.mean).dot(&proj.basis.t());
    FeatureMap::new(x.height(), x.width(), out)
}

pub(crate) fn pca_reduce_backward(proj: &PcaProjection, g_out: &Array2<f64>) -> Array2<f64> {
    g_out.dot(&proj.basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    #[test]
    fn rank_one_line() {
        let dir = [0.6, 0.8];
        let samples = Array2::from_shape_fn((50, 2), |(i, j)| (i as f64 - 20.0) * 0.1 * dir[j]);
        let p = pca_fit(&samples.view(), 1).unwrap();
        let cos = p.basis[[0, 0]] * dir[0] + p.basis[[0, 1]] * dir[1];
        assert!(cos.abs() > 1.0 - 1e-12);
        assert!((p.explained_variance_fraction - 1.0).abs() < 1e-12);
    }

    #[test]
    fn isotropic_half_explained() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let samples = Array2::from_shape_fn((10_000, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let p = pca_fit(&samples.view(), 2).unwrap();
        assert!((p.explained_variance_fraction - 0.5).abs() < 0.05);
    }

    #[test]
    fn fraction_is_monotone_and_basis_orthonormal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let samples = Array2::from_shape_fn((300, 6), |(_, j)| rng.random::<f64>() * (j + 1) as f64);
        let mut last = 0.0;
        for k in 1..=6 {
            let p = pca_fit(&samples.view(), k).unwrap();
            assert!(p.explained_variance_fraction >= last - 1e-15);
            last = p.explained_variance_fraction;
            let gram = p.basis.dot(&p.basis.t());
            for i in 0..k {
                for j in 0..k {
                    let target = if i == j { 1.0 } else { 0.0 };
                    assert!((gram[[i, j]] - target).abs() < 1e-10);
                }
            }
        }
        assert!((last - 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let few = Array2::<f64>::zeros((3, 4));
        assert!(matches!(pca_fit(&few.view(), 2), Err(Error::Rank(_))));
        let ok = Array2::<f64>::zeros((8, 4));
        assert!(pca_fit(&ok.view(), 5).is_err());
        let x = FeatureMap::zeros(2, 2, 3);
        assert!(matches!(pca_reduce(&x, &PcaProjection::identity(4, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn reduce_cases() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let samples = Array2::from_shape_fn((40, 4), |_| rng.random::<f64>());
        let p = pca_fit(&samples.view(), 2).unwrap();

        let at_mean = FeatureMap::new(2, 2, Array2::from_shape_fn((4, 4), |(_, j)| p.mean[j])).unwrap();
        assert!(pca_reduce(&at_mean, &p).unwrap().data().iter().all(|v| v.abs() < 1e-15));

        let x = FeatureMap::from_vec(2, 2, 4, (0..16).map(|_| rng.random::<f64>()).collect()).unwrap();
        let id = pca_reduce(&x, &PcaProjection::identity(4, 2)).unwrap();
        assert_eq!(id, x.select_channels(0, 2));

        let got = pca_reduce(&x, &p).unwrap();
        for px in 0..4 {
            for r in 0..2 {
                let mut acc = 0.0;
                for j in 0..4 {
                    acc += p.basis[[r, j]] * (x.data()[[px, j]] - p.mean[j]);
                }
                assert!((acc - got.data()[[px, r]]).abs() < 1e-10);
            }
        }
    }
}
