use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// An `H x W x C` activation tensor stored as a `(H*W) x C` matrix,
/// one row per pixel in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    data: Array2<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, data: Array2<f64>) -> Result<Self> {
        if data.nrows() != height * width {
            return Err(Error::Shape(format!(
                "{} rows for a {height}x{width} map",
                data.nrows()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let data = Array2::from_shape_vec((height * width, channels), data)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(height, width, data)
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            data: Array2::zeros((height * width, channels)),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn pixels(&self) -> usize {
        self.data.nrows()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[[y * self.width + x, c]]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_spatial(&self, other: &FeatureMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Stacks channels of `self` followed by `other`.
    pub fn concat_channels(&self, other: &FeatureMap) -> Result<FeatureMap> {
        if !self.same_spatial(other) {
            return Err(Error::Shape(format!(
                "cannot concatenate {}x{} with {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let data = concatenate(Axis(1), &[self.data.view(), other.data.view()])
            .expect("row counts agree");
        FeatureMap::new(self.height, self.width, data)
    }

    pub fn select_channels(&self, start: usize, end: usize) -> FeatureMap {
        FeatureMap {
            height: self.height,
            width: self.width,
            data: self.data.slice(s![.., start..end]).to_owned(),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn check_cols(x: &ArrayView2<f64>, expected: usize, what: &str) -> Result<()> {
    if x.ncols() != expected {
        return Err(Error::Shape(format!(
            "{what}: expected {expected} channels, got {}",
            x.ncols()
        )));
    }
    Ok(())
}
