//! Aligned random crops and dihedral augmentation of training triples.

use rand::Rng;

use crate::error::{Error, Result};
use crate::imageio::{Image, ThermalImage};

/// Low-light RGB, thermal and reference frames that share one pixel grid,
/// plus an optional per-pixel loss weight.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTriple {
    pub rgb: Image,
    pub thermal: ThermalImage,
    pub gt: Image,
    pub mask: Option<ThermalImage>,
}

impl PatchTriple {
    pub fn new(rgb: Image, thermal: ThermalImage, gt: Image, mask: Option<ThermalImage>) -> Result<Self> {
        let (h, w) = (rgb.height(), rgb.width());
        let aligned = thermal.height() == h
            && thermal.width() == w
            && gt.height() == h
            && gt.width() == w
            && mask.as_ref().is_none_or(|m| m.height() == h && m.width() == w);
        if !aligned {
            return Err(Error::Shape(format!(
                "RGB {h}x{w}, thermal {}x{}, reference {}x{} are not aligned",
                thermal.height(),
                thermal.width(),
                gt.height(),
                gt.width()
            )));
        }
        Ok(Self { rgb, thermal, gt, mask })
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }

    pub fn width(&self) -> usize {
        self.rgb.width()
    }
}

fn crop_buf(data: &[f64], width: usize, channels: usize, y0: usize, x0: usize, patch: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(patch * patch * channels);
    for y in y0..y0 + patch {
        let start = (y * width + x0) * channels;
        out.extend_from_slice(&data[start..start + patch * channels]);
    }
    out
}

/// Crops the same `patch x patch` window out of every frame. Returns the
/// crop and its top-left corner `(y, x)`.
pub fn sample_patch<R: Rng>(triple: &PatchTriple, patch: usize, rng: &mut R) -> Result<(PatchTriple, (usize, usize))> {
    let (h, w) = (triple.height(), triple.width());
    if patch == 0 || patch > h || patch > w {
        return Err(Error::Size(format!("cannot crop a {patch}x{patch} patch from a {h}x{w} image")));
    }
    let y0 = rng.random_range(0..=h - patch);
    let x0 = rng.random_range(0..=w - patch);
    Ok((crop(triple, y0, x0, patch)?, (y0, x0)))
}

pub fn crop(triple: &PatchTriple, y0: usize, x0: usize, patch: usize) -> Result<PatchTriple> {
    let w = triple.width();
    if y0 + patch > triple.height() || x0 + patch > w {
        return Err(Error::Size(format!("window at ({y0}, {x0}) of size {patch} leaves the image")));
    }
    PatchTriple::new(
        Image::new(patch, patch, crop_buf(triple.rgb.data(), w, 3, y0, x0, patch))?,
        ThermalImage::new(patch, patch, crop_buf(triple.thermal.data(), w, 1, y0, x0, patch))?,
        Image::new(patch, patch, crop_buf(triple.gt.data(), w, 3, y0, x0, patch))?,
        triple
            .mask
            .as_ref()
            .map(|m| ThermalImage::new(patch, patch, crop_buf(m.data(), w, 1, y0, x0, patch)))
            .transpose()?,
    )
}

/// One of the eight symmetries of the square: `rotation` quarter turns
/// counter-clockwise, then an optional left-right mirror.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dihedral {
    pub rotation: u8,
    pub mirror: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        rotation: 0,
        mirror: false,
    };

    pub fn from_index(k: u8) -> Self {
        Self {
            rotation: k % 4,
            mirror: k >= 4,
        }
    }

    pub fn index(self) -> u8 {
        self.rotation % 4 + if self.mirror { 4 } else { 0 }
    }

    pub fn output_dims(self, h: usize, w: usize) -> (usize, usize) {
        if self.rotation % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Destination of source pixel `(y, x)` in an `h x w` frame.
    pub fn map(self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        let (ry, rx) = match self.rotation % 4 {
            0 => (y, x),
            1 => (w - 1 - x, y),
            2 => (h - 1 - y, w - 1 - x),
            _ => (x, h - 1 - y),
        };
        if self.mirror {
            let (_, ow) = self.output_dims(h, w);
            (ry, ow - 1 - rx)
        } else {
            (ry, rx)
        }
    }

    fn apply_buf(self, data: &[f64], h: usize, w: usize, channels: usize) -> Result<Vec<f64>> {
        if self.rotation % 2 == 1 && h != w {
            return Err(Error::Size(format!("quarter-turn of a non-square {h}x{w} patch")));
        }
        let (_, ow) = self.output_dims(h, w);
        let mut out = vec![0.0; data.len()];
        for y in 0..h {
            for x in 0..w {
                let (ty, tx) = self.map(y, x, h, w);
                let src = (y * w + x) * channels;
                let dst = (ty * ow + tx) * channels;
                out[dst..dst + channels].copy_from_slice(&data[src..src + channels]);
            }
        }
        Ok(out)
    }

    pub fn apply_image(self, img: &Image) -> Result<Image> {
        let (h, w) = (img.height(), img.width());
        let (oh, ow) = self.output_dims(h, w);
        Image::new(oh, ow, self.apply_buf(img.data(), h, w, 3)?)
    }

    pub fn apply_thermal(self, img: &ThermalImage) -> Result<ThermalImage> {
        let (h, w) = (img.height(), img.width());
        let (oh, ow) = self.output_dims(h, w);
        ThermalImage::new(oh, ow, self.apply_buf(img.data(), h, w, 1)?)
    }

    pub fn apply(self, t: &PatchTriple) -> Result<PatchTriple> {
        PatchTriple::new(
            self.apply_image(&t.rgb)?,
            self.apply_thermal(&t.thermal)?,
            self.apply_image(&t.gt)?,
            t.mask.as_ref().map(|m| self.apply_thermal(m)).transpose()?,
        )
    }
}

/// Applies one uniformly drawn dihedral transform to all frames.
pub fn augment<R: Rng>(triple: &PatchTriple, rng: &mut R) -> Result<(PatchTriple, Dihedral)> {
    let g = Dihedral::from_index(rng.random_range(0..8u8));
    Ok((g.apply(triple)?, g))
}
