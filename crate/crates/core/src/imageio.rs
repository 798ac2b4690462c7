//! PNG loading and saving for RGB and thermal frames.
//!
//! Pixels are stored as `f64` in `[0, 1]`, row-major and channel-last. An
//! integer sample `p` of bit depth `b` maps to `p / (2^b - 1)`; saving clamps
//! to `[0, 1]` and quantizes to 8 bits with round-half-up.

use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};

use crate::error::{Error, Result};
use crate::model::FeatureMap;

/// Smallest height or width an [`Image`] may have.
pub const MIN_IMAGE_DIM: usize = 8;

/// An `H x W x 3` RGB frame with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// An `H x W x 1` thermal frame with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermalImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

fn check_unit_range(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        Some(i) => Err(Error::Format(format!(
            "element {i} = {} is outside [0, 1]",
            data[i]
        ))),
        None => Ok(()),
    }
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height < MIN_IMAGE_DIM || width < MIN_IMAGE_DIM {
            return Err(Error::Size(format!(
                "image is {height}x{width}, minimum is {MIN_IMAGE_DIM}x{MIN_IMAGE_DIM}"
            )));
        }
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::Shape(format!(
                "expected {} values for a {height}x{width}x3 image, got {}",
                height * width * Self::CHANNELS,
                data.len()
            )));
        }
        check_unit_range(&data)?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image from `f(y, x, c)`, clamping each value into `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        Self::new(height, width, data)
    }

    /// Clamps a feature map with three channels into a valid image.
    pub fn from_feature_map(fm: &FeatureMap) -> Result<Self> {
        if fm.channels() != 3 {
            return Err(Error::Shape(format!(
                "expected 3 channels, got {}",
                fm.channels()
            )));
        }
        let data = fm
            .data()
            .iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(fm.height(), fm.width(), data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn to_feature_map(&self) -> FeatureMap {
        FeatureMap::from_vec(self.height, self.width, 3, self.data.clone())
            .expect("image dimensions are consistent")
    }
}

impl ThermalImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "expected {} values for a {height}x{width} thermal image, got {}",
                height * width,
                data.len()
            )));
        }
        check_unit_range(&data)?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x).clamp(0.0, 1.0));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn to_feature_map(&self) -> FeatureMap {
        FeatureMap::from_vec(self.height, self.width, 1, self.data.clone())
            .expect("thermal dimensions are consistent")
    }
}

fn decode_png(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = reader;
    reader.set_format(ImageFormat::Png);
    reader
        .decode()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Loads an 8- or 16-bit three-channel PNG.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = decode_png(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageRgb8(buf) => buf
            .into_raw()
            .into_iter()
            .map(|p| f64::from(p) / 255.0)
            .collect(),
        DynamicImage::ImageRgb16(buf) => buf
            .into_raw()
            .into_iter()
            .map(|p| f64::from(p) / 65535.0)
            .collect(),
        other => {
            return Err(Error::Format(format!(
                "{}: expected a 3-channel image, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Image::new(h, w, data)
}

/// Loads a single-channel PNG, or a three-channel PNG whose channels agree
/// to within one least-significant bit (averaged).
pub fn load_thermal(path: impl AsRef<Path>) -> Result<ThermalImage> {
    let path = path.as_ref();
    let img = decode_png(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma8(buf) => buf
            .into_raw()
            .into_iter()
            .map(|p| f64::from(p) / 255.0)
            .collect(),
        DynamicImage::ImageLuma16(buf) => buf
            .into_raw()
            .into_iter()
            .map(|p| f64::from(p) / 65535.0)
            .collect(),
        DynamicImage::ImageRgb8(buf) => {
            average_gray(path, buf.as_raw().iter().map(|&p| u32::from(p)), 255.0)?
        }
        DynamicImage::ImageRgb16(buf) => {
            average_gray(path, buf.as_raw().iter().map(|&p| u32::from(p)), 65535.0)?
        }
        other => {
            return Err(Error::Format(format!(
                "{}: expected a grayscale image, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    ThermalImage::new(h, w, data)
}

fn average_gray(path: &Path, samples: impl Iterator<Item = u32>, full_scale: f64) -> Result<Vec<f64>> {
    let samples: Vec<u32> = samples.collect();
    samples
        .chunks_exact(3)
        .enumerate()
        .map(|(i, px)| {
            let lo = px.iter().min().unwrap();
            let hi = px.iter().max().unwrap();
            if hi - lo > 1 {
                return Err(Error::Format(format!(
                    "{}: pixel {i} has channels {px:?}, not grayscale",
                    path.display()
                )));
            }
            Ok(f64::from(px[0] + px[1] + px[2]) / 3.0 / full_scale)
        })
        .collect()
}

/// Round-half-up 8-bit quantization of a clamped value.
pub fn quantize_u8(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

fn write_png(path: &Path, buf: DynamicImage) -> Result<()> {
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}

/// Writes an 8-bit RGB PNG.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize_u8(v)).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .expect("buffer length matches dimensions");
    write_png(path.as_ref(), DynamicImage::ImageRgb8(buf))
}

/// Writes an 8-bit grayscale PNG.
pub fn save_thermal(img: &ThermalImage, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize_u8(v)).collect();
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, bytes)
        .expect("buffer length matches dimensions");
    write_png(path.as_ref(), DynamicImage::ImageLuma8(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{ImageBuffer, Luma, Rgb, Rgba};
    use proptest::prelude::*;

    #[test]
    fn eight_bit_extremes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let mut buf = image::RgbImage::new(8, 8);
        buf.put_pixel(0, 0, Rgb([255, 0, 128]));
        buf.save(&p).unwrap();
        let img = load_rgb(&p).unwrap();
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(0, 0, 1), 0.0);
        assert_eq!(img.get(0, 0, 2), 128.0 / 255.0);
        assert_eq!((img.height(), img.width()), (8, 8));
    }

    #[test]
    fn sixteen_bit_half_scale() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a16.png");
        let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
            ImageBuffer::from_pixel(9, 8, Rgb([32768, 0, 65535]));
        buf.save(&p).unwrap();
        let img = load_rgb(&p).unwrap();
        assert!((img.get(3, 4, 0) - 0.500008).abs() < 1e-6);
        assert_eq!(img.get(3, 4, 0), 32768.0 / 65535.0);
        assert_eq!(img.width(), 9);
    }

    #[test]
    fn rgb_rejects_other_channel_counts() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgba.png");
        let buf: ImageBuffer<Rgba<u8>, Vec<u8>> = ImageBuffer::from_pixel(8, 8, Rgba([1, 2, 3, 4]));
        buf.save(&p).unwrap();
        assert!(matches!(load_rgb(&p), Err(Error::Format(_))));
        let p = dir.path().join("gray.png");
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_pixel(8, 8, Luma([3]));
        buf.save(&p).unwrap();
        assert!(matches!(load_rgb(&p), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_rgb("/nonexistent/x.png"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn thermal_variants() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.png");
        ImageBuffer::<Luma<u8>, _>::from_pixel(4, 4, Luma([128u8]))
            .save(&p)
            .unwrap();
        assert_eq!(load_thermal(&p).unwrap().get(1, 1), 128.0 / 255.0);

        ImageBuffer::<Rgb<u8>, _>::from_pixel(4, 4, Rgb([200u8, 200, 200]))
            .save(&p)
            .unwrap();
        assert_eq!(load_thermal(&p).unwrap().get(2, 3), 200.0 / 255.0);

        ImageBuffer::<Rgb<u8>, _>::from_pixel(4, 4, Rgb([200u8, 201, 200]))
            .save(&p)
            .unwrap();
        assert!(load_thermal(&p).is_ok());

        ImageBuffer::<Rgb<u8>, _>::from_pixel(4, 4, Rgb([10u8, 200, 10]))
            .save(&p)
            .unwrap();
        assert!(matches!(load_thermal(&p), Err(Error::Format(_))));
    }

    #[test]
    fn quantization_rule() {
        assert_eq!(quantize_u8(1.0), 255);
        assert_eq!(quantize_u8(0.5), 128);
        assert_eq!(quantize_u8(1.7), 255);
        assert_eq!(quantize_u8(-0.2), 0);
    }

    #[test]
    fn image_invariants() {
        assert!(matches!(Image::new(4, 8, vec![0.0; 96]), Err(Error::Size(_))));
        assert!(Image::new(8, 8, vec![0.5; 191]).is_err());
        let mut d = vec![0.5; 192];
        d[7] = f64::NAN;
        assert!(Image::new(8, 8, d).is_err());
    }

    #[test]
    fn loading_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let img = Image::from_fn(8, 10, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f64 / 10.0).unwrap();
        save_image(&img, &p).unwrap();
        let a = load_rgb(&p).unwrap();
        let b = load_rgb(&p).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn save_load_round_trip(h in 8usize..14, w in 8usize..14, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let img = Image::from_fn(h, w, |_, _, _| rng.random::<f64>()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("rt.png");
            save_image(&img, &p).unwrap();
            let back = load_rgb(&p).unwrap();
            let worst = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            // tiny slack for the rounding of 255 * x in floating point
            prop_assert!(worst <= 1.0 / 510.0 + 1e-12, "worst = {}", worst);
        }
    }
}
