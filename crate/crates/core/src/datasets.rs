//! Dataset manifests, subsetting, exposure-stack pairing and homography
//! alignment of thermal frames.
//!
//! A manifest is a JSON-lines file. The first line is a header
//! `{"format_version":1,"split":"train"}`; every following non-blank line is
//! one row:
//!
//! ```text
//! {"id":"0001","rgb_low":"low/0001.png","thermal":"ir/0001.png","rgb_ref":"ref/0001.png",
//!  "homography":[h00,h01,h02,h10,h11,h12,h20,h21,h22]}
//! ```
//!
//! `homography` maps thermal pixel coordinates `(x, y, 1)` to RGB pixel
//! coordinates and is optional (identity alignment). `mask` (a grayscale PNG
//! of per-pixel loss weights) and `exposure_factor` are optional as well.
//! Relative paths are resolved against the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{load_rgb, load_thermal, ThermalImage};
use crate::training::sampling::PatchTriple;

pub const MANIFEST_VERSION: u32 = 1;
const MIN_ABS_DET: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub id: String,
    pub rgb_low: PathBuf,
    pub thermal: PathBuf,
    pub rgb_ref: PathBuf,
    /// Row-major thermal-to-RGB homography.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homography: Option<[f64; 9]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exposure_factor: Option<f64>,
}

impl ManifestRow {
    pub fn new(id: impl Into<String>, rgb_low: impl Into<PathBuf>, thermal: impl Into<PathBuf>, rgb_ref: impl Into<PathBuf>) -> Self {
        Self {
            id: id.into(),
            rgb_low: rgb_low.into(),
            thermal: thermal.into(),
            rgb_ref: rgb_ref.into(),
            homography: None,
            mask: None,
            exposure_factor: None,
        }
    }

    pub fn homography_matrix(&self) -> Option<Matrix3<f64>> {
        self.homography.map(|h| Matrix3::from_row_slice(&h))
    }

    fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::Validation {
            row: self.id.clone(),
            message,
        };
        if self.id.is_empty() {
            return Err(fail("empty id".into()));
        }
        for (name, p) in [("rgb_low", &self.rgb_low), ("thermal", &self.thermal), ("rgb_ref", &self.rgb_ref)] {
            if p.as_os_str().is_empty() {
                return Err(fail(format!("empty {name} path")));
            }
        }
        if let Some(h) = self.homography {
            if h.iter().any(|v| !v.is_finite()) {
                return Err(fail("homography has non-finite entries".into()));
            }
            let det = Matrix3::from_row_slice(&h).determinant();
            if det.abs() <= MIN_ABS_DET {
                return Err(fail(format!("homography is singular (det = {det:e})")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub split: Split,
    pub rows: Vec<ManifestRow>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    split: Split,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn relativize(base: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
}

impl Manifest {
    pub fn new(split: Split, rows: Vec<ManifestRow>) -> Result<Self> {
        let m = Self { split, rows };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for row in &self.rows {
            row.validate()?;
            if !seen.insert(row.id.as_str()) {
                return Err(Error::Validation {
                    row: row.id.clone(),
                    message: "duplicate id".into(),
                });
            }
        }
        Ok(())
    }

    /// Parses manifest text, resolving relative paths against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::Format("manifest has no header line".into()))?;
        let header: Header =
            serde_json::from_str(first).map_err(|e| Error::Format(format!("manifest header: {e}")))?;
        if header.format_version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "unsupported manifest format_version {}",
                header.format_version
            )));
        }
        let mut rows = Vec::new();
        for (n, line) in lines {
            let mut row: ManifestRow = serde_json::from_str(line).map_err(|e| Error::Validation {
                row: format!("line {}", n + 1),
                message: e.to_string(),
            })?;
            for p in [&mut row.rgb_low, &mut row.thermal, &mut row.rgb_ref] {
                if !p.as_os_str().is_empty() {
                    *p = resolve(base, p);
                }
            }
            if let Some(m) = row.mask.as_mut() {
                *m = resolve(base, m);
            }
            rows.push(row);
        }
        Self::new(header.split, rows)
    }

    /// Serializes with paths inside `base` written relative to it.
    pub fn to_text(&self, base: &Path) -> String {
        let header = Header {
            format_version: MANIFEST_VERSION,
            split: self.split,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for row in &self.rows {
            let mut r = row.clone();
            for p in [&mut r.rgb_low, &mut r.thermal, &mut r.rgb_ref] {
                *p = relativize(base, p);
            }
            if let Some(m) = r.mask.as_mut() {
                *m = relativize(base, m);
            }
            out.push_str(&serde_json::to_string(&r).expect("row serializes"));
            out.push('\n');
        }
        out
    }
}

fn manifest_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Manifest::parse(&text, &manifest_dir(path))
}

pub fn write_manifest(m: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    m.validate()?;
    std::fs::write(path, m.to_text(&manifest_dir(path))).map_err(|e| Error::io(path, e))
}

/// Items at indices `0, stride, 2 stride, ...`.
pub fn select_subset<T: Clone>(items: &[T], stride: usize) -> Result<Vec<T>> {
    if stride == 0 {
        return Err(Error::Parameter("stride must be at least 1".into()));
    }
    Ok(items.iter().step_by(stride).cloned().collect())
}

/// Inverse bilinear warp of a thermal frame onto an `out_size = (height,
/// width)` grid. `h` maps source pixel coordinates `(x, y, 1)` to output
/// coordinates.
///
/// Returns the warped frame and a validity mask that is 1 where the sample
/// point lies inside the source frame and 0 elsewhere. Neighbours outside
/// the source contribute 0.
pub fn warp_homography(
    t: &ThermalImage,
    h: &Matrix3<f64>,
    out_size: (usize, usize),
) -> Result<(ThermalImage, ThermalImage)> {
    if !h.iter().all(|v| v.is_finite()) || h.determinant().abs() <= MIN_ABS_DET {
        return Err(Error::Parameter("homography is singular".into()));
    }
    let inv = h
        .try_inverse()
        .ok_or_else(|| Error::Parameter("homography is singular".into()))?;
    let (oh, ow) = out_size;
    let (sh, sw) = (t.height() as isize, t.width() as isize);
    let sample = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= sh || x >= sw {
            0.0
        } else {
            t.get(y as usize, x as usize)
        }
    };
    let mut out = Vec::with_capacity(oh * ow);
    let mut mask = Vec::with_capacity(oh * ow);
    const EDGE: f64 = 1e-9;
    for y in 0..oh {
        for x in 0..ow {
            let p = inv * Vector3::new(x as f64, y as f64, 1.0);
            if p.z.abs() < f64::EPSILON || !(p.x / p.z).is_finite() || !(p.y / p.z).is_finite() {
                out.push(0.0);
                mask.push(0.0);
                continue;
            }
            let (sx, sy) = (p.x / p.z, p.y / p.z);
            let inside = sx >= -EDGE && sy >= -EDGE && sx <= (sw - 1) as f64 + EDGE && sy <= (sh - 1) as f64 + EDGE;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            if !(x0.abs() < 1e15 && y0.abs() < 1e15) {
                out.push(0.0);
                mask.push(0.0);
                continue;
            }
            let (xi, yi) = (x0 as isize, y0 as isize);
            let mut v = (1.0 - fy) * (1.0 - fx) * sample(yi, xi);
            if fx > 0.0 {
                v += (1.0 - fy) * fx * sample(yi, xi + 1);
            }
            if fy > 0.0 {
                v += fy * (1.0 - fx) * sample(yi + 1, xi);
                if fx > 0.0 {
                    v += fy * fx * sample(yi + 1, xi + 1);
                }
            }
            out.push(v.clamp(0.0, 1.0));
            mask.push(if inside { 1.0 } else { 0.0 });
        }
    }
    Ok((ThermalImage::new(oh, ow, out)?, ThermalImage::new(oh, ow, mask)?))
}

/// Loads a row's frames, aligning the thermal frame to the RGB grid when a
/// homography is given. The returned mask combines the warp validity mask
/// with the row's own mask, if any.
pub fn load_row(row: &ManifestRow) -> Result<PatchTriple> {
    let rgb = load_rgb(&row.rgb_low)?;
    let gt = load_rgb(&row.rgb_ref)?;
    let raw = load_thermal(&row.thermal)?;
    let (thermal, mut mask) = match row.homography_matrix() {
        Some(h) => {
            let (t, m) = warp_homography(&raw, &h, (rgb.height(), rgb.width()))?;
            (t, Some(m))
        }
        None => (raw, None),
    };
    if let Some(p) = &row.mask {
        let own = load_thermal(p)?;
        mask = Some(match mask {
            Some(m) if m.height() == own.height() && m.width() == own.width() => ThermalImage::new(
                m.height(),
                m.width(),
                m.data().iter().zip(own.data()).map(|(a, b)| a * b).collect(),
            )?,
            Some(_) => {
                return Err(Error::Validation {
                    row: row.id.clone(),
                    message: "mask does not match the RGB frame".into(),
                })
            }
            None => own,
        });
    }
    PatchTriple::new(rgb, thermal, gt, mask).map_err(|e| Error::Validation {
        row: row.id.clone(),
        message: e.to_string(),
    })
}

/// Which gain level of an exposure stack to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gain {
    Low,
    High,
}

impl Gain {
    pub fn as_str(self) -> &'static str {
        match self {
            Gain::Low => "low",
            Gain::High => "high",
        }
    }
}

impl std::str::FromStr for Gain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Gain::Low),
            "high" => Ok(Gain::High),
            other => Err(Error::Parameter(format!("unknown gain level {other}"))),
        }
    }
}

/// File naming inside a scene directory. `{gain}` and `{k}` are replaced by
/// the gain level and the exposure index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackLayout {
    pub exposure: String,
    pub thermal: String,
}

impl Default for StackLayout {
    fn default() -> Self {
        Self {
            exposure: "gain_{gain}/exp_{k}.png".into(),
            thermal: "thermal.png".into(),
        }
    }
}

impl StackLayout {
    pub fn exposure_path(&self, scene: &Path, gain: Gain, k: usize) -> PathBuf {
        scene.join(self.exposure.replace("{gain}", gain.as_str()).replace("{k}", &k.to_string()))
    }

    /// Number of consecutive exposures `0, 1, ...` present on disk.
    pub fn stack_len(&self, scene: &Path, gain: Gain) -> usize {
        (0..).take_while(|&k| self.exposure_path(scene, gain, k).is_file()).count()
    }
}

/// Pairs exposure `input` (the low-light input) with exposure `reference` of
/// the same scene and gain, plus the scene's thermal frame.
pub fn pair_stack(scene: &Path, gain: Gain, input: usize, reference: usize, layout: &StackLayout) -> Result<ManifestRow> {
    let n = layout.stack_len(scene, gain);
    if n == 0 {
        return Err(Error::Range(format!(
            "{} has no {} gain exposures",
            scene.display(),
            gain.as_str()
        )));
    }
    for k in [input, reference] {
        if k >= n {
            return Err(Error::Range(format!(
                "exposure index {k} is outside the {n}-frame stack of {}",
                scene.display()
            )));
        }
    }
    let thermal = scene.join(&layout.thermal);
    if !thermal.is_file() {
        return Err(Error::io(&thermal, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let name = scene
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".into());
    Ok(ManifestRow::new(
        format!("{name}_{}_{input}_{reference}", gain.as_str()),
        layout.exposure_path(scene, gain, input),
        thermal,
        layout.exposure_path(scene, gain, reference),
    ))
}
