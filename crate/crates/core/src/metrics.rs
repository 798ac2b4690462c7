//! Full-reference quality metrics and the evaluation runner.

use std::fmt::Write as _;
use std::path::Path;

use crate::datasets::{load_row, Manifest};
use crate::error::{Error, Result};
use crate::imageio::{Image, ThermalImage};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

/// `10 log10(1 / MSE)` for unit peak; `+inf` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let n = SSIM_WINDOW;
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * plane[y * w + x + i];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * rows[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), unit
/// dynamic range, averaged over all valid windows and the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Size(format!(
            "{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let k = gaussian_window();
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = a.data().iter().skip(c).step_by(3).copied().collect();
        let pb: Vec<f64> = b.data().iter().skip(c).step_by(3).copied().collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &k);
        let mu_b = filter_valid(&pb, h, w, &k);
        let e_aa = filter_valid(&prod(&pa, &pa), h, w, &k);
        let e_bb = filter_valid(&prod(&pb, &pb), h, w, &k);
        let e_ab = filter_valid(&prod(&pa, &pb), h, w, &k);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / 3.0)
}

#[derive(Debug, Clone, PartialEq)]
pub enum RowStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    /// `+inf` when the output equals the reference.
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub status: RowStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub config_hash: String,
    pub rows: Vec<EvalRow>,
}

fn fmt_num(v: Option<f64>) -> String {
    match v {
        Some(x) if x == f64::INFINITY => "inf".into(),
        Some(x) => format!("{x:.6}"),
        None => String::new(),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl EvalReport {
    /// Mean of the finite per-row PSNR values; `None` if there are none.
    pub fn mean_psnr(&self) -> Option<f64> {
        let finite: Vec<f64> = self
            .rows
            .iter()
            .filter_map(|r| r.psnr_db)
            .filter(|v| v.is_finite())
            .collect();
        (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64)
    }

    pub fn mean_ssim(&self) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter_map(|r| r.ssim).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| r.status != RowStatus::Ok).count()
    }

    pub fn infinite_psnr_rows(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.psnr_db == Some(f64::INFINITY))
            .count()
    }

    /// Header, one line per row, then a `mean` line when there is at least
    /// one row. The `lpips` column is always empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,psnr_db,ssim,lpips,status\n");
        for r in &self.rows {
            let status = match &r.status {
                RowStatus::Ok => "ok".to_string(),
                RowStatus::Failed(m) => format!("failed: {m}"),
            };
            let _ = writeln!(
                s,
                "{},{},{},,{}",
                csv_field(&r.id),
                fmt_num(r.psnr_db),
                fmt_num(r.ssim),
                csv_field(&status)
            );
        }
        if !self.rows.is_empty() {
            let _ = writeln!(s, "mean,{},{},,", fmt_num(self.mean_psnr()), fmt_num(self.mean_ssim()));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if self.infinite_psnr_rows() > 0 {
            log::warn!(
                "{} row(s) match the reference exactly; their infinite PSNR is excluded from the mean",
                self.infinite_psnr_rows()
            );
        }
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Scores `enhance(low, thermal)` against the reference of every manifest
/// row. Rows that fail to load or enhance are recorded and skipped.
pub fn evaluate(
    manifest: &Manifest,
    method: &str,
    config_hash: &str,
    mut enhance: impl FnMut(&Image, &ThermalImage) -> Result<Image>,
) -> EvalReport {
    let rows = manifest
        .rows
        .iter()
        .map(|row| {
            let scored = load_row(row).and_then(|t| {
                let out = enhance(&t.rgb, &t.thermal)?;
                Ok((psnr(&out, &t.gt)?, ssim(&out, &t.gt)?))
            });
            match scored {
                Ok((p, s)) => EvalRow {
                    id: row.id.clone(),
                    psnr_db: Some(p),
                    ssim: Some(s),
                    status: RowStatus::Ok,
                },
                Err(e) => {
                    log::warn!("row {}: {e}", row.id);
                    EvalRow {
                        id: row.id.clone(),
                        psnr_db: None,
                        ssim: None,
                        status: RowStatus::Failed(e.to_string()),
                    }
                }
            }
        })
        .collect();
    EvalReport {
        method: method.to_string(),
        config_hash: config_hash.to_string(),
        rows,
    }
}
