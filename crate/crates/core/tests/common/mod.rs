//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rtxnet::datasets::{write_manifest, Manifest, ManifestRow, Split};
use rtxnet::degradation::{degrade, DegradeParams};
use rtxnet::imageio::{save_image, save_thermal};
use rtxnet::training::PatchTriple;
use rtxnet::{Image, ThermalImage};

pub const SIZE: usize = 64;

/// Smooth procedural reference whose colour is a fixed function of its
/// luminance, so the thermal stand-in (the luminance itself) carries all the
/// information needed to restore it.
pub fn reference(k: usize, size: usize) -> Image {
    Image::from_fn(size, size, |y, x, c| {
        let (fy, fx) = (y as f64 / 64.0, x as f64 / 64.0);
        let base = 0.25 + 0.5 * (0.5 + 0.5 * ((fx * 6.0 + k as f64).sin() * (fy * 4.0).cos()));
        base * [1.0, 0.85, 0.7][c]
    })
    .unwrap()
}

pub fn luminance(img: &Image) -> ThermalImage {
    ThermalImage::from_fn(img.height(), img.width(), |y, x| {
        (img.get(y, x, 0) + img.get(y, x, 1) + img.get(y, x, 2)) / 3.0
    })
    .unwrap()
}

/// Low-light input: exposure factor 10 with the default noise model.
pub fn low_light(gt: &Image, k: usize) -> Image {
    let p = DegradeParams {
        image_index: k as u64,
        ..DegradeParams::new(10.0, 7)
    };
    degrade(gt, &p).unwrap()
}

/// The two-pair overfitting fixture.
pub fn overfit_pairs() -> Vec<PatchTriple> {
    (0..2)
        .map(|k| {
            let gt = reference(k, SIZE);
            PatchTriple::new(low_light(&gt, k), luminance(&gt), gt, None).unwrap()
        })
        .collect()
}

/// Writes `n` fixture pairs as PNGs plus a manifest; returns the manifest path.
pub fn write_dataset(dir: &Path, n: usize, size: usize) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let mut rows = Vec::new();
    for k in 0..n {
        let gt = reference(k, size);
        let (low, th, rf) = (
            dir.join(format!("low_{k}.png")),
            dir.join(format!("thermal_{k}.png")),
            dir.join(format!("ref_{k}.png")),
        );
        save_image(&low_light(&gt, k), &low).unwrap();
        save_thermal(&luminance(&gt), &th).unwrap();
        save_image(&gt, &rf).unwrap();
        rows.push(ManifestRow::new(format!("pair{k}"), low, th, rf));
    }
    let path = dir.join("manifest.jsonl");
    write_manifest(&Manifest::new(Split::Train, rows).unwrap(), &path).unwrap();
    path
}

pub fn rtxnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtxnet"))
        .args(args)
        .env_remove("RTXNET_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}
