//! Acceptance suite. Runs every criterion in order and prints one line per
//! criterion; exits non-zero if any fails. Pass a substring to run a subset.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::Matrix3;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rtxnet::datasets::warp_homography;
use rtxnet::degradation::{degrade, sample_exposure_factor, DegradeParams, EXPOSURE_RANGE};
use rtxnet::metrics::{psnr, ssim};
use rtxnet::model::layers::{Builder, Init};
use rtxnet::model::{attention, num_parameters, pca_fit, pca_reduce, AttentionBlock, PcaProjection};
use rtxnet::training::{TrainConfig, Trainer};
use rtxnet::{FeatureMap, Image, ModelConfig, Network, ParameterStore, ThermalImage, Variant};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let out = common::rtxnet(&["gradcheck"]);
    let text = common::stdout(&out);
    let secs = start.elapsed().as_secs_f64();
    let summary = text
        .lines()
        .find(|l| l.contains("max relative error"))
        .ok_or_else(|| format!("no summary in output:\n{text}"))?;
    let max_err: f64 = summary
        .split("max relative error ")
        .nth(1)
        .and_then(|s| s.split(',').next())
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| format!("unparsable summary {summary:?}"))?;
    let counts: Vec<usize> = text
        .lines()
        .find(|l| l.starts_with("rows "))
        .map(|l| l.split_whitespace().filter_map(|w| w.parse().ok()).collect())
        .unwrap_or_default();
    let failing: Vec<&str> = text.lines().filter(|l| l.trim_end().ends_with("FAIL") && !l.contains("max relative")).collect();
    ensure!(out.status.code() == Some(0), "exit {:?}, failing rows {failing:?}", out.status.code());
    ensure!(counts.len() >= 2 && counts[0] == counts[1], "not every parameter was checked: {counts:?}");
    ensure!(max_err < 1e-4, "max relative error {max_err:e}");
    Ok(format!("{} tensors, max relative error {max_err:.3e}, {secs:.0} s", counts[0]))
}

fn attention_invariants() -> Outcome {
    let mut r = rng(11);
    let magnitudes = [1e-3, 1.0, 10.0, 100.0, 1e3, 1e4];
    let mut worst = 0.0f64;
    for call in 0..1000 {
        let n = r.random_range(1..=12);
        let dk = r.random_range(1..=16);
        let dv = r.random_range(1..=8);
        let mut q: Array2<f64> = Array2::from_shape_fn((n, dk), |_| r.random_range(-1.0..1.0));
        let k: Array2<f64> = Array2::from_shape_fn((n, dk), |_| r.random_range(-1.0..1.0));
        let v = Array2::from_shape_fn((n, dv), |_| r.random_range(-1.0..1.0));
        let target = magnitudes[call % magnitudes.len()];
        let peak = q.dot(&k.t()).fold(0.0f64, |a, &b| a.max(b.abs())) / (dk as f64).sqrt();
        if peak > 0.0 {
            q *= target / peak;
        }
        let (out, w) = attention(&q.view(), &k.view(), &v.view()).map_err(|e| e.to_string())?;
        ensure!(out.iter().all(|x| x.is_finite()), "call {call}: non-finite output at logit scale {target}");
        ensure!(w.iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)), "call {call}: weight outside [0,1]");
        for row in w.rows() {
            let dev = (row.sum() - 1.0).abs();
            worst = worst.max(dev);
            ensure!(dev <= 1e-6, "call {call}: row sums to 1 {dev:+e}");
        }
    }
    Ok(format!("1000 calls, logits up to 1e4, worst row-sum deviation {worst:.1e}"))
}

fn init_identity() -> Outcome {
    // full-size network, identity PCA
    let cfg = ModelConfig::default();
    let (net, mut store) = Network::new(cfg, Variant::CrossAttention).map_err(|e| e.to_string())?;
    net.initialize(&mut store, &mut rng(5));
    let width = cfg.fusion_width(Variant::CrossAttention);
    let proj = PcaProjection::identity(width, cfg.fused_channels);
    let pairs = common::overfit_pairs();
    for (i, t) in pairs.iter().enumerate() {
        let (rgb, th) = (t.rgb.to_feature_map(), t.thermal.to_feature_map());
        let (out, _) = net.forward(&store, &proj, &rgb, &th).map_err(|e| e.to_string())?;
        let (trunk, _) = net.forward_trunk(&store, &rgb, &th).map_err(|e| e.to_string())?;
        let m = trunk.illumination.data();
        let expected = Array2::from_shape_fn(rgb.data().raw_dim(), |(p, c)| rgb.data()[[p, c]] * m[[p, 0]]);
        let exact = out.data().iter().zip(expected.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure!(exact, "pair {i}: full-size output differs from rgb * M");
    }

    let tcfg = TrainConfig {
        patch: 64,
        ..Default::default()
    };
    let mut trainer = Trainer::new(pairs, ModelConfig::desk(), tcfg).map_err(|e| e.to_string())?;
    let batch = trainer.next_batch().map_err(|e| e.to_string())?;
    let mut oracle = 0.0;
    for t in &batch {
        let rgb = t.rgb.to_feature_map();
        let (trunk, _) = trainer
            .net
            .forward_trunk(&trainer.params, &rgb, &t.thermal.to_feature_map())
            .map_err(|e| e.to_string())?;
        let m = trunk.illumination.data();
        let gt = t.gt.to_feature_map();
        let mut sum = 0.0;
        for ((p, c), &x) in rgb.data().indexed_iter() {
            sum += (x * m[[p, 0]] - gt.data()[[p, c]]).abs();
        }
        oracle += sum / rgb.data().len() as f64 / batch.len() as f64;
    }
    let loss = trainer.step_on(&batch).map_err(|e| e.to_string())?;
    let diff = (loss - oracle).abs();
    ensure!(diff <= 1e-12, "step-0 loss {loss} vs mae(rgb * M, gt) {oracle}");
    Ok(format!("bit-exact on the full model, step-0 loss {loss:.6} (diff {diff:.1e})"))
}

/// Trains `mode` on the fixture, checking full-frame metrics every 10 steps.
/// Returns the first checked step with MAE below `early`, and the final metrics.
fn run_fixture(mode: Variant, steps: u64, early: f64, stop_early: bool) -> Result<(Option<u64>, (f64, f64)), String> {
    let tcfg = TrainConfig {
        patch: 64,
        ablation_mode: mode,
        ..Default::default()
    };
    let mut t = Trainer::new(common::overfit_pairs(), ModelConfig::desk(), tcfg).map_err(|e| e.to_string())?;
    let mut reached = None;
    for i in 1..=steps {
        t.step().map_err(|e| e.to_string())?;
        if i % 10 == 0 && reached.is_none() {
            let (mae, _) = t.train_metrics().map_err(|e| e.to_string())?;
            if mae < early {
                reached = Some(i);
                if stop_early {
                    break;
                }
            }
        }
    }
    Ok((reached, t.train_metrics().map_err(|e| e.to_string())?))
}

fn overfit_fixture() -> Outcome {
    let start = Instant::now();
    let (cross_reached, (mae, db)) = run_fixture(Variant::CrossAttention, 500, 0.05, false)?;
    let overfit_secs = start.elapsed().as_secs_f64();
    let mut notes = vec![format!("cross_attention MAE {mae:.4} PSNR {db:.2} dB in {overfit_secs:.0} s")];
    let mut problems = Vec::new();
    if !(mae < 0.02 && db > 30.0) {
        problems.push(format!("500-step fit MAE {mae:.4}, PSNR {db:.2} dB"));
    }
    let mut reached = vec![(Variant::CrossAttention, cross_reached)];
    for mode in [Variant::Concat4, Variant::SelfOnly] {
        reached.push((mode, run_fixture(mode, 1000, 0.05, true)?.0));
    }
    for (mode, step) in reached {
        match step {
            Some(s) => notes.push(format!("{mode} < 0.05 at step {s}")),
            None => problems.push(format!("{mode} did not reach MAE 0.05 in 1000 steps")),
        }
    }
    ensure!(problems.is_empty(), "{}", problems.join("; "));
    Ok(notes.join(", "))
}

fn parameter_count() -> Outcome {
    let cfg = ModelConfig::default();
    let n = num_parameters(&cfg);
    let (_, store) = Network::new(cfg, Variant::CrossAttention).map_err(|e| e.to_string())?;
    ensure!(store.num_scalars() == n, "store holds {} scalars, formula says {n}", store.num_scalars());
    ensure!((500_000..=900_000).contains(&n), "{n} outside [0.5M, 0.9M]");
    ensure!(n == 650_324, "count changed to {n}");
    Ok(format!("{n} parameters"))
}

fn metric_oracles() -> Outcome {
    let mut r = rng(3);
    let x = Image::from_fn(32, 40, |_, _, _| r.random_range(0.0..0.9)).unwrap();
    let y = Image::from_fn(32, 40, |yy, xx, c| x.get(yy, xx, c) + 0.1).unwrap();
    let db = psnr(&x, &y).map_err(|e| e.to_string())?;
    ensure!((db - 20.0).abs() <= 1e-6, "psnr {db}");
    let s = ssim(&x, &x).map_err(|e| e.to_string())?;
    ensure!((s - 1.0).abs() <= 1e-12, "ssim(x, x) = {s}");
    let c1 = 0.01f64.powi(2);
    for (a, b) in [(0.3, 0.7), (0.05, 0.9), (0.5, 0.5), (0.0, 1.0)] {
        let ia = Image::from_fn(16, 16, |_, _, _| a).unwrap();
        let ib = Image::from_fn(16, 16, |_, _, _| b).unwrap();
        let got = ssim(&ia, &ib).map_err(|e| e.to_string())?;
        let want = (2.0 * a * b + c1) / (a * a + b * b + c1);
        ensure!((got - want).abs() <= 1e-10, "constant ({a}, {b}): {got} vs {want}");
    }
    Ok(format!("psnr {db:.9} dB, ssim(x,x) - 1 = {:.1e}", s - 1.0))
}

fn degradation_oracles() -> Outcome {
    let mut r = rng(4);
    let img = Image::from_fn(20, 24, |_, _, _| r.random_range(0.0..=1.0)).unwrap();
    let same = degrade(&img, &DegradeParams::noiseless(1.0)).map_err(|e| e.to_string())?;
    let exact = same.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure!(exact, "factor 1 without noise changed the image");

    let flat = Image::from_fn(1000, 334, |_, _, _| 0.5).unwrap();
    let out = degrade(&flat, &DegradeParams::new(10.0, 42)).map_err(|e| e.to_string())?;
    let n = out.data().len() as f64;
    let mean = out.data().iter().map(|v| v - 0.05).sum::<f64>() / n;
    let var = out.data().iter().map(|v| (v - 0.05 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let expected = 0.01 * 0.05 + 1e-4;
    let rel = (var - expected).abs() / expected;
    ensure!(rel < 0.05, "variance {var} vs {expected}");

    let (lo, hi) = EXPOSURE_RANGE;
    let mut r = rng(5);
    for _ in 0..100_000 {
        let f = sample_exposure_factor(&mut r, lo, hi).map_err(|e| e.to_string())?;
        ensure!((lo..=hi).contains(&f), "factor {f} outside [{lo}, {hi}]");
    }
    Ok(format!("identity exact, variance off by {:.2}%, 1e5 draws in [{lo}, {hi}]", rel * 100.0))
}

fn pca_oracles() -> Outcome {
    let mut r = rng(6);
    let (n, c) = (600, 12);
    let mix = Array2::from_shape_fn((c, c), |_| r.sample::<f64, _>(StandardNormal));
    let latent = Array2::from_shape_fn((n, c), |(_, j)| r.sample::<f64, _>(StandardNormal) * (j + 1) as f64);
    let samples = latent.dot(&mix);
    let proj = pca_fit(&samples.view(), 5).map_err(|e| e.to_string())?;
    let gram = proj.basis.dot(&proj.basis.t());
    let ortho = gram
        .indexed_iter()
        .map(|((i, j), &g)| (g - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max);
    ensure!(ortho <= 1e-5, "basis deviates from orthonormal by {ortho:e}");

    let dir: Array1<f64> = Array1::from_shape_fn(c, |_| r.sample::<f64, _>(StandardNormal));
    let dir = &dir / dir.dot(&dir).sqrt();
    let offset = Array1::from_shape_fn(c, |_| r.random_range(-1.0..1.0));
    let rank1 = Array2::from_shape_fn((200, c), |(i, j)| (i as f64 - 100.0) * 0.03 * dir[j] + offset[j]);
    let p1 = pca_fit(&rank1.view(), 1).map_err(|e| e.to_string())?;
    let cos = p1.basis.row(0).dot(&dir).abs();
    ensure!(cos > 1.0 - 1e-6, "rank-1 direction recovered with |cos| {cos}");

    let fm = FeatureMap::new(6, 7, Array2::from_shape_fn((42, c), |_| r.random_range(-2.0..2.0))).unwrap();
    let reduced = pca_reduce(&fm, &proj).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for p in 0..42 {
        for k in 0..5 {
            let mut acc = 0.0;
            for j in 0..c {
                acc += proj.basis[[k, j]] * (fm.data()[[p, j]] - proj.mean[j]);
            }
            worst = worst.max((acc - reduced.data()[[p, k]]).abs());
        }
    }
    ensure!(worst <= 1e-10, "pca_reduce differs from brute force by {worst:e}");
    Ok(format!("orthonormal to {ortho:.1e}, rank-1 |1 - |cos|| {:.1e}, projection diff {worst:.1e}", (1.0 - cos).abs()))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = common::write_dataset(&dir.path().join("data"), 2, 64);
    let run = |name: &str| -> Result<(Vec<u8>, Vec<u8>), String> {
        let out_dir = dir.path().join(name);
        let o = common::rtxnet(&[
            "--preset",
            "desk",
            "--set",
            "train.patch=32",
            "--set",
            "train.checkpoint_every=10",
            "train",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--iterations",
            "30",
            "--seed",
            "3",
        ]);
        ensure!(o.status.success(), "train exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
        let ck = std::fs::read(out_dir.join("checkpoint.bin")).map_err(|e| e.to_string())?;
        let log = std::fs::read(out_dir.join("metrics.log")).map_err(|e| e.to_string())?;
        Ok((ck, log))
    };
    let (ck_a, log_a) = run("a")?;
    let (ck_b, log_b) = run("b")?;
    ensure!(ck_a == ck_b, "checkpoints differ");
    ensure!(log_a == log_b, "metrics logs differ");
    let lines = log_a.iter().filter(|&&b| b == b'\n').count();
    ensure!(lines == 30, "expected 30 log lines, got {lines}");
    Ok(format!("checkpoint {} bytes and {lines}-line log identical", ck_a.len()))
}

fn homography() -> Outcome {
    let mut r = rng(8);
    let t = ThermalImage::from_fn(16, 20, |_, _| r.random_range(0.0..=1.0)).unwrap();
    let (same, mask) = warp_homography(&t, &Matrix3::identity(), (16, 20)).map_err(|e| e.to_string())?;
    ensure!(same == t, "identity warp changed the frame");
    ensure!(mask.data().iter().all(|&m| m == 1.0), "identity mask is not all ones");

    let size = 48;
    let smooth = ThermalImage::from_fn(size, size, |y, x| {
        0.5 + 0.3 * (x as f64 * 0.15).sin() * (y as f64 * 0.11).cos()
    })
    .unwrap();
    let (s, c) = (1.05 * 0.08f64.sin(), 1.05 * 0.08f64.cos());
    let h = Matrix3::new(c, -s, 2.5, s, c, -1.5, 2e-4, -1e-4, 1.0);
    let (fwd, m1) = warp_homography(&smooth, &h, (size, size)).map_err(|e| e.to_string())?;
    let (back, m2) = warp_homography(&fwd, &h.try_inverse().unwrap(), (size, size)).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for y in 4..size - 4 {
        for x in 4..size - 4 {
            // skip pixels whose round trip passed near the intermediate frame edge
            let near_edge = (-1i64..=1).any(|dy| {
                (-1i64..=1).any(|dx| {
                    let (yy, xx) = ((y as i64 + dy) as usize, (x as i64 + dx) as usize);
                    m2.get(yy, xx) == 0.0 || m1.get(yy, xx) == 0.0
                })
            });
            if near_edge {
                continue;
            }
            checked += 1;
            worst = worst.max((back.get(y, x) - smooth.get(y, x)).abs());
        }
    }
    ensure!(checked > 500, "only {checked} interior pixels survived");
    ensure!(worst <= 0.02, "round-trip error {worst}");

    let mut dot = vec![0.0; 15 * 15];
    dot[7 * 15 + 4] = 1.0;
    let dot = ThermalImage::new(15, 15, dot).unwrap();
    let shift = Matrix3::new(1.0, 0.0, 3.0, 0.0, 1.0, -2.0, 0.0, 0.0, 1.0);
    let (moved, _) = warp_homography(&dot, &shift, (15, 15)).map_err(|e| e.to_string())?;
    for y in 0..15 {
        for x in 0..15 {
            let want = if (y, x) == (5, 7) { 1.0 } else { 0.0 };
            ensure!(moved.get(y, x) == want, "translated pixel ({y}, {x}) = {}", moved.get(y, x));
        }
    }
    Ok(format!("identity exact, round trip {worst:.4} over {checked} px, translation exact"))
}

fn cross_collapses_to_self() -> Outcome {
    let (c, heads, ffn) = (16, 4, 32);
    let mut store = ParameterStore::new();
    let mut inits: Vec<(_, Init)> = Vec::new();
    let mut b = Builder {
        store: &mut store,
        inits: &mut inits,
    };
    let gated = AttentionBlock::new(&mut b, "gated", c, heads, ffn, true).map_err(|e| e.to_string())?;
    let plain = AttentionBlock::new(&mut b, "plain", c, heads, ffn, false).map_err(|e| e.to_string())?;
    let cross = AttentionBlock::new(&mut b, "cross", c, heads, ffn, false).map_err(|e| e.to_string())?;
    let mut r = rng(9);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let Some(suffix) = name.strip_prefix("gated.") else { continue };
        let zero = suffix.starts_with("illum_gate");
        let vals: Vec<f64> = store
            .values(id)
            .iter()
            .map(|_| if zero { 0.0 } else { r.random_range(-0.5..0.5) })
            .collect();
        store.set_values(id, &vals).unwrap();
        for other in ["plain", "cross"] {
            if let Some(tied) = store.id(&format!("{other}.{suffix}")) {
                store.set_values(tied, &vals).unwrap();
            }
        }
    }
    let x = Array2::from_shape_fn((64, c), |_| r.random_range(-1.0..1.0));
    let illum = Array2::from_shape_fn((64, c), |_| r.random_range(-1.0..1.0));
    let w = store.weights();
    let (y_cross, cache_cross) = cross.forward(&w, &x.view(), Some(&x.view()), None).map_err(|e| e.to_string())?;
    let (y_plain, cache_plain) = plain.forward(&w, &x.view(), None, None).map_err(|e| e.to_string())?;
    let (y_gated, _) = gated.forward(&w, &x.view(), None, Some(&illum.view())).map_err(|e| e.to_string())?;
    ensure!(y_cross == y_plain, "cross output differs from ungated self-attention");
    ensure!(y_cross == y_gated, "cross output differs from self-attention with a neutral gate");
    ensure!(
        cache_cross.attention_weights() == cache_plain.attention_weights(),
        "attention weights differ"
    );
    Ok("outputs and attention weights identical".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient suite", gradient_suite),
        ("attention invariants", attention_invariants),
        ("init identity", init_identity),
        ("overfit fixture", overfit_fixture),
        ("parameter count", parameter_count),
        ("metric oracles", metric_oracles),
        ("degradation oracles", degradation_oracles),
        ("pca", pca_oracles),
        ("determinism", determinism),
        ("homography", homography),
        ("cross collapses to self", cross_collapses_to_self),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({why})", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
