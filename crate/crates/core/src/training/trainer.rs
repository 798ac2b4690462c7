//! The training loop: PCA calibration, then sample, augment, forward, MAE,
//! backward and Adam, with a per-step metrics log and periodic checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamHyper, AdamState};
use super::loss::{mae_loss, mae_with_grad};
use super::sampling::{augment, sample_patch, PatchTriple};
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::model::{pca_fit, Checkpoint, ModelConfig, Network, ParameterStore, PcaProjection, Variant};

const INIT_STREAM: u64 = 0;
const CALIBRATION_STREAM: u64 = 1;
const SAMPLING_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patch: usize,
    pub iterations: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub ablation_mode: Variant,
    /// Steps between checkpoints; 0 writes only the initial and final ones.
    pub checkpoint_every: u64,
    /// Random patches pushed through the trunk to fit the PCA projection.
    pub calibration_patches: usize,
    /// Pixels kept from each calibration patch.
    pub calibration_pixels_per_patch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 4,
            patch: 128,
            iterations: 2000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            ablation_mode: Variant::CrossAttention,
            checkpoint_every: 500,
            calibration_patches: 64,
            calibration_pixels_per_patch: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patch < 16 {
            return Err(Error::Config(format!("patch {} is below the minimum of 16", self.patch)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} is outside [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if self.calibration_patches == 0 || self.calibration_pixels_per_patch == 0 {
            return Err(Error::Config("calibration needs at least one patch and one pixel".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub struct Trainer {
    pub net: Network,
    pub params: ParameterStore,
    pub pca: PcaProjection,
    pub adam: AdamState,
    cfg: TrainConfig,
    pairs: Vec<PatchTriple>,
    rng: ChaCha8Rng,
    iteration: u64,
}

impl Trainer {
    /// Initializes the network and fits the PCA projection on calibration
    /// patches drawn from `pairs`.
    pub fn new(pairs: Vec<PatchTriple>, mcfg: ModelConfig, tcfg: TrainConfig) -> Result<Self> {
        tcfg.validate()?;
        if pairs.is_empty() {
            return Err(Error::Config("no training pairs".into()));
        }
        if let Some(p) = pairs.iter().find(|p| p.height() < tcfg.patch || p.width() < tcfg.patch) {
            return Err(Error::Size(format!(
                "training image {}x{} is smaller than patch {}",
                p.height(),
                p.width(),
                tcfg.patch
            )));
        }
        let (net, mut params) = Network::new(mcfg, tcfg.ablation_mode)?;
        net.initialize(&mut params, &mut stream_rng(tcfg.seed, INIT_STREAM));
        let pca = calibrate(&net, &params, &pairs, &tcfg)?;
        let adam = AdamState::new(&params);
        Ok(Self {
            net,
            params,
            pca,
            adam,
            cfg: tcfg,
            pairs,
            rng: stream_rng(tcfg.seed, SAMPLING_STREAM),
            iteration: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn pairs(&self) -> &[PatchTriple] {
        &self.pairs
    }

    /// Draws the next augmented mini-batch.
    pub fn next_batch(&mut self) -> Result<Vec<PatchTriple>> {
        (0..self.cfg.batch_size)
            .map(|_| {
                let i = self.rng.random_range(0..self.pairs.len());
                let (patch, _) = sample_patch(&self.pairs[i], self.cfg.patch, &mut self.rng)?;
                Ok(augment(&patch, &mut self.rng)?.0)
            })
            .collect()
    }

    /// One optimization step on `batch`; returns the batch loss before the update.
    pub fn step_on(&mut self, batch: &[PatchTriple]) -> Result<f64> {
        self.params.zero_grads();
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for t in batch {
            let (out, cache) = self.net.forward(
                &self.params,
                &self.pca,
                &t.rgb.to_feature_map(),
                &t.thermal.to_feature_map(),
            )?;
            let (loss, mut g) = mae_with_grad(&out, &t.gt.to_feature_map(), t.mask.as_ref().map(|m| m.data()))?;
            total += loss * scale;
            g *= scale;
            self.net.backward(&mut self.params, &self.pca, &cache, &g);
        }
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("loss {total} at step {}", self.iteration + 1)));
        }
        adam_step(&mut self.params, &mut self.adam, &self.cfg.adam())?;
        self.iteration += 1;
        Ok(total)
    }

    pub fn step(&mut self) -> Result<f64> {
        let batch = self.next_batch()?;
        self.step_on(&batch)
    }

    /// Mean MAE and mean PSNR of the clamped full-frame output over the
    /// training pairs.
    pub fn train_metrics(&self) -> Result<(f64, f64)> {
        let mut mae = 0.0;
        let mut db = 0.0;
        for t in &self.pairs {
            let out = self.net.enhance(&self.params, &self.pca, &t.rgb, &t.thermal)?;
            mae += mae_loss(&out, &t.gt)?;
            db += psnr(&out, &t.gt)?;
        }
        let n = self.pairs.len() as f64;
        Ok((mae / n, db / n))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: *self.net.config(),
            variant: self.net.variant(),
            params: self.params.clone(),
            pca: self.pca.clone(),
            optimizer: self.adam.clone(),
            iteration: self.iteration,
        }
    }
}

fn calibrate(net: &Network, params: &ParameterStore, pairs: &[PatchTriple], tcfg: &TrainConfig) -> Result<PcaProjection> {
    let mut rng = stream_rng(tcfg.seed, CALIBRATION_STREAM);
    let pixels = tcfg.patch * tcfg.patch;
    let keep = tcfg.calibration_pixels_per_patch.min(pixels);
    let width = net.config().fusion_width(net.variant());
    let mut rows: Vec<f64> = Vec::with_capacity(tcfg.calibration_patches * keep * width);
    for _ in 0..tcfg.calibration_patches {
        let i = rng.random_range(0..pairs.len());
        let (patch, _) = sample_patch(&pairs[i], tcfg.patch, &mut rng)?;
        let (trunk, _) = net.forward_trunk(params, &patch.rgb.to_feature_map(), &patch.thermal.to_feature_map())?;
        let mut chosen = sample(&mut rng, pixels, keep).into_vec();
        chosen.sort_unstable();
        for p in chosen {
            rows.extend(trunk.fused.data().row(p).iter());
        }
    }
    let n = rows.len() / width;
    let samples = ndarray::Array2::from_shape_vec((n, width), rows).expect("rows have the fused width");
    pca_fit(&samples.view(), net.config().fused_channels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub final_loss: Option<f64>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.log";

/// Runs the full schedule, writing `checkpoint.bin` and `metrics.log` into
/// `out_dir`. On a non-finite loss the most recent checkpoint is left in
/// place and the error is returned.
pub fn train_pairs(
    pairs: Vec<PatchTriple>,
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut trainer = Trainer::new(pairs, mcfg, tcfg)?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let log_path = out_dir.join(METRICS_FILE);
    trainer.checkpoint().save(&ckpt_path)?;
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut last = None;
    for n in 1..=tcfg.iterations {
        let loss = match trainer.step() {
            Ok(l) => l,
            Err(e) => {
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                return Err(e);
            }
        };
        writeln!(log, "step {n} loss {loss} lr {}", tcfg.learning_rate).map_err(|e| Error::io(&log_path, e))?;
        last = Some(loss);
        if tcfg.checkpoint_every > 0 && n % tcfg.checkpoint_every == 0 && n != tcfg.iterations {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            trainer.checkpoint().save(&ckpt_path)?;
            log::info!("step {n}: checkpoint written");
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    trainer.checkpoint().save(&ckpt_path)?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        metrics_log: log_path,
        final_loss: last,
    })
}
