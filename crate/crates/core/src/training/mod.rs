//! Training recipe: MAE loss, Adam, patch sampling and augmentation, the
//! training loop, and finite-difference gradient checking.

pub mod adam;
pub mod gradcheck;
pub mod loss;
pub mod sampling;
pub mod trainer;

use std::path::Path;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use gradcheck::{gradient_check, GradCheckOptions, GradReport};
pub use loss::{mae_loss, mae_with_grad};
pub use sampling::{augment, sample_patch, Dihedral, PatchTriple};
pub use trainer::{train_pairs, TrainConfig, TrainOutcome, Trainer};

use crate::datasets::{load_row, Manifest};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Loads every manifest row and runs [`train_pairs`].
pub fn train(manifest: &Manifest, mcfg: ModelConfig, tcfg: TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    if manifest.rows.is_empty() {
        return Err(Error::Config("training manifest is empty".into()));
    }
    let pairs = manifest.rows.iter().map(load_row).collect::<Result<Vec<_>>>()?;
    train_pairs(pairs, mcfg, tcfg, out_dir)
}
