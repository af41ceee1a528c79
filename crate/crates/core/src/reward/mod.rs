//! Unified reward model over the three motion views.
//!
//! Parameters live in one store under three prefixes: the shared backbone
//! (`reward.backbone.`), the preference adapter and critic head
//! (`reward.psi.`) and the authenticity adapter and classifier head
//! (`reward.omega.`). Each part is trained with the others frozen, and a
//! single checkpoint file holds all of them.

pub mod losses;
mod model;
mod train;

pub use losses::Gaussian;
pub use model::{
    normalize, Encoded, Path, RewardConfig, RewardModel, RewardScores, RewardTensors, BACKBONE,
    OMEGA, PSI,
};
pub use train::{
    label_balanced_batches, pretrain_semantic, semantic_loss, train_authenticity, train_preference,
    SemanticBatch, TrainConfig,
};

use std::path::Path as FsPath;

use crate::error::Result;
use crate::nn::checkpoint;

impl RewardModel {
    pub fn save(&self, path: impl AsRef<FsPath>) -> Result<()> {
        checkpoint::save(&self.params, path)
    }

    /// Load every parameter whose name starts with `prefix` (use `"reward."`
    /// for the whole model).
    pub fn load_prefix(&mut self, path: impl AsRef<FsPath>, prefix: &str) -> Result<()> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let entries = checkpoint::read_entries(file)?;
        checkpoint::assign_where(&mut self.params, entries, |n| n.starts_with(prefix))
    }
}
