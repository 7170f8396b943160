//! Training loop, filter-scale/batch grid search, Bayesian class-weight
//! search and continued training.

mod bayes;
mod grid;
mod train;

pub use bayes::{bayes_opt, BayesOptSpec, BayesOutcome, BayesStep, GaussianProcess};
pub use grid::{grid_search, GridCell, GridResult, GridSpec};
pub use train::{
    continue_training, evaluate_model, train, train_in_dir, write_history_csv, EpochRecord,
    TrainOutcome,
};

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::augment::{expand_dataset, AugmentSpec};
use crate::dataio::{LabelMask, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::numerics::OptimizerKind;
use crate::synth::{generate_dataset, SyntheticSpec};

pub const DEFAULT_LEARNING_RATE: f64 = 5.4e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Per-class pixel weights of the cross-entropy, indexed by class.
    pub class_weights: [f64; NUM_CLASSES],
    /// Seeds shuffling and dropout. Weight initialisation is seeded separately.
    pub seed: u64,
    /// Validate every this many epochs (the last epoch is always validated).
    pub validate_every: usize,
    /// Write a periodic checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: 4,
            epochs: 60,
            class_weights: [1.0; NUM_CLASSES],
            seed: 0,
            validate_every: 1,
            checkpoint_every: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.validate_every == 0 {
            return Err(Error::config("validation cadence must be at least 1"));
        }
        if self
            .class_weights
            .iter()
            .any(|w| !(*w >= 0.0 && w.is_finite()))
        {
            return Err(Error::config(format!(
                "class weights {:?} must be finite and >= 0",
                self.class_weights
            )));
        }
        if let OptimizerKind::Sgd { momentum } = self.optimizer {
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::config("SGD momentum must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// One image with its ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: GrayImage,
    pub mask: LabelMask,
}

impl Example {
    pub fn new(image: GrayImage, mask: LabelMask) -> Result<Self> {
        if (image.width() as usize, image.height() as usize) != (mask.width(), mask.height()) {
            return Err(Error::data(format!(
                "image is {} x {} but mask is {} x {}",
                image.width(),
                image.height(),
                mask.width(),
                mask.height()
            )));
        }
        Ok(Example { image, mask })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingData {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
}

impl TrainingData {
    /// Synthetic train/validation/test sets with wear levels spread over
    /// `[0, 1]`. The three subsets use disjoint seeds. When `augment` is
    /// given, the training set is expanded with augmented copies.
    pub fn synthetic(
        spec: &SyntheticSpec,
        n_train: usize,
        n_validation: usize,
        n_test: usize,
        augment: Option<&AugmentSpec>,
    ) -> Result<(TrainingData, Vec<Example>)> {
        let subset = |offset: u64, n: usize| -> Result<Vec<Example>> {
            let s = SyntheticSpec {
                seed: spec.seed.wrapping_add(offset),
                ..spec.clone()
            };
            Ok(generate_dataset(&s, n, (0.0, 1.0))?
                .into_iter()
                .map(|x| Example {
                    image: x.image,
                    mask: x.mask,
                })
                .collect())
        };
        let mut train = subset(0x7261_696e, n_train)?;
        let validation = subset(0x7661_6c69, n_validation)?;
        let test = subset(0x7465_7374, n_test)?;
        if let Some(aug) = augment {
            let items: Vec<_> = train
                .into_iter()
                .enumerate()
                .map(|(i, e)| (format!("train{i:05}"), e.image, e.mask))
                .collect();
            train = expand_dataset(&items, aug)?
                .into_iter()
                .map(|a| Example {
                    image: a.image,
                    mask: a.mask,
                })
                .collect();
        }
        Ok((TrainingData { train, validation }, test))
    }
}
