//! Pairwise-comparison rating engine.
//!
//! * [`diffcore`]: reverse-mode autodiff, dropout and reparameterization
//!   nodes, AdamW.
//! * [`rater`]: the Bayesian Elo rating network and its losses.
//! * [`pairs`]: annotation model, pair sampling strategies, pseudo-labels.
//! * [`synth`]: synthetic datasets, metrics and rating experiments.
//! * [`congen`]: noise-robust conditional generator on 2-D data.

pub mod congen;
pub mod data;
pub mod diffcore;
pub mod rater;
pub mod pairs;
pub mod seed;
pub mod synth;

pub use data::{Comparison, Item, ItemId, ItemTable, Outcome};
pub use rater::{EncoderConfig, EncoderModel, GaussianRating, LossVariant, RatingEstimate};
