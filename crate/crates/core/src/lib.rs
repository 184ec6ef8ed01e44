//! Discrete-continuous action-space policy-gradient attention for
//! image-text embedding matching.
//!
//! The crate is organised bottom-up: [`autodiff`] provides the tape and
//! optimizer, [`distributions`] the compound action law, [`encoders`] the
//! modality encoders and GRU cell, [`attention`] the policy rollout and
//! fusion, [`rewards`] and [`losses`] the training signals, and [`harness`]
//! the synthetic data, training loop, evaluation and ablation grid.

pub mod attention;
pub mod autodiff;
pub mod distributions;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod losses;
pub mod rewards;
pub mod verify;

pub use error::{Error, Result};
