//! Alignment lab: supervised fine-tuning, intuitive fine-tuning (IFT), DPO
//! and ORPO expressed as token-level MDP objectives, exercised on a Frozen
//! Lake gridworld against a value-iteration oracle and on a toy sequence
//! model.

pub mod checks;
pub mod diff;
pub mod error;
pub mod frozen_lake;
pub mod losses;
pub mod mdp;
pub mod reporting;
pub mod toy_lm;

pub use error::{Error, Result};
