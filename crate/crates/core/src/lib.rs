//! Active object detection workbench: a discretized detection environment,
//! scripted and planning baselines, a Decision Transformer policy trained
//! offline on expert data and fine-tuned online, and evaluation tooling.

pub mod buffer;
pub mod checkpoint;
pub mod config;
pub mod detection;
pub mod dt;
pub mod env;
pub mod episode;
pub mod error;
pub mod eval;
pub mod policies;
pub mod reinforce;
pub mod scenario;
pub mod sim;
pub mod training;
pub mod trajectory;

pub use error::{CoreError, Result};
