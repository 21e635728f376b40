//! Active visual exploration over a zoom-capable camera, desk scale.
//!
//! A simulated camera crops and rescales square glimpses from a stored
//! scene. An elastic transformer encoder consumes the captured patches at
//! their continuous scene coordinates; task heads classify the scene or
//! reconstruct it densely; a soft actor-critic agent learns where to look
//! next by treating the drop in task loss as reward.

pub mod agent;
pub mod backbone;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod episode;
pub mod error;
pub mod heads;
pub mod imaging;
pub mod par;
pub mod scene;
pub mod train;
pub mod vis;

pub use error::{AvexError, Result};
