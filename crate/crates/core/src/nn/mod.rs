//! Parameters, layers, optimizer and checkpoint files shared by every model.

pub mod checkpoint;
mod layers;
mod optim;
mod params;
pub mod rng;

pub use layers::{normal_init, sinusoidal, Embedding, Linear, LoraLinear, LoraPair};
pub use optim::{Adam, OptimConfig, StepStats};
pub use params::{ParamId, ParamStore};
