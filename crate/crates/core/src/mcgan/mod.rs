//! The multi-conditional GAN: network definitions and loss algebra.

pub mod losses;
pub mod models;

pub use losses::{GeneratorLossParts, ObjectiveMode};
pub use models::{ArchConfig, ContextDiscriminator, Generator, Mode, NoduleCritic};
