//! Generator networks, discriminator, and their checkpoint container.

pub mod checkpoint;
pub mod layers;
pub mod networks;

pub use checkpoint::Checkpoint;
pub use networks::{ContentCode, DiscriminatorOutputs, GeneratorOutputs, Model, NetConfig};
