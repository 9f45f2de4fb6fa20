//! Hand-written network layers, the two learners and their checkpoint format.

pub mod checkpoint;
pub mod layers;
pub mod network;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use layers::Activation;
pub use network::{backward, forward, network_input, ForwardCache, Learner, NetworkConfig, ParameterStore, Tensor};
