//! The photo-set encoder, the text tower, and the gradient tape that trains
//! them.

mod checkpoint;
mod dual;
mod layers;
mod set_encoder;
pub mod tape;
mod text_encoder;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, MODEL_MAGIC,
};
pub use dual::{Batch, DualEncoder, DualWeights, ForwardOutput, ParamSpec};
pub use layers::{Dense, Visit};
pub use set_encoder::{
    EncoderLayer, PhotoBatch, Pooling, SetEncoderConfig, SetEncoderParams, SetEncoderWeights,
};
pub use tape::{Gradients, Tape, Var};
pub use text_encoder::{TextEncoderConfig, TextEncoderParams, TextEncoderWeights};
