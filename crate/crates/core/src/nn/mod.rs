//! Neural network building blocks with explicit backward passes.
//!
//! Every layer's `forward` takes `&self` and returns its output together with
//! a cache; `backward` consumes the cache and accumulates into [`Param::grad`].
//! Batch-norm running statistics change only through `update_running`.

pub mod checkpoint;
pub mod conv;
pub mod convbn;
pub mod decoder;
pub mod encoder;
pub mod layers;
pub mod loss;
pub mod norm;
pub mod optim;
pub mod sparsemax;
pub mod tensor;

pub use checkpoint::{write_atomic, Checkpoint, NamedArray};
pub use conv::{Conv, ConvGeometry};
pub use convbn::{Conditioning, ConvBn, Modulations};
pub use decoder::{logits_to_field, Decoder, DecoderCache, DecoderConfig, DECODER_LAYERS};
pub use encoder::{Encoder, EncoderCache, EncoderConfig, IMAGE_CHANNELS};
pub use layers::{relu, sigmoid, Linear};
pub use loss::{bce_loss, bce_loss_grad, bce_with_logits, BCE_EPSILON};
pub use norm::{
    cond_batchnorm, BatchNorm, BatchStats, BnLayerSpec, Modulation, BN_EPSILON, BN_MOMENTUM,
};
pub use optim::{build_optimizer, Adam, Optimizer, OptimizerKind, SgdMomentum};
pub use sparsemax::{sparsemax, sparsemax_backward, sparsemax_jvp, sparsemax_threshold};
pub use tensor::{Module, Param, Real, Tensor};
