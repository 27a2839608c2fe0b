//! Multimodal vector-quantized autoencoder codec.
//!
//! Several input modalities are encoded separately, fused into one shared grid
//! of codebook indices by nearest-neighbour search under the mean distance
//! across modalities, and reconstructed by per-modality decoders. The crate
//! carries its own small differentiable tensor engine, the three reference
//! architectures, and a CSI feedback pipeline for a simulated MIMO-OFDM
//! downlink (channel synthesis, delay-domain truncation, codec and metrics).

pub mod autograd;
pub mod channel;
pub mod conv;
pub mod csi;
pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod tensor;
pub mod trainer;
pub mod vq;

pub use autograd::{Graph, NodeId, ParamId, ParamStore};
pub use conv::ConvGeometry;
pub use error::{Error, Result};
pub use optim::{Adam, AdamConfig};
pub use tensor::{AnyTensor, DType, Element, Tensor};
pub use vq::{Codebook, LossBreakdown, QuantizeResult};
pub use models::{Experiment, Layer, ModelSpec, MultimodalVqVae};
