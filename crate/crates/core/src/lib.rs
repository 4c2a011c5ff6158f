pub mod autograd;
pub mod data;
pub mod error;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod perceptual;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision aliases used by the command line and service.
pub type Tensor32 = Tensor<f32>;
pub type Generator32 = networks::Generator<f32>;
pub type Discriminator32 = networks::Discriminator<f32>;
pub type FeatureExtractor32 = perceptual::FeatureExtractor<f32>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type ImageTensor32 = imaging::ImageTensor<f32>;
