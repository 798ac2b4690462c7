//! Network definition, parameters, PCA fusion and checkpoints.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod estimator;
pub mod head;
pub mod layers;
pub mod network;
pub mod params;
pub mod pca;
pub mod tensor;

pub use attention::{attention, softmax_rows, AttentionBlock};
pub use checkpoint::Checkpoint;
pub use config::{num_parameters, num_parameters_for, ModelConfig, Variant};
pub use estimator::{light_up, IlluminationEstimator, IlluminationOutputs, ILLUMINATION_EPS};
pub use network::{ForwardCache, Network, TrunkOutput};
pub use params::{ParamId, ParameterStore};
pub use pca::{pca_fit, pca_reduce, PcaProjection};
pub use tensor::FeatureMap;
