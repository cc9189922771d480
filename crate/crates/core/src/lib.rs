pub mod analysis;
pub mod autodiff;
pub mod blindspot_ops;
pub mod checkpoint;
pub mod data_metrics;
pub mod denoise;
pub mod error;
pub mod loss_fusion;
pub mod network;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Result, UdvdError};
pub use scalar::Scalar;
pub use tensor::PlaneTensor;
