//! Video containers, synthetic scenes with known motion, noise injection,
//! quality metrics and frame-sequence I/O.

mod array_file;
mod frames;
mod metrics;
mod noise;
mod synth;
mod video;

pub use array_file::{read_array, write_array, ArrayHeader};
pub use frames::{load_frames, save_frames, FrameFormat};
pub use metrics::{psnr, psnr_planes, ssim, ssim_video, PSNR_CAP_DB};
pub use noise::{add_gaussian_noise, NoiseResampler};
pub use synth::{
    synth_video, Background, FlowField, SceneObject, Shape, SyntheticScene, SyntheticVideo,
    TextureSpec, Velocity,
};
pub use video::VideoTensor;
