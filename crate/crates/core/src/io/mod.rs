//! Tensor and checkpoint files, PPM images, manifests, key=value configs,
//! image resampling and the synthetic texture generator.

mod image;
mod kv;
mod manifest;
mod ppm;
mod synth;
mod tensor_file;

pub use image::{hflip, resize_bilinear};
pub use kv::KeyValues;
pub use manifest::{Manifest, ManifestEntry};
pub use ppm::{ppm_decode, ppm_encode, ppm_load, ppm_save};
pub use synth::{synth_generate, ClassTexture, SyntheticTextureSpec, SPLITS};
pub use tensor_file::{
    checkpoint_from_bytes, checkpoint_load, checkpoint_save, checkpoint_to_bytes, tensor_from_bytes, tensor_load,
    tensor_save, tensor_to_bytes, AnyTensor, Checkpoint,
};
