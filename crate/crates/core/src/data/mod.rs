//! Synthetic scenes, sparse ground truth and image file I/O.

pub mod dataset;
pub mod netpbm;
mod scene;

pub use scene::{
    depth_to_intensity, generate_scene, Class, Instance, Sample, SceneConfig, MAX_DEPTH, MIN_DEPTH,
    NUM_CLASSES,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::metrics::SparseDepth;
use crate::rng;
use crate::tensor::Tensor;

/// Marks each pixel valid independently with probability `rate`.
pub fn sparsify(depth: &Tensor, rate: f64, seed: u64) -> Result<SparseDepth> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::config("sparsity rate must lie in (0, 1]"));
    }
    let mut rng = rng::stream(seed, "sparsify");
    let valid = Tensor::from_fn(depth.shape(), |_| {
        if rate >= 1.0 || rng.gen_bool(rate) {
            1.0
        } else {
            0.0
        }
    });
    SparseDepth::new(depth.clone(), valid)
}
