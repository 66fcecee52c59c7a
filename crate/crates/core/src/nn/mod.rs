//! Minimal convolutional network toolkit: parameter storage, a recording
//! graph with reverse-mode gradients, layers and the Adam optimizer.

mod adam;
mod graph;
mod layers;
mod params;

pub use adam::Adam;
pub use graph::{squared_error, Backward, Graph, Var};
pub use layers::{Activation, Conv2d, Deconv2d, ResBlock, Sequential, LEAKY_SLOPE};
pub use params::{Grads, ParamEntry, ParamId, ParamStore};

/// Channel width after applying a uniform scale factor (at least 1).
pub fn scaled_width(base: usize, scale: f64) -> usize {
    ((base as f64 * scale).round() as usize).max(1)
}
