//! Dense network substrate: MLPs, Adam, random streams and checkpoints.

mod adam;
mod checkpoint;
mod matrix;
mod mlp;
mod rng;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use matrix::Matrix;
pub use mlp::{mlp_forward, mlp_gradient, Activation, MlpSpec, ParamVector, Tape};
pub use rng::{rng_draw_gaussian, rng_draw_uniform, rng_split, RngStream};

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, the derivative of [`softplus`].
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
