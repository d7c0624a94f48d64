//! Many-in, many-out image generation at desk scale.
//!
//! A montage model takes a variable number of reference images plus a text
//! instruction and emits a variable number of output images in one pass. The
//! crates here implement the full stack from scratch on CPU: a tape-based
//! autograd core, a dual/single-stream diffusion transformer conditioned
//! through adaLN, marginal 3D rotary embeddings that keep input and output
//! frames far apart on the temporal axis, a flow-matching objective and Euler
//! sampler with classifier-free guidance, a synthetic-scene data refinery with
//! motion filtering, a three-stage curriculum trainer, and identity/consistency
//! metrics for scored evaluation.

pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod flow;
pub mod model;
pub mod pack;
pub mod rope;
pub mod tensor;
pub mod train;
