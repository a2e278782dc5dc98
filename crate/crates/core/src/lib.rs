//! Audio-driven Gaussian splatting at desk scale: a hashed triplane encoder,
//! KAN decoders, agent cross-attention over condition tokens and a CPU
//! splatting renderer, all on a small reverse-mode autodiff tape.

pub mod attention;
pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gaussians;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod io;
pub mod kan;
pub mod losses;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod sh;
pub mod splat;
pub mod tensor;
pub mod triplane;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::ParamStore;
pub use tensor::NdArray;

