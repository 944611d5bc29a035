pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod experiments;
pub mod generators;
pub mod labels;
pub mod layermatch;
pub mod metrics;
mod linalg;
pub mod nn;
pub mod optim;
pub mod projection;
pub mod rng;
pub mod segmentation;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use labels::LabelMap;
pub use rng::SeededRng;
pub use tensor::Tensor;
