//! Dense tensors, reverse-mode autodiff, Adam, and the seeded random source.

mod optim;
mod params;
mod rng;
mod tape;
mod tensor;

pub use optim::Adam;
pub use params::{Bound, ParamSet};
pub use rng::SeededRng;
pub use tape::{Gradients, Tape, Var, COSINE_EPS};
pub use tensor::Tensor;
