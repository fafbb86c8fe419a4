//! Dense tensors, a reverse-mode gradient tape, seeded sampling and the
//! layer building blocks shared by every model component.

mod nn;
mod rng;
mod sample;
mod tape;
mod tensor;

pub use nn::{Activation, Bound, GruCell, Linear, LstmCell, LstmState, Mlp, ParamId, ParamStore};
pub use rng::{Rng, RngState};
pub use sample::{sample_gaussian, sample_gumbel_softmax};
pub use tape::{Gradients, Tape, Unary, Var};
pub use tensor::{Scalar, Tensor};
