//! Differentiable substrate: parameter storage, a reverse-mode tape, Adam and
//! checkpoint files.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod params;
mod tape;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use params::{Mat, ParamId, ParameterStore};
pub use tape::{mat, Tape, Var};
