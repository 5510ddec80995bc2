//! Learn-to-wipe laboratory: a compliant-arm tactile simulator, the inner
//! proportional contact controller, a tactile transition network with
//! parametric bias, and gradient-through-model task control.

pub mod ctrl;
pub mod harness;
pub mod netcore;
pub mod sim;
pub mod taskctl;
pub mod ttnpb;
