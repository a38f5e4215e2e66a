pub mod inference;
pub mod io;
pub mod metrics;
pub mod networks;
pub mod patches;
pub mod sampling;
pub mod shape;
pub mod synth;
pub mod tensor;
pub mod train;
