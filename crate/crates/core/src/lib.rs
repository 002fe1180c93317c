pub mod cohort;
pub mod model;
pub mod preprocess;
pub mod psg;
pub mod sampler;
pub mod store;
pub mod synth;
pub mod tensor;
pub mod train;
