pub mod chart;
pub mod encoders;
pub mod eval;
pub mod grounding;
pub mod nn;
pub mod pcfg;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod tree;
