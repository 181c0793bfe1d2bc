//! Compiles the guide's chapters as doctests.

#[doc = include_str!("src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("src/tensors.md")]
pub mod tensors {}

#[doc = include_str!("src/grammars.md")]
pub mod grammars {}

#[doc = include_str!("src/charts.md")]
pub mod charts {}

#[doc = include_str!("src/encoders.md")]
pub mod encoders {}

#[doc = include_str!("src/alignment.md")]
pub mod alignment {}

#[doc = include_str!("src/synthetic.md")]
pub mod synthetic {}

#[doc = include_str!("src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("src/training.md")]
pub mod training {}

#[doc = include_str!("src/cli.md")]
pub mod cli {}
