// Each chapter of the guide in book/ becomes an empty module whose docs are
// the chapter, so `cargo test --doc` runs every snippet in it.

#[doc = include_str!("../../../book/src/introduction.md")]
mod introduction {}
#[doc = include_str!("../../../book/src/twins.md")]
mod twins {}
#[doc = include_str!("../../../book/src/plans.md")]
mod plans {}
#[doc = include_str!("../../../book/src/finetuning.md")]
mod finetuning {}
#[doc = include_str!("../../../book/src/quantization.md")]
mod quantization {}
#[doc = include_str!("../../../book/src/mixed-models.md")]
mod mixed_models {}
#[doc = include_str!("../../../book/src/container.md")]
mod container {}
#[doc = include_str!("../../../book/src/cli.md")]
mod cli {}
