//! Guide listings. Each chapter of `book/src` is compiled as a module so its
//! code blocks run as doctests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("../../../book/src/quantizer.md")]
pub mod quantizer {}
#[doc = include_str!("../../../book/src/streaming.md")]
pub mod streaming {}
#[doc = include_str!("../../../book/src/bitstream.md")]
pub mod bitstream {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/representation.md")]
pub mod representation {}
#[doc = include_str!("../../../book/src/cost.md")]
pub mod cost {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
