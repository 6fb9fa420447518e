//! A fully streaming residual-vector-quantized speech codec.
//!
//! Audio is cut into fixed frames, embedded, passed through a causal
//! sliding-window Transformer, quantized by a stack of residual codebooks and
//! decoded by a mirror-image Transformer. Every component runs frame by frame
//! with bounded caches, so streaming output is bit-identical to offline output.
//!
//! ```
//! use jhcodec::{Codec, CodecConfig};
//!
//! let codec = Codec::new(CodecConfig::toy(), 7).unwrap();
//! let audio: Vec<f32> = (0..640).map(|i| (i as f32 * 0.05).sin() * 0.3).collect();
//! let enc = codec.encode(&audio, 4).unwrap();
//! assert_eq!((enc.grid.frames(), enc.grid.k()), (10, 4));
//! let back = codec.decode(&enc.grid).unwrap();
//! assert_eq!(back.len(), 640);
//! ```

pub mod autodiff;
pub mod bench;
pub mod bitstream;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod nnet;
pub mod params;
pub mod rvq;
pub mod ssr;
pub mod tensor;
pub mod train;
pub mod wav;

/// Element type of every tensor and sample buffer.
///
/// `f32` in this crate. The `jhcodec-f64` twin package compiles the same
/// sources with `f64` so finite-difference checks of long chains are not
/// swamped by single-precision rounding.
#[cfg(not(jh_real64))]
pub type Real = f32;
#[cfg(jh_real64)]
pub type Real = f64;

pub use autodiff::{Gradients, Graph, Var};
pub use bitstream::{pack, unpack, BitstreamError, BitstreamHeader};
pub use codec::{Codec, CodeGrid, Encoded, StreamState};
pub use config::{CodecConfig, Style};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use ssr::FeatureExtractor;
pub use tensor::Tensor;
