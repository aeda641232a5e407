//! Test-time conversion of a decoder-only transformer into a hybrid of
//! full-attention and streaming-attention layers.
//!
//! During prefill each layer's lazy ratio (how much of the final queries'
//! attention lands on sink tokens and the recent window) is pushed into a
//! bounded max-queue; layers that overflow the queue have their KV cache cut
//! down to the streaming window. Decoding then runs on the mixed caches.

pub mod bench;
pub mod engine;
pub mod error;
pub mod kvcache;
pub mod lazydetect;
pub mod model;
pub mod modelfile;
pub mod numerics;
pub mod offline;
pub mod policy;
pub mod theory;

pub use error::{LazyKvError, Result};
