//! Calls to external inference endpoints for difference detection,
//! coherence judgement, captioning and embeddings.
//!
//! Every call goes through [`Gateway`], which retries transient failures,
//! answers repeated requests from an on-disk [`cache::ResponseCache`] and logs
//! one [`CallRecord`] per call for the run manifest. With the `mock` feature
//! (on by default) [`mock::MockServer`] provides a scripted local backend.

pub mod cache;
pub mod client;
pub mod error;
#[cfg(feature = "mock")]
pub mod mock;
pub mod ops;
pub mod prompts;
pub mod wire;

pub use cache::{CacheKey, ResponseCache};
pub use client::{map_bounded, CallRecord, Endpoint, Endpoints, Gateway, GatewayConfig, OverlayStyle, RetryPolicy};
pub use error::{GatewayError, Result};
pub use ops::{parse_verdict, prepare_coherence_images, CaseEmbedder};
pub use wire::{ChatRequest, ChatResponse, UserPart};
