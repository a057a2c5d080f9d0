//! Resolves natural-language references to objects in 3D scenes.
//!
//! Detected objects are transcribed into text ([`scene`]), pruned to those
//! the utterance is about ([`filter`]), and handed to a chat model that may
//! run Python through a sandboxed interpreter ([`sandbox`]) before naming the
//! referred object ([`engine`]). [`selfcorrect`] turns reasoning traces into a
//! fine-tuning set and [`eval`] scores predictions on ReferIt3D-style and
//! ScanRefer-style benchmarks.

pub mod cli;
pub mod engine;
pub mod eval;
pub mod filter;
pub mod geometry;
pub mod sandbox;
pub mod scene;
pub mod selfcorrect;

pub use engine::llm::{ChatTurn, LlmClient, Role};
pub use engine::{ground, run_loop, Grounding, Prediction, ReasoningTrace};
pub use geometry::{iou3d, Aabb};
pub use scene::{GroundingTask, ObjectRecord, SceneTranscript};
