//! Synthetic fusion world, tracking head, typical fusion block and the
//! generative inference route.

pub mod head;
pub mod pipeline;
pub mod scenario;

pub use head::{argmax, render_response, HeadConfig, Prediction, TrackHead, TypicalFuse};
pub use pipeline::{Inference, Method, Pipeline, PipelineSpec};
pub use scenario::{held_out, oracle_fuse, scenario_at, synth_scenario, target_components, Challenge, Scenario, ScenarioConfig, World};
