pub mod annotations;
pub mod centermap;
pub mod config;
pub mod error;
pub mod filters;
pub mod instancer;
pub mod manifest;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod prm;
pub mod refine;
pub mod synth;
pub mod volume;
