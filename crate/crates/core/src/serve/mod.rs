//! Message-bus service: broker, client, per-image pipeline and the running service.

pub mod broker;
pub mod client;
pub mod drift;
pub mod pipeline;
pub mod protocol;
pub mod service;

pub use broker::{broker_sim, BrokerHandle};
pub use client::{Backoff, BrokerClient, Delivery};
pub use drift::{drift_update, DriftAlert, DriftConfig, DriftMetric, DriftState};
pub use pipeline::{pipeline_process, DetectionMessage, Encoding, ImageMessage, PipelineError, PostConfig};
pub use service::{serve, PipelineConfig, ServeError, ServiceHandle, StatsMessage, Topics};
