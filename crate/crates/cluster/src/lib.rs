//! Master, worker and client processes of a desk-scale cluster path tracer.

pub mod bench;
pub mod client;
pub mod master;
pub mod net;
pub mod postprocess;
pub mod stats;
pub mod threads;
pub mod worker;
pub mod ws;

pub use client::{run_client, CameraPath, ClientConfig, PathSpec, RunReport};
pub use master::{BoundAddrs, Master, MasterConfig, MasterReport};
pub use threads::ThreadRegistry;
pub use worker::{run_worker, WorkerConfig, WorkerReport};
