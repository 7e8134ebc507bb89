//! Core of a desk-scale real-time cluster path tracer: a deterministic CPU path
//! tracer with persistent, frame-time updated scene state, the three work
//! distribution strategies (tiling, sample splitting, pixel striding), the
//! single-producer/single-consumer queues that pipeline frames, and the wire
//! protocol spoken between client, master and workers.

pub mod animation;
pub mod bsdf;
pub mod buffer;
pub mod bvh;
pub mod camera;
pub mod distribution;
pub mod geometry;
pub mod math;
pub mod pipeline;
pub mod protocol;
pub mod render;
pub mod rng;
pub mod scene;
pub mod scene_file;

pub use buffer::{tone_map, Image8, RadianceBuffer};
pub use bvh::Bvh;
pub use camera::{sample_camera_ray, Camera, Dims, PixelTransform};
pub use distribution::{plan, PlanOptions, Strategy, StrideLayout, WorkAssignment};
pub use math::{Ray, Vec3};
pub use pipeline::{ring_queue, Consumer, Producer};
pub use protocol::Message;
pub use render::{render_region, Rect, Region, RenderOutput, RenderSettings, SampleRange};
pub use scene::{Scene, SceneDesc, SceneUpdate};
