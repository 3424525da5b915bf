//! Generative feedback-loop pose estimation for hands and hand-held objects
//! in depth images: synthetic scenes, metric crops, pose models, the four
//! learned functions, the refinement loops and a direct-fit baseline.

pub mod baseline;
pub mod depth;
pub mod error;
pub mod experiment;
pub mod feedback;
pub mod geometry;
pub mod hand;
pub mod joint;
pub mod metrics;
pub mod object;
pub mod nets;
pub mod pipeline;
pub mod pose;
pub mod render;
pub mod scene;
pub mod train;

pub use error::{CoreError, Result};
