//! Few-view Gaussian splatting with MVS initialization and forward-warped
//! supervision of unseen views.

pub mod fixtures;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod mvs;
pub mod pipeline;
pub mod render;
pub mod scene;
pub mod train;
pub mod warp;

pub use geometry::{Camera, DepthMap, DepthRole, GeometryError, Image, Intrinsics, Pose, View};
pub use losses::{LossError, LossWeights};
pub use metrics::{EvalReport, MetricsError};
pub use mvs::{ConsistencyConfig, MvsError, PointCloud};
pub use pipeline::{PipelineConfig, PipelineError, TestView};
pub use render::{GaussianGrads, GaussianSet, RenderConfig, RenderError, RenderOutput};
pub use scene::{SceneDir, SceneError};
pub use train::{TrainConfig, TrainError};
pub use warp::{WarpError, WarpResult};
