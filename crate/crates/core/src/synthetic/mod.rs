//! Procedural scenes rendered by ray casting, with exact depth at three
//! resolutions and per-pair visibility ground truth.

mod dataset;
mod render;
mod scene;

pub use dataset::{build_scene, format_pairs, parse_pairs, read_scene, score_pairs, write_scene, dataset_files, Dataset, DatasetSpec, SceneData, ViewData};
pub use render::{
    cast, downsample_gt, intersect, oracle_visibility, pixel_ray, point_visible, render_view, surface_point, value_noise, DepthLevel,
    Hit, RenderedView, VISIBILITY_TOL,
};
pub use scene::{Primitive, RigMode, Scene, SceneSpec, Shape, Texture, GROUND_HALF};
