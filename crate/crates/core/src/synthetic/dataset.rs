//! Multi-scene datasets: generation, covisibility statistics, pair lists
//! and the on-disk layout.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::render::{point_visible, render_view, surface_point, DepthLevel, RenderedView};
use super::scene::{Scene, SceneSpec};
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::io::{Point, read_mask_png, read_pfm, read_rgb_png, write_mask_png, write_pfm, write_rgb_png, FloatMap};
use crate::selection::{global_view_score, rank_by_score, AngleWeight, ViewScore};

/// Scene counts, the per-scene template and view-scoring parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Template; its seed is replaced per scene.
    pub scene: SceneSpec,
    pub angle_weight: AngleWeight,
    /// Minimum number of sources with nonzero score per reference.
    pub min_sources: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train_scenes: 24,
            val_scenes: 6,
            scene: SceneSpec::default(),
            angle_weight: AngleWeight::default(),
            min_sources: 4,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.train_scenes + self.val_scenes == 0 {
            return Err(Error::Config("dataset needs at least one scene".into()));
        }
        if self.min_sources >= self.scene.views {
            return Err(Error::Config(format!(
                "min_sources {} must be below views per scene {}",
                self.min_sources, self.scene.views
            )));
        }
        Ok(())
    }
}

/// One view's image, ground truth and camera.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewData {
    pub image: Vec<f32>,
    /// Full, half and quarter resolution.
    pub levels: [DepthLevel; 3],
    pub camera: Camera,
}

impl From<RenderedView> for ViewData {
    fn from(v: RenderedView) -> Self {
        Self { image: v.image, levels: v.levels, camera: v.camera }
    }
}

/// A rendered scene with its per-reference ranked sources.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneData {
    pub id: String,
    pub scene: Scene,
    pub views: Vec<ViewData>,
    /// `pairs[r]`: every other view, best score first.
    pub pairs: Vec<Vec<ViewScore>>,
    /// `covisibility[r][s]`: fraction of valid quarter-resolution pixels of
    /// `r` visible in `s`.
    pub covisibility: Vec<Vec<f64>>,
}

impl SceneData {
    pub fn height(&self) -> usize {
        self.scene.spec.height
    }

    pub fn width(&self) -> usize {
        self.scene.spec.width
    }

    /// Mean covisibility over ordered pairs of distinct views.
    pub fn mean_covisibility(&self) -> f64 {
        let n = self.views.len();
        let total: f64 = (0..n).flat_map(|r| (0..n).filter(move |&s| s != r).map(move |s| (r, s))).map(|(r, s)| self.covisibility[r][s]).sum();
        total / (n * (n - 1)) as f64
    }

    /// Ground-truth cloud: the surface point behind every full-resolution
    /// pixel of every view, colored from that view's image.
    pub fn gt_cloud(&self) -> Vec<Point> {
        let (h, w) = (self.height(), self.width());
        let n = h * w;
        let mut points = Vec::new();
        for view in &self.views {
            for i in 0..n {
                if let Some(p) = surface_point(&self.scene, &view.camera, (i % w) as f64, (i / w) as f64, 1.0) {
                    let color = std::array::from_fn(|c| (view.image[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
                    points.push(Point { position: p.into(), color });
                }
            }
        }
        points
    }
}

/// Scores and covisibility of every ordered view pair, from the surface
/// points behind each reference's quarter-resolution pixels.
pub fn score_pairs(scene: &Scene, cameras: &[Camera], weight: &AngleWeight) -> (Vec<Vec<ViewScore>>, Vec<Vec<f64>>) {
    let n = cameras.len();
    let rows: Vec<(Vec<ViewScore>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|r| {
            let (h, w) = (scene.spec.height / 4, scene.spec.width / 4);
            let points: Vec<_> = (0..h * w)
                .filter_map(|i| surface_point(scene, &cameras[r], (i % w) as f64, (i / w) as f64, 0.25))
                .collect();
            let mut scores = Vec::with_capacity(n - 1);
            let mut covis = vec![0.0; n];
            for s in (0..n).filter(|&s| s != r) {
                let seen: Vec<_> = points.iter().filter(|p| point_visible(scene, &cameras[s], p)).copied().collect();
                covis[s] = if points.is_empty() { 0.0 } else { seen.len() as f64 / points.len() as f64 };
                let score = global_view_score(&cameras[r].center(), &cameras[s].center(), &seen, weight);
                scores.push(ViewScore { source: s, score });
            }
            let ranked = rank_by_score(&scores).into_iter().map(|i| scores[i]).collect();
            (ranked, covis)
        })
        .collect();
    rows.into_iter().unzip()
}

/// Seed of scene `index` in a dataset seeded with `seed`.
fn scene_seed(seed: u64, index: usize, attempt: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((index as u64) << 20) ^ attempt
}

/// Renders one scene, retrying with a new seed while any view is empty or
/// any reference has fewer than `min_sources` covisible sources.
pub fn build_scene(spec: &DatasetSpec, index: usize) -> Result<SceneData> {
    for attempt in 0..32 {
        let scene_spec = SceneSpec { seed: scene_seed(spec.seed, index, attempt), ..spec.scene.clone() };
        let mut scene = Scene::generate(&scene_spec)?;
        let Ok(views) = (0..scene_spec.views).into_par_iter().map(|v| render_view(&scene, v)).collect::<Result<Vec<_>>>() else {
            continue;
        };
        scene.cameras = views.iter().map(|v| v.camera).collect();
        let (pairs, covisibility) = score_pairs(&scene, &scene.cameras, &spec.angle_weight);
        let ok = pairs.iter().all(|p| p.iter().filter(|s| s.score > 0.0).count() >= spec.min_sources);
        if ok {
            return Ok(SceneData {
                id: format!("{index:03}"),
                scene,
                views: views.into_iter().map(ViewData::from).collect(),
                pairs,
                covisibility,
            });
        }
    }
    Err(Error::InvalidArgument(format!("scene {index}: no valid layout after 32 attempts")))
}

/// Train and validation scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<SceneData>,
    pub val: Vec<SceneData>,
}

impl Dataset {
    /// Renders all scenes in memory. Validation scenes follow the
    /// training scenes in index order.
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let train = (0..spec.train_scenes).map(|i| build_scene(spec, i)).collect::<Result<_>>()?;
        let val = (spec.train_scenes..spec.train_scenes + spec.val_scenes).map(|i| build_scene(spec, i)).collect::<Result<_>>()?;
        Ok(Self { spec: spec.clone(), train, val })
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let index = DatasetIndex {
            spec: self.spec.clone(),
            train: self.train.iter().map(|s| s.id.clone()).collect(),
            val: self.val.iter().map(|s| s.id.clone()).collect(),
        };
        fs::create_dir_all(root.join("scenes"))?;
        fs::write(root.join("dataset.json"), serde_json::to_string_pretty(&index)?)?;
        for s in self.train.iter().chain(&self.val) {
            write_scene(&root.join("scenes").join(&s.id), s)?;
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("dataset.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::data(&path, e.to_string()))?;
        let index: DatasetIndex = serde_json::from_str(&text).map_err(|e| Error::data(&path, e.to_string()))?;
        let load = |ids: &[String]| ids.iter().map(|id| read_scene(&root.join("scenes").join(id), id)).collect::<Result<Vec<_>>>();
        Ok(Self { train: load(&index.train)?, val: load(&index.val)?, spec: index.spec })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetIndex {
    spec: DatasetSpec,
    train: Vec<String>,
    val: Vec<String>,
}

/// Scene metadata stored next to the rendered files.
#[derive(Debug, Serialize, Deserialize)]
struct SceneFile {
    scene: Scene,
    covisibility: Vec<Vec<f64>>,
    mean_covisibility: f64,
}

fn view_name(v: usize) -> String {
    format!("{v:03}")
}

/// Writes images, cameras, depth/mask pyramids, `pair.txt` and
/// `scene.json` under `dir`.
pub fn write_scene(dir: &Path, s: &SceneData) -> Result<()> {
    for sub in ["images", "cams", "depths", "masks"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let (h, w) = (s.height(), s.width());
    for (v, view) in s.views.iter().enumerate() {
        let name = view_name(v);
        write_rgb_png(&dir.join("images").join(format!("{name}.png")), &view.image, h, w)?;
        view.camera.save(&dir.join("cams").join(format!("{name}.txt")))?;
        for (l, lev) in view.levels.iter().enumerate() {
            let map = FloatMap { height: lev.height, width: lev.width, data: lev.depth.clone() };
            write_pfm(&dir.join("depths").join(format!("{name}_s{l}.pfm")), &map)?;
            write_mask_png(&dir.join("masks").join(format!("{name}_s{l}.png")), &lev.mask, lev.height, lev.width)?;
        }
    }
    fs::write(dir.join("pair.txt"), format_pairs(&s.pairs))?;
    let meta = SceneFile { scene: s.scene.clone(), covisibility: s.covisibility.clone(), mean_covisibility: s.mean_covisibility() };
    fs::write(dir.join("scene.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_scene(dir: &Path, id: &str) -> Result<SceneData> {
    let meta_path = dir.join("scene.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::data(&meta_path, e.to_string()))?;
    let meta: SceneFile = serde_json::from_str(&text).map_err(|e| Error::data(&meta_path, e.to_string()))?;
    let mut views = Vec::with_capacity(meta.scene.spec.views);
    for v in 0..meta.scene.spec.views {
        let name = view_name(v);
        let img_path = dir.join("images").join(format!("{name}.png"));
        let (image, h, w) = read_rgb_png(&img_path)?;
        if (h, w) != (meta.scene.spec.height, meta.scene.spec.width) {
            return Err(Error::data(img_path, format!("image is {h}x{w}")));
        }
        let camera = Camera::load(&dir.join("cams").join(format!("{name}.txt")))?;
        let mut levels = Vec::with_capacity(3);
        for l in 0..3 {
            let d_path = dir.join("depths").join(format!("{name}_s{l}.pfm"));
            let map = read_pfm(&d_path)?;
            let (mask, mh, mw) = read_mask_png(&dir.join("masks").join(format!("{name}_s{l}.png")))?;
            if (mh, mw) != (map.height, map.width) {
                return Err(Error::data(d_path, "depth and mask sizes differ"));
            }
            levels.push(DepthLevel { height: map.height, width: map.width, depth: map.data, mask });
        }
        let levels: [DepthLevel; 3] = levels.try_into().expect("three levels");
        views.push(ViewData { image, levels, camera });
    }
    let pair_path = dir.join("pair.txt");
    let pairs = parse_pairs(&fs::read_to_string(&pair_path)?).map_err(|e| Error::data(&pair_path, e))?;
    Ok(SceneData { id: id.to_string(), scene: meta.scene, views, pairs, covisibility: meta.covisibility })
}

/// Pair-file text: view count, then per reference its id and a line
/// `n id score id score ...`.
pub fn format_pairs(pairs: &[Vec<ViewScore>]) -> String {
    let mut s = format!("{}\n", pairs.len());
    for (r, list) in pairs.iter().enumerate() {
        s.push_str(&format!("{r}\n{}", list.len()));
        for v in list {
            s.push_str(&format!(" {} {}", v.source, v.score));
        }
        s.push('\n');
    }
    s
}

pub fn parse_pairs(text: &str) -> std::result::Result<Vec<Vec<ViewScore>>, String> {
    let mut tok = text.split_whitespace();
    let mut next = |what: &str| tok.next().ok_or_else(|| format!("pair file ended while reading {what}"));
    let n: usize = next("view count")?.parse().map_err(|e| format!("view count: {e}"))?;
    let mut pairs = vec![Vec::new(); n];
    for _ in 0..n {
        let r: usize = next("reference id")?.parse().map_err(|e| format!("reference id: {e}"))?;
        if r >= n {
            return Err(format!("reference id {r} out of range"));
        }
        let k: usize = next("source count")?.parse().map_err(|e| format!("source count: {e}"))?;
        for _ in 0..k {
            let source = next("source id")?.parse().map_err(|e| format!("source id: {e}"))?;
            let score = next("score")?.parse().map_err(|e| format!("score: {e}"))?;
            pairs[r].push(ViewScore { source, score });
        }
    }
    Ok(pairs)
}

/// Lists the files a dataset directory should contain, for manifests.
pub fn dataset_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}
