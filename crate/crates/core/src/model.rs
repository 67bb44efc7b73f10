//! The full network: shared features, per-source visibility, weighted
//! aggregation, stacked regularization and optional refinement stages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::{upsample_visibility, uncertainty_range, CascadeConfig, PixelDepthRange, RefineStage};
use crate::cost_volume::{
    aggregate, build_two_view_volume, truncate_visibility, visibility_map, VisibilityNet, DEFAULT_TAU,
};
use crate::error::{Error, Result};
use crate::features::{normalize_image, FeatureNet, FeatureNetConfig};
use crate::geometry::{build_warp_grid, relative_pose, sample_inverse_depths, Camera, DepthHypotheses};
use crate::nn::Ctx;
use crate::regularization::{regress_depth, Regularizer, RegularizerConfig};
use crate::tensor::{no_grad, NormMode, ParamStore, Real, Tensor};

/// How source volumes are weighted before aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VisibilityMode {
    /// Per-pixel maps from the visibility network.
    Learned,
    /// Every source weighted 1 (plain mean of the two-view volumes).
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hypotheses of the quarter-resolution sweep.
    pub depth_hypotheses: usize,
    pub groups: usize,
    pub features: FeatureNetConfig,
    pub visibility: VisibilityMode,
    pub visibility_channels: Vec<usize>,
    pub tau: f64,
    /// Apply the `> tau` truncation to visibility maps.
    pub truncate: bool,
    pub regularizer: RegularizerConfig,
    pub cascade: CascadeConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth_hypotheses: 192,
            groups: 8,
            features: FeatureNetConfig::default(),
            visibility: VisibilityMode::Learned,
            visibility_channels: vec![8, 16, 32],
            tau: DEFAULT_TAU,
            truncate: true,
            regularizer: RegularizerConfig::default(),
            cascade: CascadeConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.cascade.validate()?;
        if self.depth_hypotheses < 2 {
            return Err(Error::Config("depth_hypotheses must be >= 2".into()));
        }
        let f = self.features.out_channels();
        if self.groups == 0 || f % self.groups != 0 {
            return Err(Error::Config(format!("groups {} must divide feature channels {f}", self.groups)));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} must lie in [0, 1)", self.tau)));
        }
        Ok(())
    }
}

/// Reference view first, then sources in priority order.
#[derive(Debug, Clone)]
pub struct ViewSet {
    pub height: usize,
    pub width: usize,
    /// Standardized images, `[3, H, W]` each.
    pub images: Vec<Vec<f32>>,
    pub cameras: Vec<Camera>,
}

impl ViewSet {
    /// `images` hold RGB in `[0, 1]`, `[3, H, W]` each.
    pub fn new(height: usize, width: usize, images: &[&[f32]], cameras: Vec<Camera>) -> Result<Self> {
        if images.len() != cameras.len() || images.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need a reference and at least one source, got {} images / {} cameras",
                images.len(),
                cameras.len()
            )));
        }
        if let Some(bad) = images.iter().find(|im| im.len() != 3 * height * width) {
            return Err(Error::shape("view_set", format!("image of {} values, expected 3x{height}x{width}", bad.len())));
        }
        let images = images.iter().map(|im| normalize_image(im, height, width)).collect();
        Ok(Self { height, width, images, cameras })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn batch<T: Real>(&self) -> Result<Tensor<T>> {
        let data = self.images.iter().flatten().map(|&v| T::lit(v as f64)).collect();
        Tensor::from_vec(&[self.len(), 3, self.height, self.width], data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub mode: NormMode,
    pub cascade: bool,
    /// Run the low-resolution network as a fixed function (no gradients,
    /// running statistics) so only refinement parameters learn.
    pub freeze_base: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self { mode: NormMode::Train, cascade: false, freeze_base: false }
    }

    pub fn eval() -> Self {
        Self { mode: NormMode::Eval, cascade: false, freeze_base: false }
    }

    pub fn with_cascade(mut self, on: bool) -> Self {
        self.cascade = on;
        self
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Real> {
    /// Three quarter-resolution maps, then (cascade) half and full.
    pub depths: Vec<Tensor<T>>,
    /// Probability volumes matching `depths`.
    pub probs: Vec<Tensor<T>>,
    /// Raw visibility `V_i` per source, `[h, w]`.
    pub raw_visibility: Vec<Tensor<T>>,
    /// Weights actually used for aggregation (truncated or constant).
    pub visibility: Vec<Tensor<T>>,
    pub hypotheses: DepthHypotheses,
    /// Per-pixel ranges of the refinement stages.
    pub ranges: Vec<PixelDepthRange>,
}

/// Prefix shared by every parameter that only the refinement path uses.
pub const CASCADE_PREFIXES: [&str; 2] = ["cascade.", "features.heads."];

pub fn is_cascade_param(name: &str) -> bool {
    CASCADE_PREFIXES.iter().any(|p| name.starts_with(p))
}

#[derive(Debug)]
pub struct PvsNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    features: FeatureNet,
    visibility: Option<VisibilityNet>,
    regularizer: Regularizer,
    stages: Vec<RefineStage>,
}

impl PvsNet {
    /// Builds the network with weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let features = FeatureNet::new(&mut store, &mut rng, "features", config.features.clone())?;
        let visibility = match config.visibility {
            VisibilityMode::Learned => Some(VisibilityNet::new(
                &mut store,
                &mut rng,
                "visibility",
                config.groups,
                &config.visibility_channels,
            )?),
            VisibilityMode::Constant => None,
        };
        let regularizer = Regularizer::new(&mut store, &mut rng, "regularizer", config.groups, &config.regularizer)?;
        let mut stages = Vec::new();
        if config.features.cascade_heads {
            for s in 0..2 {
                stages.push(RefineStage::new(
                    &mut store,
                    &mut rng,
                    &format!("cascade.stage{}", s + 1),
                    config.cascade.stage_groups[s],
                    config.cascade.stage_depths[s],
                    &config.cascade.unet_channels,
                )?);
            }
        }
        Ok(Self { config, store, features, visibility, regularizer, stages })
    }

    pub fn has_cascade(&self) -> bool {
        !self.stages.is_empty()
    }

    pub fn forward(&self, views: &ViewSet, opts: &ForwardOptions) -> Result<ForwardOutput<f32>> {
        self.forward_with(&self.store, views, opts)
    }

    /// Forward pass using an arbitrary parameter store of matching layout
    /// (e.g. an `f64` copy for gradient checks).
    pub fn forward_with<T: Real>(
        &self,
        store: &ParamStore<T>,
        views: &ViewSet,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput<T>> {
        if opts.cascade && !self.has_cascade() {
            return Err(Error::Config("model was built without refinement stages".into()));
        }
        let (h, w) = (views.height / 4, views.width / 4);
        let base_ctx = Ctx {
            store,
            mode: if opts.freeze_base { NormMode::Eval } else { opts.mode },
        };
        let images = views.batch::<T>()?;
        let run_base = || -> Result<_> {
            let enc = self.features.encode(&base_ctx, &images)?;
            let feats: Vec<Tensor<T>> = (0..views.len()).map(|i| enc.quarter.select(i)).collect::<Result<_>>()?;
            let hyps = sample_inverse_depths(&views.cameras[0].range, self.config.depth_hypotheses)?;
            let volumes = self.pair_volumes(&feats, &views.cameras, &hyps, h, w)?;
            let raw = self.raw_visibility(&base_ctx, &volumes)?;
            let weights = self.weights(&raw, views.len() - 1, h, w);
            let agg = aggregate(&volumes, &weights)?;
            let probs = self.regularizer.forward(&base_ctx, &agg.volume)?;
            let depths = probs
                .iter()
                .map(|p| regress_depth(p, &views.cameras[0].range))
                .collect::<Result<Vec<_>>>()?;
            Ok((enc, hyps, raw, weights, probs, depths))
        };
        let (enc, hyps, raw, weights, mut probs, mut depths) =
            if opts.freeze_base { no_grad(run_base)? } else { run_base()? };

        let mut ranges = Vec::new();
        if opts.cascade {
            let ctx = Ctx { store, mode: opts.mode };
            let (half, full) = self.features.decode(&ctx, &enc)?;
            let cfg = &self.config.cascade;
            let range = views.cameras[0].range;
            let mut prev_prob: Vec<f32> = probs[2].data().iter().map(|v| v.as_f32()).collect();
            let mut prev_hyps = hyps.values.clone();
            let mut prev_count = hyps.count();
            let mut stage_w = weights.clone();
            let (mut sh, mut sw) = (h, w);
            for (s, (stage, feats)) in self.stages.iter().zip([half, full]).enumerate() {
                let pr = uncertainty_range(
                    &prev_prob, &prev_hyps, prev_count, sh, sw, cfg.k, &range, stage.depths, cfg.min_width_factor,
                )
                .upsample2();
                stage_w = stage_w.iter().map(upsample_visibility).collect::<Result<_>>()?;
                sh *= 2;
                sw *= 2;
                let scale = if s == 0 { 0.5 } else { 1.0 };
                let out = stage.forward(&ctx, &feats, &views.cameras, scale, pr, &stage_w)?;
                prev_prob = out.prob.data().iter().map(|v| v.as_f32()).collect();
                prev_hyps = out.hypotheses.clone();
                prev_count = stage.depths;
                probs.push(out.prob);
                depths.push(out.depth);
                ranges.push(out.range);
            }
        }
        Ok(ForwardOutput { depths, probs, raw_visibility: raw, visibility: weights, hypotheses: hyps, ranges })
    }

    /// Two-view volumes of every source against the reference.
    pub fn pair_volumes<T: Real>(
        &self,
        feats: &[Tensor<T>],
        cameras: &[Camera],
        hyps: &DepthHypotheses,
        h: usize,
        w: usize,
    ) -> Result<Vec<Tensor<T>>> {
        (1..feats.len())
            .map(|i| {
                let rel = relative_pose(&cameras[0].pose, &cameras[i].pose);
                let grid = build_warp_grid(&cameras[0].intrinsics, &cameras[i].intrinsics, &rel, hyps, h, w, 0.25);
                Ok(build_two_view_volume(&feats[0], &feats[i], &grid, self.config.groups, i)?.volume)
            })
            .collect()
    }

    /// Raw visibility maps (empty in constant mode). Sources are batched.
    pub fn raw_visibility<T: Real>(&self, ctx: &Ctx<'_, T>, volumes: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let Some(net) = &self.visibility else {
            return Ok(Vec::new());
        };
        let pv = net.forward(ctx, &Tensor::stack(volumes)?)?;
        (0..volumes.len()).map(|i| visibility_map(&pv.select(i)?)).collect()
    }

    /// Aggregation weights: truncated maps, raw maps, or constant ones.
    pub fn weights<T: Real>(&self, raw: &[Tensor<T>], sources: usize, h: usize, w: usize) -> Vec<Tensor<T>> {
        match self.config.visibility {
            VisibilityMode::Constant => (0..sources).map(|_| Tensor::full(&[h, w], T::one())).collect(),
            VisibilityMode::Learned if self.config.truncate => {
                raw.iter().map(|v| truncate_visibility(v, self.config.tau)).collect()
            }
            VisibilityMode::Learned => raw.to_vec(),
        }
    }

    /// Quarter-resolution features of one standardized image (eval mode).
    pub fn encode_image(&self, image: &[f32], height: usize, width: usize) -> Result<Tensor<f32>> {
        no_grad(|| {
            let x = Tensor::from_vec(&[3, height, width], image.to_vec())?;
            Ok(self.features.encode(&Ctx::eval(&self.store), &x)?.quarter)
        })
    }

    /// Two-view volume and raw visibility map of one pair (eval mode).
    pub fn pair_visibility(
        &self,
        ref_feat: &Tensor<f32>,
        src_feat: &Tensor<f32>,
        ref_cam: &Camera,
        src_cam: &Camera,
    ) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
        no_grad(|| {
            let (h, w) = (ref_feat.shape()[1], ref_feat.shape()[2]);
            let hyps = sample_inverse_depths(&ref_cam.range, self.config.depth_hypotheses)?;
            let vol = self
                .pair_volumes(&[ref_feat.clone(), src_feat.clone()], &[*ref_cam, *src_cam], &hyps, h, w)?
                .remove(0);
            let raw = match &self.visibility {
                Some(net) => Some(visibility_map(&net.forward(&Ctx::eval(&self.store), &vol)?)?),
                None => None,
            };
            Ok((vol, raw))
        })
    }

    /// Aggregates precomputed pair volumes and regresses the final
    /// quarter-resolution depth (eval mode). Returns `(prob, depth)`.
    pub fn depth_from_pairs(
        &self,
        volumes: &[Tensor<f32>],
        raw: &[Tensor<f32>],
        ref_cam: &Camera,
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        no_grad(|| {
            let (h, w) = (volumes[0].shape()[2], volumes[0].shape()[3]);
            let weights = self.weights(raw, volumes.len(), h, w);
            let agg = aggregate(volumes, &weights)?;
            let probs = self.regularizer.forward(&Ctx::eval(&self.store), &agg.volume)?;
            let prob = probs.into_iter().last().expect("three outputs");
            let depth = regress_depth(&prob, &ref_cam.range)?;
            Ok((prob, depth))
        })
    }
}
