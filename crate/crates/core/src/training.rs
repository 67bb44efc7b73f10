//! Optimization loop, validation and inference over synthetic datasets.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{is_cascade_param, ForwardOptions, ForwardOutput, PvsNet, ViewSet};
use crate::regularization::{loss_high_res, loss_low_res, photometric_confidence, DepthTarget, LossWeights};
use crate::selection::{select_training_views, SelectionMode};
use crate::synthetic::SceneData;
use crate::tensor::checkpoint::{read_records, write_records, Record};
use crate::tensor::{no_grad, ParamStore, Tensor};

/// Which parameters an optimizer step updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainScope {
    All,
    /// Only the refinement stages and the feature decoder heads.
    CascadeOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub epochs: usize,
    /// Samples whose gradients are averaged per update.
    pub batch_size: usize,
    /// Reference views drawn per epoch; 0 uses every view of every scene.
    pub samples_per_epoch: usize,
    pub mode: SelectionMode,
    /// Sources considered per reference, best score first.
    pub candidates: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Train through the refinement stages with the five-term loss.
    pub cascade: bool,
    pub scope: TrainScope,
    /// Input views (reference included) during validation.
    pub val_views: usize,
    /// Validation references per scene; 0 uses all.
    pub val_refs_per_scene: usize,
    /// Multiply the learning rate by `lr_decay` every `lr_step` epochs
    /// (0 disables the decay).
    pub lr_step: usize,
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            rms_decay: 0.9,
            rms_eps: 1e-8,
            clip_norm: 5.0,
            epochs: 10,
            batch_size: 1,
            samples_per_epoch: 0,
            mode: SelectionMode::AntiNoise,
            candidates: 20,
            seed: 0,
            loss_weights: LossWeights::default(),
            cascade: false,
            scope: TrainScope::All,
            val_views: 5,
            val_refs_per_scene: 0,
            lr_step: 0,
            lr_decay: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be nonnegative", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.rms_decay) || !(self.rms_eps > 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("rms_decay must lie in [0, 1), rms_eps > 0, clip_norm >= 0".into()));
        }
        if self.batch_size == 0 || self.val_views < 2 {
            return Err(Error::Config("batch_size must be >= 1 and val_views >= 2".into()));
        }
        if let SelectionMode::TopN(0) = self.mode {
            return Err(Error::Config("top-n selection needs n >= 1".into()));
        }
        self.loss_weights.validate()
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_step == 0 {
            self.learning_rate
        } else {
            self.learning_rate * self.lr_decay.powi(((epoch - 1) / self.lr_step) as i32)
        }
    }
}

/// RMSprop without momentum: `s = rho s + (1 - rho) g^2`,
/// `w -= lr g / (sqrt(s) + eps)`.
#[derive(Debug, Clone, Default)]
pub struct RmsProp {
    pub decay: f64,
    pub eps: f64,
    pub square: BTreeMap<String, Vec<f32>>,
}

impl RmsProp {
    pub fn new(decay: f64, eps: f64) -> Self {
        Self { decay, eps, square: BTreeMap::new() }
    }

    /// Updates every parameter named in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f32>>, lr: f64) -> Result<()> {
        let (rho, eps) = (self.decay as f32, self.eps as f32);
        for (name, g) in grads {
            let s = self.square.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let w = store.get(name)?.data().to_vec();
            let mut out = Vec::with_capacity(w.len());
            for ((wi, &gi), si) in w.iter().zip(g).zip(s.iter_mut()) {
                *si = rho * *si + (1.0 - rho) * gi * gi;
                out.push(wi - lr as f32 * gi / (si.sqrt() + eps));
            }
            store.set(name, out)?;
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Vec<f32>>, max_norm: f64) -> f64 {
    let norm = grads.values().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Source view ids for a training sample of `reference`.
pub fn training_sources(scene: &SceneData, reference: usize, mode: SelectionMode, candidates: usize) -> Result<Vec<usize>> {
    let pool = &scene.pairs[reference][..candidates.min(scene.pairs[reference].len())];
    Ok(select_training_views(pool, mode)?.into_iter().map(|i| pool[i].source).collect())
}

/// The `n` best-scoring sources of `reference`.
pub fn top_sources(scene: &SceneData, reference: usize, n: usize) -> Result<Vec<usize>> {
    training_sources(scene, reference, SelectionMode::TopN(n), usize::MAX)
}

pub fn view_set(scene: &SceneData, reference: usize, sources: &[usize]) -> Result<ViewSet> {
    let ids: Vec<usize> = std::iter::once(reference).chain(sources.iter().copied()).collect();
    let images: Vec<&[f32]> = ids.iter().map(|&v| scene.views[v].image.as_slice()).collect();
    let cameras = ids.iter().map(|&v| scene.views[v].camera).collect();
    ViewSet::new(scene.height(), scene.width(), &images, cameras)
}

fn target(scene: &SceneData, view: usize, level: usize) -> DepthTarget<'_> {
    let l = &scene.views[view].levels[level];
    DepthTarget { depth: &l.depth, mask: &l.mask }
}

/// Training loss of a forward pass: three quarter-resolution terms, plus
/// the half and full resolution terms when refinement ran.
pub fn sample_loss(out: &ForwardOutput<f32>, scene: &SceneData, reference: usize, weights: &LossWeights) -> Result<Tensor<f32>> {
    if out.depths.len() == 5 {
        let gts = [target(scene, reference, 2), target(scene, reference, 1), target(scene, reference, 0)];
        loss_high_res(&out.depths, gts, weights)
    } else {
        loss_low_res(&out.depths[..3], target(scene, reference, 2), weights)
    }
}

/// Mean absolute error over valid pixels.
pub fn depth_mae(pred: &[f32], gt: &[f32], mask: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() || gt.len() != mask.len() {
        return Err(Error::shape("depth_mae", format!("{} / {} / {}", pred.len(), gt.len(), mask.len())));
    }
    let (sum, n) = pred
        .iter()
        .zip(gt)
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0f64, 0usize), |(s, n), ((&p, &g), _)| (s + (p as f64 - g as f64).abs(), n + 1));
    if n == 0 {
        return Err(Error::InvalidArgument("depth_mae: empty mask".into()));
    }
    Ok(sum / n as f64)
}

/// MAE of the final prediction of `out` against the matching ground truth.
pub fn final_mae(out: &ForwardOutput<f32>, scene: &SceneData, reference: usize) -> Result<f64> {
    let level = if out.depths.len() == 5 { 0 } else { 2 };
    let t = target(scene, reference, level);
    depth_mae(out.depths.last().expect("nonempty").data(), t.depth, t.mask)
}

/// One row of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub mae: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,split,loss,mae,lr";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{}", self.epoch, self.split, self.loss, self.mae, self.lr)
    }
}

/// `(scene, reference)` pairs visited in `epoch`, shuffled from the seed.
pub fn epoch_samples(scenes: &[SceneData], cfg: &TrainConfig, epoch: usize) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> =
        scenes.iter().enumerate().flat_map(|(s, sc)| (0..sc.views.len()).map(move |r| (s, r))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    all.shuffle(&mut rng);
    if cfg.samples_per_epoch > 0 {
        let n = all.len();
        all = (0..cfg.samples_per_epoch).map(|i| all[i % n]).collect();
    }
    all
}

fn trainable(scope: TrainScope, name: &str) -> bool {
    match scope {
        TrainScope::All => true,
        TrainScope::CascadeOnly => is_cascade_param(name),
    }
}

/// Validation summary at a fixed number of input views.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValStats {
    pub loss: f64,
    pub mae: f64,
}

/// Eval-mode loss and final-prediction MAE over validation references.
pub fn validate(model: &PvsNet, scenes: &[SceneData], cfg: &TrainConfig) -> Result<ValStats> {
    let opts = ForwardOptions::eval().with_cascade(cfg.cascade);
    let (mut loss, mut mae, mut n) = (0.0, 0.0, 0usize);
    for scene in scenes {
        let refs = if cfg.val_refs_per_scene == 0 { scene.views.len() } else { cfg.val_refs_per_scene.min(scene.views.len()) };
        for r in 0..refs {
            let sources = top_sources(scene, r, cfg.val_views - 1)?;
            let views = view_set(scene, r, &sources)?;
            let out = no_grad(|| model.forward(&views, &opts))?;
            loss += sample_loss(&out, scene, r, &cfg.loss_weights)?.item() as f64;
            mae += final_mae(&out, scene, r)?;
            n += 1;
        }
    }
    Ok(ValStats { loss: loss / n.max(1) as f64, mae: mae / n.max(1) as f64 })
}

/// Persistent optimizer position, stored beside the checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub best_val_mae: Option<f64>,
    pub best_epoch: Option<usize>,
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub state: TrainState,
}

pub const BEST_CKPT: &str = "best.pvsw";
pub const LAST_CKPT: &str = "last.pvsw";
pub const OPTIMIZER_FILE: &str = "optimizer.pvsw";
pub const STATE_FILE: &str = "state.json";
pub const LOG_FILE: &str = "log.csv";

/// Trains `model` in place. With `out`, writes the metric log, the best
/// and last checkpoints and the optimizer state; if `out` already holds a
/// state file the run resumes after its last completed epoch. On return
/// the model holds the best-validation weights (the last ones when there
/// is no validation split).
pub fn train(model: &mut PvsNet, train_scenes: &[SceneData], val_scenes: &[SceneData], cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    if train_scenes.is_empty() {
        return Err(Error::InvalidArgument("no training scenes".into()));
    }
    if cfg.cascade && !model.has_cascade() {
        return Err(Error::Config("cascade training needs a model with refinement stages".into()));
    }
    let mut opt = RmsProp::new(cfg.rms_decay, cfg.rms_eps);
    let mut state = TrainState { epochs_done: 0, best_val_mae: None, best_epoch: None };
    let mut log = Vec::new();
    let mut best: Option<ParamStore> = None;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        if dir.join(STATE_FILE).exists() {
            state = serde_json::from_str(&fs::read_to_string(dir.join(STATE_FILE))?)?;
            model.store.load(&dir.join(LAST_CKPT))?;
            opt.square = load_optimizer(&dir.join(OPTIMIZER_FILE))?;
            if dir.join(BEST_CKPT).exists() && state.best_epoch.is_some() {
                let snap = model.store.snapshot();
                model.store.load(&dir.join(BEST_CKPT))?;
                best = Some(model.store.snapshot());
                restore(&mut model.store, &snap)?;
            }
        } else {
            fs::write(dir.join(LOG_FILE), format!("{LOG_HEADER}\n"))?;
        }
    }
    let freeze = cfg.scope == TrainScope::CascadeOnly;
    let opts = ForwardOptions { freeze_base: freeze, ..ForwardOptions::train().with_cascade(cfg.cascade) };
    for epoch in state.epochs_done + 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let samples = epoch_samples(train_scenes, cfg, epoch);
        let (mut loss_sum, mut mae_sum) = (0.0, 0.0);
        for (b, batch) in samples.chunks(cfg.batch_size).enumerate() {
            model.store.zero_grad();
            let mut acc: BTreeMap<String, Vec<f32>> = BTreeMap::new();
            for &(s, r) in batch {
                let scene = &train_scenes[s];
                let sources = training_sources(scene, r, cfg.mode, cfg.candidates)?;
                let views = view_set(scene, r, &sources)?;
                let fwd = model.forward(&views, &opts)?;
                let loss = sample_loss(&fwd, scene, r, &cfg.loss_weights)?;
                let value = loss.item() as f64;
                if !value.is_finite() {
                    return Err(Error::Numerical(format!(
                        "loss {value} at epoch {epoch} batch {b} (scene {} view {r})",
                        scene.id
                    )));
                }
                loss_sum += value;
                mae_sum += final_mae(&fwd, scene, r)?;
                loss.mul_scalar(1.0 / batch.len() as f64).backward()?;
                for (name, t) in model.store.params() {
                    if let (true, Some(g)) = (trainable(cfg.scope, name), t.grad()) {
                        let slot = acc.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                        slot.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
                    }
                }
                model.store.zero_grad();
            }
            clip_grad_norm(&mut acc, cfg.clip_norm);
            opt.step(&mut model.store, &acc, lr)?;
        }
        let n = samples.len().max(1) as f64;
        let train_row = LogRow { epoch, split: "train".into(), loss: loss_sum / n, mae: mae_sum / n, lr };
        let mut rows = vec![train_row];
        if !val_scenes.is_empty() {
            let v = validate(model, val_scenes, cfg)?;
            if !v.loss.is_finite() {
                return Err(Error::Numerical(format!("validation loss {} at epoch {epoch}", v.loss)));
            }
            rows.push(LogRow { epoch, split: "val".into(), loss: v.loss, mae: v.mae, lr });
            if state.best_val_mae.is_none_or(|b| v.mae < b) {
                state.best_val_mae = Some(v.mae);
                state.best_epoch = Some(epoch);
                best = Some(model.store.snapshot());
                if let Some(dir) = out {
                    model.store.save(&dir.join(BEST_CKPT))?;
                }
            }
        }
        state.epochs_done = epoch;
        if let Some(dir) = out {
            let mut f = fs::OpenOptions::new().append(true).open(dir.join(LOG_FILE))?;
            for r in &rows {
                writeln!(f, "{}", r.to_csv())?;
            }
            model.store.save(&dir.join(LAST_CKPT))?;
            save_optimizer(&dir.join(OPTIMIZER_FILE), &opt.square)?;
            fs::write(dir.join(STATE_FILE), serde_json::to_string_pretty(&state)?)?;
        }
        log.extend(rows);
    }
    if let Some(b) = best {
        restore(&mut model.store, &b)?;
    }
    Ok(TrainReport { log, state })
}

/// Copies values and statistics of `from` into `store`.
fn restore(store: &mut ParamStore, from: &ParamStore) -> Result<()> {
    store.load_records(&from.to_records())
}

fn save_optimizer(path: &Path, square: &BTreeMap<String, Vec<f32>>) -> Result<()> {
    let records: Vec<Record> = square.iter().map(|(k, v)| Record { name: k.clone(), dims: vec![v.len()], data: v.clone() }).collect();
    let mut buf = Vec::new();
    write_records(&mut buf, &records)?;
    fs::write(path, buf)?;
    Ok(())
}

fn load_optimizer(path: &Path) -> Result<BTreeMap<String, Vec<f32>>> {
    let bytes = fs::read(path)?;
    let records = read_records(bytes.as_slice()).map_err(|e| Error::data(path, e.to_string()))?;
    Ok(records.into_iter().map(|r| (r.name, r.data)).collect())
}

/// Depth and auxiliary maps for one reference view.
#[derive(Debug, Clone)]
pub struct Inference {
    pub height: usize,
    pub width: usize,
    /// Final depth, `[height, width]`.
    pub depth: Vec<f32>,
    /// Photometric confidence of the final probability volume.
    pub confidence: Vec<f32>,
    /// Final quarter-resolution depth.
    pub depth_low: Vec<f32>,
    pub sources: Vec<usize>,
    /// Raw visibility per source at quarter resolution (empty without a
    /// visibility network).
    pub visibility: Vec<Vec<f32>>,
    /// Aggregation weights per source.
    pub weights: Vec<Vec<f32>>,
}

/// Runs the network on `reference` and its `n_views - 1` best sources.
pub fn infer_depth(model: &PvsNet, scene: &SceneData, reference: usize, n_views: usize, cascade: bool) -> Result<Inference> {
    if n_views < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 views, got {n_views}")));
    }
    let sources = top_sources(scene, reference, n_views - 1)?;
    let views = view_set(scene, reference, &sources)?;
    let out = no_grad(|| model.forward(&views, &ForwardOptions::eval().with_cascade(cascade)))?;
    let prob = out.probs.last().expect("nonempty");
    let (d, h, w) = (prob.shape()[0], prob.shape()[1], prob.shape()[2]);
    Ok(Inference {
        height: h,
        width: w,
        depth: out.depths.last().expect("nonempty").to_vec(),
        confidence: photometric_confidence(prob.data(), d, h * w),
        depth_low: out.depths[2].to_vec(),
        sources,
        visibility: out.raw_visibility.iter().map(Tensor::to_vec).collect(),
        weights: out.visibility.iter().map(Tensor::to_vec).collect(),
    })
}

/// Quarter-resolution MAE for each view count in `counts`, averaged over
/// the first `refs_per_scene` references of every scene (0 = all). Pair
/// volumes and visibility maps are computed once per reference and reused
/// across counts; the result equals running the full network per count.
pub fn view_count_sweep(model: &PvsNet, scenes: &[SceneData], counts: &[usize], refs_per_scene: usize) -> Result<Vec<(usize, f64)>> {
    let max_n = counts.iter().copied().max().unwrap_or(0);
    if counts.iter().any(|&n| n < 2) {
        return Err(Error::InvalidArgument("view counts must be >= 2".into()));
    }
    let mut sums = vec![0.0; counts.len()];
    let mut n = 0usize;
    for scene in scenes {
        let refs = if refs_per_scene == 0 { scene.views.len() } else { refs_per_scene.min(scene.views.len()) };
        let (h, w) = (scene.height(), scene.width());
        for r in 0..refs {
            let sources = top_sources(scene, r, max_n - 1)?;
            let views = view_set(scene, r, &sources)?;
            let ref_feat = model.encode_image(&views.images[0], h, w)?;
            let mut volumes = Vec::with_capacity(sources.len());
            let mut raw = Vec::with_capacity(sources.len());
            for (i, &s) in sources.iter().enumerate() {
                let src_feat = model.encode_image(&views.images[i + 1], h, w)?;
                let (vol, v) = model.pair_visibility(&ref_feat, &src_feat, &views.cameras[0], &scene.views[s].camera)?;
                volumes.push(vol);
                raw.extend(v);
            }
            let gt = &scene.views[r].levels[2];
            for (k, &count) in counts.iter().enumerate() {
                let m = count - 1;
                let raw_m = if raw.is_empty() { &raw[..] } else { &raw[..m] };
                let (_, depth) = model.depth_from_pairs(&volumes[..m], raw_m, &views.cameras[0])?;
                sums[k] += depth_mae(depth.data(), &gt.depth, &gt.mask)?;
            }
            n += 1;
        }
    }
    Ok(counts.iter().zip(sums).map(|(&c, s)| (c, s / n.max(1) as f64)).collect())
}
