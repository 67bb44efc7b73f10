//! `pvsnet`: dataset generation, training, inference, fusion, evaluation
//! and sweep reports.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data error,
//! 4 numerical failure.

mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pvsnet::config::Config;
use pvsnet::fusion::{eval_pointcloud, fuse, geometric_filter, photometric_filter, positions, DepthView, MetricReport};
use pvsnet::io::{read_pfm, read_ply, write_gray_png, write_pfm, write_ply, FloatMap, PlyFormat};
use pvsnet::model::PvsNet;
use pvsnet::selection::SelectionMode;
use pvsnet::synthetic::{dataset_files, Dataset, RigMode, SceneData};
use pvsnet::training::{depth_mae, infer_depth, train, BEST_CKPT, STATE_FILE};
use pvsnet::{Error, Result};
use serde::Serialize;

use manifest::{input_hash, unix_now, RunManifest};

/// Configuration snapshot written next to checkpoints.
const CONFIG_FILE: &str = "config.toml";

#[derive(Parser)]
#[command(name = "pvsnet", version, about = "Pixelwise visibility-aware multi-view stereo on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rig {
    Wide,
    Sequence,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// The two best-scoring sources.
    Best2,
    /// The two best plus the two worst sources.
    AntiNoise,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Val,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        rig: Option<Rig>,
        #[arg(long)]
        train_scenes: Option<usize>,
        #[arg(long)]
        val_scenes: Option<usize>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes checkpoints, the metric log and the config.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Train through the refinement stages.
        #[arg(long)]
        cascade: bool,
        /// Continue the run recorded in --out.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        force: bool,
    },
    /// Estimate depth maps for every reference view of a split.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the config stored beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input view counts, reference included; one MAE row per count.
        #[arg(long, value_delimiter = ',', default_value = "5")]
        views: Vec<usize>,
        #[arg(long, value_enum, default_value = "off")]
        cascade: Switch,
        /// Write one visibility PNG per source.
        #[arg(long)]
        dump_vis: bool,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        /// Variant name in the sweep CSV; defaults to the checkpoint's directory name.
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        force: bool,
    },
    /// Filter depth maps and fuse them into one PLY cloud per scene.
    Fuse {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory of inferred maps (one `n<N>` directory of `infer`).
        #[arg(long, required_unless_present = "gt", conflicts_with = "gt")]
        depths: Option<PathBuf>,
        /// Fuse the ground-truth depth maps instead.
        #[arg(long)]
        gt: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        #[arg(long)]
        ascii: bool,
        #[arg(long)]
        force: bool,
    },
    /// Compare fused clouds with the ray-cast ground-truth clouds.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Directory holding `<scene>.ply` files.
        #[arg(long)]
        clouds: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Percentage-metric threshold in world units.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        /// Also write the ground-truth clouds.
        #[arg(long)]
        save_gt: bool,
        #[arg(long)]
        force: bool,
    },
    /// Join sweep CSVs into one table of MAE per view count and variant.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        sweeps: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Data { .. } | Error::Io(_) | Error::Image(_) | Error::Json(_) => 3,
        Error::Numerical(_) => 4,
        Error::Shape { .. } | Error::NonScalarBackward(_) => 1,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { out, config, seed, rig, train_scenes, val_scenes, force } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            if let Some(r) = rig {
                cfg.data.scene.rig = match r {
                    Rig::Wide => RigMode::Wide,
                    Rig::Sequence => RigMode::Sequence,
                };
            }
            cfg.data.train_scenes = train_scenes.unwrap_or(cfg.data.train_scenes);
            cfg.data.val_scenes = val_scenes.unwrap_or(cfg.data.val_scenes);
            cfg.validate()?;
            prepare_out(&out, force)?;
            gen_data(&cfg, &out)
        }
        Command::Train { data, out, config, mode, epochs, seed, cascade, resume, force } => {
            let resuming = out.join(STATE_FILE).exists();
            if resume && !resuming {
                return Err(Error::Config(format!("--resume: {} holds no training state", out.display())));
            }
            if resuming && !resume && !force {
                return Err(Error::Config(format!("{} holds a training run; pass --resume to continue it", out.display())));
            }
            let mut cfg = match (resume, &config) {
                (true, None) => load_config(Some(&out.join(CONFIG_FILE)))?,
                _ => load_config(config.as_deref())?,
            };
            if let Some(m) = mode {
                cfg.train.mode = match m {
                    Mode::Best2 => SelectionMode::BestTwo,
                    Mode::AntiNoise => SelectionMode::AntiNoise,
                };
            }
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            cfg.train.seed = seed.unwrap_or(cfg.train.seed);
            cfg.train.cascade |= cascade;
            cfg.validate()?;
            if !resume {
                prepare_out(&out, force)?;
                // The trainer resumes whenever a state file exists.
                if resuming {
                    fs::remove_file(out.join(STATE_FILE))?;
                }
            }
            run_train(&cfg, &data, &out)
        }
        Command::Infer { data, ckpt, out, config, views, cascade, dump_vis, split, label, force } => {
            let config = config.or_else(|| ckpt.parent().map(|p| p.join(CONFIG_FILE)));
            let cfg = load_config(config.as_deref())?;
            if views.iter().any(|&n| n < 2) {
                return Err(Error::Config("--views counts must be >= 2".into()));
            }
            let cascade = matches!(cascade, Switch::On);
            if cascade && !cfg.model.features.cascade_heads {
                return Err(Error::Config("--cascade on needs a model configured with cascade heads".into()));
            }
            let label = label.unwrap_or_else(|| {
                ckpt.parent().and_then(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
            });
            prepare_out(&out, force)?;
            run_infer(&cfg, &InferArgs { data, ckpt, out, views, cascade, dump_vis, split, label })
        }
        Command::Fuse { data, out, depths, gt, config, split, ascii, force } => {
            let cfg = load_config(config.as_deref())?;
            prepare_out(&out, force)?;
            let format = if ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
            run_fuse(&cfg, &data, &out, depths.as_deref().filter(|_| !gt), split, format)
        }
        Command::Evaluate { data, clouds, out, config, threshold, split, save_gt, force } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.eval.threshold = threshold.unwrap_or(cfg.eval.threshold);
            cfg.validate()?;
            prepare_out(&out, force)?;
            run_evaluate(&cfg, &data, &clouds, &out, split, save_gt)
        }
        Command::Report { out, sweeps } => run_report(&out, &sweeps),
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) if !p.exists() => Err(Error::Config(format!("config file {} not found", p.display()))),
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

/// Creates `out`, refusing to write into a non-empty directory unless
/// `force` is set.
fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.is_file() {
        return Err(Error::Config(format!("--out {} is a file", out.display())));
    }
    if !force && out.is_dir() && fs::read_dir(out)?.next().is_some() {
        return Err(Error::Config(format!("--out {} is not empty; pass --force to overwrite", out.display())));
    }
    fs::create_dir_all(out)?;
    Ok(())
}

fn load_data(root: &Path) -> Result<Dataset> {
    if !root.join("dataset.json").exists() {
        return Err(Error::Data { path: root.to_path_buf(), detail: "no dataset.json; run gen-data first".into() });
    }
    Dataset::load(root)
}

fn scenes(data: &Dataset, split: Split) -> Vec<&SceneData> {
    match split {
        Split::Train => data.train.iter().collect(),
        Split::Val => data.val.iter().collect(),
        Split::All => data.train.iter().chain(&data.val).collect(),
    }
}

fn files_under(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    Ok(out)
}

fn finish(out: &Path, command: &str, cfg: &Config, seed: u64, inputs: &[PathBuf], root: Option<&Path>, started: f64) -> Result<()> {
    let hash = input_hash(&cfg.to_toml()?, root, inputs)?;
    RunManifest::new(command, cfg, seed, hash, inputs.len(), started)?.write(out)
}

fn gen_data(cfg: &Config, out: &Path) -> Result<()> {
    let started = unix_now();
    let data = Dataset::generate(&cfg.data)?;
    data.write(out)?;
    let mean = |s: &[SceneData]| s.iter().map(SceneData::mean_covisibility).sum::<f64>() / s.len().max(1) as f64;
    println!(
        "wrote {} train and {} val scenes to {}; mean pairwise covisibility {:.3}",
        data.train.len(),
        data.val.len(),
        out.display(),
        mean(&[data.train.as_slice(), data.val.as_slice()].concat())
    );
    finish(out, "gen-data", cfg, cfg.data.seed, &[], None, started)
}

fn run_train(cfg: &Config, data_dir: &Path, out: &Path) -> Result<()> {
    let started = unix_now();
    let data = load_data(data_dir)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml()?)?;
    let mut model = PvsNet::new(cfg.model.clone(), cfg.train.seed)?;
    let report = train(&mut model, &data.train, &data.val, &cfg.train, Some(out))?;
    for row in &report.log {
        println!("{}", row.to_csv());
    }
    if let Some(best) = report.state.best_val_mae {
        println!(
            "best validation MAE {best:.5} at epoch {}, saved to {}",
            report.state.best_epoch.unwrap_or(0),
            out.join(BEST_CKPT).display()
        );
    }
    let inputs = dataset_files(data_dir)?;
    finish(out, "train", cfg, cfg.train.seed, &inputs, Some(data_dir), started)
}

struct InferArgs {
    data: PathBuf,
    ckpt: PathBuf,
    out: PathBuf,
    views: Vec<usize>,
    cascade: bool,
    dump_vis: bool,
    split: Split,
    label: String,
}

fn run_infer(cfg: &Config, a: &InferArgs) -> Result<()> {
    let started = unix_now();
    let data = load_data(&a.data)?;
    let mut model = PvsNet::new(cfg.model.clone(), cfg.train.seed)?;
    model.store.load(&a.ckpt).map_err(|e| match e {
        Error::Io(io) => Error::Data { path: a.ckpt.clone(), detail: io.to_string() },
        other => other,
    })?;
    let mut csv = String::from("variant,n,mae\n");
    for &n in &a.views {
        let dir = a.out.join(format!("n{n}"));
        let (mut sum, mut count) = (0.0, 0usize);
        for scene in scenes(&data, a.split) {
            let sdir = dir.join(&scene.id);
            fs::create_dir_all(&sdir)?;
            for r in 0..scene.views.len() {
                let inf = infer_depth(&model, scene, r, n, a.cascade)?;
                let (h, w) = (inf.height, inf.width);
                let level = scene.views[r].levels.iter().find(|l| l.height == h && l.width == w).ok_or_else(|| {
                    Error::InvalidArgument(format!("no ground truth at {h}x{w} for scene {}", scene.id))
                })?;
                let mae = depth_mae(&inf.depth, &level.depth, &level.mask)?;
                if !mae.is_finite() {
                    return Err(Error::Numerical(format!("MAE {mae} for scene {} view {r}", scene.id)));
                }
                sum += mae;
                count += 1;
                write_pfm(&sdir.join(format!("{r:03}_depth.pfm")), &FloatMap { height: h, width: w, data: inf.depth })?;
                write_pfm(&sdir.join(format!("{r:03}_conf.pfm")), &FloatMap { height: h, width: w, data: inf.confidence })?;
                if a.dump_vis {
                    let vdir = sdir.join("vis");
                    fs::create_dir_all(&vdir)?;
                    let maps = if inf.visibility.is_empty() { &inf.weights } else { &inf.visibility };
                    let (vh, vw) = (scene.height() / 4, scene.width() / 4);
                    for (map, s) in maps.iter().zip(&inf.sources) {
                        write_gray_png(&vdir.join(format!("{r:03}_src{s:03}.png")), map, vh, vw)?;
                    }
                }
            }
        }
        let mae = sum / count.max(1) as f64;
        println!("N = {n}: MAE {mae:.5} over {count} references");
        csv.push_str(&format!("{},{n},{mae}\n", a.label));
    }
    fs::write(a.out.join("sweep.csv"), csv)?;
    let mut inputs = dataset_files(&a.data)?;
    inputs.push(a.ckpt.clone());
    finish(&a.out, "infer", cfg, cfg.train.seed, &inputs, None, started)
}

/// Depth views of one scene, from inferred maps or ground truth.
fn depth_views(cfg: &Config, scene: &SceneData, depths: Option<&Path>) -> Result<Vec<DepthView>> {
    let (h, w) = (scene.height(), scene.width());
    scene
        .views
        .iter()
        .enumerate()
        .map(|(r, view)| match depths {
            None => {
                let l = &view.levels[0];
                DepthView::new(view.camera, l.depth.clone(), l.mask.clone(), l.height, l.width, &view.image, h, w)
            }
            Some(dir) => {
                let sdir = dir.join(&scene.id);
                let depth = read_pfm(&sdir.join(format!("{r:03}_depth.pfm")))?;
                let conf = read_pfm(&sdir.join(format!("{r:03}_conf.pfm")))?;
                if conf.data.len() != depth.data.len() {
                    return Err(Error::Data { path: sdir, detail: format!("confidence and depth of view {r} differ in size") });
                }
                let mask = photometric_filter(&conf.data, cfg.fusion.confidence_threshold);
                DepthView::new(view.camera, depth.data, mask, depth.height, depth.width, &view.image, h, w)
            }
        })
        .collect()
}

fn run_fuse(cfg: &Config, data_dir: &Path, out: &Path, depths: Option<&Path>, split: Split, format: PlyFormat) -> Result<()> {
    let started = unix_now();
    let data = load_data(data_dir)?;
    for scene in scenes(&data, split) {
        let views = depth_views(cfg, scene, depths)?;
        let masks = geometric_filter(&views, &cfg.fusion);
        let kept: usize = masks.iter().map(|m| m.iter().filter(|&&k| k).count()).sum();
        let filtered: Vec<DepthView> = views.into_iter().zip(masks).map(|(v, mask)| DepthView { mask, ..v }).collect();
        let cloud = fuse(&filtered, &cfg.fusion);
        write_ply(&out.join(format!("{}.ply", scene.id)), &cloud, format)?;
        println!("{}: {kept} consistent pixels, {} points", scene.id, cloud.len());
    }
    let mut inputs = dataset_files(data_dir)?;
    if let Some(d) = depths {
        inputs.extend(files_under(d)?);
    }
    finish(out, "fuse", cfg, cfg.data.seed, &inputs, None, started)
}

#[derive(Serialize)]
struct Metrics {
    threshold: f64,
    scenes: BTreeMap<String, MetricReport>,
    mean: Option<MetricReport>,
}

fn run_evaluate(cfg: &Config, data_dir: &Path, clouds: &Path, out: &Path, split: Split, save_gt: bool) -> Result<()> {
    let started = unix_now();
    let data = load_data(data_dir)?;
    let mut reports = BTreeMap::new();
    let mut inputs = dataset_files(data_dir)?;
    for scene in scenes(&data, split) {
        let path = clouds.join(format!("{}.ply", scene.id));
        if !path.exists() {
            return Err(Error::Data { path, detail: "missing cloud for scene".into() });
        }
        let pred = read_ply(&path)?;
        let gt = scene.gt_cloud();
        if save_gt {
            write_ply(&out.join(format!("gt_{}.ply", scene.id)), &gt, PlyFormat::BinaryLittleEndian)?;
        }
        let report = eval_pointcloud(&positions(&pred), &positions(&gt), cfg.eval.threshold);
        println!(
            "{}: accuracy {:.5}, completeness {:.5}, F1 {:.2}{}",
            scene.id,
            report.accuracy,
            report.completeness,
            report.f1,
            if report.degenerate { " (degenerate)" } else { "" }
        );
        reports.insert(scene.id.clone(), report);
        inputs.push(path);
    }
    let metrics = Metrics { threshold: cfg.eval.threshold, mean: mean_report(&reports), scenes: reports };
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    finish(out, "evaluate", cfg, cfg.data.seed, &inputs, None, started)
}

fn mean_report(reports: &BTreeMap<String, MetricReport>) -> Option<MetricReport> {
    let n = reports.len() as f64;
    let first = *reports.values().next()?;
    let avg = |f: fn(&MetricReport) -> f64| reports.values().map(f).sum::<f64>() / n;
    Some(MetricReport {
        depth_mae: None,
        accuracy: avg(|r| r.accuracy),
        completeness: avg(|r| r.completeness),
        overall: avg(|r| r.overall),
        threshold: first.threshold,
        accuracy_pct: avg(|r| r.accuracy_pct),
        completeness_pct: avg(|r| r.completeness_pct),
        f1: avg(|r| r.f1),
        degenerate: reports.values().any(|r| r.degenerate),
    })
}

/// Reads `variant,n,mae` rows.
fn read_sweep(path: &Path) -> Result<Vec<(String, usize, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data { path: path.to_path_buf(), detail: e.to_string() })?;
    let bad = |line: usize, what: &str| Error::Data { path: path.to_path_buf(), detail: format!("line {line}: {what}") };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "variant,n,mae")) => {}
        _ => return Err(bad(1, "expected header variant,n,mae")),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 3 {
                return Err(bad(i + 1, "expected three fields"));
            }
            let n = f[1].parse().map_err(|_| bad(i + 1, "view count is not an integer"))?;
            let mae = f[2].parse().map_err(|_| bad(i + 1, "MAE is not a number"))?;
            Ok((f[0].to_string(), n, mae))
        })
        .collect()
}

fn run_report(out: &Path, sweeps: &[PathBuf]) -> Result<()> {
    let mut variants: Vec<String> = Vec::new();
    let mut table: BTreeMap<usize, BTreeMap<String, f64>> = BTreeMap::new();
    for path in sweeps {
        for (variant, n, mae) in read_sweep(path)? {
            if !variants.contains(&variant) {
                variants.push(variant.clone());
            }
            table.entry(n).or_default().insert(variant, mae);
        }
    }
    let mut csv = format!("n,{}\n", variants.join(","));
    for (n, row) in &table {
        let cells: Vec<String> = variants.iter().map(|v| row.get(v).map(|m| m.to_string()).unwrap_or_default()).collect();
        csv.push_str(&format!("{n},{}\n", cells.join(",")));
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("mae_vs_views.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
