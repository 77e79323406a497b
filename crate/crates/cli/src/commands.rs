use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use s2sd_core::annotations::ClassScheme;
use s2sd_core::datapipe::{
    cache_masks, discover_pairs, masks_dir, split_train_val, ScenePair, SceneDataset, DEFAULT_IMAGE_SIZE,
};
use s2sd_core::evaluation::validate;
use s2sd_core::fixtures::{write_dataset, FixtureSpec};
use s2sd_core::inference::{predict_to_dir, Predictor};
use s2sd_core::network::{Checkpoint, NetworkError, UNet};
use s2sd_core::training::{fit, write_history};

use crate::config::{echo_run_config, parse_scheme, FileConfig, RunConfig, DEFAULT_TRAIN_FRACTION};
use crate::error::CliError;

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))
}

fn require_dir(dir: &Path) -> Result<(), CliError> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::usage(format!("data directory {} does not exist", dir.display())))
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub struct SynthArgs {
    pub out: PathBuf,
    pub scenes: usize,
    pub seed: u64,
    pub size: u32,
    pub min_buildings: usize,
    pub max_buildings: usize,
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    if a.scenes == 0 {
        return Err(CliError::usage("--scenes must be at least 1"));
    }
    let spec = FixtureSpec {
        seed: a.seed,
        scene_count: a.scenes,
        image_size: a.size,
        min_buildings: a.min_buildings,
        max_buildings: a.max_buildings,
        ..FixtureSpec::default()
    };
    spec.validate().map_err(|e| CliError::usage(e.to_string()))?;
    ensure_dir(&a.out)?;
    let scenes = write_dataset(&spec, &a.out).map_err(|e| CliError::usage(e.to_string()))?;
    echo_run_config(&a.out, &spec)?;
    println!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct PreprocessEcho<'a> {
    data: &'a Path,
    scheme: ClassScheme,
    image_size: u32,
}

pub fn preprocess(data: &Path, scheme: ClassScheme, size: u32) -> Result<(), CliError> {
    require_dir(data)?;
    let report = cache_masks(data, scheme, size)?;
    echo_run_config(
        &masks_dir(data),
        &PreprocessEcho {
            data,
            scheme,
            image_size: size,
        },
    )?;
    for s in &report.skipped {
        log::warn!("skipped {}: {}", s.path, s.reason);
    }
    println!(
        "{} labels found, {} masks written, {} skipped",
        report.labels_found,
        report.rendered.len(),
        report.skipped.len()
    );
    if report.rendered.is_empty() {
        return Err(CliError::empty(format!("no masks produced from {}", data.display())));
    }
    Ok(())
}

/// Labelled scene pairs under `data`; empty is an error.
fn labelled_pairs(data: &Path) -> Result<Vec<ScenePair>, CliError> {
    require_dir(data)?;
    let found = discover_pairs(data);
    for s in &found.skipped {
        log::warn!("skipped {}: {}", s.path, s.reason);
    }
    let pairs: Vec<ScenePair> = found.pairs.into_iter().filter(|p| p.post_label_path.is_some()).collect();
    if pairs.is_empty() {
        return Err(CliError::empty(format!("no labelled scenes under {}", data.display())));
    }
    Ok(pairs)
}

fn dataset(pairs: Vec<ScenePair>, data: &Path, size: u32, scheme: ClassScheme) -> SceneDataset {
    SceneDataset::new(pairs, size, scheme).with_mask_cache(masks_dir(data))
}

pub fn train(cfg: FileConfig, out: &Path, history: Option<PathBuf>) -> Result<(), CliError> {
    let run = RunConfig::resolve(cfg)?;
    let out_dir = parent_dir(out);
    ensure_dir(&out_dir)?;
    let pairs = labelled_pairs(&run.data)?;
    let (train_pairs, val_pairs) = if run.val_on_train {
        (pairs.clone(), pairs)
    } else {
        split_train_val(&pairs, run.train_fraction, run.train.seed)?
    };
    log::info!("{} training scenes, {} validation scenes", train_pairs.len(), val_pairs.len());
    let (size, scheme) = (run.train.image_size, run.train.scheme);
    let mut train_set = dataset(train_pairs, &run.data, size, scheme);
    if run.augment {
        train_set = train_set.with_augmentation(run.train.seed);
    }
    let val_set = dataset(val_pairs, &run.data, size, scheme);

    let mut model = UNet::new(run.network.clone(), run.train.seed)?;
    echo_run_config(&out_dir, &run)?;
    let outcome = fit(&mut model, &train_set, &val_set, &run.train)?;
    outcome.best.save(out)?;
    let history = history.unwrap_or_else(|| out_dir.join("history.jsonl"));
    write_history(&history, &outcome.history).map_err(|e| CliError::usage(format!("{}: {e}", history.display())))?;
    println!(
        "best epoch {} of {}; checkpoint {}",
        outcome.best.meta.epoch,
        outcome.history.len(),
        out.display()
    );
    print!("{}", outcome.best_report.to_table());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    Train,
    Val,
}

pub struct EvaluateArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub report: PathBuf,
    pub scheme: Option<String>,
    pub split: Split,
    pub train_fraction: Option<f64>,
    pub seed: Option<u64>,
    pub batch_size: usize,
}

#[derive(Serialize)]
struct EvaluateEcho<'a> {
    ckpt: &'a Path,
    data: &'a Path,
    scheme: ClassScheme,
    image_size: u32,
    split: Split,
    train_fraction: f64,
    seed: u64,
    batch_size: usize,
}

fn load_checkpoint(path: &Path, scheme: Option<&str>) -> Result<Checkpoint, CliError> {
    let ckpt = Checkpoint::load(path).map_err(|e| match e {
        NetworkError::Io(io) => CliError::usage(format!("checkpoint {}: {io}", path.display())),
        other => CliError::from(other),
    })?;
    if let Some(s) = scheme {
        ckpt.ensure_scheme(parse_scheme(s)?)?;
    }
    Ok(ckpt)
}

pub fn evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    if a.batch_size == 0 {
        return Err(CliError::usage("--batch-size must be at least 1"));
    }
    let ckpt = load_checkpoint(&a.ckpt, a.scheme.as_deref())?;
    let report_dir = parent_dir(&a.report);
    ensure_dir(&report_dir)?;
    let (scheme, size) = (ckpt.class_scheme, ckpt.meta.image_size);
    let fraction = a.train_fraction.unwrap_or(DEFAULT_TRAIN_FRACTION);
    let seed = a.seed.unwrap_or(ckpt.meta.seed);
    let pairs = labelled_pairs(&a.data)?;
    let pairs = match a.split {
        Split::All => pairs,
        Split::Train => split_train_val(&pairs, fraction, seed)?.0,
        Split::Val => split_train_val(&pairs, fraction, seed)?.1,
    };
    let model = ckpt.build_model()?;
    echo_run_config(
        &report_dir,
        &EvaluateEcho {
            ckpt: &a.ckpt,
            data: &a.data,
            scheme,
            image_size: size,
            split: a.split,
            train_fraction: fraction,
            seed,
            batch_size: a.batch_size,
        },
    )?;
    let report = validate(&model, &dataset(pairs, &a.data, size, scheme), scheme, a.batch_size)?;
    let json = serde_json::to_vec_pretty(&report).expect("report serializes");
    fs::write(&a.report, json).map_err(|e| CliError::usage(format!("{}: {e}", a.report.display())))?;
    let table = report.to_table();
    let table_path = a.report.with_extension("txt");
    fs::write(&table_path, &table).map_err(|e| CliError::usage(format!("{}: {e}", table_path.display())))?;
    print!("{table}");
    Ok(())
}

pub struct PredictArgs {
    pub ckpt: PathBuf,
    pub pre: PathBuf,
    pub post: PathBuf,
    pub out: PathBuf,
    pub scheme: Option<String>,
    pub alpha: f64,
}

#[derive(Serialize)]
struct PredictEcho<'a> {
    ckpt: &'a Path,
    pre: &'a Path,
    post: &'a Path,
    scheme: ClassScheme,
    image_size: u32,
    alpha: f64,
}

pub fn predict(a: PredictArgs) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(CliError::usage(format!("--alpha {} must be in [0, 1]", a.alpha)));
    }
    for p in [&a.pre, &a.post] {
        if !p.is_file() {
            return Err(CliError::usage(format!("image {} does not exist", p.display())));
        }
    }
    let ckpt = load_checkpoint(&a.ckpt, a.scheme.as_deref())?;
    let predictor = Predictor::from_checkpoint(&ckpt)?;
    ensure_dir(&a.out)?;
    let paths = predict_to_dir(&predictor, &a.pre, &a.post, &a.out, a.alpha)?;
    echo_run_config(
        &a.out,
        &PredictEcho {
            ckpt: &a.ckpt,
            pre: &a.pre,
            post: &a.post,
            scheme: predictor.scheme,
            image_size: predictor.image_size,
            alpha: a.alpha,
        },
    )?;
    for p in paths.all() {
        println!("{}", p.display());
    }
    Ok(())
}

pub const DEFAULT_SIZE: u32 = DEFAULT_IMAGE_SIZE;
