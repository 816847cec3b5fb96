//! Training and evaluation jobs over a corpus directory.

use std::io::Write;
use std::path::{Path, PathBuf};

use super::checkpoint::{load_vqvae, save_diffusion, save_vqvae, DirLock, Manifest};
use super::complete::{run_ablation, AblationReport, CondMode, EvalInput};
use super::config::RunConfig;
use super::corpus::{
    conditioning_image, load_items, load_manifest, read_split_list, training_examples, CorpusItem,
    CorpusManifest,
};
use crate::denoiser::{train_diffusion, DiffusionEvent, DiffusionModel, ImageCondition};
use crate::error::{io_err, Result};
use crate::vqvae::{train_vqvae, TrainEvent, VqVae};

/// Corpus items of split `which` (`train.txt`, ...); all items when the
/// split file does not exist.
pub fn split_items(data_dir: &Path, which: &str) -> Result<(CorpusManifest, Vec<CorpusItem>)> {
    let m = load_manifest(data_dir)?;
    let list = data_dir.join(format!("{which}.txt"));
    let items = if list.exists() {
        load_items(data_dir, &m, Some(&read_split_list(&list)?))?
    } else {
        load_items(data_dir, &m, None)?
    };
    Ok((m, items))
}

struct JsonLog {
    file: std::fs::File,
    path: PathBuf,
}

impl JsonLog {
    fn create(path: PathBuf) -> Result<Self> {
        let file = std::fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        Ok(Self { file, path })
    }

    fn line<T: serde::Serialize>(&mut self, entry: &T) -> Result<()> {
        let text = serde_json::to_string(entry)?;
        writeln!(self.file, "{text}").map_err(|e| io_err(&self.path, e))
    }
}

fn split_inputs(data_dir: &Path) -> Vec<PathBuf> {
    ["corpus.json", "train.txt"]
        .iter()
        .map(|f| data_dir.join(f))
        .filter(|p| p.exists())
        .collect()
}

/// Lock directory, JSON-lines log path and intermediate-checkpoint path
/// builder for a training job writing `out`.
fn job_paths(out: &Path) -> (PathBuf, PathBuf, impl Fn(usize) -> PathBuf + '_) {
    let dir = match out.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let log = dir.join(format!("{stem}.log.jsonl"));
    let d = dir.clone();
    (dir, log, move |step| {
        d.join(format!("{stem}_{step:06}.sdck"))
    })
}

/// Trains the autoencoder on the training split and writes the checkpoint
/// `out`, its manifest sidecar and a JSON-lines log next to it.
pub fn train_vqvae_job(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<()> {
    let (dir, log_path, step_path) = job_paths(out);
    let _lock = DirLock::acquire(&dir)?;
    let (_, items) = split_items(data_dir, "train")?;
    let grids: Vec<_> = items.into_iter().map(|i| i.complete).collect();
    let mut model = VqVae::new(cfg.vqvae_config(), cfg.vq_seed)?;
    let mut log = JsonLog::create(log_path)?;
    train_vqvae(&mut model, &grids, &cfg.vqvae_train_config(), |e| match e {
        TrainEvent::Log(entry) => log.line(entry),
        TrainEvent::Checkpoint { step, model } => save_vqvae(model, cfg, &step_path(step)),
    })?;
    save_vqvae(&model, cfg, out)?;
    let inputs = split_inputs(data_dir);
    Manifest::write(
        out,
        cfg,
        &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(),
    )?;
    Ok(())
}

/// Trains the conditional denoiser on latents of the frozen autoencoder at
/// `vqvae_path` and writes the checkpoint `out`.
pub fn train_diffusion_job(
    cfg: &RunConfig,
    data_dir: &Path,
    vqvae_path: &Path,
    out: &Path,
) -> Result<()> {
    let (dir, log_path, step_path) = job_paths(out);
    let _lock = DirLock::acquire(&dir)?;
    let vq = load_vqvae(vqvae_path)?;
    let (m, items) = split_items(data_dir, "train")?;
    let examples = training_examples(&m, &items, cfg.token_image_size);
    let mut model = DiffusionModel::new(cfg.denoiser_config(), cfg.schedule()?, cfg.diff_seed)?;
    let mut log = JsonLog::create(log_path)?;
    train_diffusion(
        &mut model,
        &vq,
        &examples,
        &cfg.diffusion_train_config(),
        |e| match e {
            DiffusionEvent::Log(entry) => log.line(entry),
            DiffusionEvent::Checkpoint { step, model } => {
                save_diffusion(model, cfg, &step_path(step))
            }
        },
    )?;
    save_diffusion(&model, cfg, out)?;
    let mut inputs = split_inputs(data_dir);
    inputs.push(vqvae_path.to_path_buf());
    Manifest::write(
        out,
        cfg,
        &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(),
    )?;
    Ok(())
}

/// Held-out inputs with conditioning images rendered at `image_size`.
pub fn eval_inputs(m: &CorpusManifest, items: &[CorpusItem], image_size: usize) -> Vec<EvalInput> {
    items
        .iter()
        .map(|it| EvalInput {
            name: it.entry.name.clone(),
            complete: it.complete.clone(),
            partial: it.partial.clone(),
            image: Some(ImageCondition::Image(conditioning_image(m, it, image_size))),
        })
        .collect()
}

/// Runs the ablation for each mode on the inputs, in order.
pub fn ablation_suite(
    cfg: &RunConfig,
    vq: &VqVae,
    model: &DiffusionModel,
    inputs: &[EvalInput],
    modes: &[CondMode],
) -> Result<Vec<AblationReport>> {
    modes
        .iter()
        .map(|&mode| {
            run_ablation(
                vq,
                model,
                inputs,
                mode,
                cfg.best_of,
                cfg.sample_seed,
                cfg.inference_steps,
                cfg.chamfer_points,
            )
        })
        .collect()
}

/// Shapes are named after their file stem; returns (name, path) sorted by name.
pub fn grid_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let p = e.map_err(|e| io_err(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "tsdf") {
            let name = p.file_stem().unwrap().to_string_lossy().into_owned();
            out.push((name, p));
        }
    }
    out.sort();
    Ok(out)
}
