use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use shapediff::denoiser::{load_tokens, ImageCondition};
use shapediff::grid::{load_grid, save_grid, CameraPose, ShapeSpec};
use shapediff::metrics::{EvalReport, ShapeMetrics};
use shapediff::pipeline::{
    ablation_suite, check_compatible, complete, conditioning_image, eval_inputs, generate_corpus,
    grid_files, load_diffusion, load_items, load_manifest, save_obj, split_corpus, split_items,
    train_diffusion_job, train_vqvae_job, AblationReport, Checkpoint, CondMode, Manifest,
    RunConfig,
};
use shapediff::render::{render, write_depth_pgm, write_normals_ppm};

#[derive(Parser)]
#[command(
    name = "shapediff",
    version,
    about = "Latent-diffusion shape completion over TSDF grids"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a corpus of complete shapes and partial scans.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON list of shape specs to use instead of random shapes.
        #[arg(long)]
        spec_file: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write train/val/test lists for a corpus.
    Split {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated train,val,test ratios.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        ratios: Option<Vec<f64>>,
        #[arg(long)]
        seed: Option<u64>,
    },
    TrainVqvae {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    TrainDiffusion {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        vqvae: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample completions of one partial scan.
    Complete {
        #[arg(long)]
        vqvae: PathBuf,
        #[arg(long)]
        diffusion: PathBuf,
        /// Run config; defaults to the one stored in the diffusion checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Take the partial scan, image and ground truth of this corpus shape.
        #[arg(long, requires = "shape")]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        shape: Option<String>,
        #[arg(long, conflicts_with = "data_dir")]
        partial: Option<PathBuf>,
        /// Precomputed image tokens (FTOK).
        #[arg(long, conflicts_with = "data_dir")]
        tokens: Option<PathBuf>,
        #[arg(long, default_value = "both")]
        mode: CondMode,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Also write an OBJ mesh per sample.
        #[arg(long)]
        obj: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Render depth (16-bit PGM) and normals (PPM) of a grid.
    Render {
        #[arg(long)]
        grid: PathBuf,
        /// Index of a fixed view, or a camera pose as JSON.
        #[arg(long, default_value = "0")]
        pose: String,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, num_args = 2, value_names = ["DEPTH_PGM", "NORMALS_PPM"])]
        out: Vec<PathBuf>,
    },
    /// Score predicted grids against ground truth of the same file name.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = shapediff::metrics::DEFAULT_CHAMFER_POINTS)]
        chamfer_points: usize,
    },
    /// Held-out completion with image-only, partial-only and both conditioning.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        vqvae: PathBuf,
        #[arg(long)]
        diffusion: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Modes to run; all three by default.
        #[arg(long)]
        mode: Vec<CondMode>,
        #[arg(long)]
        report: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct CompletionReport<'a> {
    config: String,
    shapes: &'a [ShapeMetrics],
}

#[derive(Serialize)]
struct AblationFile<'a> {
    config: String,
    split: &'a str,
    reports: &'a [AblationReport],
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            config,
            spec_file,
            count,
            resolution,
            seed,
            out_dir,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = resolution {
                cfg.resolution = s;
                cfg.latent_side = s / 4;
            }
            cfg.corpus_size = count.unwrap_or(cfg.corpus_size);
            cfg.corpus_seed = seed.unwrap_or(cfg.corpus_seed);
            cfg.validate()?;
            let specs: Option<Vec<ShapeSpec>> = match &spec_file {
                Some(p) => {
                    let text = std::fs::read_to_string(p)
                        .with_context(|| format!("reading {}", p.display()))?;
                    Some(serde_json::from_str(&text).context("parsing the spec file")?)
                }
                None => None,
            };
            let m = generate_corpus(&cfg, specs.as_deref(), &out_dir)?;
            println!("wrote {} shapes to {}", m.entries.len(), out_dir.display());
        }
        Command::Split {
            data_dir,
            config,
            ratios,
            seed,
        } => {
            let cfg = load_config(config.as_deref())?;
            let r = ratios.unwrap_or(vec![cfg.split_train, cfg.split_val, cfg.split_test]);
            let split = split_corpus(
                &data_dir,
                [r[0], r[1], r[2]],
                seed.unwrap_or(cfg.split_seed),
            )?;
            println!(
                "train {} val {} test {}",
                split.train.len(),
                split.val.len(),
                split.test.len()
            );
        }
        Command::TrainVqvae {
            config,
            data_dir,
            out,
        } => {
            let cfg = load_config(Some(&config))?;
            train_vqvae_job(&cfg, &data_dir, &out)?;
            println!("wrote {}", out.display());
        }
        Command::TrainDiffusion {
            config,
            vqvae,
            data_dir,
            out,
        } => {
            let cfg = load_config(Some(&config))?;
            train_diffusion_job(&cfg, &data_dir, &vqvae, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Complete {
            vqvae,
            diffusion,
            config,
            data_dir,
            shape,
            partial,
            tokens,
            mode,
            n_samples,
            seed,
            steps,
            obj,
            out_dir,
        } => {
            let vq = shapediff::pipeline::load_vqvae(&vqvae)?;
            let model = load_diffusion(&diffusion)?;
            let cfg = match &config {
                Some(p) => load_config(Some(p))?,
                None => Checkpoint::load(&diffusion)?.run_config()?,
            };
            check_compatible(&vq, &model, config.is_some().then_some(&cfg))?;

            let mut inputs = vec![vqvae.clone(), diffusion.clone()];
            let (partial_grid, image, gt) = match (&data_dir, &shape, &partial) {
                (Some(dir), Some(name), _) => {
                    let m = load_manifest(dir)?;
                    let item = load_items(dir, &m, Some(std::slice::from_ref(name)))?.remove(0);
                    let img = conditioning_image(&m, &item, model.config().token_image_size);
                    inputs.push(dir.join("corpus.json"));
                    (
                        item.partial.clone(),
                        Some(ImageCondition::Image(img)),
                        Some(item.complete),
                    )
                }
                (None, _, Some(p)) => {
                    inputs.push(p.clone());
                    let image = match &tokens {
                        Some(t) => {
                            inputs.push(t.clone());
                            Some(ImageCondition::Tokens(load_tokens(t)?))
                        }
                        None => None,
                    };
                    (load_grid(p)?, image, None)
                }
                _ => bail!("give either --data-dir with --shape, or --partial"),
            };
            if mode.uses_image() && image.is_none() {
                bail!(
                    "mode {} needs an image (--tokens or a corpus shape)",
                    mode.name()
                );
            }
            let samples = complete(
                &vq,
                &model,
                mode.uses_partial().then_some(&partial_grid),
                if mode.uses_image() {
                    image.as_ref()
                } else {
                    None
                },
                n_samples.unwrap_or(cfg.n_samples),
                seed.unwrap_or(cfg.sample_seed),
                steps.unwrap_or(cfg.inference_steps),
            )?;
            std::fs::create_dir_all(&out_dir)?;
            let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
            let mut rows = Vec::new();
            for (k, s) in samples.iter().enumerate() {
                let path = out_dir.join(format!("sample_{k:02}.tsdf"));
                save_grid(s, &path)?;
                Manifest::write(&path, &cfg, &input_refs)?;
                if obj {
                    save_obj(s, &path.with_extension("obj"))?;
                }
                if let Some(gt) = &gt {
                    rows.push(ShapeMetrics::compute(
                        &format!("sample_{k:02}"),
                        s,
                        gt,
                        cfg.chamfer_points,
                    )?);
                }
            }
            if !rows.is_empty() {
                let path = out_dir.join("metrics.json");
                write_json(
                    &path,
                    &CompletionReport {
                        config: cfg.to_text(),
                        shapes: &rows,
                    },
                )?;
                for r in &rows {
                    println!("{}: l1 {:.4} iou {:.4}", r.name, r.l1, r.iou);
                }
            }
            println!("wrote {} samples to {}", samples.len(), out_dir.display());
        }
        Command::Render {
            grid,
            pose,
            size,
            out,
        } => {
            let g = load_grid(&grid)?;
            let pose: CameraPose = match pose.parse::<usize>() {
                Ok(i) => *CameraPose::fixed_views(g.resolution(), size)
                    .get(i)
                    .with_context(|| format!("fixed view index {i} out of range 0..4"))?,
                Err(_) => serde_json::from_str(&pose).context("parsing the pose JSON")?,
            };
            let (depth, normals) = render(&g, &pose);
            write_depth_pgm(&depth, &out[0])?;
            write_normals_ppm(&normals, &out[1])?;
        }
        Command::Eval {
            pred_dir,
            gt_dir,
            report,
            chamfer_points,
        } => {
            let preds = grid_files(&pred_dir)?;
            if preds.is_empty() {
                bail!("no .tsdf files in {}", pred_dir.display());
            }
            let mut pairs = Vec::new();
            for (name, p) in &preds {
                let gt_path = gt_dir.join(format!("{name}.tsdf"));
                if !gt_path.exists() {
                    bail!("no ground truth {}", gt_path.display());
                }
                pairs.push((name.clone(), load_grid(p)?, load_grid(&gt_path)?));
            }
            let refs: Vec<_> = pairs.iter().map(|(n, p, g)| (n.clone(), p, g)).collect();
            let r = EvalReport::evaluate(&refs, chamfer_points)?;
            write_json(&report, &r)?;
            let a = &r.aggregate;
            println!(
                "{} shapes: l1 {:.4} (normalized {:.4}) iou {:.4}",
                a.shapes, a.l1, a.l1_normalized, a.iou
            );
        }
        Command::Ablate {
            config,
            vqvae,
            diffusion,
            data_dir,
            split,
            mode,
            report,
        } => {
            let cfg = load_config(Some(&config))?;
            let vq = shapediff::pipeline::load_vqvae(&vqvae)?;
            let model = load_diffusion(&diffusion)?;
            check_compatible(&vq, &model, Some(&cfg))?;
            let (m, items) = split_items(&data_dir, &split)?;
            let inputs = eval_inputs(&m, &items, cfg.token_image_size);
            let modes = if mode.is_empty() {
                CondMode::ALL.to_vec()
            } else {
                mode
            };
            let reports = ablation_suite(&cfg, &vq, &model, &inputs, &modes)?;
            write_json(
                &report,
                &AblationFile {
                    config: cfg.to_text(),
                    split: &split,
                    reports: &reports,
                },
            )?;
            Manifest::write(
                &report,
                &cfg,
                &[&vqvae, &diffusion, &data_dir.join("corpus.json")],
            )?;
            for r in &reports {
                println!(
                    "{:<13} first l1 {:.4}  best-of-{} l1 {:.4}",
                    r.mode.name(),
                    r.first_sample.aggregate.l1,
                    r.best_of,
                    r.best.aggregate.l1
                );
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
