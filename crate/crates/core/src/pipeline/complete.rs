//! Shape completion and the conditioning ablation.

use serde::{Deserialize, Serialize};

use crate::denoiser::{Condition, DiffusionModel, ImageCondition};
use crate::error::{validation, Result};
use crate::grid::TsdfGrid;
use crate::metrics::{l1_error, EvalReport, ShapeMetrics};
use crate::vqvae::VqVae;

/// Seed of sample `k` of a request seeded with `seed`.
pub fn sample_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_add(k as u64)
}

/// `n_samples` completions (seeds `seed`, `seed + 1`, ...): DDIM in latent
/// space, then decoding through the frozen autoencoder.
pub fn complete(
    vq: &VqVae,
    model: &DiffusionModel,
    partial: Option<&TsdfGrid>,
    image: Option<&ImageCondition>,
    n_samples: usize,
    seed: u64,
    t_inf: usize,
) -> Result<Vec<TsdfGrid>> {
    if n_samples == 0 {
        return Err(validation("n_samples must be positive"));
    }
    // Resolve image tokens once for all samples.
    let image = image.map(|i| model.resolve_tokens(i)).transpose()?;
    let cond = Condition {
        image: image.as_ref(),
        partial,
    };
    (0..n_samples)
        .map(|k| {
            let z = model.sample(&cond, t_inf, sample_seed(seed, k))?;
            vq.decode(&z)
        })
        .collect()
}

/// Index and l1 of the sample closest to `gt`; the first wins ties.
pub fn best_by_l1(samples: &[TsdfGrid], gt: &TsdfGrid) -> Result<(usize, f64)> {
    let mut best = (0, f64::INFINITY);
    for (i, s) in samples.iter().enumerate() {
        let e = l1_error(s, gt)?;
        if e < best.1 {
            best = (i, e);
        }
    }
    if samples.is_empty() {
        return Err(validation("no samples to choose from"));
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    ImageOnly,
    PartialOnly,
    Both,
}

impl CondMode {
    pub const ALL: [CondMode; 3] = [CondMode::ImageOnly, CondMode::PartialOnly, CondMode::Both];

    pub fn uses_image(self) -> bool {
        self != CondMode::PartialOnly
    }

    pub fn uses_partial(self) -> bool {
        self != CondMode::ImageOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            CondMode::ImageOnly => "image_only",
            CondMode::PartialOnly => "partial_only",
            CondMode::Both => "both",
        }
    }
}

impl std::str::FromStr for CondMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        CondMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| validation(format!("unknown conditioning mode {s:?}")))
    }
}

/// A held-out input for evaluation.
#[derive(Clone, Debug)]
pub struct EvalInput {
    pub name: String,
    pub complete: TsdfGrid,
    pub partial: TsdfGrid,
    pub image: Option<ImageCondition>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub mode: CondMode,
    pub best_of: usize,
    pub seed: u64,
    /// Metrics of the first sample per input.
    pub first_sample: EvalReport,
    /// Metrics of the lowest-l1 sample among `best_of` per input.
    pub best: EvalReport,
}

/// Completes every input with only the conditioning of `mode` and scores
/// the first sample and the best of `best_of` samples against the complete
/// ground truth.
pub fn run_ablation(
    vq: &VqVae,
    model: &DiffusionModel,
    inputs: &[EvalInput],
    mode: CondMode,
    best_of: usize,
    seed: u64,
    t_inf: usize,
    chamfer_points: usize,
) -> Result<AblationReport> {
    if inputs.is_empty() {
        return Err(validation("ablation needs at least one input"));
    }
    if mode.uses_image() && inputs.iter().any(|i| i.image.is_none()) {
        return Err(validation(format!(
            "mode {} needs an image for every input",
            mode.name()
        )));
    }
    let mut first = Vec::with_capacity(inputs.len());
    let mut best = Vec::with_capacity(inputs.len());
    for input in inputs {
        let samples = complete(
            vq,
            model,
            mode.uses_partial().then_some(&input.partial),
            if mode.uses_image() {
                input.image.as_ref()
            } else {
                None
            },
            best_of,
            seed,
            t_inf,
        )?;
        let (k, _) = best_by_l1(&samples, &input.complete)?;
        first.push(ShapeMetrics::compute(
            &input.name,
            &samples[0],
            &input.complete,
            chamfer_points,
        )?);
        best.push(ShapeMetrics::compute(
            &input.name,
            &samples[k],
            &input.complete,
            chamfer_points,
        )?);
    }
    Ok(AblationReport {
        mode,
        best_of,
        seed,
        first_sample: EvalReport::new(first, chamfer_points)?,
        best: EvalReport::new(best, chamfer_points)?,
    })
}
