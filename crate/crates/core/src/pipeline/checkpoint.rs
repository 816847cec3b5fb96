//! Checkpoint files, sidecar manifests and training-directory locks.
//!
//! A checkpoint is `"SDCK"`, version, kind, the run-config echo, a JSON
//! model description, the named parameter tensors (little-endian f32), and a
//! trailing SHA-256 of everything before it.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use shapediff_nn::{ParamStore, Tensor};

use super::config::RunConfig;
use crate::denoiser::{DenoiserConfig, DiffusionModel};
use crate::diffusion::NoiseSchedule;
use crate::error::{format_err, io_err, validation, Error, Result};
use crate::vqvae::{VqVae, VqVaeConfig};

const MAGIC: &[u8; 4] = b"SDCK";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckpointKind {
    VqVae = 1,
    Diffusion = 2,
}

impl CheckpointKind {
    fn from_u32(v: u32) -> Result<Self> {
        match v {
            1 => Ok(Self::VqVae),
            2 => Ok(Self::Diffusion),
            _ => Err(format_err("kind", format!("unknown checkpoint kind {v}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    /// Text form of the run configuration that produced the weights.
    pub config_echo: String,
    pub model_json: String,
    pub params: Vec<(String, Tensor<f32>)>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    put_u32(buf, b.len());
    buf.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(format_err(what, "truncated checkpoint"));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| format_err(what, "not UTF-8"))
    }
}

impl Checkpoint {
    fn from_store(
        kind: CheckpointKind,
        cfg: &RunConfig,
        model_json: String,
        store: &ParamStore<f32>,
    ) -> Self {
        Self {
            kind,
            config_echo: cfg.to_text(),
            model_json,
            params: store
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION as usize);
        put_u32(&mut buf, self.kind as usize);
        put_bytes(&mut buf, self.config_echo.as_bytes());
        put_bytes(&mut buf, self.model_json.as_bytes());
        put_u32(&mut buf, self.params.len());
        for (name, t) in &self.params {
            put_bytes(&mut buf, name.as_bytes());
            put_u32(&mut buf, t.shape().len());
            for &d in t.shape() {
                put_u32(&mut buf, d);
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 + 32 {
            return Err(format_err("header", "truncated checkpoint"));
        }
        if &bytes[..4] != MAGIC {
            return Err(format_err(
                "magic",
                format!("expected \"SDCK\", found {:?}", &bytes[..4]),
            ));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Version(format!(
                "checkpoint version {version}, supported {VERSION}"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(format_err("sha256", "checkpoint content hash mismatch"));
        }
        let mut r = Reader { bytes: body, at: 8 };
        let kind = CheckpointKind::from_u32(r.u32("kind")? as u32)?;
        let config_echo = r.string("config")?;
        let model_json = r.string("model")?;
        let count = r.u32("params")?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string("param name")?;
            let rank = r.u32("rank")?;
            let shape = (0..rank)
                .map(|_| r.u32("shape"))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(4 * n, "param data")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push((name, Tensor::from_vec(&shape, data)?));
        }
        if r.at != body.len() {
            return Err(format_err(
                "trailer",
                "unexpected bytes after the parameters",
            ));
        }
        Ok(Self {
            kind,
            config_echo,
            model_json,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| io_err(path, e))?)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config_echo)
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Version(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    /// Copies the stored tensors into a freshly built store with the same
    /// parameter names and shapes.
    fn fill(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Version(format!(
                "checkpoint has {} tensors, the model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store.id_of(name).ok_or_else(|| {
                Error::Version(format!("checkpoint tensor {name} is not in the model"))
            })?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::Version(format!(
                    "tensor {name} has shape {:?}, the model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

#[derive(Serialize, Deserialize)]
struct DiffusionDescription {
    denoiser: DenoiserConfig,
    /// `beta_1..=beta_T` as IEEE bit patterns, so the schedule is restored exactly.
    beta_bits: Vec<u64>,
    latent_scale: f32,
}

pub fn vqvae_checkpoint(model: &VqVae, cfg: &RunConfig) -> Result<Checkpoint> {
    let json = serde_json::to_string(model.config())?;
    Ok(Checkpoint::from_store(
        CheckpointKind::VqVae,
        cfg,
        json,
        &model.store,
    ))
}

pub fn vqvae_from_checkpoint(ck: &Checkpoint) -> Result<VqVae> {
    ck.expect_kind(CheckpointKind::VqVae)?;
    let config: VqVaeConfig = serde_json::from_str(&ck.model_json)?;
    let mut model = VqVae::new(config, 0)?;
    ck.fill(&mut model.store)?;
    Ok(model)
}

pub fn diffusion_checkpoint(model: &DiffusionModel, cfg: &RunConfig) -> Result<Checkpoint> {
    let desc = DiffusionDescription {
        denoiser: model.config().clone(),
        beta_bits: model.schedule.beta.iter().map(|b| b.to_bits()).collect(),
        latent_scale: model.latent_scale,
    };
    let json = serde_json::to_string(&desc)?;
    Ok(Checkpoint::from_store(
        CheckpointKind::Diffusion,
        cfg,
        json,
        &model.store,
    ))
}

pub fn diffusion_from_checkpoint(ck: &Checkpoint) -> Result<DiffusionModel> {
    ck.expect_kind(CheckpointKind::Diffusion)?;
    let desc: DiffusionDescription = serde_json::from_str(&ck.model_json)?;
    let schedule = NoiseSchedule::from_beta_table(
        desc.beta_bits.iter().map(|&b| f64::from_bits(b)).collect(),
    )?;
    let mut model = DiffusionModel::new(desc.denoiser, schedule, 0)?;
    model.latent_scale = desc.latent_scale;
    ck.fill(&mut model.store)?;
    Ok(model)
}

pub fn save_vqvae(model: &VqVae, cfg: &RunConfig, path: &Path) -> Result<()> {
    vqvae_checkpoint(model, cfg)?.save(path)
}

pub fn load_vqvae(path: &Path) -> Result<VqVae> {
    vqvae_from_checkpoint(&Checkpoint::load(path)?)
}

pub fn save_diffusion(model: &DiffusionModel, cfg: &RunConfig, path: &Path) -> Result<()> {
    diffusion_checkpoint(model, cfg)?.save(path)
}

pub fn load_diffusion(path: &Path) -> Result<DiffusionModel> {
    diffusion_from_checkpoint(&Checkpoint::load(path)?)
}

/// Errors unless the autoencoder and denoiser agree with each other and,
/// when given, with `cfg`.
pub fn check_compatible(vq: &VqVae, model: &DiffusionModel, cfg: Option<&RunConfig>) -> Result<()> {
    let (v, d) = (vq.config(), model.config());
    if v.latent_dim != d.latent_dim
        || v.latent_side() != d.latent_side
        || v.resolution != d.grid_resolution
    {
        return Err(Error::Version(format!(
            "autoencoder ({}^3 -> {}x{}^3) and denoiser ({}^3 -> {}x{}^3) do not match",
            v.resolution,
            v.latent_dim,
            v.latent_side(),
            d.grid_resolution,
            d.latent_dim,
            d.latent_side
        )));
    }
    if let Some(cfg) = cfg {
        if &cfg.vqvae_config() != v {
            return Err(Error::Version(
                "autoencoder checkpoint does not match the run config".into(),
            ));
        }
        if &cfg.denoiser_config() != d {
            return Err(Error::Version(
                "diffusion checkpoint does not match the run config".into(),
            ));
        }
        if model.schedule != cfg.schedule()? {
            return Err(Error::Version(
                "noise schedule differs from the run config".into(),
            ));
        }
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRef {
    pub path: String,
    pub sha256: String,
}

/// Sidecar `<artifact>.json`: content hash, config echo and hashed inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact: String,
    pub sha256: String,
    pub tool: String,
    pub config: String,
    pub inputs: Vec<InputRef>,
}

impl Manifest {
    pub fn sidecar_path(artifact: &Path) -> PathBuf {
        let mut name = artifact
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_default();
        name.push(".json");
        artifact.with_file_name(name)
    }

    pub fn write(artifact: &Path, cfg: &RunConfig, inputs: &[&Path]) -> Result<Self> {
        let m = Self {
            artifact: artifact.display().to_string(),
            sha256: sha256_file(artifact)?,
            tool: concat!("shapediff ", env!("CARGO_PKG_VERSION")).into(),
            config: cfg.to_text(),
            inputs: inputs
                .iter()
                .map(|p| {
                    Ok(InputRef {
                        path: p.display().to_string(),
                        sha256: sha256_file(p)?,
                    })
                })
                .collect::<Result<_>>()?,
        };
        write_atomic(
            &Self::sidecar_path(artifact),
            serde_json::to_string_pretty(&m)?.as_bytes(),
        )?;
        Ok(m)
    }
}

/// Exclusive claim on a training output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(".lock");
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    validation(format!(
                        "{} is locked by another training job",
                        dir.display()
                    ))
                } else {
                    io_err(&path, e)
                }
            })?;
        writeln!(f, "{}", std::process::id()).map_err(|e| io_err(&path, e))?;
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
