//! Run configuration, checkpoints, corpora, completion, ablation and mesh export.

mod checkpoint;
mod complete;
mod config;
mod corpus;
mod mesh;
mod run;

pub use checkpoint::{
    check_compatible, diffusion_checkpoint, diffusion_from_checkpoint, load_diffusion, load_vqvae,
    save_diffusion, save_vqvae, sha256_file, vqvae_checkpoint, vqvae_from_checkpoint, Checkpoint,
    CheckpointKind, DirLock, InputRef, Manifest,
};
pub use complete::{
    best_by_l1, complete, run_ablation, sample_seed, AblationReport, CondMode, EvalInput,
};
pub use config::RunConfig;
pub use corpus::{
    build_corpus, conditioning_image, generate_corpus, load_items, load_manifest, read_split_list,
    split_corpus, split_names, training_examples, CorpusEntry, CorpusItem, CorpusManifest, Split,
};
pub use mesh::{extract_mesh, mesh_to_obj, save_obj, TriangleMesh};
pub use run::{
    ablation_suite, eval_inputs, grid_files, split_items, train_diffusion_job, train_vqvae_job,
};
