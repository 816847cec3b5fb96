use std::path::Path;

use shapediff::denoiser::{Condition, DiffusionModel, ImageCondition};
use shapediff::pipeline::*;
use shapediff::vqvae::{LatentCode, VqVae};
use shapediff::Error;

fn tiny() -> RunConfig {
    RunConfig {
        corpus_size: 6,
        scan_image_size: 24,
        resolution: 16,
        latent_side: 4,
        codebook_size: 64,
        vq_widths: vec![4, 8, 8],
        groups: 2,
        vq_steps: 2,
        vq_batch_size: 2,
        render_size: 16,
        views_per_step: 1,
        unet_widths: vec![8, 16],
        attention_resolutions: vec![2, 4],
        time_dim: 16,
        token_count: 5,
        token_dim: 8,
        token_image_size: 16,
        diff_steps: 2,
        diff_batch_size: 2,
        inference_steps: 4,
        best_of: 2,
        chamfer_points: 256,
        log_every: 1,
        ..RunConfig::desk()
    }
}

fn models(cfg: &RunConfig) -> (VqVae, DiffusionModel) {
    let vq = VqVae::new(cfg.vqvae_config(), 1).unwrap();
    let mut dm = DiffusionModel::new(cfg.denoiser_config(), cfg.schedule().unwrap(), 2).unwrap();
    // Perturb every weight so the zero-initialised output layers do not
    // hide a bad round trip.
    for id in dm.store.ids() {
        for (i, v) in dm.store.get_mut(id).data_mut().iter_mut().enumerate() {
            *v += 1e-2 * ((i % 7) as f32 - 3.0);
        }
    }
    (vq, dm)
}

fn eval_input(cfg: &RunConfig) -> EvalInput {
    let (m, items) = build_corpus(
        &RunConfig {
            corpus_size: 1,
            ..cfg.clone()
        },
        None,
    )
    .unwrap();
    let image = conditioning_image(&m, &items[0], cfg.token_image_size);
    EvalInput {
        name: items[0].entry.name.clone(),
        complete: items[0].complete.clone(),
        partial: items[0].partial.clone(),
        image: Some(ImageCondition::Image(image)),
    }
}

#[test]
fn config_text_round_trips_and_rejects_unknown_keys() {
    for cfg in [RunConfig::desk(), RunConfig::reference(), tiny()] {
        cfg.validate().unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
    assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    let partial = RunConfig::parse("# comment\nvq_steps = 7\nbest_of = 3\n").unwrap();
    assert_eq!((partial.vq_steps, partial.best_of), (7, 3));
    assert!(matches!(
        RunConfig::parse("vq_stepz = 7"),
        Err(Error::Format { .. })
    ));
    assert!(matches!(
        RunConfig::parse("vq_steps = \"many\""),
        Err(Error::Format { .. })
    ));
    assert!(matches!(
        RunConfig::parse("latent_side = 5"),
        Err(Error::Validation(_))
    ));
    assert!(matches!(
        RunConfig::parse("split_train = 0.9"),
        Err(Error::Validation(_))
    ));
    assert!(matches!(
        RunConfig::parse("token_dropout = 1.0"),
        Err(Error::Validation(_))
    ));
}

#[test]
fn checkpoints_round_trip_exactly() {
    let cfg = tiny();
    let (vq, dm) = models(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let (pv, pd) = (dir.path().join("v.sdck"), dir.path().join("d.sdck"));
    save_vqvae(&vq, &cfg, &pv).unwrap();
    save_diffusion(&dm, &cfg, &pd).unwrap();
    let (vq2, dm2) = (load_vqvae(&pv).unwrap(), load_diffusion(&pd).unwrap());
    assert_eq!(Checkpoint::load(&pv).unwrap().run_config().unwrap(), cfg);
    check_compatible(&vq2, &dm2, Some(&cfg)).unwrap();

    let input = eval_input(&cfg);
    assert_eq!(
        vq.encode(&input.complete).unwrap(),
        vq2.encode(&input.complete).unwrap()
    );
    assert_eq!(dm2.schedule, dm.schedule);
    assert_eq!(dm2.latent_scale, dm.latent_scale);
    let zt = LatentCode::new(3, 4, (0..192).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
    let cond = Condition {
        image: input.image.as_ref(),
        partial: Some(&input.partial),
    };
    let a = dm.predict_eps(&zt, 500, &cond).unwrap();
    assert!(a.values.iter().any(|v| *v != 0.0));
    assert_eq!(a, dm2.predict_eps(&zt, 500, &cond).unwrap());
}

#[test]
fn corrupted_or_mismatched_checkpoints_are_rejected() {
    let cfg = tiny();
    let (vq, dm) = models(&cfg);
    let bytes = vqvae_checkpoint(&vq, &cfg).unwrap().to_bytes();

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 1;
    assert!(matches!(
        Checkpoint::from_bytes(&flipped),
        Err(Error::Format { .. })
    ));

    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(
        Checkpoint::from_bytes(&version),
        Err(Error::Version(_))
    ));

    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
        Err(Error::Format { .. })
    ));
    assert!(matches!(
        Checkpoint::from_bytes(b"NOPE"),
        Err(Error::Format { .. })
    ));

    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert!(matches!(
        diffusion_from_checkpoint(&ck),
        Err(Error::Version(_))
    ));

    // A checkpoint whose tensors do not fit the described model.
    let mut short = ck.clone();
    short.params.pop();
    assert!(matches!(
        vqvae_from_checkpoint(&short),
        Err(Error::Version(_))
    ));

    let other = RunConfig {
        latent_dim: 4,
        ..cfg.clone()
    };
    let dm_other =
        DiffusionModel::new(other.denoiser_config(), other.schedule().unwrap(), 0).unwrap();
    assert!(matches!(
        check_compatible(&vq, &dm_other, None),
        Err(Error::Version(_))
    ));
    let cfg_t = RunConfig {
        beta_t: 0.02,
        ..cfg.clone()
    };
    assert!(matches!(
        check_compatible(&vq, &dm, Some(&cfg_t)),
        Err(Error::Version(_))
    ));
}

#[test]
fn splits_are_deterministic_partitions() {
    let names: Vec<String> = (0..100).map(|i| format!("s{i:03}")).collect();
    let s = split_names(&names, [0.8, 0.1, 0.1], 5).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
    assert_eq!(s, split_names(&names, [0.8, 0.1, 0.1], 5).unwrap());
    assert_ne!(s, split_names(&names, [0.8, 0.1, 0.1], 6).unwrap());
    let mut all: Vec<String> = s
        .train
        .iter()
        .chain(&s.val)
        .chain(&s.test)
        .cloned()
        .collect();
    all.sort();
    assert_eq!(all, names);
    let mut reversed = names.clone();
    reversed.reverse();
    assert_eq!(s, split_names(&reversed, [0.8, 0.1, 0.1], 5).unwrap());

    assert!(split_names(&names[..2], [0.8, 0.1, 0.1], 0).is_err());
    assert!(split_names(&names, [0.8, 0.1, 0.2], 0).is_err());
    let dup = vec!["a".to_string(), "a".to_string(), "b".to_string()];
    assert!(split_names(&dup, [0.8, 0.1, 0.1], 0).is_err());
}

#[test]
fn generated_corpus_reloads_and_splits() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let m = generate_corpus(&cfg, None, dir.path()).unwrap();
    let (m2, built) = build_corpus(&cfg, None).unwrap();
    assert_eq!(m, m2);
    assert_eq!(load_manifest(dir.path()).unwrap(), m);
    let items = load_items(dir.path(), &m, None).unwrap();
    assert_eq!(items.len(), 6);
    for (a, b) in items.iter().zip(&built) {
        assert_eq!(a.complete, b.complete);
        assert_eq!(a.partial, b.partial);
        assert!(a.partial.known_count() < a.partial.len());
    }
    let sidecar = Manifest::sidecar_path(&dir.path().join("corpus.json"));
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(sidecar).unwrap()).unwrap();
    assert_eq!(
        manifest.sha256,
        sha256_file(&dir.path().join("corpus.json")).unwrap()
    );

    let split = split_corpus(dir.path(), [0.5, 0.25, 0.25], 1).unwrap();
    assert_eq!(
        read_split_list(&dir.path().join("test.txt")).unwrap(),
        split.test
    );
    let (_, train) = split_items(dir.path(), "train").unwrap();
    assert_eq!(train.len(), 3);
    assert!(load_items(dir.path(), &m, Some(&["nope".to_string()])).is_err());
}

#[test]
fn completion_is_seeded_and_leaves_inputs_untouched() {
    let cfg = tiny();
    let (vq, dm) = models(&cfg);
    let input = eval_input(&cfg);
    let before = input.clone();
    let run = |seed| {
        complete(
            &vq,
            &dm,
            Some(&input.partial),
            input.image.as_ref(),
            2,
            seed,
            4,
        )
        .unwrap()
    };
    let a = run(11);
    assert_eq!(a.len(), 2);
    assert_eq!(a, run(11));
    assert_ne!(a[0], a[1]);
    // Sample k of seed s is sample 0 of seed s + k.
    assert_eq!(a[1], run(12)[0]);
    assert_eq!(input.partial, before.partial);
    assert_eq!(input.complete, before.complete);
    assert!(complete(&vq, &dm, None, None, 0, 0, 4).is_err());

    let gt = &input.complete;
    let (k, e) = best_by_l1(&a, gt).unwrap();
    assert!(a
        .iter()
        .all(|s| shapediff::metrics::l1_error(s, gt).unwrap() >= e));
    assert_eq!(best_by_l1(&[a[0].clone(), a[0].clone()], gt).unwrap().0, 0);
    assert!(k < 2);
}

#[test]
fn ablation_modes_select_their_conditioning() {
    let cfg = tiny();
    let (vq, dm) = models(&cfg);
    let input = eval_input(&cfg);
    let inputs = vec![input.clone()];
    let both = run_ablation(&vq, &dm, &inputs, CondMode::Both, 2, 3, 4, 256).unwrap();
    let samples = complete(
        &vq,
        &dm,
        Some(&input.partial),
        input.image.as_ref(),
        2,
        3,
        4,
    )
    .unwrap();
    let first = shapediff::metrics::l1_error(&samples[0], &input.complete).unwrap();
    assert_eq!(both.first_sample.shapes[0].l1, first);
    assert!(both.best.aggregate.l1 <= both.first_sample.aggregate.l1);

    let po = run_ablation(&vq, &dm, &inputs, CondMode::PartialOnly, 2, 3, 4, 256).unwrap();
    let samples = complete(&vq, &dm, Some(&input.partial), None, 2, 3, 4).unwrap();
    assert_eq!(
        po.first_sample.shapes[0].l1,
        shapediff::metrics::l1_error(&samples[0], &input.complete).unwrap()
    );

    let no_image = vec![EvalInput {
        image: None,
        ..input
    }];
    assert!(run_ablation(&vq, &dm, &no_image, CondMode::ImageOnly, 2, 3, 4, 256).is_err());
    assert!(run_ablation(&vq, &dm, &no_image, CondMode::PartialOnly, 1, 3, 4, 256).is_ok());
    assert!(run_ablation(&vq, &dm, &[], CondMode::Both, 1, 3, 4, 256).is_err());

    for m in CondMode::ALL {
        assert_eq!(m.name().parse::<CondMode>().unwrap(), m);
    }
    assert!("everything".parse::<CondMode>().is_err());
}

#[test]
fn directory_lock_is_exclusive_until_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let lock = DirLock::acquire(dir.path()).unwrap();
    assert!(matches!(
        DirLock::acquire(dir.path()),
        Err(Error::Validation(_))
    ));
    drop(lock);
    assert!(!dir.path().join(".lock").exists());
    DirLock::acquire(dir.path()).unwrap();
}

fn lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn training_jobs_write_checkpoints_logs_and_manifests() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    generate_corpus(&cfg, None, &data).unwrap();
    split_corpus(&data, [0.5, 0.25, 0.25], 0).unwrap();

    let (pv, pd) = (out.join("vq.sdck"), out.join("diff.sdck"));
    train_vqvae_job(&cfg, &data, &pv).unwrap();
    assert_eq!(lines(&out.join("vq.log.jsonl")), 2);
    train_diffusion_job(&cfg, &data, &pv, &pd).unwrap();
    assert_eq!(lines(&out.join("diff.log.jsonl")), 2);
    assert!(!out.join(".lock").exists());

    let vq = load_vqvae(&pv).unwrap();
    let dm = load_diffusion(&pd).unwrap();
    check_compatible(&vq, &dm, Some(&cfg)).unwrap();
    assert!(dm.latent_scale.is_finite() && dm.latent_scale > 0.0);
    let m: Manifest =
        serde_json::from_str(&std::fs::read_to_string(Manifest::sidecar_path(&pd)).unwrap())
            .unwrap();
    assert_eq!(m.sha256, sha256_file(&pd).unwrap());
    assert_eq!(m.inputs.len(), 3);
    assert_eq!(RunConfig::parse(&m.config).unwrap(), cfg);

    // A held lock makes a second job fail fast.
    let _lock = DirLock::acquire(&out).unwrap();
    assert!(train_vqvae_job(&cfg, &data, &pv).is_err());
}

#[test]
fn meshes_export_as_obj() {
    let cfg = tiny();
    let input = eval_input(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("shape.obj");
    save_obj(&input.complete, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mesh = extract_mesh(&input.complete);
    assert_eq!(
        text.lines().filter(|l| l.starts_with("v ")).count(),
        mesh.vertices.len()
    );
    assert_eq!(
        text.lines().filter(|l| l.starts_with("f ")).count(),
        mesh.triangles.len()
    );
    assert!(!mesh.triangles.is_empty());
}
