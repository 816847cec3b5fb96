use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapediff::denoiser::*;
use shapediff::diffusion::{gaussian_latent, make_linear_schedule, NoiseSchedule};
use shapediff::grid::{synthesize, CameraPose, ShapeSpec, TsdfGrid};
use shapediff::render::NormalImage;
use shapediff::vqvae::{LatentCode, ViewTarget, VqVae, VqVaeConfig};
use shapediff_nn::gradcheck::{check_coordinates, sample_coordinates};
use shapediff_nn::params::normal_init;
use shapediff_nn::{Graph, ParamStore, Real, Tensor};

fn tiny() -> DenoiserConfig {
    DenoiserConfig {
        latent_dim: 3,
        latent_side: 4,
        widths: vec![8, 16],
        attention_resolutions: vec![2, 4],
        time_dim: 16,
        token_count: 5,
        token_dim: 8,
        groups: 2,
        grid_resolution: 16,
        token_image_size: 16,
    }
}

fn schedule() -> NoiseSchedule {
    make_linear_schedule(1000, 8.5e-4, 0.012).unwrap()
}

fn shape(seed: u64, s: usize) -> TsdfGrid {
    synthesize(&ShapeSpec::random(seed, s), s, 3.0).unwrap()
}

fn normal_image(g: &TsdfGrid, size: usize, az: f64) -> NormalImage {
    ViewTarget::render(g, CameraPose::orbit(g.resolution(), az, 20.0, 1.6, size)).normals
}

/// A partial scan: the complete shape with the far half marked unknown.
fn partial(g: &TsdfGrid) -> TsdfGrid {
    let s = g.resolution();
    let known: Vec<bool> = (0..s.pow(3)).map(|i| i % s < s / 2).collect();
    TsdfGrid::new(s, g.thresh(), g.values().to_vec(), Some(known)).unwrap()
}

/// Gives the zero-initialised output and control projections random values.
fn randomise_zero_init<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, n, _)| n.starts_with("out.conv") || n.starts_with("ctrl.phi"))
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = normal_init(&shape, 0.2, rng);
    }
}

#[test]
fn zero_initialised_model_predicts_zero_and_ignores_control() {
    let model = DiffusionModel::new(tiny(), schedule(), 1).unwrap();
    let g = shape(1, 16);
    let img = ImageCondition::Image(normal_image(&g, 16, 30.0));
    let p = partial(&g);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = gaussian_latent(3, 4, &mut rng);
    let cond = Condition {
        image: Some(&img),
        partial: Some(&p),
    };
    let eps = model.predict_eps(&z, 500, &cond).unwrap();
    assert_eq!((eps.channels, eps.side), (3, 4));
    assert!(eps.values.iter().all(|&v| v == 0.0));

    // With a live output layer the zero control projections still leave the
    // prediction bit-identical with and without the partial scan.
    let mut live = model.clone();
    randomise_zero_init(&mut live.store, &mut rng);
    let ids: Vec<_> = live
        .store
        .iter()
        .filter(|(_, n, _)| n.starts_with("ctrl.phi"))
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        live.store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    let with = live.predict_eps(&z, 500, &cond).unwrap();
    let without = live
        .predict_eps(
            &z,
            500,
            &Condition {
                image: Some(&img),
                partial: None,
            },
        )
        .unwrap();
    assert!(with.values.iter().any(|&v| v != 0.0));
    assert_eq!(with, without);
}

#[test]
fn rejects_mismatched_inputs() {
    let model = DiffusionModel::new(tiny(), schedule(), 2).unwrap();
    let none = Condition::default();
    assert!(model
        .predict_eps(&LatentCode::zeros(3, 8), 10, &none)
        .is_err());
    assert!(model
        .predict_eps(&LatentCode::zeros(2, 4), 10, &none)
        .is_err());
    assert!(model
        .predict_eps(&LatentCode::zeros(3, 4), 0, &none)
        .is_err());
    assert!(model
        .predict_eps(&LatentCode::zeros(3, 4), 1001, &none)
        .is_err());
    let wrong = ImageCondition::Tokens(FeatureTokens::new(4, 8, vec![0.0; 32]).unwrap());
    assert!(model
        .predict_eps(
            &LatentCode::zeros(3, 4),
            10,
            &Condition {
                image: Some(&wrong),
                partial: None
            }
        )
        .is_err());
    let small = shape(3, 8);
    assert!(model
        .predict_eps(
            &LatentCode::zeros(3, 4),
            10,
            &Condition {
                image: None,
                partial: Some(&small)
            }
        )
        .is_err());
    let mut bad = tiny();
    bad.grid_resolution = 12;
    assert!(DiffusionModel::new(bad, schedule(), 0).is_err());
}

struct Fixture {
    model: DiffusionModel,
    store: ParamStore<f64>,
    zt: Tensor<f64>,
    ts: Vec<usize>,
    images: Vec<ImageCondition>,
    partials: Vec<TsdfGrid>,
    weights: Tensor<f64>,
}

/// Batch of three: fully conditioned, image dropped, partial dropped.
const KEEP_IMAGE: [bool; 3] = [true, false, true];
const KEEP_PARTIAL: [bool; 3] = [true, true, false];

fn fixture(seed: u64) -> Fixture {
    let model = DiffusionModel::new(tiny(), schedule(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store: ParamStore<f64> = model.store.cast();
    randomise_zero_init(&mut store, &mut rng);
    let grids: Vec<TsdfGrid> = (0..3).map(|i| shape(seed + i, 16)).collect();
    let images = grids
        .iter()
        .map(|g| ImageCondition::Image(normal_image(g, 16, 40.0)))
        .collect();
    let partials = grids.iter().map(partial).collect();
    let codes: Vec<LatentCode> = (0..3).map(|_| gaussian_latent(3, 4, &mut rng)).collect();
    Fixture {
        model,
        store,
        zt: LatentCode::batch_tensor(&codes).unwrap(),
        ts: vec![1, 437, 1000],
        images,
        partials,
        weights: normal_init(&[3, 3, 4, 4, 4], 1.0, &mut rng),
    }
}

/// `sum(w * eps_pred)` and, optionally, its parameter gradients.
fn weighted_output(
    f: &Fixture,
    store: &ParamStore<f64>,
    grads: bool,
) -> (f64, Option<shapediff_nn::ParamGrads<f64>>) {
    let mut g = Graph::new();
    let conds: Vec<Condition<'_>> = (0..3)
        .map(|i| Condition {
            image: Some(&f.images[i]),
            partial: Some(&f.partials[i]),
        })
        .collect();
    let cv = f
        .model
        .cond_vars(&mut g, store, &conds, &KEEP_IMAGE, &KEEP_PARTIAL)
        .unwrap();
    let z = g.constant(f.zt.clone());
    let out = f.model.net.forward(&mut g, store, z, &f.ts, &cv).unwrap();
    let w = g.constant(f.weights.clone());
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod);
    let value = g.scalar(loss);
    let grads = grads.then(|| g.backward_scalar(loss).unwrap().param_grads(&g));
    (value, grads)
}

#[test]
fn gradients_match_finite_differences() {
    let f = fixture(5);
    let mut store = f.store.clone();
    let (_, grads) = weighted_output(&f, &store, true);
    let grads = grads.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ids: Vec<_> = store.ids().collect();
    let mut coords = sample_coordinates(&store, &ids, 20, &mut rng);
    for prefix in [
        "ctrl.phi0.weight",
        "ctrl.phi1.weight",
        "mid.attn.cross.k",
        "enc.level1.attn.cross.v",
        "ctrl.hint0.weight",
        "ctrl.enc.conv_in.weight",
        "null_token",
        "tok.conv0.weight",
        "tok.global.weight",
    ] {
        let id = store
            .iter()
            .find(|(_, n, _)| n.starts_with(prefix))
            .unwrap()
            .0;
        coords.push((id, rng.gen_range(0..store.get(id).numel())));
    }
    let time_ids: Vec<_> = store
        .iter()
        .filter(|(_, n, _)| n.starts_with("time."))
        .map(|(id, _, _)| id)
        .collect();
    coords.extend(sample_coordinates(&store, &time_ids, 10, &mut rng));
    let report = check_coordinates(&mut store, &grads, &coords, 1e-5, 1e-7, |s| {
        weighted_output(&f, s, false).0
    });
    for e in &report {
        assert!(e.rel_error <= 1e-4, "{e:?}");
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let f = fixture(8);
    let (_, grads) = weighted_output(&f, &f.store, true);
    let grads = grads.unwrap();
    for (id, name, _) in f.store.iter() {
        let g = grads
            .get(id)
            .unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(
            g.data().iter().any(|&v| v != 0.0),
            "{name} has a zero gradient"
        );
    }
}

#[test]
fn prediction_is_invariant_to_token_order() {
    let model = {
        let mut m = DiffusionModel::new(tiny(), schedule(), 9).unwrap();
        randomise_zero_init(&mut m.store, &mut ChaCha8Rng::seed_from_u64(9));
        m
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (m, d) = (5, 8);
    let values: Vec<f32> = (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let perm = [3, 0, 4, 2, 1];
    let permuted: Vec<f32> = perm
        .iter()
        .flat_map(|&r| values[r * d..(r + 1) * d].to_vec())
        .collect();
    let a = ImageCondition::Tokens(FeatureTokens::new(m, d, values).unwrap());
    let b = ImageCondition::Tokens(FeatureTokens::new(m, d, permuted).unwrap());
    let z = gaussian_latent(3, 4, &mut rng);
    let pa = model
        .predict_eps(
            &z,
            300,
            &Condition {
                image: Some(&a),
                partial: None,
            },
        )
        .unwrap();
    let pb = model
        .predict_eps(
            &z,
            300,
            &Condition {
                image: Some(&b),
                partial: None,
            },
        )
        .unwrap();
    let scale = pa.values.iter().fold(0f32, |m, v| m.max(v.abs()));
    assert!(scale > 0.0);
    for (x, y) in pa.values.iter().zip(&pb.values) {
        assert!((x - y).abs() <= 1e-5 * scale, "{x} vs {y}");
    }
}

#[test]
fn reference_token_files_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let values: Vec<f32> = (0..50 * 768).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let t = FeatureTokens::new(50, 768, values).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("view.ftok");
    save_tokens(&t, &path).unwrap();
    let back = load_tokens(&path).unwrap();
    assert_eq!(back, t);
    assert!(back.expect_extents(50, 768).is_ok());
    assert!(load_tokens(&dir.path().join("missing.ftok")).is_err());
}

#[test]
fn token_encoder_is_deterministic_and_finite_on_blank_images() {
    let cfg = DenoiserConfig::reference();
    let mut store = ParamStore::<f32>::new();
    let enc = TokenEncoder::new(
        &mut store,
        cfg.token_image_size,
        32,
        &mut ChaCha8Rng::seed_from_u64(3),
    )
    .unwrap();
    assert_eq!(enc.token_count(), cfg.token_count);
    let g = shape(6, 32);
    let img = normal_image(&g, 56, 10.0);
    let a = enc.encode(&store, &img).unwrap();
    assert_eq!((a.count, a.dim), (50, 32));
    assert_eq!(a, enc.encode(&store, &img).unwrap());
    let black = NormalImage {
        width: 56,
        height: 56,
        normals: vec![[0.0; 3]; 56 * 56],
        hit: vec![false; 56 * 56],
    };
    let b = enc.encode(&store, &black).unwrap();
    assert!(b.values.iter().all(|v| v.is_finite()));
    assert!(enc.encode(&store, &normal_image(&g, 48, 10.0)).is_err());
}

#[test]
fn training_starts_near_unit_loss_and_stays_finite() {
    let vq = VqVae::new(
        VqVaeConfig {
            resolution: 16,
            widths: [4, 8, 8],
            codebook_size: 64,
            groups: 2,
            ..VqVaeConfig::desk()
        },
        1,
    )
    .unwrap();
    let examples: Vec<TrainingExample> = (0..4)
        .map(|i| {
            let g = shape(20 + i, 16);
            TrainingExample {
                image: Some(ImageCondition::Image(normal_image(&g, 16, 30.0))),
                partial: partial(&g),
                complete: g,
            }
        })
        .collect();
    let mut model = DiffusionModel::new(tiny(), schedule(), 3).unwrap();
    let cfg = DiffusionTrainConfig {
        steps: 30,
        batch_size: 2,
        log_every: 0,
        ..DiffusionTrainConfig::desk()
    };
    let log = train_diffusion(&mut model, &vq, &examples, &cfg, |_| Ok(())).unwrap();
    assert_eq!(log.len(), 30);
    // The zero output layer predicts zero noise, so the first loss is the
    // mean square of a standard normal draw.
    assert!((log[0].loss - 1.0).abs() < 0.25, "{}", log[0].loss);
    assert!(log.iter().all(|e| e.loss.is_finite()));
    assert!(model.latent_scale > 0.0);
    let z = model
        .sample(
            &Condition {
                image: examples[0].image.as_ref(),
                partial: Some(&examples[0].partial),
            },
            5,
            1,
        )
        .unwrap();
    assert_eq!((z.channels, z.side), (3, 4));
    assert!(vq.decode(&z).is_ok());
}
