use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapediff::grid::{synthesize, CameraPose, ShapeSpec, TsdfGrid};
use shapediff::render::ImageGradient;
use shapediff::vqvae::*;
use shapediff_nn::gradcheck::{check_coordinates, sample_coordinates};
use shapediff_nn::ParamStore;

fn small_config() -> VqVaeConfig {
    VqVaeConfig {
        resolution: 16,
        widths: [4, 8, 8],
        codebook_size: 64,
        groups: 2,
        ..VqVaeConfig::desk()
    }
}

fn shape(seed: u64, s: usize) -> TsdfGrid {
    synthesize(&ShapeSpec::random(seed, s), s, 3.0).unwrap()
}

/// Exhaustive nearest-row search in f64, first minimum wins.
fn brute_nearest(site: &[f32], book: &[f32], dim: usize) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, row) in book.chunks(dim).enumerate() {
        let d: f64 = row
            .iter()
            .zip(site)
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum();
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

#[test]
fn quantize_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (k, d) in [(32, 3), (64, 3), (5, 1), (64, 8)] {
        let mut entries: Vec<f32> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Duplicate a row so ties occur.
        let copy: Vec<f32> = entries[..d].to_vec();
        entries[(k - 1) * d..].copy_from_slice(&copy);
        let book = Codebook::new(k, d, entries.clone()).unwrap();
        let side = 10;
        let sites = side * side * side;
        let mut values: Vec<f32> = (0..d * sites).map(|_| rng.gen_range(-1.2..1.2)).collect();
        for c in 0..d {
            values[c * sites] = entries[c];
        }
        let z = LatentCode::new(d, side, values.clone()).unwrap();
        let (q, idx) = quantize(&z, &book).unwrap();
        assert_eq!(idx[0], 0);
        for l in 0..sites {
            let site: Vec<f32> = (0..d).map(|c| values[c * sites + l]).collect();
            let j = brute_nearest(&site, &entries, d);
            assert_eq!(idx[l], j, "site {l}");
            for c in 0..d {
                assert_eq!(q.values[c * sites + l], entries[j * d + c]);
            }
        }
    }
}

#[test]
fn encode_reference_extents() {
    let cfg = VqVaeConfig::reference();
    let model = VqVae::new(cfg, 1).unwrap();
    let z = model.encode(&shape(1, 64)).unwrap();
    assert_eq!((z.channels, z.side), (3, 16));
    assert!(z.values.iter().all(|v| v.is_finite()));
}

#[test]
fn encode_rejects_bad_resolutions() {
    let model = VqVae::new(small_config(), 0).unwrap();
    assert!(model.encode(&shape(0, 18)).is_err());
    assert!(model.encode(&shape(0, 20)).is_err());
    assert!(VqVae::new(
        VqVaeConfig {
            resolution: 18,
            ..small_config()
        },
        0
    )
    .is_err());
}

#[test]
fn zero_input_gives_finite_latents_and_runs_are_deterministic() {
    let model = VqVae::new(small_config(), 3).unwrap();
    let zero = TsdfGrid::filled(16, 3.0, 0.0).unwrap();
    assert!(model
        .encode(&zero)
        .unwrap()
        .values
        .iter()
        .all(|v| v.is_finite()));
    let g = shape(4, 16);
    assert_eq!(model.encode(&g).unwrap(), model.encode(&g).unwrap());
    let again = VqVae::new(small_config(), 3).unwrap();
    assert_eq!(
        model.reconstruct(&g).unwrap(),
        again.reconstruct(&g).unwrap()
    );
}

#[test]
fn decode_respects_truncation() {
    let model = VqVae::new(small_config(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let values = (0..3 * 64).map(|_| rng.gen_range(-50.0..50.0)).collect();
    let out = model
        .decode(&LatentCode::new(3, 4, values).unwrap())
        .unwrap();
    assert!(out.values().iter().all(|v| v.abs() <= 3.0));
    assert!(model.decode(&LatentCode::zeros(3, 5)).is_err());
    assert!(model.decode(&LatentCode::zeros(2, 4)).is_err());
}

#[test]
fn identical_renders_have_zero_image_loss() {
    let g = shape(2, 24);
    let pose = CameraPose::orbit(24, 30.0, 20.0, 1.6, 24);
    let t = ViewTarget::render(&g, pose);
    let mut up = ImageGradient::zeros(24, 24);
    assert_eq!(render_l1(&t, &t.depth, &t.normals, 1.0, &mut up), 0.0);
    assert!(up.d_depth.iter().all(|&v| v == 0.0));
}

#[test]
fn codebook_terms_vanish_when_latents_are_rows() {
    let mut model = VqVae::new(
        VqVaeConfig {
            gamma_r: 0.0,
            gamma_a: 0.0,
            ..small_config()
        },
        9,
    )
    .unwrap();
    let g = shape(9, 16);
    let z = model.encode(&g).unwrap();
    // 64 sites and 64 rows: make row l equal to site l.
    let book = model.store.get_mut(model.net.codebook).data_mut();
    for l in 0..64 {
        for c in 0..3 {
            book[l * 3 + c] = z.values[c * 64 + l];
        }
    }
    let out = vqvae_loss::<f32>(
        &model.net,
        &model.store,
        &[&g],
        &[],
        None,
        &QuantMode::Nearest,
        false,
    )
    .unwrap();
    assert_eq!(out.terms.commit, 0.0);
    assert_eq!(out.terms.codebook, 0.0);
    assert!(out.terms.recon > 0.0);
}

fn views(g: &TsdfGrid, s: usize) -> Vec<Vec<ViewTarget>> {
    vec![[40.0, 220.0]
        .iter()
        .map(|&az| ViewTarget::render(g, CameraPose::orbit(s, az, 20.0, 1.6, 16)))
        .collect()]
}

#[test]
fn straight_through_equals_frozen_gradient() {
    let cfg = VqVaeConfig {
        gamma_r: 0.4,
        gamma_a: 0.0,
        ..small_config()
    };
    let model = VqVae::new(cfg, 11).unwrap();
    let store: ParamStore<f64> = model.store.cast();
    let g = shape(11, 16);
    let targets = views(&g, 16);
    let st = vqvae_loss(
        &model.net,
        &store,
        &[&g],
        &targets,
        None,
        &QuantMode::Nearest,
        true,
    )
    .unwrap();
    let frozen = QuantMode::Frozen(st.frozen(&model.net, &store));
    let fr = vqvae_loss(&model.net, &store, &[&g], &targets, None, &frozen, true).unwrap();
    assert!((st.terms.total - fr.terms.total).abs() < 1e-12);
    let (a, b) = (st.grads.unwrap(), fr.grads.unwrap());
    assert_eq!(a.len(), b.len());
    for (id, ga) in a.iter() {
        let gb = b.get(id).unwrap();
        for (x, y) in ga.data().iter().zip(gb.data()) {
            assert!(
                (x - y).abs() <= 1e-12 * (1.0 + x.abs()),
                "{}",
                store.name(id)
            );
        }
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let cfg = VqVaeConfig {
        gamma_r: 0.4,
        gamma_a: 0.0,
        ..VqVaeConfig::desk()
    };
    let g = shape(13, 32);
    // A short warm-up moves the decoder off its nearly flat initial field,
    // where ray brackets are almost tangent and depth is extremely stiff.
    let mut model = VqVae::new(cfg, 13).unwrap();
    let tc = VqVaeTrainConfig {
        steps: 60,
        log_every: 0,
        ..VqVaeTrainConfig::desk()
    };
    train_vqvae(&mut model, std::slice::from_ref(&g), &tc, |_| Ok(())).unwrap();

    let mut store: ParamStore<f64> = model.store.cast();
    let targets = views(&g, 32);
    let out = vqvae_loss(
        &model.net,
        &store,
        &[&g],
        &targets,
        None,
        &QuantMode::Nearest,
        true,
    )
    .unwrap();
    assert!(out.terms.render2d > 0.0);
    let frozen = QuantMode::Frozen(out.frozen(&model.net, &store));
    let grads = out.grads.clone().unwrap();
    let ids: Vec<_> = store.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut coords = sample_coordinates(&store, &ids, 20, &mut rng);
    coords.push((model.net.codebook, out.indices[0] * 3));
    let report = check_coordinates(&mut store, &grads, &coords, 1e-4, 1e-8, |s| {
        vqvae_loss(&model.net, s, &[&g], &targets, None, &frozen, false)
            .unwrap()
            .terms
            .total
    });
    for e in &report {
        assert!(e.rel_error <= 1e-2, "{e:?}");
    }
}
