//! Central finite-difference verification of analytic gradients.

use rand::Rng;

use crate::graph::ParamGrads;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Picks `count` random (parameter, element) coordinates among `ids`,
/// weighting each parameter tensor equally.
pub fn sample_coordinates<R: Rng + ?Sized>(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    count: usize,
    rng: &mut R,
) -> Vec<(ParamId, usize)> {
    (0..count)
        .map(|_| {
            let id = ids[rng.gen_range(0..ids.len())];
            (id, rng.gen_range(0..store.get(id).numel()))
        })
        .collect()
}

/// Compares `analytic` against `(f(p + h) - f(p - h)) / 2h` at each coordinate.
/// The store is restored after every probe.
pub fn check_coordinates(
    store: &mut ParamStore<f64>,
    analytic: &ParamGrads<f64>,
    coords: &[(ParamId, usize)],
    step: f64,
    floor: f64,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> Vec<GradCheckEntry> {
    coords
        .iter()
        .map(|&(id, index)| {
            let original = store.get(id).data()[index];
            store.get_mut(id).data_mut()[index] = original + step;
            let plus = loss(store);
            store.get_mut(id).data_mut()[index] = original - step;
            let minus = loss(store);
            store.get_mut(id).data_mut()[index] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(id).map(|g| g.data()[index]).unwrap_or(0.0);
            GradCheckEntry {
                param: store.name(id).to_string(),
                index,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric, floor),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::kernels::ConvGeom;
    use crate::layers::{Conv, GroupNorm, LayerNorm, Linear};
    use crate::params::normal_init;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_all_close(entries: &[GradCheckEntry], tol: f64) {
        for e in entries {
            assert!(
                e.rel_error <= tol,
                "{}[{}]: analytic {} numeric {} (rel {})",
                e.param,
                e.index,
                e.analytic,
                e.numeric,
                e.rel_error
            );
        }
    }

    #[test]
    fn conv_norm_stack_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let c1 = Conv::new(&mut store, "c1", 2, 4, ConvGeom::cube(3, 2, 1), &mut rng);
        let gn = GroupNorm::new(&mut store, "gn", 4, 2);
        let c2 = Conv::new(&mut store, "c2", 4, 3, ConvGeom::cube(1, 1, 0), &mut rng);
        // Break the affine symmetry of the fresh norm layer.
        *store.get_mut(gn.gamma) = normal_init(&[4], 1.0, &mut rng);
        *store.get_mut(gn.beta) = normal_init(&[4], 1.0, &mut rng);
        let x: Tensor<f64> = normal_init(&[2, 2, 6, 6, 4], 1.0, &mut rng);
        let forward = |store: &ParamStore<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let h = c1.forward(&mut g, store, xv).unwrap();
            let h = gn.forward(&mut g, store, h).unwrap();
            let h = g.silu(h);
            let h = g.upsample2x(h).unwrap();
            let h = c2.forward(&mut g, store, h).unwrap();
            let h = g.tanh(h);
            let sq = g.square(h);
            let loss = g.mean(sq);
            (g, loss)
        };
        let (g, loss) = forward(&store);
        let grads = g.backward_scalar(loss).unwrap().param_grads(&g);
        let ids: Vec<_> = store.ids().collect();
        let coords = sample_coordinates(&store, &ids, 30, &mut rng);
        let entries = check_coordinates(&mut store, &grads, &coords, 1e-5, 1e-9, |s| {
            let (g, l) = forward(s);
            g.scalar(l)
        });
        assert_all_close(&entries, 1e-4);
    }

    #[test]
    fn attention_block_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let ln = LayerNorm::new(&mut store, "ln", 6);
        let q = Linear::new(&mut store, "q", 6, 6, false, &mut rng);
        let k = Linear::new(&mut store, "k", 5, 6, false, &mut rng);
        let v = Linear::new(&mut store, "v", 5, 6, true, &mut rng);
        let null = store.add("null", normal_init(&[1, 3, 5], 1.0, &mut rng));
        let x: Tensor<f64> = normal_init(&[2, 6, 2, 2, 1], 1.0, &mut rng);
        let ctx: Tensor<f64> = normal_init(&[2, 3, 5], 1.0, &mut rng);
        let forward = |store: &ParamStore<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let tokens = g.channels_last(xv).unwrap();
            let h = ln.forward(&mut g, store, tokens).unwrap();
            let c = g.constant(ctx.clone());
            let nv = g.param(store, null);
            let c = g.select_batch(c, nv, &[true, false]).unwrap();
            let qv = q.forward(&mut g, store, h).unwrap();
            let kv = k.forward(&mut g, store, c).unwrap();
            let vv = v.forward(&mut g, store, c).unwrap();
            let a = g.attention(qv, kv, vv).unwrap();
            let a = g.add(a, tokens).unwrap();
            let back = g.channels_first(a, &[2, 2, 1]).unwrap();
            let t = g.transpose_last2(a).unwrap();
            let s1 = g.square(back);
            let s1 = g.mean(s1);
            let s2 = g.log_sigmoid(t);
            let s2 = g.sum(s2);
            let loss = g.add(s1, s2).unwrap();
            (g, loss)
        };
        let (g, loss) = forward(&store);
        let grads = g.backward_scalar(loss).unwrap().param_grads(&g);
        let ids: Vec<_> = store.ids().collect();
        let coords = sample_coordinates(&store, &ids, 30, &mut rng);
        let entries = check_coordinates(&mut store, &grads, &coords, 1e-5, 1e-9, |s| {
            let (g, l) = forward(s);
            g.scalar(l)
        });
        assert_all_close(&entries, 1e-4);
    }

    #[test]
    fn gather_and_straight_through_route_gradients() {
        let mut store = ParamStore::<f64>::new();
        let book = store.add(
            "book",
            Tensor::from_vec(&[3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
        );
        let mut g = Graph::new();
        let bv = g.param(&store, book);
        let z = g.input(Tensor::from_vec(&[1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let zq = g.gather_rows(bv, &[2, 0], 1, &[2]).unwrap();
        assert_eq!(g.value(zq).data(), &[4.0, 0.0, 5.0, 1.0]);
        let st = g.straight_through(z, g.value(zq).clone()).unwrap();
        let s1 = g.sum(st);
        let s2 = g.sum(zq);
        let total = g.add(s1, s2).unwrap();
        let grads = g.backward_scalar(total).unwrap();
        assert_eq!(grads.get(z).unwrap().data(), &[1.0; 4]);
        assert_eq!(
            grads.get(bv).unwrap().data(),
            &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]
        );
    }
}
