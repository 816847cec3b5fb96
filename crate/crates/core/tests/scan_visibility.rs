//! Partial-scan known set versus a brute-force per-ray visibility oracle.

use shapediff::grid::{
    simulate_partial_scan, synthesize, CameraPose, Intrinsics, Primitive, ShapeSpec,
};
use shapediff::TsdfGrid;

const S: usize = 64;
const W: usize = 64;
const FOCAL: f64 = 96.0;
const DIST: f64 = 96.0;

fn trilinear(g: &TsdfGrid, p: [f64; 3]) -> f64 {
    let hi = (S - 1) as f64;
    let mut i0 = [0usize; 3];
    let mut f = [0.0; 3];
    for a in 0..3 {
        let c = p[a].clamp(0.0, hi);
        i0[a] = (c.floor() as usize).min(S - 2);
        f[a] = c - i0[a] as f64;
    }
    let mut v = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { f[0] } else { 1.0 - f[0] })
                    * (if dy == 1 { f[1] } else { 1.0 - f[1] })
                    * (if dz == 1 { f[2] } else { 1.0 - f[2] });
                v += w * g.get(i0[0] + dx, i0[1] + dy, i0[2] + dz) as f64;
            }
        }
    }
    v
}

/// First surface crossing along a pixel ray, found by sampling every 0.5
/// voxel from the volume entry and bisecting the bracket.
fn oracle_depth(g: &TsdfGrid, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
    let hi = (S - 1) as f64;
    // Camera sits on +z looking down -z; the volume spans z in [0, hi].
    let t_in = (origin[2] - hi) / -dir[2];
    let t_out = origin[2] / -dir[2];
    let inside = |t: f64| {
        (0..2).all(|a| {
            let x = origin[a] + t * dir[a];
            (0.0..=hi).contains(&x)
        })
    };
    let at = |t: f64| {
        trilinear(
            g,
            [
                origin[0] + t * dir[0],
                origin[1] + t * dir[1],
                origin[2] + t * dir[2],
            ],
        )
    };
    let mut t = t_in;
    while !inside(t) {
        t += 1e-3;
        if t > t_out {
            return None;
        }
    }
    let mut prev = (t, at(t));
    loop {
        let next = prev.0 + 0.5;
        if next > t_out || !inside(next) {
            return None;
        }
        let v = at(next);
        if prev.1 > 0.0 && v <= 0.0 {
            return Some(prev.0 + 0.5 * prev.1 / (prev.1 - v));
        }
        prev = (next, v);
    }
}

#[test]
fn known_count_matches_visibility_oracle() {
    let c = S as f64 / 2.0;
    let g = synthesize(
        &ShapeSpec::single(Primitive::Sphere {
            center: [c, c, c],
            radius: 8.0,
        }),
        S,
        3.0,
    )
    .unwrap();
    let origin = [c, c, c + DIST];
    let pose = CameraPose::new(
        origin,
        [c, c, c],
        [0.0, 1.0, 0.0],
        Intrinsics::square(W, FOCAL),
    )
    .unwrap();
    let scan = simulate_partial_scan(&g, &pose).unwrap();

    // Camera frame: forward -z, right +x, up +y.
    let mut depth = vec![None; W * W];
    for v in 0..W {
        for u in 0..W {
            let x = (u as f64 + 0.5 - W as f64 / 2.0) / FOCAL;
            let y = -(v as f64 + 0.5 - W as f64 / 2.0) / FOCAL;
            let n = (x * x + y * y + 1.0).sqrt();
            depth[v * W + u] = oracle_depth(&g, origin, [x / n, y / n, -1.0 / n]);
        }
    }
    let mut expected = 0usize;
    for z in 0..S {
        for y in 0..S {
            for x in 0..S {
                let rel = [
                    x as f64 - origin[0],
                    y as f64 - origin[1],
                    z as f64 - origin[2],
                ];
                let zc = -rel[2];
                let px = W as f64 / 2.0 + FOCAL * rel[0] / zc;
                let py = W as f64 / 2.0 - FOCAL * rel[1] / zc;
                if px < 0.0 || py < 0.0 || px >= W as f64 || py >= W as f64 {
                    continue;
                }
                let pix = py.floor() as usize * W + px.floor() as usize;
                let dist = (rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2]).sqrt();
                match depth[pix] {
                    None => expected += 1,
                    Some(d) if d - dist >= -3.0 => expected += 1,
                    _ => {}
                }
            }
        }
    }
    let known = scan.known_count();
    let fraction = known as f64 / scan.len() as f64;
    println!("known {known} oracle {expected} fraction {fraction:.4}");
    assert!(fraction > 0.0 && fraction < 1.0);
    assert_eq!(known, expected);
}
