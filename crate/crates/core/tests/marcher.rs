use oblique_core::bake::{bake, default_step, BakeOptions, BakedScene, MarchOptions};
use oblique_core::math::{Aabb, Vec3};
use oblique_core::occupancy::OccupancyPlane;
use oblique_core::render::{Model, Ray};
use oblique_core::scene::SceneRepr;
use oblique_core::shader::DeferredShader;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bounds() -> Aabb<f32> {
    Aabb::new(Vec3::new(-1.0, -1.0, 0.0), Vec3::new(1.0, 1.0, 1.0)).unwrap()
}

/// Random scene over a 16x16 plane: about half the columns hold one
/// interval. `density` is the grid's density logit offset.
fn random_scene(seed: u64, density: f32) -> BakedScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = bounds();
    let mut scene = SceneRepr::zeros(b, 16, 32).unwrap();
    for (i, v) in scene.grid.iter_mut().enumerate() {
        *v = rng.random_range(-1.0..1.0) + if i % 8 == 0 { density } else { 0.0 };
    }
    for p in scene.planes.iter_mut() {
        for v in p.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let mut plane = OccupancyPlane::closed(b, 16, 0.05).unwrap();
    for c in 0..256 {
        if rng.random_bool(0.5) {
            let lo: f32 = rng.random_range(0.0..0.4);
            let hi = (lo + rng.random_range(0.03..0.5)).min(1.0);
            plane.heights[2 * c] = lo;
            plane.heights[2 * c + 1] = hi;
        }
    }
    let mut shader = DeferredShader::init(&mut rng);
    shader.set_output_bias([-1.0, -2.0, -3.0]);
    let model = Model { scene, plane, shader };
    bake(&model, [0.5, 0.6, 0.7], &BakeOptions { block_size: 8, bits: 16, pyramid_levels: 4 })
        .unwrap()
        .decode()
        .unwrap()
}

/// Rays from above and from the sides, aimed at points inside the bounds.
fn random_rays(rng: &mut ChaCha8Rng, n: usize) -> Vec<(Vec3<f32>, Vec3<f32>)> {
    (0..n)
        .map(|i| {
            let origin = if i % 4 == 3 {
                Vec3::new(rng.random_range(-3.0..3.0), -3.0, rng.random_range(0.05..0.6))
            } else {
                Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(1.2..3.0))
            };
            let target =
                Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..0.5));
            (origin, target - origin)
        })
        .collect()
}

#[test]
fn skipping_matches_dense_marcher() {
    for seed in 0..4 {
        let s = random_scene(seed, 1.0);
        let step = default_step(&s.aabb);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (mut dense_total, mut skip_total) = (0u64, 0u64);
        for (o, d) in random_rays(&mut rng, 200) {
            for et in [true, false] {
                let (a, sa) = s.march(o, d, &MarchOptions { step, skip: false, early_termination: et }).unwrap();
                let (b, sb) = s.march(o, d, &MarchOptions { step, skip: true, early_termination: et }).unwrap();
                for c in 0..3 {
                    assert!((a[c] - b[c]).abs() <= 1e-5, "seed {seed}: {a:?} vs {b:?}");
                }
                assert_eq!(sa.fetched, sb.fetched);
                assert!(sb.samples <= sa.samples);
                dense_total += sa.samples as u64;
                skip_total += sb.samples as u64;
            }
        }
        assert!(skip_total < dense_total);
    }
}

/// Parametric range where the ray is inside `cell`'s box `[x0,x1]x[y0,y1]x[z0,z1]`.
fn box_range(ray: &Ray<f32>, lo: Vec3<f32>, hi: Vec3<f32>) -> Option<(f32, f32)> {
    let (mut a, mut b) = (ray.t_near, ray.t_far);
    for k in 0..3 {
        let (o, d) = (ray.origin[k], ray.dir[k]);
        if d == 0.0 {
            if o < lo[k] || o > hi[k] {
                return None;
            }
        } else {
            let (t0, t1) = ((lo[k] - o) / d, (hi[k] - o) / d);
            a = a.max(t0.min(t1));
            b = b.min(t0.max(t1));
        }
    }
    (a < b).then_some((a, b))
}

#[test]
fn skipping_is_sound_against_column_enumeration() {
    for seed in 0..6 {
        let s = random_scene(10 + seed, 0.0);
        let step = default_step(&s.aabb);
        let m = s.plane.res;
        let (wx, wy) = s.plane.cell_size();
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        for (o, d) in random_rays(&mut rng, 300) {
            let Some(ray) = s.ray(o, d).unwrap() else {
                continue;
            };
            let mut stats = Default::default();
            let segs = s.segments(&ray, &mut stats);

            // Brute force: every column box the ray crosses for a
            // non-negligible length is among the visited segments.
            for iy in 0..m {
                for ix in 0..m {
                    let cell = iy * m + ix;
                    let (z0, z1) = s.plane.interval(cell);
                    if z1 <= z0 {
                        continue;
                    }
                    let lo = Vec3::new(s.aabb.lo.x + ix as f32 * wx, s.aabb.lo.y + iy as f32 * wy, z0);
                    let hi = Vec3::new(lo.x + wx, lo.y + wy, z1);
                    if let Some((a, b)) = box_range(&ray, lo, hi) {
                        if b - a > 1e-4 {
                            let hit = segs.iter().any(|&(c, s0, s1)| c == cell && s0 <= a + 1e-4 && s1 >= b - 1e-4);
                            assert!(hit, "seed {seed}: cell {cell} on [{a}, {b}] missed");
                        }
                    }
                }
            }

            // Every sample lies inside the interval of its own column.
            let tol = 1e-4;
            for t in s.lattice(&ray, step, true) {
                let p = ray.at(t);
                let (ix, iy) = (((p.x - s.aabb.lo.x) / wx).floor(), ((p.y - s.aabb.lo.y) / wy).floor());
                let inside = (-1..=1).any(|dy| {
                    (-1..=1).any(|dx| {
                        let (cx, cy) = (ix as i64 + dx, iy as i64 + dy);
                        if cx < 0 || cy < 0 || cx >= m as i64 || cy >= m as i64 {
                            return false;
                        }
                        // Only neighbors whose footprint p touches within tolerance.
                        let fx0 = s.aabb.lo.x + cx as f32 * wx;
                        let fy0 = s.aabb.lo.y + cy as f32 * wy;
                        let on = p.x >= fx0 - tol && p.x <= fx0 + wx + tol && p.y >= fy0 - tol && p.y <= fy0 + wy + tol;
                        let (z0, z1) = s.plane.interval(cy as usize * m + cx as usize);
                        on && z1 > z0 && p.z >= z0 - tol && p.z <= z1 + tol
                    })
                });
                assert!(inside, "seed {seed}: sample at {p:?} outside every interval");
            }

            // Dense samples with non-zero occupancy all survive skipping.
            let kept = s.lattice(&ray, step, true);
            for t in s.lattice(&ray, step, false) {
                let p = s.aabb.clamp(ray.at(t));
                let cell = s.plane.cell_clamped(p.x, p.y);
                if s.plane.ramp_at_cell(cell, p.z).value > 0.0 {
                    assert!(kept.contains(&t), "seed {seed}: occupied sample at t = {t} skipped");
                }
            }
        }
    }
}

#[test]
fn vertical_column_sample_count() {
    let s0 = random_scene(3, 0.0);
    let m = s0.plane.res;
    let (wx, wy) = s0.plane.cell_size();
    let mut checked = 0;
    for cell in 0..m * m {
        let (z0, z1) = s0.plane.interval(cell);
        if z1 <= z0 {
            continue;
        }
        let (ix, iy) = (cell % m, cell / m);
        let x = s0.aabb.lo.x + (ix as f32 + 0.5) * wx;
        let y = s0.aabb.lo.y + (iy as f32 + 0.5) * wy;
        // Lattice from the top face, aligned so a point falls on z_max.
        let k = 37.0;
        let step = (s0.aabb.hi.z - z1) / k;
        if !(step > 0.0) {
            continue;
        }
        let interval = z1 - z0;
        let ratio = interval / step;
        if (ratio - ratio.round()).abs() < 0.01 {
            continue;
        }
        let opts = MarchOptions { step, skip: true, early_termination: false };
        let (_, st) = s0.march(Vec3::new(x, y, 2.0), Vec3::new(0.0, 0.0, -1.0), &opts).unwrap();
        assert_eq!(st.samples, ratio.ceil() as u32, "cell {cell}: interval {interval}, step {step}");
        let ray = s0.ray(Vec3::new(x, y, 2.0), Vec3::new(0.0, 0.0, -1.0)).unwrap().unwrap();
        for t in s0.lattice(&ray, step, true) {
            let z = ray.at(t).z;
            assert!(z >= z0 - 1e-5 && z <= z1 + 1e-5);
        }
        checked += 1;
    }
    assert!(checked > 20);
}

#[test]
fn early_termination_is_close() {
    let mut worst = 0.0f32;
    for seed in 0..3 {
        let s = random_scene(20 + seed, 4.0);
        let step = default_step(&s.aabb);
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mut terminated = 0;
        for (o, d) in random_rays(&mut rng, 200) {
            let (a, sa) = s.march(o, d, &MarchOptions { step, skip: true, early_termination: true }).unwrap();
            let (b, sb) = s.march(o, d, &MarchOptions { step, skip: true, early_termination: false }).unwrap();
            if sa.samples < sb.samples {
                terminated += 1;
            }
            for c in 0..3 {
                worst = worst.max((a[c] - b[c]).abs());
            }
        }
        assert!(terminated > 20);
    }
    assert!(worst <= 1.5e-3, "{worst}");
}

#[test]
fn rendering_is_deterministic() {
    let s = random_scene(5, 1.0);
    let opts = MarchOptions { step: default_step(&s.aabb), skip: true, early_termination: true };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (o, d) in random_rays(&mut rng, 50) {
        assert_eq!(s.march(o, d, &opts).unwrap(), s.march(o, d, &opts).unwrap());
    }
}
