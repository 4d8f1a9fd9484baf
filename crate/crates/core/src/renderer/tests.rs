use super::*;
use crate::gaussians::{param, test_support::random_unit4, ParamArray, NUM_PARAMS};
use crate::loss::LossWeights;
use nalgebra::{Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn axis_camera(width: usize, height: usize, f: f64, cx: f64, cy: f64) -> Camera {
    Camera {
        fx: f,
        fy: f,
        cx,
        cy,
        rotation: Matrix3::identity(),
        translation: Vector3::zeros(),
        width,
        height,
        near: 0.01,
        far: 100.0,
    }
}

fn splat(center: (f64, f64), cov: Matrix2<f64>, depth: f64, color: [f64; 3], alpha: f64) -> Splat2D {
    Splat2D {
        center: Vector2::new(center.0, center.1),
        cov,
        depth,
        color: Vector3::from(color),
        alpha,
    }
}

#[test]
fn project_on_axis() {
    let cam = axis_camera(64, 64, 100.0, 32.0, 32.0);
    let g3 = ConditionedGaussian3D {
        mean3: Vector3::new(0.0, 0.0, 10.0),
        cov3: Matrix3::identity(),
        opacity_t: 0.5,
    };
    let s = project(&g3, Vector3::zeros(), &cam, 0.3).unwrap();
    assert!((s.cov - Matrix2::new(100.3, 0.0, 0.0, 100.3)).abs().max() < 1e-9);
    assert_eq!(s.center, Vector2::new(32.0, 32.0));
    assert_eq!(s.depth, 10.0);

    let behind = ConditionedGaussian3D {
        mean3: Vector3::new(0.0, 0.0, -1.0),
        ..g3.clone()
    };
    assert!(project(&behind, Vector3::zeros(), &cam, 0.3).is_none());

    let cov = Matrix3::new(0.5, 0.1, 0.05, 0.1, 0.7, -0.2, 0.05, -0.2, 0.9);
    let g_a = ConditionedGaussian3D {
        mean3: Vector3::new(0.3, -0.2, 5.0),
        cov3: cov,
        opacity_t: 0.5,
    };
    let g_b = ConditionedGaussian3D {
        cov3: cov * 3.0,
        ..g_a.clone()
    };
    let a = project(&g_a, Vector3::zeros(), &cam, 0.3).unwrap();
    let b = project(&g_b, Vector3::zeros(), &cam, 0.3).unwrap();
    let lp = Matrix2::identity() * 0.3;
    assert!(((b.cov - lp) - (a.cov - lp) * 3.0).abs().max() < 1e-9);
}

#[test]
fn depth_sort_examples() {
    let ids = [GaussianId(0), GaussianId(1), GaussianId(2)];
    assert_eq!(depth_sort(&[1.0, 3.0, 2.0], &ids), vec![1, 2, 0]);
    assert_eq!(depth_sort(&[2.0, 2.0, 2.0], &ids), vec![0, 1, 2]);
    let reversed = [GaussianId(5), GaussianId(4), GaussianId(3)];
    assert_eq!(depth_sort(&[2.0, 2.0, 2.0], &reversed), vec![2, 1, 0]);
}

#[test]
fn depth_sort_matches_reference_on_a_million() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 1_000_000;
    let depths: Vec<f64> = (0..n).map(|_| (rng.random_range(0..10_000) as f64) * 0.01).collect();
    let ids: Vec<GaussianId> = (0..n).map(|i| GaussianId(rng.random::<u64>() ^ i as u64)).collect();
    let order = depth_sort(&depths, &ids);
    // Reference: lexicographic sort of (negated depth, id) tuples.
    let mut keyed: Vec<(i64, u64, usize)> = (0..n)
        .map(|i| (-((depths[i] * 100.0).round() as i64), ids[i].0, i))
        .collect();
    keyed.sort();
    let reference: Vec<usize> = keyed.into_iter().map(|k| k.2).collect();
    assert_eq!(order, reference);
}

#[test]
fn expand_quad_examples() {
    let s = splat((10.0, 10.0), Matrix2::new(4.0, 0.0, 0.0, 1.0), 1.0, [1.0; 3], 1.0);
    let q = expand_quad(&s, (-2.0f64).exp()).unwrap();
    assert!((q.half_extent - Vector2::new(4.0, 2.0)).norm() < 1e-12);

    let faint = splat((10.0, 10.0), Matrix2::identity(), 1.0, [1.0; 3], 0.001);
    assert!(expand_quad(&faint, 1.0 / 255.0).is_none());

    let iso = splat((50.0, 40.0), Matrix2::identity() * 7.0, 1.0, [1.0; 3], 0.6);
    let q = expand_quad(&iso, 1.0 / 255.0).unwrap();
    assert_eq!(q.half_extent.x, q.half_extent.y);
    let r = q.pixel_rect(100, 100).unwrap();
    assert_eq!(r.x1 - r.x0, r.y1 - r.y0);
}

#[test]
fn over_operator_example() {
    let opts = RenderOptions {
        parallel: false,
        ..Default::default()
    };
    let big = Matrix2::identity() * 1e6;
    let back = splat((2.0, 2.0), big, 5.0, [0.0, 1.0, 0.0], 0.5);
    let front = splat((2.0, 2.0), big, 1.0, [1.0, 0.0, 0.0], 0.5);
    let fb = composite(5, 5, &[back, front], &opts).unwrap();
    let p = 2 * 5 + 2;
    let px = &fb.rgb[3 * p..3 * p + 3];
    assert!((px[0] - 0.5).abs() < 1e-12);
    assert!((px[1] - 0.25).abs() < 1e-12);
    assert!(px[2].abs() < 1e-12);
    assert!((fb.transmittance[p] - 0.25).abs() < 1e-12);
}

#[test]
fn zero_alpha_splats_leave_background() {
    let opts = RenderOptions {
        background: Vector3::new(0.2, 0.3, 0.4),
        ..Default::default()
    };
    let s = splat((2.0, 2.0), Matrix2::identity() * 4.0, 1.0, [1.0; 3], 0.0);
    let fb = composite(6, 4, &[s], &opts).unwrap();
    assert_eq!(fb, Framebuffer::new(6, 4, opts.background));
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> (Vec<GaussianId>, Vec<Gaussian4D>) {
    let mut gs = Vec::new();
    for _ in 0..n {
        let mut g = Gaussian4D::isotropic(
            Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(3.0..8.0)),
            rng.random_range(0.0..1.0),
            0.1,
            rng.random_range(0.2..1.0),
            rng.random_range(0.05..1.0),
            Vector3::from_fn(|_, _| rng.random_range(0.0..1.0)),
        );
        g.scale = Vector4::new(
            rng.random_range(0.02..0.4),
            rng.random_range(0.02..0.4),
            rng.random_range(0.02..0.4),
            rng.random_range(0.2..1.0),
        );
        g.rotor_left = random_unit4(rng);
        g.rotor_right = random_unit4(rng);
        for v in g.sh_residual.iter_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
        gs.push(g);
    }
    ((0..n as u64).map(GaussianId).collect(), gs)
}

#[test]
fn tile_size_and_threading_do_not_change_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cam = axis_camera(48, 40, 40.0, 24.0, 20.0);
    for _ in 0..5 {
        let (ids, gs) = random_scene(&mut rng, 200);
        let t = 0.5;
        let base = RenderOptions {
            tile_size: 16,
            parallel: true,
            ..Default::default()
        };
        let a = render_gaussians(&ids, &gs, t, &cam, &base).unwrap();
        for (tile_size, parallel) in [(1, false), (1, true), (7, true), (16, false), (64, true)] {
            let opts = RenderOptions {
                tile_size,
                parallel,
                ..Default::default()
            };
            let b = render_gaussians(&ids, &gs, t, &cam, &opts).unwrap();
            assert!(a.rgb.iter().zip(&b.rgb).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert_eq!(a.transmittance, b.transmittance);
        }
    }
}

#[test]
fn back_to_front_equals_front_to_back() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cam = axis_camera(32, 32, 30.0, 16.0, 16.0);
    let (ids, gs) = random_scene(&mut rng, 120);
    let opts = RenderOptions {
        background: Vector3::new(0.1, 0.2, 0.3),
        ..Default::default()
    };
    let fb = render_gaussians(&ids, &gs, 0.5, &cam, &opts).unwrap();
    let splats = project_all(&ids, &gs, 0.5, &cam, &opts).unwrap();
    for y in 0..32 {
        for x in 0..32 {
            let mut color = Vector3::zeros();
            let mut trans = 1.0f64;
            for (_, s) in splats.iter().rev() {
                let Some(q) = expand_quad(s, opts.alpha_min) else { continue };
                let Some(r) = q.pixel_rect(32, 32) else { continue };
                if !r.contains(x, y) {
                    continue;
                }
                let d = Vector2::new(x as f64, y as f64) - s.center;
                let a = s.alpha * (-0.5 * (d.transpose() * s.cov.try_inverse().unwrap() * d)[(0, 0)]).exp();
                if a < opts.alpha_min {
                    continue;
                }
                let a = a.min(opts.max_alpha);
                color += s.color * a * trans;
                let next = trans * (1.0 - a);
                assert!(next <= trans && next >= 0.0);
                trans = next;
            }
            color += opts.background * trans;
            let p = y * 32 + x;
            for c in 0..3 {
                assert!((fb.rgb[3 * p + c] - color[c]).abs() < 1e-9);
            }
            assert!((fb.transmittance[p] - trans).abs() < 1e-12);
        }
    }
}

#[test]
fn render_empty_and_peak_alpha() {
    let cam = axis_camera(33, 33, 40.0, 16.0, 16.0);
    let opts = RenderOptions {
        background: Vector3::new(0.0, 0.0, 0.0),
        ..Default::default()
    };
    let mut h = Hierarchy::build(10.0, 10.0, 9).unwrap();
    let fb = render(&h, 2.0, &cam, &opts).unwrap();
    assert!(fb.rgb.iter().all(|&v| v == 0.0));

    let g = Gaussian4D::isotropic(Vector3::new(0.0, 0.0, 5.0), 2.0, 0.2, 0.5, 0.7, Vector3::repeat(1.0));
    h.insert(g.clone()).unwrap();
    for t in [2.0, 2.3] {
        let fb = render(&h, t, &cam, &opts).unwrap();
        let p = 16 * 33 + 16;
        let expected = crate::gaussians::marginal_opacity(&g, t).unwrap().min(0.99);
        assert!((fb.rgb[3 * p] - expected).abs() < 1e-12);
    }
    // Outside the influence range the splat disappears.
    let range = h.influence_range_of(&g).unwrap();
    let fb = render(&h, range.end + 0.01, &cam, &opts).unwrap();
    assert!(fb.rgb.iter().all(|&v| v == 0.0));
}

#[test]
fn opaque_large_splat_fills_frame() {
    let cam = axis_camera(16, 16, 16.0, 8.0, 8.0);
    let opts = RenderOptions {
        max_alpha: 1.0,
        ..Default::default()
    };
    let color = Vector3::new(0.2, 0.7, 0.4);
    let g = Gaussian4D::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.0, 100.0, 1.0, 1.0, color);
    let fb = render_gaussians(&[GaussianId(0)], &[g], 0.0, &cam, &opts).unwrap();
    for px in fb.rgb.chunks_exact(3) {
        for c in 0..3 {
            assert!((px[c] - color[c]).abs() < 1e-3);
        }
    }
}

// ---- gradients -------------------------------------------------------------

pub(crate) fn gradient_scene(rng: &mut ChaCha8Rng, n: usize) -> Vec<Gaussian4D> {
    (0..n)
        .map(|_| {
            let mut g = Gaussian4D::isotropic(
                Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(3.5..4.5)),
                0.5 + rng.random_range(-0.1..0.1),
                1.0,
                0.5,
                rng.random_range(0.3..0.6),
                Vector3::from_fn(|_, _| rng.random_range(0.3..0.7)),
            );
            g.scale = Vector4::new(
                rng.random_range(1.2..1.8),
                rng.random_range(1.2..1.8),
                rng.random_range(1.2..1.8),
                rng.random_range(0.4..0.6),
            );
            g.rotor_left = (Vector4::new(1.0, 0.0, 0.0, 0.0) + random_unit4(rng) * 0.3).normalize();
            g.rotor_right = (Vector4::new(1.0, 0.0, 0.0, 0.0) + random_unit4(rng) * 0.3).normalize();
            for v in g.sh_residual.iter_mut() {
                *v = rng.random_range(-0.05..0.05);
            }
            g
        })
        .collect()
}

fn total_loss(ids: &[GaussianId], gs: &[Gaussian4D], t: f64, cam: &Camera, target: &Image, opts: &RenderOptions) -> f64 {
    render_gaussians_with_gradients(ids, gs, t, cam, target, &LossWeights::default(), opts)
        .unwrap()
        .loss
        .total
}

fn check_gradients(n: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = axis_camera(8, 8, 8.0, 3.5, 3.5);
    let gs = gradient_scene(&mut rng, n);
    let ids: Vec<GaussianId> = (0..n as u64).map(GaussianId).collect();
    let mut target = Image::new(8, 8);
    for v in target.data.iter_mut() {
        *v = rng.random_range(0.0..1.0);
    }
    let opts = RenderOptions::default();
    let t = 0.5;
    let out = render_gaussians_with_gradients(&ids, &gs, t, &cam, &target, &LossWeights::default(), &opts).unwrap();
    assert!(out.visible.iter().all(|&v| v));
    for (gi, g) in gs.iter().enumerate() {
        let p: ParamArray = g.to_params();
        for k in 0..NUM_PARAMS {
            let h = 1e-4 * (1.0 + p[k].abs());
            let mut plus = gs.clone();
            let mut pp = p;
            pp[k] += h;
            plus[gi] = Gaussian4D::from_params(&pp);
            let mut minus = gs.clone();
            let mut pm = p;
            pm[k] -= h;
            minus[gi] = Gaussian4D::from_params(&pm);
            let fd = (total_loss(&ids, &plus, t, &cam, &target, &opts) - total_loss(&ids, &minus, t, &cam, &target, &opts))
                / (2.0 * h);
            let an = out.grads[gi][k];
            let err = (an - fd).abs();
            assert!(
                err <= 1e-7 || err <= 1e-4 * an.abs().max(fd.abs()),
                "gaussian {gi} param {k} ({}): analytic {an:e} fd {fd:e}",
                param::group_of(k)
            );
        }
    }
}

#[test]
fn gradients_single_gaussian() {
    check_gradients(1, 10);
}

#[test]
fn gradients_three_gaussians() {
    check_gradients(3, 11);
}

#[test]
fn identical_target_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cam = axis_camera(8, 8, 8.0, 3.5, 3.5);
    let gs = gradient_scene(&mut rng, 2);
    let ids = vec![GaussianId(0), GaussianId(1)];
    let opts = RenderOptions::default();
    let img = render_gaussians(&ids, &gs, 0.5, &cam, &opts).unwrap().into_image();
    let weights = LossWeights {
        ssim: 0.0,
        ..Default::default()
    };
    let out = render_gaussians_with_gradients(&ids, &gs, 0.5, &cam, &img, &weights, &opts).unwrap();
    assert_eq!(out.loss.total, 0.0);
    assert!(out.grads.iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn opacity_gradient_sign_reduces_error() {
    let cam = axis_camera(1, 1, 1.0, 0.0, 0.0);
    let g = Gaussian4D::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.0, 0.5, 1.0, 0.4, Vector3::repeat(1.0));
    let weights = LossWeights {
        ssim: 0.0,
        ..Default::default()
    };
    let opts = RenderOptions::default();
    for (target, expect_negative) in [(0.9, true), (0.1, false)] {
        let tgt = Image::filled(1, 1, [target; 3]);
        let out = render_gaussians_with_gradients(&[GaussianId(0)], &[g.clone()], 0.0, &cam, &tgt, &weights, &opts).unwrap();
        let d = out.grads[0][param::OPACITY];
        assert_eq!(d < 0.0, expect_negative, "target {target}: d = {d}");
    }
}

#[test]
fn culled_gaussians_get_zero_gradient() {
    let cam = axis_camera(8, 8, 8.0, 3.5, 3.5);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut gs = gradient_scene(&mut rng, 2);
    gs[1].mu.z = -5.0;
    let ids = vec![GaussianId(0), GaussianId(1)];
    let tgt = Image::filled(8, 8, [0.5; 3]);
    let out = render_gaussians_with_gradients(&ids, &gs, 0.5, &cam, &tgt, &LossWeights::default(), &RenderOptions::default()).unwrap();
    assert!(out.visible[0] && !out.visible[1]);
    assert!(out.grads[1].iter().all(|&v| v == 0.0));
    let bad = Image::new(4, 4);
    assert!(render_gaussians_with_gradients(&ids, &gs, 0.5, &cam, &bad, &LossWeights::default(), &RenderOptions::default()).is_err());
}
