//! End-to-end gradient fidelity through the full two-pass composition:
//! base compositing, normal renormalization, reflection, environment tracing
//! and the final blend. Analytic gradients from `backward_frame` are checked
//! against central finite differences of a scalar image loss, including the
//! path where a base surfel's rotation changes the final color only through
//! the reflected ray.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splatray_core::camera::CameraModel;
use splatray_core::compose::{backward_frame, compose_frame, ComposeOptions, FrameGrads};
use splatray_core::grad::GradStore;
use splatray_core::math::{logit, quat_to_frame, vec3, Vec3};
use splatray_core::primitives::{build_transform, invert_to_local, sh_basis, sh_dot};
use splatray_core::primitives::{Gaussian2D, GaussianSet, SetKind};
use splatray_core::tracer::Ray;
use splatray_core::Bvh;

const REL_TOL: f64 = 1e-3;
const ABS_FLOOR: f64 = 1e-7;
const FD_H: f64 = 1e-4;

fn small_camera() -> CameraModel {
    CameraModel::look_at(
        6,
        6,
        5.0,
        vec3(0.0, 0.0, -2.2),
        Vec3::ZERO,
        vec3(0.0, 1.0, 0.0),
    )
}

/// Base wall: a handful of broad surfels near z=0 facing the camera, blends
/// mid-range so both blend paths stay active.
fn random_base(rng: &mut ChaCha8Rng, n: usize) -> GaussianSet {
    let mut set = GaussianSet::new(SetKind::Base);
    for _ in 0..n {
        set.push(Gaussian2D {
            center: vec3(
                rng.gen::<f64>() * 1.2 - 0.6,
                rng.gen::<f64>() * 1.2 - 0.6,
                rng.gen::<f64>() * 0.2 - 0.1,
            ),
            rotation: [
                1.0,
                rng.gen::<f64>() * 0.3 - 0.15,
                rng.gen::<f64>() * 0.3 - 0.15,
                1.0 + rng.gen::<f64>() * 0.2, // roughly faces -z after frame
            ],
            log_scales: [
                (0.5 + rng.gen::<f64>() * 0.4f64).ln(),
                (0.5 + rng.gen::<f64>() * 0.4f64).ln(),
            ],
            raw_opacity: logit(0.12 + rng.gen::<f64>() * 0.2),
            sh_coeffs: random_sh(rng),
            raw_blend: Some(logit(0.25 + rng.gen::<f64>() * 0.5)),
        });
    }
    set
}

/// Environment surfels behind the camera where mirrored rays land.
fn random_env(rng: &mut ChaCha8Rng, n: usize) -> GaussianSet {
    let mut set = GaussianSet::new(SetKind::Env);
    for _ in 0..n {
        set.push(Gaussian2D {
            center: vec3(
                rng.gen::<f64>() * 2.4 - 1.2,
                rng.gen::<f64>() * 2.4 - 1.2,
                -4.0 - rng.gen::<f64>() * 0.8,
            ),
            rotation: [
                1.0 + rng.gen::<f64>() * 0.2,
                rng.gen::<f64>() * 0.2 - 0.1,
                rng.gen::<f64>() * 0.2 - 0.1,
                rng.gen::<f64>() * 0.2 - 0.1,
            ],
            log_scales: [
                (0.8 + rng.gen::<f64>() * 0.5f64).ln(),
                (0.8 + rng.gen::<f64>() * 0.5f64).ln(),
            ],
            raw_opacity: logit(0.12 + rng.gen::<f64>() * 0.2),
            sh_coeffs: random_sh(rng),
            raw_blend: None,
        });
    }
    set
}

fn random_sh(rng: &mut ChaCha8Rng) -> [f64; 27] {
    let mut c = [0.0; 27];
    for (k, ck) in c.iter_mut().enumerate() {
        *ck = if k % 9 == 0 {
            rng.gen::<f64>() * 0.7 - 0.1
        } else {
            (rng.gen::<f64>() - 0.5) * 0.1
        };
    }
    c
}

fn opts() -> ComposeOptions {
    ComposeOptions {
        reflect_eps: Some(2e-4),
        alpha_floor: 0.0,
        beta_floor: 0.0,
        ..Default::default()
    }
}

/// Margin scan along one ray against one set: every potential hit must sit
/// clear of the alpha skip, the proxy silhouette, the SH clamp and edge-on
/// denominators, so finite differences stay on one smooth branch.
fn ray_margins_ok(set: &GaussianSet, ray: &Ray, uv_margin: f64, alpha_margin: f64) -> bool {
    for i in 0..set.len() {
        let g = set.get(i);
        let n = quat_to_frame(&g.rotation)[2];
        let denom = n.dot(ray.dir);
        if denom.abs() < 5e-3 {
            return false;
        }
        let t = n.dot(g.center - ray.origin) / denom;
        if t <= 1e-3 {
            if t > -0.05 {
                return false;
            }
            continue;
        }
        let x = ray.origin + ray.dir * t;
        let tr = build_transform(&g);
        let (u, v, _) = invert_to_local(&tr, x);
        if (u.abs() - 3.0).abs() < uv_margin || (v.abs() - 3.0).abs() < uv_margin {
            return false;
        }
        if u.abs() > 3.0 || v.abs() > 3.0 {
            continue;
        }
        let gauss = (-(u * u + v * v) / 2.0).exp();
        let alpha = g.opacity() * gauss;
        if (alpha - 1.0 / 255.0).abs() < alpha_margin {
            return false;
        }
        let basis = sh_basis(ray.dir);
        for ch in 0..3 {
            if (sh_dot(&g.sh_coeffs[ch * 9..(ch + 1) * 9], &basis) + 0.5).abs() < 2e-2 {
                return false;
            }
        }
    }
    true
}

fn frame_is_smooth(
    base: &GaussianSet,
    env: &GaussianSet,
    cam: &CameraModel,
    o: &ComposeOptions,
) -> bool {
    let bvh = Bvh::build(base).unwrap();
    let ebvh = Bvh::build(env).unwrap();
    let frame = compose_frame(&bvh, base, Some((&ebvh, env)), cam, o).unwrap();
    let mut spawned = 0;
    for ray in cam.rays() {
        if !ray_margins_ok(base, &ray, 0.02, 2e-5) {
            return false;
        }
    }
    for refl in frame.refl_rays.iter().flatten() {
        spawned += 1;
        // wider margins: base perturbations move reflected rays with gain
        if !ray_margins_ok(env, refl, 0.1, 5e-4) {
            return false;
        }
    }
    spawned > 4
}

/// Scalar loss: random fixed weights dotted with the final image.
fn loss_of(
    base: &GaussianSet,
    env: &GaussianSet,
    cam: &CameraModel,
    o: &ComposeOptions,
    weights: &[[f64; 3]],
) -> f64 {
    let bvh = Bvh::build(base).unwrap();
    let ebvh = Bvh::build(env).unwrap();
    let frame = compose_frame(&bvh, base, Some((&ebvh, env)), cam, o).unwrap();
    frame
        .final_color
        .iter()
        .zip(weights.iter())
        .map(|(c, w)| c[0] * w[0] + c[1] * w[1] + c[2] * w[2])
        .sum()
}

struct Probe {
    rng: ChaCha8Rng,
    cam: CameraModel,
    opts: ComposeOptions,
}

impl Probe {
    fn new(seed: u64) -> Probe {
        Probe {
            rng: ChaCha8Rng::seed_from_u64(seed),
            cam: small_camera(),
            opts: opts(),
        }
    }

    /// Draw scenes until the frame is smooth, then FD-check one component
    /// picked by the callbacks. Returns (analytic, fd).
    fn run(
        &mut self,
        perturb_base: bool,
        perturb: impl Fn(&mut GaussianSet, usize, usize, f64),
        pick: impl Fn(&GradStore, usize, usize) -> f64,
        n_cmp: usize,
    ) -> (f64, f64) {
        let mut attempts = 0;
        loop {
            attempts += 1;
            assert!(attempts < 2000, "no smooth probe scene found");
            let n_base = 2 + self.rng.gen::<usize>() % 3;
            let n_env = 2 + self.rng.gen::<usize>() % 3;
            let base = random_base(&mut self.rng, n_base);
            let env = random_env(&mut self.rng, n_env);
            if !frame_is_smooth(&base, &env, &self.cam, &self.opts) {
                continue;
            }
            let n_px = self.cam.width * self.cam.height;
            let weights: Vec<[f64; 3]> = (0..n_px)
                .map(|_| {
                    [
                        self.rng.gen::<f64>() * 2.0 - 1.0,
                        self.rng.gen::<f64>() * 2.0 - 1.0,
                        self.rng.gen::<f64>() * 2.0 - 1.0,
                    ]
                })
                .collect();
            let bvh = Bvh::build(&base).unwrap();
            let ebvh = Bvh::build(&env).unwrap();
            let frame =
                compose_frame(&bvh, &base, Some((&ebvh, &env)), &self.cam, &self.opts).unwrap();
            let up = FrameGrads {
                d_color: weights.clone(),
                ..Default::default()
            };
            let (bstore, estore) =
                backward_frame(&frame, &bvh, &base, Some((&ebvh, &env)), &self.cam, &up).unwrap();
            let estore = estore.unwrap();

            let (store, set_len) = if perturb_base {
                (&bstore, base.len())
            } else {
                (&estore, env.len())
            };
            let surfel = self.rng.gen::<usize>() % set_len;
            let cmp = self.rng.gen::<usize>() % n_cmp;
            let analytic = pick(store, surfel, cmp);

            let fd = {
                let apply = |h: f64| {
                    let mut b = base.clone();
                    let mut e = env.clone();
                    if perturb_base {
                        perturb(&mut b, surfel, cmp, h);
                        b.bump_generation();
                    } else {
                        perturb(&mut e, surfel, cmp, h);
                        e.bump_generation();
                    }
                    loss_of(&b, &e, &self.cam, &self.opts, &weights)
                };
                (apply(FD_H) - apply(-FD_H)) / (2.0 * FD_H)
            };
            return (analytic, fd);
        }
    }
}

fn assert_close(label: &str, analytic: f64, fd: f64) -> f64 {
    let abs = (analytic - fd).abs();
    if abs <= ABS_FLOOR {
        return 0.0;
    }
    let rel = abs / analytic.abs().max(fd.abs());
    assert!(
        rel <= REL_TOL,
        "{label}: analytic {analytic:.8e} vs fd {fd:.8e} (rel {rel:.3e})"
    );
    rel
}

fn run_probes(
    label: &str,
    seed: u64,
    probes: usize,
    perturb_base: bool,
    n_cmp: usize,
    perturb: impl Fn(&mut GaussianSet, usize, usize, f64) + Copy,
    pick: impl Fn(&GradStore, usize, usize) -> f64 + Copy,
) {
    let mut p = Probe::new(seed);
    let mut worst = 0.0f64;
    let mut substantial = 0;
    for _ in 0..probes {
        let (analytic, fd) = p.run(perturb_base, perturb, pick, n_cmp);
        if fd.abs() > 1e-4 {
            substantial += 1;
        }
        worst = worst.max(assert_close(label, analytic, fd));
    }
    assert!(
        substantial * 5 >= probes,
        "{label}: only {substantial}/{probes} non-trivial gradients"
    );
    eprintln!("[e2e] {label}: {probes} probes ({substantial} substantial), worst rel {worst:.2e}");
}

#[test]
fn e2e_base_center() {
    run_probes(
        "base center",
        21,
        12,
        true,
        3,
        |s, i, c, h| match c {
            0 => s.centers[i].x += h,
            1 => s.centers[i].y += h,
            _ => s.centers[i].z += h,
        },
        |g, i, c| g.d_centers[i].axis(c),
    );
}

#[test]
fn e2e_base_rotation() {
    run_probes(
        "base rotation",
        22,
        12,
        true,
        4,
        |s, i, c, h| s.rotations[i][c] += h,
        |g, i, c| g.d_rotations[i][c],
    );
}

#[test]
fn e2e_base_scales_opacity_blend() {
    run_probes(
        "base log_scales",
        23,
        8,
        true,
        2,
        |s, i, c, h| s.log_scales[i][c] += h,
        |g, i, c| g.d_log_scales[i][c],
    );
    run_probes(
        "base raw_opacity",
        24,
        8,
        true,
        1,
        |s, i, _c, h| s.raw_opacities[i] += h,
        |g, i, _c| g.d_raw_opacities[i],
    );
    run_probes(
        "base raw_blend",
        25,
        8,
        true,
        1,
        |s, i, _c, h| s.raw_blends[i] += h,
        |g, i, _c| g.d_raw_blends[i],
    );
    run_probes(
        "base sh",
        26,
        8,
        true,
        27,
        |s, i, c, h| s.sh[i][c] += h,
        |g, i, c| g.d_sh[i][c],
    );
}

#[test]
fn e2e_env_params() {
    run_probes(
        "env center",
        27,
        8,
        false,
        3,
        |s, i, c, h| match c {
            0 => s.centers[i].x += h,
            1 => s.centers[i].y += h,
            _ => s.centers[i].z += h,
        },
        |g, i, c| g.d_centers[i].axis(c),
    );
    run_probes(
        "env sh",
        28,
        8,
        false,
        27,
        |s, i, c, h| s.sh[i][c] += h,
        |g, i, c| g.d_sh[i][c],
    );
    run_probes(
        "env raw_opacity",
        29,
        8,
        false,
        1,
        |s, i, _c, h| s.raw_opacities[i] += h,
        |g, i, _c| g.d_raw_opacities[i],
    );
}

/// The joint-optimization mechanism: with a reflective scene, the rotation of
/// a base surfel influences the final image through the reflected ray, so its
/// gradient must be nonzero even when the base color contribution is flat.
#[test]
fn reflection_drives_base_rotation_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let cam = small_camera();
    let o = opts();
    loop {
        let base = random_base(&mut rng, 3);
        let env = random_env(&mut rng, 3);
        if !frame_is_smooth(&base, &env, &cam, &o) {
            continue;
        }
        let bvh = Bvh::build(&base).unwrap();
        let ebvh = Bvh::build(&env).unwrap();
        let frame = compose_frame(&bvh, &base, Some((&ebvh, &env)), &cam, &o).unwrap();
        let n_px = frame.final_color.len();
        let up = FrameGrads {
            d_color: vec![[1.0, 1.0, 1.0]; n_px],
            ..Default::default()
        };
        let (bstore, _) =
            backward_frame(&frame, &bvh, &base, Some((&ebvh, &env)), &cam, &up).unwrap();
        let rot_mag: f64 = bstore
            .d_rotations
            .iter()
            .map(|q| q.iter().map(|x| x.abs()).sum::<f64>())
            .sum();
        assert!(rot_mag > 1e-6, "rotation gradient vanished: {rot_mag}");
        break;
    }
}
