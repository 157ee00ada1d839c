//! Analytic renderer gradients against central finite differences.

use dynsplat::image::Image;
use dynsplat::render::{render, render_with_gradients, OutputGradients, RenderSettings};
use dynsplat::scene::{CameraIntrinsics, CameraPose, GaussianMap, GaussianPrimitive};
use nalgebra::{Quaternion, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REL: f64 = 1e-3;
const ABS: f64 = 1e-6;
const STEP: f64 = 1e-6;

struct Scene {
    map: GaussianMap,
    pose: CameraPose,
    k: CameraIntrinsics,
    up: OutputGradients,
}

fn random_scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = CameraIntrinsics::new(30.0, 30.0, 15.5, 15.5, 32, 32, 5000.0).unwrap();
    let n = rng.random_range(2..=10);
    let prims = (0..n)
        .map(|i| GaussianPrimitive {
            mean: Vector3::new(
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(1.0..2.0),
            ),
            scale: Vector3::new(
                rng.random_range(0.03..0.12),
                rng.random_range(0.03..0.12),
                rng.random_range(0.03..0.12),
            ),
            orientation: UnitQuaternion::from_euler_angles(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
            opacity: rng.random_range(0.1..0.85),
            color: Vector3::new(rng.random(), rng.random(), rng.random()),
            object_id: i as u32 % 3,
        })
        .collect::<Vec<_>>();
    let mut map = GaussianMap::new();
    map.extend(prims);
    let pose = CameraPose::new(
        Rotation3::from_euler_angles(
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
        ),
        Vector3::new(
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
        ),
    );
    let up = OutputGradients {
        color: Image::from_fn(32, 32, |_, _| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]
        }),
        depth: Image::from_fn(32, 32, |_, _| rng.random_range(-1.0..1.0)),
        alpha: Image::from_fn(32, 32, |_, _| rng.random_range(-1.0..1.0)),
    };
    Scene { map, pose, k, up }
}

fn objective(s: &Scene, map: &GaussianMap, pose: &CameraPose) -> f64 {
    let f = render(map, pose, &s.k, &RenderSettings::default()).unwrap();
    s.up.dot(&f)
}

/// Central difference that steps around jump discontinuities (alpha cutoff, empty-pixel
/// depth): the step is shrunk until two successive estimates agree.
fn central<F: Fn(f64) -> f64>(f: F) -> f64 {
    let diff = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    let mut h = STEP;
    let mut prev = diff(h);
    for _ in 0..3 {
        h /= 4.0;
        let next = diff(h);
        if close(prev, next) {
            return next;
        }
        prev = next;
    }
    prev
}

fn close(analytic: f64, fd: f64) -> bool {
    (analytic - fd).abs() <= (REL * fd.abs().max(analytic.abs())).max(ABS)
}

#[derive(Default)]
struct Tally {
    checked: usize,
    failures: Vec<String>,
}

impl Tally {
    fn check(&mut self, what: String, analytic: f64, fd: f64) {
        self.checked += 1;
        if !close(analytic, fd) {
            self.failures
                .push(format!("{what}: analytic {analytic:.9e} vs fd {fd:.9e}"));
        }
    }
}

fn check_scene(seed: u64, tally: &mut Tally, with_shape: bool) {
    let s = random_scene(seed);
    let (_, g) =
        render_with_gradients(&s.map, &s.pose, &s.k, &s.up, &RenderSettings::default()).unwrap();

    for axis in 0..6 {
        let fd = central(|h| {
            let mut xi = [0.0; 6];
            xi[axis] = h;
            objective(&s, &s.map, &s.pose.retract(&xi))
        });
        tally.check(format!("seed {seed} pose[{axis}]"), g.pose[axis], fd);
    }

    for i in 0..s.map.len() {
        let perturb = |edit: &dyn Fn(&mut GaussianPrimitive, f64), h: f64| {
            let mut m = s.map.clone();
            edit(&mut m.primitives_mut()[i], h);
            objective(&s, &m, &s.pose)
        };
        for axis in 0..3 {
            let fd = central(|h| perturb(&|p, h| p.mean[axis] += h, h));
            tally.check(format!("seed {seed} prim {i} mean[{axis}]"), g.primitives[i].mean[axis], fd);
            let fd = central(|h| perturb(&|p, h| p.color[axis] += h, h));
            tally.check(format!("seed {seed} prim {i} color[{axis}]"), g.primitives[i].color[axis], fd);
        }
        let fd = central(|h| perturb(&|p, h| p.opacity += h, h));
        tally.check(format!("seed {seed} prim {i} opacity"), g.primitives[i].opacity, fd);
        if with_shape {
            for axis in 0..3 {
                let fd = central(|h| perturb(&|p, h| p.scale[axis] += h, h));
                tally.check(format!("seed {seed} prim {i} scale[{axis}]"), g.primitives[i].scale[axis], fd);
            }
            for c in 0..4 {
                let fd = central(|h| {
                    perturb(
                        &|p, h| {
                            let q = p.orientation.into_inner();
                            let mut v = [q.w, q.i, q.j, q.k];
                            v[c] += h;
                            p.orientation = UnitQuaternion::from_quaternion(Quaternion::new(v[0], v[1], v[2], v[3]));
                        },
                        h,
                    )
                });
                tally.check(format!("seed {seed} prim {i} orientation[{c}]"), g.primitives[i].orientation[c], fd);
            }
        }
    }
}

#[test]
fn pose_mean_opacity_color_gradients_match_finite_differences() {
    let mut tally = Tally::default();
    for seed in 0..20 {
        check_scene(seed, &mut tally, false);
    }
    assert!(tally.checked > 20 * 6);
    assert!(tally.failures.is_empty(), "{:#?}", tally.failures);
}

#[test]
fn scale_and_orientation_gradients_match_finite_differences() {
    let mut tally = Tally::default();
    for seed in 100..106 {
        check_scene(seed, &mut tally, true);
    }
    assert!(tally.failures.is_empty(), "{:#?}", tally.failures);
}
