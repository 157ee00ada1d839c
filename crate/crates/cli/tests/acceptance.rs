//! Acceptance checks for the whole system. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails. Numeric arguments select criteria to run.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use dynsplat::config::PipelineConfig;
use dynsplat::dataset::synthetic::{generate_synthetic, DeskScene, SyntheticSequence};
use dynsplat::dynamic::gmm::{fit_gmm, EmOptions};
use dynsplat::dynamic::{DynamicObjectRegistry, Motion};
use dynsplat::eval::{align_and_ate, psnr, ssim, TimedPose};
use dynsplat::image::Image;
use dynsplat::loss::{adaptive_lambda_excluding, mapping_loss, LossConfig};
use dynsplat::mapper::{keyframe_from_scores, Keyframe, Mapper, MapperConfig};
use dynsplat::pipeline::{run_pipeline, RunReport, SequenceInput};
use dynsplat::render::{render, render_with_gradients, OutputGradients, RenderSettings};
use dynsplat::scene::{CameraIntrinsics, CameraPose, FrameObservation, GaussianMap, GaussianPrimitive};
use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

enum Verdict {
    Ran(Outcome),
    Skipped(String),
}

type Check = fn() -> Verdict;

fn main() -> ExitCode {
    let checks: [(u32, &str, Check); 11] = [
        (1, "renderer gradients", gradients),
        (2, "blending identities", blending),
        (3, "mixture oracle", mixture),
        (4, "dynamic filter efficacy", filter_efficacy),
        (5, "static scene sanity", static_scene),
        (6, "lifecycle rule", lifecycle),
        (7, "keyframe predicate", keyframe_predicate),
        (8, "mapping exclusion", mapping_exclusion),
        (9, "metric fixtures", metric_fixtures),
        (10, "determinism", determinism),
        (11, "recorded dynamic sequence", recorded_sequence),
    ];
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (n, name, _) in &checks {
            println!("criterion_{n:02}_{}: test", name.replace(' ', "_"));
        }
        return ExitCode::SUCCESS;
    }
    let selected: BTreeSet<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in checks {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        match check() {
            Verdict::Ran(o) => {
                let tag = if o.pass { "PASS" } else { "FAIL" };
                println!("criterion {n} ({name}): {tag} [{:.1} s] {}", t.elapsed().as_secs_f64(), o.detail);
                failed += usize::from(!o.pass);
            }
            Verdict::Skipped(why) => println!("criterion {n} ({name}): SKIP {why}"),
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------- 1: gradients

const REL: f64 = 1e-3;
const ABS: f64 = 1e-6;

fn close(analytic: f64, fd: f64) -> bool {
    (analytic - fd).abs() <= (REL * fd.abs().max(analytic.abs())).max(ABS)
}

/// Central difference; the step is shrunk until two estimates agree so that the alpha
/// cutoff jump is not straddled.
fn central<F: Fn(f64) -> f64>(f: F) -> f64 {
    let diff = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    let mut h = 1e-6;
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

fn gradients() -> Verdict {
    let t = Instant::now();
    let k = CameraIntrinsics::new(30.0, 30.0, 15.5, 15.5, 32, 32, 5000.0).unwrap();
    let settings = RenderSettings::default();
    let mut checked = 0;
    let mut failures = Vec::new();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let n = rng.random_range(1..=10);
        let prims: Vec<GaussianPrimitive> = (0..n)
            .map(|i| GaussianPrimitive {
                mean: Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(1.0..2.0)),
                scale: Vector3::from_fn(|_, _| rng.random_range(0.03..0.12)),
                orientation: UnitQuaternion::from_euler_angles(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
                opacity: rng.random_range(0.1..0.85),
                color: Vector3::new(rng.random(), rng.random(), rng.random()),
                object_id: i as u32 % 3,
            })
            .collect();
        let mut map = GaussianMap::new();
        map.extend(prims);
        let pose = CameraPose::new(
            Rotation3::from_euler_angles(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.0),
            Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
        );
        let up = OutputGradients {
            color: Image::from_fn(32, 32, |_, _| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]),
            depth: Image::from_fn(32, 32, |_, _| rng.random_range(-1.0..1.0)),
            alpha: Image::from_fn(32, 32, |_, _| rng.random_range(-1.0..1.0)),
        };
        let objective = |m: &GaussianMap, p: &CameraPose| up.dot(&render(m, p, &k, &settings).unwrap());
        let (_, g) = render_with_gradients(&map, &pose, &k, &up, &settings).unwrap();
        let mut check = |what: String, analytic: f64, fd: f64| {
            checked += 1;
            if !close(analytic, fd) {
                failures.push(format!("seed {seed} {what}: {analytic:.6e} vs {fd:.6e}"));
            }
        };
        for axis in 0..6 {
            let fd = central(|h| {
                let mut xi = [0.0; 6];
                xi[axis] = h;
                objective(&map, &pose.retract(&xi))
            });
            check(format!("pose[{axis}]"), g.pose[axis], fd);
        }
        for i in 0..map.len() {
            let perturbed = |edit: &dyn Fn(&mut GaussianPrimitive, f64), h: f64| {
                let mut m = map.clone();
                edit(&mut m.primitives_mut()[i], h);
                objective(&m, &pose)
            };
            for axis in 0..3 {
                let fd = central(|h| perturbed(&|p, h| p.mean[axis] += h, h));
                check(format!("prim {i} mean[{axis}]"), g.primitives[i].mean[axis], fd);
                let fd = central(|h| perturbed(&|p, h| p.color[axis] += h, h));
                check(format!("prim {i} color[{axis}]"), g.primitives[i].color[axis], fd);
            }
            let fd = central(|h| perturbed(&|p, h| p.opacity += h, h));
            check(format!("prim {i} opacity"), g.primitives[i].opacity, fd);
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let mut detail = format!("{} of {checked} partials agree over 20 scenes in {secs:.1} s", checked - failures.len());
    if let Some(f) = failures.first() {
        detail.push_str(&format!("; first mismatch {f}"));
    }
    Verdict::Ran(Outcome::new(failures.is_empty() && secs < 60.0, detail))
}

// ---------------------------------------------------------------- 2: blending

fn blending() -> Verdict {
    let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100, 5000.0).unwrap();
    let s = RenderSettings::default();
    let prim = |z: f64, opacity: f64, color: [f64; 3]| GaussianPrimitive {
        mean: Vector3::new(0.0, 0.0, z),
        scale: Vector3::repeat(0.05),
        orientation: UnitQuaternion::identity(),
        opacity,
        color: Vector3::from(color),
        object_id: 0,
    };
    let near = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let mut errors = Vec::new();

    let (c, c1, c2) = ([0.2, 0.5, 0.9], [0.8, 0.1, 0.3], [0.1, 0.6, 0.7]);
    let mut one = GaussianMap::new();
    one.extend([prim(2.0, 1.0, c)]);
    let f = render(&one, &CameraPose::identity(), &k, &s).unwrap();
    let a = s.alpha_max;
    if !(0..3).all(|j| near(f.color.get(50, 50)[j], a * c[j]))
        || !near(*f.depth.get(50, 50), 2.0)
        || !near(*f.alpha.get(50, 50), a)
    {
        errors.push(format!("single: color {:?} depth {} alpha {}", f.color.get(50, 50), f.depth.get(50, 50), f.alpha.get(50, 50)));
    }

    // back primitive listed first: ordering must come from depth, not input order
    let mut two = GaussianMap::new();
    two.extend([prim(2.5, 0.5, c2), prim(2.0, 0.5, c1)]);
    let f = render(&two, &CameraPose::identity(), &k, &s).unwrap();
    let px = f.color.get(50, 50);
    let depth = (0.5 * 2.0 + 0.25 * 2.5) / 0.75;
    if !(0..3).all(|j| near(px[j], 0.5 * c1[j] + 0.25 * c2[j]))
        || !near(*f.alpha.get(50, 50), 0.75)
        || !near(*f.depth.get(50, 50), depth)
    {
        errors.push(format!("two: color {px:?} depth {} alpha {}", f.depth.get(50, 50), f.alpha.get(50, 50)));
    }

    let f = render(&GaussianMap::new(), &CameraPose::identity(), &k, &s).unwrap();
    if !f.color.as_slice().iter().all(|c| *c == [0.0; 3]) || !f.alpha.as_slice().iter().all(|a| *a == 0.0) {
        errors.push("empty map is not black".into());
    }
    Verdict::Ran(Outcome::new(
        errors.is_empty(),
        if errors.is_empty() { "single, two-layer and empty compositing exact".into() } else { errors.join("; ") },
    ))
}

// ---------------------------------------------------------------- 3: mixture oracle

type P = [f64; 2];

struct Comp {
    w: f64,
    mu: P,
    cov: [[f64; 2]; 2],
}

fn log_pdf(c: &Comp, x: P) -> f64 {
    let [[a, b], [_, d]] = c.cov;
    let det = a * d - b * b;
    let (dx, dy) = (x[0] - c.mu[0], x[1] - c.mu[1]);
    let q = (d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
    -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * q
}

fn standardize(data: &[P]) -> Vec<P> {
    let n = data.len() as f64;
    let mut out = data.to_vec();
    for j in 0..2 {
        let m = data.iter().map(|p| p[j]).sum::<f64>() / n;
        let s = (data.iter().map(|p| (p[j] - m).powi(2)).sum::<f64>() / n).sqrt();
        for p in &mut out {
            p[j] = (p[j] - m) / s;
        }
    }
    out
}

fn m_step(data: &[P], r: &[[f64; 2]]) -> Vec<Comp> {
    (0..2)
        .map(|k| {
            let nk: f64 = r.iter().map(|ri| ri[k]).sum();
            let mut mu = [0.0; 2];
            for (p, ri) in data.iter().zip(r) {
                mu[0] += ri[k] * p[0] / nk;
                mu[1] += ri[k] * p[1] / nk;
            }
            let mut cov = [[1e-6, 0.0], [0.0, 1e-6]];
            for (p, ri) in data.iter().zip(r) {
                let d = [p[0] - mu[0], p[1] - mu[1]];
                for a in 0..2 {
                    for b in 0..2 {
                        cov[a][b] += ri[k] * d[a] * d[b] / nk;
                    }
                }
            }
            Comp { w: nk / data.len() as f64, mu, cov }
        })
        .collect()
}

/// Two-component EM from a hard midpoint split, run far past convergence.
fn oracle_log_likelihood(data: &[P]) -> f64 {
    let lo = data.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let hi = data.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let mid = 0.5 * (lo + hi);
    let r: Vec<[f64; 2]> = data.iter().map(|p| if p[0] < mid { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
    let mut comps = m_step(data, &r);
    let mut ll = 0.0;
    for _ in 0..500 {
        let mut r = Vec::with_capacity(data.len());
        ll = 0.0;
        for p in data {
            let a = comps[0].w.ln() + log_pdf(&comps[0], *p);
            let b = comps[1].w.ln() + log_pdf(&comps[1], *p);
            let m = a.max(b);
            let lse = m + ((a - m).exp() + (b - m).exp()).ln();
            ll += lse;
            r.push([(a - lse).exp(), (b - lse).exp()]);
        }
        comps = m_step(data, &r);
    }
    ll
}

fn mixture() -> Verdict {
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut worst: f64 = 0.0;
    let mut errors = Vec::new();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<P> = (0..40)
            .map(|i| {
                let c = if i % 4 == 0 { [4.0, 3.0] } else { [-2.0, 0.5] };
                [c[0] + 0.08 * n.sample(&mut rng), c[1] + 0.06 * n.sample(&mut rng)]
            })
            .collect();
        match fit_gmm(&data, &EmOptions::default()) {
            Ok(model) if model.component_count() == 2 => {
                worst = worst.max((model.log_likelihood - oracle_log_likelihood(&standardize(&data))).abs());
            }
            Ok(model) => errors.push(format!("seed {seed}: {} components", model.component_count())),
            Err(e) => errors.push(format!("seed {seed}: {e}")),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let unimodal: Vec<P> = (0..200).map(|_| [n.sample(&mut rng), 0.5 * n.sample(&mut rng)]).collect();
    let single = fit_gmm(&unimodal, &EmOptions::default()).map(|m| m.component_count());
    if single.as_ref().ok() != Some(&1) {
        errors.push(format!("unimodal data gave {single:?} components"));
    }
    let pass = errors.is_empty() && worst < 1e-6;
    errors.insert(0, format!("max log-likelihood gap {worst:.2e} over 10 datasets, unimodal -> {single:?}"));
    Verdict::Ran(Outcome::new(pass, errors.join("; ")))
}

// ---------------------------------------------------------------- 4, 5: pipeline runs

fn run(seq: &SyntheticSequence, filtering: bool) -> (RunReport, f64) {
    let filtering = filtering.to_string();
    let cfg = PipelineConfig::from_pairs([("preset", "synthetic"), ("filtering", filtering.as_str())]).unwrap();
    let input = SequenceInput {
        intrinsics: seq.intrinsics,
        frames: Box::new(seq.frames.clone().into_iter().map(Ok)),
        ground_truth: seq.ground_truth.clone(),
    };
    let t = Instant::now();
    let report = run_pipeline(input, &cfg).unwrap();
    (report, t.elapsed().as_secs_f64())
}

fn rmse(report: &RunReport) -> f64 {
    report.ate.as_ref().map_or(f64::NAN, |a| a.rmse)
}

/// Mover coverage fraction range and slowest image speed of the box centroid.
fn mover_scale(seq: &SyntheticSequence) -> (f64, f64, f64) {
    let mut lo: f64 = 1.0;
    let mut hi: f64 = 0.0;
    let mut slow = f64::INFINITY;
    let mut last: Option<[f64; 2]> = None;
    for f in &seq.frames {
        let (mut n, mut su, mut sv) = (0.0, 0.0, 0.0);
        for v in 0..f.height() {
            for u in 0..f.width() {
                if *f.mask.get(u, v) == 1 {
                    n += 1.0;
                    su += u as f64;
                    sv += v as f64;
                }
            }
        }
        lo = lo.min(n / f.pixel_count() as f64);
        hi = hi.max(n / f.pixel_count() as f64);
        let c = [su / n, sv / n];
        if let Some(p) = last {
            slow = slow.min(((c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2)).sqrt());
        }
        last = Some(c);
    }
    (lo, hi, slow)
}

fn filter_efficacy() -> Verdict {
    let mut all = true;
    let mut parts = Vec::new();
    for variant in 0..5u64 {
        let seq = generate_synthetic(&DeskScene { variant, ..DeskScene::default() }.build(), variant).unwrap();
        let (lo, hi, slow) = mover_scale(&seq);
        let (on, t_on) = run(&seq, true);
        let (off, t_off) = run(&seq, false);
        let later: Vec<_> = on.frames.iter().filter(|f| f.index > 3).collect();
        let hits = later.iter().filter(|f| f.labels.get(&1) == Some(&Motion::Dynamic)).count();
        let frac = hits as f64 / later.len() as f64;
        let ratio = rmse(&on) / rmse(&off);
        let pass = ratio <= 0.5 && frac >= 0.9 && t_on < 600.0 && t_off < 600.0;
        all &= pass;
        let line = format!(
            "seq {variant}: ATE {:.4} m filtered vs {:.4} m unfiltered (ratio {ratio:.2}), mover dynamic in {hits}/{} frames, \
             mover covers {:.0}-{:.0}% at >= {slow:.1} px/frame, {t_on:.0} s + {t_off:.0} s",
            rmse(&on),
            rmse(&off),
            later.len(),
            100.0 * lo,
            100.0 * hi,
        );
        println!("  {} {line}", if pass { "ok  " } else { "miss" });
        parts.push(format!("{variant}:{ratio:.2}/{frac:.2}"));
    }
    Verdict::Ran(Outcome::new(all, format!("ATE ratio / dynamic fraction per sequence {}", parts.join(" "))))
}

fn static_scene() -> Verdict {
    let desk = DeskScene {
        mover_travel: 0.0,
        ..DeskScene::default()
    };
    let seq = generate_synthetic(&desk.build(), 0).unwrap();
    let (report, secs) = run(&seq, true);
    let ate = rmse(&report);
    let ever = report.ever_dynamic();
    Verdict::Ran(Outcome::new(
        ate < 1e-3 && ever.is_empty(),
        format!("ATE {ate:.6} m, objects ever dynamic {ever:?}, {secs:.0} s"),
    ))
}

// ---------------------------------------------------------------- 6: lifecycle

/// Straight restatement of the rule: dynamic on any dynamic label, static again only after
/// three consecutive static labels.
fn lifecycle_oracle(stream: &[Motion]) -> Vec<bool> {
    let mut dynamic = false;
    let mut streak = 0;
    stream
        .iter()
        .map(|m| {
            match m {
                Motion::Dynamic => {
                    dynamic = true;
                    streak = 0;
                }
                Motion::Static if dynamic => {
                    streak += 1;
                    if streak == 3 {
                        dynamic = false;
                        streak = 0;
                    }
                }
                Motion::Static => {}
            }
            dynamic
        })
        .collect()
}

fn lifecycle() -> Verdict {
    use Motion::{Dynamic as D, Static as S};
    let scripted: Vec<(Vec<Motion>, Vec<bool>)> = vec![
        (vec![D, S, S, S], vec![true, true, true, false]),
        (vec![D, S, S, D, S, S, S], vec![true, true, true, true, true, true, false]),
        (vec![S, S, D, S, D, S, S, S, S], vec![false, false, true, true, true, true, true, false, false]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut streams = scripted.clone();
    for _ in 0..200 {
        let s: Vec<Motion> = (0..30).map(|_| if rng.random_bool(0.3) { D } else { S }).collect();
        let expect = lifecycle_oracle(&s);
        streams.push((s, expect));
    }
    let mut errors = Vec::new();
    for (i, (stream, expect)) in streams.iter().enumerate() {
        let mut reg = DynamicObjectRegistry::new(3);
        let got: Vec<bool> = stream
            .iter()
            .map(|m| {
                reg.update(&BTreeMap::from([(4, *m)]));
                reg.is_dynamic(4)
            })
            .collect();
        if &got != expect || (i < scripted.len() && lifecycle_oracle(stream) != *expect) {
            errors.push(format!("stream {i}: {got:?} vs {expect:?}"));
        }
    }
    Verdict::Ran(Outcome::new(
        errors.is_empty(),
        if errors.is_empty() {
            format!("{} scripted and 200 random streams match", scripted.len())
        } else {
            errors.join("; ")
        },
    ))
}

// ---------------------------------------------------------------- 7: keyframes

fn keyframe_predicate() -> Verdict {
    let cases = [(0.75, 0.25, true), (0.85, 0.25, false), (0.75, 0.15, false)];
    let got: Vec<bool> = cases.iter().map(|(i, o, _)| keyframe_from_scores(*i, *o, 0.8, 0.2).is_keyframe).collect();
    let want: Vec<bool> = cases.iter().map(|c| c.2).collect();
    Verdict::Ran(Outcome::new(got == want, format!("decisions {got:?}, expected {want:?}")))
}

// ---------------------------------------------------------------- 8: mapping exclusion

fn mapping_exclusion() -> Verdict {
    let k = CameraIntrinsics::new(32.0, 32.0, 15.5, 15.5, 32, 32, 5000.0).unwrap();
    let settings = RenderSettings::default();
    let mut prims = Vec::new();
    for i in 0..12 {
        for j in 0..12 {
            let id = if (4..7).contains(&i) && (4..7).contains(&j) { 2 } else { 0 };
            prims.push(GaussianPrimitive {
                mean: Vector3::new(-0.6 + i as f64 * 0.11, -0.6 + j as f64 * 0.11, 1.0 + 0.01 * ((i * j) % 4) as f64),
                scale: Vector3::repeat(0.07),
                orientation: UnitQuaternion::identity(),
                opacity: 0.8,
                color: Vector3::repeat(0.3 + 0.04 * ((i + j) % 5) as f64),
                object_id: id,
            });
        }
    }
    let mut map = GaussianMap::new();
    map.extend(prims);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rgb = Image::from_fn(32, 32, |_, _| [rng.random(), rng.random(), rng.random()]);
    let depth = Image::from_fn(32, 32, |_, _| rng.random_range(0.8..1.2));
    let mask = Image::from_fn(32, 32, |u, v| if (12..20).contains(&u) && (12..20).contains(&v) { 2 } else { 0 });
    let frame = FrameObservation::new(0, 0.0, rgb.clone(), depth.clone(), mask.clone()).unwrap();
    let mut rgb2 = rgb;
    let mut depth2 = depth;
    for v in 12..20 {
        for u in 12..20 {
            *rgb2.get_mut(u, v) = [rng.random(), rng.random(), rng.random()];
            *depth2.get_mut(u, v) = if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.5..3.0) };
        }
    }
    let perturbed = FrameObservation::new(0, 0.0, rgb2, depth2, mask).unwrap();
    let dynamic = BTreeSet::from([2]);
    let pose = CameraPose::identity();
    let cfg = LossConfig::default();

    let evaluate = |f: &FrameObservation| {
        let r = render(&map, &pose, &k, &settings).unwrap();
        let ml = mapping_loss(&r, f, &dynamic, adaptive_lambda_excluding(f, &cfg, &dynamic)).unwrap();
        let (_, g) = render_with_gradients(&map, &pose, &k, &ml.gradients, &settings).unwrap();
        (ml.value, g)
    };
    let (la, ga) = evaluate(&frame);
    let (lb, gb) = evaluate(&perturbed);

    // the same exclusion must hold through a full map update
    let update = |f: &FrameObservation| {
        let mut m = map.clone();
        let mut mapper = Mapper::new(MapperConfig {
            iterations: 10,
            ..MapperConfig::default()
        });
        let mut reg = DynamicObjectRegistry::new(3);
        reg.update(&BTreeMap::from([(2, Motion::Dynamic)]));
        mapper.insert_keyframe(Keyframe {
            index: 0,
            pose,
            dynamic_ids: dynamic.clone(),
            frame: f.clone(),
        });
        mapper.map_update(&mut m, &reg, &k, &settings, &cfg).unwrap();
        m
    };
    let same_update = update(&frame) == update(&perturbed);
    let pass = la.to_bits() == lb.to_bits() && ga == gb && same_update;
    Verdict::Ran(Outcome::new(
        pass,
        format!(
            "loss change {:.1e}, gradients identical {}, map updates identical {same_update}",
            (la - lb).abs(),
            ga == gb
        ),
    ))
}

// ---------------------------------------------------------------- 9: metrics

fn metric_fixtures() -> Verdict {
    let a = Image::filled(16, 16, [0.25, 0.25, 0.25]);
    let b = Image::filled(16, 16, [0.75, 0.75, 0.75]);
    let p = psnr(&a, &b, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let textured = Image::from_fn(24, 24, |_, _| [rng.random(), rng.random(), rng.random()]);
    let s = ssim(&textured, &textured).unwrap();

    let gt: Vec<TimedPose> = (0..30)
        .map(|i| {
            let t = i as f64 * 0.1;
            TimedPose {
                timestamp: t,
                pose: CameraPose::new(
                    Rotation3::from_euler_angles(0.1 * t.sin(), 0.3 * t, 0.05 * t),
                    Vector3::new(t.cos(), 0.2 * t, 0.5 * t.sin()),
                ),
            }
        })
        .collect();
    let noisy: Vec<TimedPose> = gt
        .iter()
        .map(|g| TimedPose {
            timestamp: g.timestamp,
            pose: g.pose.retract(&[0.0, 0.0, 0.0, rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), 0.01]),
        })
        .collect();
    let rigid = CameraPose::new(Rotation3::from_euler_angles(0.7, -1.1, 2.3), Vector3::new(3.0, -2.0, 5.0));
    // moving the world by `rigid` re-expresses each world-to-camera pose as pose * rigid^-1
    let moved = |traj: &[TimedPose]| -> Vec<TimedPose> {
        traj.iter()
            .map(|t| TimedPose {
                timestamp: t.timestamp,
                pose: t.pose.compose(&rigid.inverse()),
            })
            .collect()
    };
    let base = align_and_ate(&noisy, &gt, 0.02).unwrap().rmse;
    let shifted = align_and_ate(&moved(&noisy), &gt, 0.02).unwrap().rmse;
    let exact = align_and_ate(&moved(&gt), &gt, 0.02).unwrap().rmse;
    let pass = (p - 6.0206).abs() < 1e-3 && (s - 1.0).abs() < 1e-12 && (base - shifted).abs() < 1e-9 && exact < 1e-9;
    Verdict::Ran(Outcome::new(
        pass,
        format!(
            "PSNR {p:.5} dB, SSIM {s:.12}, ATE {base:.9} vs {shifted:.9} after a rigid move, moved copy {exact:.1e}"
        ),
    ))
}

// ---------------------------------------------------------------- 10: determinism

fn cli_run(spec: &Path, out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_dynsplat"))
        .arg("run")
        .arg("--synthetic-spec")
        .arg(spec)
        .arg("--preset")
        .arg("synthetic")
        .arg("--output")
        .arg(out)
        .env("RUST_LOG", "warn")
        .status()
        .map_err(|e| e.to_string())?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("dynsplat run exited with {status}"))
    }
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let spec = DeskScene {
        frame_count: 12,
        ..DeskScene::default()
    }
    .build();
    let spec_path = dir.path().join("scene.json");
    std::fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    if let Err(e) = cli_run(&spec_path, &a).and_then(|()| cli_run(&spec_path, &b)) {
        return Verdict::Ran(Outcome::new(false, e));
    }
    let mut same = Vec::new();
    for name in ["trajectory.txt", "metrics.csv"] {
        let x = std::fs::read(a.join(name)).unwrap_or_default();
        let y = std::fs::read(b.join(name)).unwrap_or_default();
        same.push(format!("{name} {}", if !x.is_empty() && x == y { "identical" } else { "differs" }));
    }
    Verdict::Ran(Outcome::new(same.iter().all(|s| s.ends_with("identical")), same.join(", ")))
}

// ---------------------------------------------------------------- 11: recorded sequence

fn recorded_sequence() -> Verdict {
    let Ok(root) = std::env::var("DYNSPLAT_TUM_ROOT") else {
        return Verdict::Skipped("DYNSPLAT_TUM_ROOT is not set".into());
    };
    let run = |filtering: &str| {
        let cfg = PipelineConfig::from_pairs([
            ("preset", "tum"),
            ("dataset", root.as_str()),
            ("downscale", "4"),
            ("frame_step", "3"),
            ("filtering", filtering),
        ])?;
        run_pipeline(dynsplat::pipeline::open_input(&cfg)?, &cfg)
    };
    match (run("true"), run("false")) {
        (Ok(on), Ok(off)) => {
            let aborted = on.frames.iter().filter(|f| f.aborted).count();
            let (a, b) = (rmse(&on), rmse(&off));
            Verdict::Ran(Outcome::new(
                aborted == 0 && a < b,
                format!("ATE {a:.4} m filtered vs {b:.4} m unfiltered, {aborted} aborted frames"),
            ))
        }
        (Err(e), _) | (_, Err(e)) => Verdict::Ran(Outcome::new(false, e.to_string())),
    }
}
