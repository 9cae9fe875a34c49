//! Independent recomputations of library results: closed forms, brute force
//! and plain-Rust reimplementations.

mod common;

use std::collections::HashSet;

use evpretrain::augment::{
    apply_affine, build_correspondence, gaussian_blur, sample_affine, sample_mask, AugmentConfig, PatchGrid,
};
use evpretrain::context::{gather_context, transfer_assignments, ContextAssignment};
use evpretrain::event::{render_rgb, to_event_image, voxelize, EventImage};
use evpretrain::geometry::Affine2;
use evpretrain::model::{ema_update, teacher_center_update, Architecture, ParamSet};
use evpretrain::probe::{evaluate_miou, iou_scores, train_probe, ProbeConfig, ProbeData};
use evpretrain::rng::seeded;
use evpretrain::sim::{
    generate_trajectory, warp_and_simulate, Frame, MotionPattern, MovingShapesConfig, Scene,
    SimConfig,
};
use evpretrain::tensor::{self, Tape, Tensor};
use evpretrain::train::{loss_patch, student_losses, teacher_pass, LossWeights, SampleInputs, Sharpening, TrainConfig};
use rand::Rng;

use common::*;

// ---------------------------------------------------------------- tensor

#[test]
fn f32_softmax_matches_f64_reference() {
    let logits = [0.3f64, -1.2, 2.5, 0.9];
    let tau = 0.1;
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    let reference: Vec<f64> = exps.iter().map(|e| e / z).collect();

    let t = Tensor::from_vec(logits.iter().map(|&v| v as f32).collect());
    let p = tensor::softmax(&t, 0, 0.1f32).unwrap();
    for (a, b) in p.data().iter().zip(&reference) {
        assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
    }
}

// ---------------------------------------------------------------- events

#[test]
fn event_image_nonzero_cells_are_standardized() {
    let mut rng = seeded(3);
    for _ in 0..20 {
        let s = criteria::random_stream(&mut rng, 12, 9, 300);
        let img = to_event_image(&voxelize(&s, 5).unwrap());
        let nz: Vec<f64> = img.data.iter().filter(|v| **v != 0.0).map(|&v| v as f64).collect();
        let n = nz.len() as f64;
        let mean = nz.iter().sum::<f64>() / n;
        let var = nz.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }
}

#[test]
fn rendered_colour_follows_net_polarity() {
    let mut rng = seeded(8);
    let s = criteria::random_stream(&mut rng, 10, 7, 120);
    let mut net = vec![0i64; 70];
    for e in s.events() {
        net[e.y as usize * 10 + e.x as usize] += e.polarity.sign() as i64;
    }
    let img = render_rgb(&s);
    for y in 0..7u32 {
        for x in 0..10u32 {
            let want = match net[(y * 10 + x) as usize].signum() {
                1 => [255, 0, 0],
                -1 => [0, 0, 255],
                _ => [255, 255, 255],
            };
            assert_eq!(img.get_pixel(x, y).0, want, "pixel ({x}, {y})");
        }
    }
}

// ---------------------------------------------------------------- simulator

#[test]
fn two_frame_counts_match_log_difference_floor() {
    assert_eq!(criteria::simulator_count_mismatches(100, 21), 0);
}

#[test]
fn horizontal_motion_fires_at_vertical_edges() {
    // 32x32, bright bar over columns 12..20 on a flat background
    let img = Frame::from_fn(32, 32, |x, _| if (12..20).contains(&x) { 0.8 } else { 0.2 });
    let traj = generate_trajectory(MotionPattern::Horizontal, 10_000, 2.0, 9, 0).unwrap();
    let s = warp_and_simulate(&img, &traj, &SimConfig::default()).unwrap();
    assert!(s.len() > 100);
    // away from the zero-padded border, only the swept bar edges fire
    let inner: Vec<u16> = s.events().iter().map(|e| e.x).filter(|x| (3..=28).contains(x)).collect();
    assert!(!inner.is_empty());
    assert!(inner.iter().all(|x| (9..=14).contains(x) || (17..=22).contains(x)));
    let rows: HashSet<u16> = s.events().iter().map(|e| e.y).collect();
    assert_eq!(rows.len(), 32);
}

#[test]
fn shape_labels_are_the_mid_interval_footprint() {
    let cfg = MovingShapesConfig::default();
    for seed in 0..5 {
        let scene = Scene::random(&cfg, &mut seeded(seed)).unwrap();
        let (_, labels) = scene.simulate(&cfg, &SimConfig::default()).unwrap();
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let inside = scene.shapes.iter().any(|s| s.contains(x as f64, y as f64, 0.5));
                assert_eq!(labels[y * cfg.width + x] == 1, inside);
            }
        }
    }
}

// ---------------------------------------------------------------- augment

#[test]
fn sampled_affine_determinant_stays_in_scale_bounds() {
    let cfg = AugmentConfig::default();
    let (lo, hi) = (cfg.scale_min * cfg.scale_min, cfg.scale_max * cfg.scale_max);
    let mut rng = seeded(5);
    for _ in 0..1000 {
        let d = sample_affine(&mut rng, &cfg, 64, 64).det();
        assert!(d >= lo - 1e-12 && d <= hi + 1e-12, "det {d}");
    }
}

fn smooth_image(w: usize, h: usize) -> EventImage {
    let mut img = EventImage::zeros(1, h, w);
    for y in 0..h {
        for x in 0..w {
            img.plane_mut(0)[y * w + x] = ((x as f32) * 0.21).sin() * ((y as f32) * 0.17).cos();
        }
    }
    img
}

#[test]
fn warp_then_inverse_warp_recovers_interior() {
    let (w, h) = (48, 48);
    let img = smooth_image(w, h);
    let mut rng = seeded(6);
    for _ in 0..20 {
        let t = sample_affine(&mut rng, &AugmentConfig::default(), w, h);
        let inv = t.inverse().unwrap();
        let back = apply_affine(&apply_affine(&img, &t), &inv);
        let mut checked = 0;
        for y in 0..h {
            for x in 0..w {
                let (u, v) = inv.apply(x as f64, y as f64);
                let inside = |a: f64, n: usize| a >= 2.0 && a <= n as f64 - 3.0;
                if inside(x as f64, w) && inside(y as f64, h) && inside(u, w) && inside(v, h) {
                    let i = y * w + x;
                    assert!((back.data[i] - img.data[i]).abs() <= 0.15, "({x}, {y})");
                    checked += 1;
                }
            }
        }
        assert!(checked > 200);
    }
}

#[test]
fn blur_of_impulse_is_a_sampled_gaussian() {
    let n = 21;
    let mut img = EventImage::zeros(1, n, n);
    img.plane_mut(0)[10 * n + 10] = 1.0;
    let out = gaussian_blur(&img, 1.0);
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 - 10.0, y as f64 - 10.0);
            let g = if dx.abs() <= 4.0 && dy.abs() <= 4.0 {
                (-(dx * dx + dy * dy) / 2.0).exp() / (2.0 * std::f64::consts::PI)
            } else {
                0.0
            };
            assert!((out.plane(0)[y * n + x] as f64 - g).abs() < 1e-4, "({x}, {y})");
        }
    }
}

#[test]
fn centre_rule_agrees_with_pixel_majority_away_from_borders() {
    let (checked, wrong) = criteria::majority_vote_disagreements(200, 31);
    assert!(checked > 5000);
    assert_eq!(wrong, 0);
}

#[test]
fn identity_correspondence_transfers_assignments_unchanged() {
    let grid = PatchGrid::new(32, 32, 8).unwrap();
    let corr = build_correspondence(&Affine2::identity(), &grid, 32, 32).unwrap();
    assert_eq!(corr.map, (0..16).map(Some).collect::<Vec<_>>());
    let a = ContextAssignment::from_labels(3, &[0, 1, 2, 1, 0, 0, 2, 2, 1, 1, 0, 2, 0, 1, 2, 0]);
    assert_eq!(transfer_assignments(&a, &corr), a);
}

#[test]
fn every_patch_is_masked_at_the_nominal_rate() {
    let mut rng = seeded(12);
    let mut hits = vec![0usize; 64];
    let draws = 10_000;
    for _ in 0..draws {
        let m = sample_mask(&mut rng, 64, 0.25).unwrap();
        assert_eq!(m.count(), 16);
        for i in m.indices() {
            hits[i] += 1;
        }
    }
    for (i, h) in hits.iter().enumerate() {
        let f = *h as f64 / draws as f64;
        assert!((f - 0.25).abs() <= 0.02, "patch {i} masked {f}");
    }
}

// ---------------------------------------------------------------- model

#[test]
fn pooling_a_duplicated_member_equals_pooling_it_once() {
    let (arch, params) = Architecture::init::<f64>(&toy_model(), 4).unwrap();
    let mut rng = seeded(9);
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false).unwrap();
    let f = tape.constant(random_tensor(&mut rng, &[5, toy_model().dim], -1.0, 1.0)).unwrap();
    let (k, v) = arch.pool.project(&mut tape, &p, f).unwrap();
    let once = arch.pool.pool_projected(&mut tape, &p, k, v, &[3]).unwrap();
    let twice = arch.pool.pool_projected(&mut tape, &p, k, v, &[3, 3]).unwrap();
    assert!(tape.value(once).max_abs_diff(tape.value(twice)) < 1e-6);
}

#[test]
fn centre_converges_geometrically_to_a_constant_mean() {
    let logits = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.5]).unwrap();
    let mean = [2.0, -1.0, 1.0];
    let c0 = [0.3, 0.7, -0.2];
    let rate = 0.9;
    let mut c = Tensor::from_vec(c0.to_vec());
    for k in 1..=40 {
        teacher_center_update(&mut c, &[&logits], rate).unwrap();
        for j in 0..3 {
            let want = mean[j] + rate.powi(k) * (c0[j] - mean[j]);
            assert!((c.data()[j] - want).abs() < 1e-12, "step {k}");
        }
    }
}

#[test]
fn ema_matches_elementwise_formula() {
    let (_, teacher) = Architecture::init::<f64>(&toy_model(), 1).unwrap();
    let (_, student) = Architecture::init::<f64>(&toy_model(), 2).unwrap();
    let mut updated = teacher.clone();
    let m = 0.996;
    ema_update(&mut updated, &student, m).unwrap();
    for ((u, t), s) in updated.tensors.iter().zip(&teacher.tensors).zip(&student.tensors) {
        for ((u, t), s) in u.data().iter().zip(t.data()).zip(s.data()) {
            assert_eq!(*u, m * t + (1.0 - m) * s);
        }
    }
}

// ---------------------------------------------------------------- context

#[test]
fn kmeans_reaches_the_exhaustive_optimum() {
    let (hits, monotone) = criteria::kmeans_oracle_hits(100);
    assert!(hits >= 90, "{hits}/100");
    assert!(monotone);
}

#[test]
fn gathered_context_sizes_sum_to_valid_patches() {
    let mut rng = seeded(2);
    let features = random_tensor(&mut rng, &[12, 4], -1.0, 1.0);
    let labels: Vec<Option<usize>> = (0..12).map(|i| (i % 5 != 0).then(|| rng.random_range(0..3))).collect();
    let a = ContextAssignment { k: 3, labels };
    let total: usize = (0..3).map(|k| gather_context(&features, &a, k).unwrap().rows()).sum();
    assert_eq!(total, a.valid_count());
}

// ---------------------------------------------------------------- losses

fn ce_rows(teacher: &[Vec<f64>], student: &[Vec<f64>], center: Option<&[f64]>, tt: f64, ts: f64) -> f64 {
    let mut total = 0.0;
    for (t, s) in teacher.iter().zip(student) {
        let t: Vec<f64> = t.iter().enumerate().map(|(j, v)| (v - center.map_or(0.0, |c| c[j])) / tt).collect();
        let s: Vec<f64> = s.iter().map(|v| v / ts).collect();
        let tmax = t.iter().cloned().fold(f64::MIN, f64::max);
        let tz: f64 = t.iter().map(|v| (v - tmax).exp()).sum();
        let smax = s.iter().cloned().fold(f64::MIN, f64::max);
        let lse = smax + s.iter().map(|v| (v - smax).exp()).sum::<f64>().ln();
        total -= t.iter().zip(&s).map(|(a, b)| (a - tmax).exp() / tz * (b - lse)).sum::<f64>();
    }
    total / teacher.len() as f64
}

#[test]
fn patch_loss_matches_hand_computation() {
    let teacher = Tensor::new(vec![4, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.0, -0.3, 0.2, 0.9, 0.0, 1.0, 0.0]).unwrap();
    let student = Tensor::new(vec![4, 3], vec![0.2, 0.1, 0.0, 0.7, -0.4, 0.3, 0.0, 0.0, 1.0, -1.0, 0.5, 0.5]).unwrap();
    let center = Tensor::from_vec(vec![0.1, -0.1, 0.05]);
    let mask = evpretrain::augment::MaskVector {
        mask: vec![false, true, false, true],
        ratio: 0.5,
    };
    let mut tape = Tape::<f64>::new();
    let s = tape.leaf(student.clone(), true).unwrap();
    let sharpen = Sharpening {
        student: 0.1,
        teacher: 0.04,
        center: Some(&center),
    };
    let l = loss_patch(&mut tape, &teacher, s, &mask, sharpen).unwrap();
    let rows = |t: &Tensor<f64>| [1usize, 3].iter().map(|&r| t.row(r).to_vec()).collect::<Vec<_>>();
    let want = ce_rows(&rows(&teacher), &rows(&student), Some(center.data()), 0.04, 0.1);
    assert!((tape.value(l).item() - want).abs() < 1e-12);

    let g = tape.backward(l).unwrap();
    let grad = g.get(s).unwrap();
    for r in [0, 2] {
        assert!(grad.row(r).iter().all(|v| *v == 0.0));
    }
}

#[test]
fn patch_loss_ignores_duplicating_the_batch() {
    let mut rng = seeded(17);
    let t = random_tensor(&mut rng, &[6, 5], -1.0, 1.0);
    let s = random_tensor(&mut rng, &[6, 5], -1.0, 1.0);
    let mask = sample_mask(&mut rng, 6, 0.5).unwrap();
    let sharpen = Sharpening {
        student: 0.1,
        teacher: 0.04,
        center: None,
    };
    let stack = |a: &Tensor<f64>| Tensor::new(vec![12, 5], [a.data(), a.data()].concat()).unwrap();
    let doubled = evpretrain::augment::MaskVector {
        mask: [mask.mask.clone(), mask.mask.clone()].concat(),
        ratio: mask.ratio,
    };
    let mut tape = Tape::<f64>::new();
    let sv = tape.constant(s.clone()).unwrap();
    let once = loss_patch(&mut tape, &t, sv, &mask, sharpen).unwrap();
    let s2 = tape.constant(stack(&s)).unwrap();
    let twice = loss_patch(&mut tape, &stack(&t), s2, &doubled, sharpen).unwrap();
    assert!((tape.value(once).item() - tape.value(twice).item()).abs() < 1e-12);
}

// Plain-Rust forward of the pooling and projection heads.

type Mat = Vec<Vec<f64>>;

fn linear(params: &ParamSet<f64>, name: &str, x: &Mat) -> Mat {
    let w = params.get(&format!("{name}.w")).unwrap();
    let b = params.get(&format!("{name}.b")).unwrap();
    let (fin, fout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..fout)
                .map(|j| b.data()[j] + (0..fin).map(|i| row[i] * w.data()[i * fout + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn normalize(row: &[f64]) -> Vec<f64> {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    row.iter().map(|v| v / n).collect()
}

fn head(params: &ParamSet<f64>, role: &str, x: &Mat) -> Mat {
    let pre = format!("heads.{role}");
    let act = |m: Mat| m.into_iter().map(|r| r.into_iter().map(gelu).collect()).collect::<Mat>();
    let h = act(linear(params, &format!("{pre}.fc1"), x));
    let h = act(linear(params, &format!("{pre}.fc2"), &h));
    let h = linear(params, &format!("{pre}.fc3"), &h);
    let protos = params.get(&format!("{pre}.prototypes")).unwrap();
    let protos: Mat = (0..protos.rows()).map(|r| normalize(protos.row(r))).collect();
    h.iter()
        .map(|r| {
            let r = normalize(r);
            protos.iter().map(|p| p.iter().zip(&r).map(|(a, b)| a * b).sum()).collect()
        })
        .collect()
}

fn attention_pool(params: &ParamSet<f64>, z: &Mat, members: &[usize]) -> Vec<f64> {
    let subset: Mat = members.iter().map(|&i| z[i].clone()).collect();
    let keys = linear(params, "pool.key", &subset);
    let values = linear(params, "pool.value", &subset);
    let q = params.get("pool.query").unwrap().data();
    let scale = (q.len() as f64).sqrt();
    let scores: Vec<f64> = keys.iter().map(|k| k.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / scale).collect();
    let max = scores.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z_sum: f64 = e.iter().sum();
    let pooled: Vec<f64> = (0..values[0].len())
        .map(|j| values.iter().zip(&e).map(|(v, w)| v[j] * w / z_sum).sum())
        .collect();
    linear(params, "pool.out", &vec![pooled]).remove(0)
}

#[test]
fn image_and_context_losses_match_plain_recomputation() {
    let cfg = TrainConfig {
        centering: false,
        ..toy_train_config()
    };
    let (arch, student) = Architecture::init::<f64>(&cfg.model, 3).unwrap();
    let (_, teacher) = Architecture::init::<f64>(&cfg.model, 4).unwrap();
    let image = &toy_images(1, &cfg.model, 5)[0];
    let grid = PatchGrid::new(16, 16, 4).unwrap();
    let inputs = SampleInputs::<f64>::prepare(image, &grid, &cfg.augment, 77).unwrap();
    let t = teacher_pass(&arch, &teacher, &inputs, &cfg, 78).unwrap();
    assert!(!t.usable.is_empty());

    let mut tape = Tape::new();
    let p = student.bind(&mut tape, false).unwrap();
    let weights = LossWeights {
        patch: 1.0,
        context: 0.1,
        image: 0.9,
    };
    let l = student_losses(&arch, &mut tape, &p, &inputs, &t, None, &cfg, weights).unwrap();

    // student features come from the library encoder; everything after is recomputed
    let x = tape.constant(inputs.patches_star.clone()).unwrap();
    let zv = arch.encode(&mut tape, &p, x, Some(&inputs.mask.mask)).unwrap();
    let zt = tape.value(zv);
    let z: Mat = (0..zt.rows()).map(|r| zt.row(r).to_vec()).collect();

    let d = z[0].len();
    let mean: Vec<f64> = (0..d).map(|j| z.iter().map(|r| r[j]).sum::<f64>() / z.len() as f64).collect();
    let s_img = head(&student, "image", &vec![mean]);
    let t_img = vec![t.image_logits.row(0).to_vec()];
    let want_image = ce_rows(&t_img, &s_img, None, cfg.teacher_temperature, cfg.student_temperature);
    assert!((tape.value(l.image).item() - want_image).abs() < 1e-9);

    let pooled: Mat = t.usable.iter().map(|&k| attention_pool(&student, &z, &t.a_star.members(k))).collect();
    let s_ctx = head(&student, "context", &pooled);
    let t_ctx: Mat = (0..t.context_logits.rows()).map(|r| t.context_logits.row(r).to_vec()).collect();
    let want_ctx = ce_rows(&t_ctx, &s_ctx, None, cfg.teacher_temperature, cfg.student_temperature);
    assert!((tape.value(l.context.unwrap()).item() - want_ctx).abs() < 1e-9);
}

// ---------------------------------------------------------------- probe

fn uniform_data(rng: &mut impl Rng, n: usize, dim: usize, label: impl Fn(&[f64]) -> usize) -> ProbeData {
    let mut data = ProbeData::new(dim);
    for _ in 0..n {
        let row: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        data.labels.push(label(&row));
        data.features.extend(row);
    }
    data
}

#[test]
fn probe_on_unrelated_labels_scores_chance() {
    let mut rng = seeded(40);
    let mut labels = seeded(41);
    let mut make = |n| {
        let mut d = ProbeData::new(8);
        for _ in 0..n {
            d.features.extend((0..8).map(|_| rng.random_range(-1.0..1.0)));
            d.labels.push(labels.random_range(0..2usize));
        }
        d
    };
    let (train, test) = (make(2000), make(2000));
    let fit = train_probe(&train, 2, &ProbeConfig::default()).unwrap();
    let r = evaluate_miou(&fit.head, &test).unwrap();
    assert!((r.pixel_accuracy - 0.5).abs() <= 0.05, "accuracy {}", r.pixel_accuracy);
}

#[test]
fn probe_optimum_does_not_depend_on_init() {
    let mut rng = seeded(50);
    let data = uniform_data(&mut rng, 600, 6, |x| {
        if x[0] + 0.5 * x[1] > 0.3 {
            2
        } else if x[2] > 0.0 {
            1
        } else {
            0
        }
    });
    let fit = |seed| {
        let cfg = ProbeConfig {
            seed,
            iterations: 3000,
            l2: 1e-2,
            ..ProbeConfig::default()
        };
        train_probe(&data, 3, &cfg).unwrap()
    };
    let (a, b) = (fit(1), fit(2));
    assert!((a.loss - b.loss).abs() < 1e-3, "{} vs {}", a.loss, b.loss);
    let acc = evaluate_miou(&a.head, &data).unwrap().pixel_accuracy;
    assert!(acc > 0.8, "train accuracy {acc}");
}

#[test]
fn iou_from_a_three_class_confusion_fixture() {
    // confusion (truth rows, prediction cols):
    //   [[3, 1, 0],
    //    [0, 2, 2],
    //    [1, 0, 1]]
    let truth = [0, 0, 0, 0, 1, 1, 1, 1, 2, 2];
    let pred = [0, 0, 0, 1, 1, 1, 2, 2, 0, 2];
    let (ious, miou, acc) = iou_scores(&pred, &truth, 3).unwrap();
    let want = [3.0 / 5.0, 2.0 / 5.0, 1.0 / 4.0];
    for (got, want) in ious.iter().zip(want) {
        assert!((got.unwrap() - want).abs() < 1e-15);
    }
    assert!((miou - want.iter().sum::<f64>() / 3.0).abs() < 1e-15);
    assert_eq!(acc, 0.6);
}

#[test]
fn loss_weight_defaults() {
    let cfg = TrainConfig::default();
    assert_eq!((cfg.lambda_context, cfg.lambda_image, cfg.num_contexts), (0.1, 0.9, 8));
}
