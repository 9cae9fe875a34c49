//! Checks shared by the acceptance runner and the regular test targets.
//! Each returns measurements instead of asserting, so callers pick the
//! presentation.

use evpretrain::augment::{build_correspondence, sample_affine, AugmentConfig, PatchGrid};
use evpretrain::checkpoint::Container;
use evpretrain::context::{kmeans, kmeans_best_of};
use evpretrain::event::{bin_weights, voxelize, Event, EventStream, Polarity};
use evpretrain::geometry::Affine2;
use evpretrain::model::Architecture;
use evpretrain::rng::seeded;
use evpretrain::sim::{simulate_from_frames, Frame, SimConfig};
use evpretrain::tensor::{row_entropy, teacher_distribution, Tape, Tensor};
use evpretrain::train::{
    loss_patch, student_losses, teacher_pass, LossWeights, SampleInputs, Sharpening, TrainConfig, Trainer,
};
use rand::Rng;

use super::{random_tensor, toy_images, toy_train_config};

// ---------------------------------------------------------------- events

pub fn random_stream(rng: &mut impl Rng, w: u16, h: u16, n: usize) -> EventStream {
    let events = (0..n)
        .map(|_| {
            let p = if rng.random::<bool>() { Polarity::Positive } else { Polarity::Negative };
            Event::new(rng.random_range(0..50_000), rng.random_range(0..w), rng.random_range(0..h), p)
        })
        .collect();
    EventStream::from_unsorted(w, h, events).expect("valid stream")
}

/// Worst `|Σ voxels − Σ polarities|` over `count` random streams, and whether
/// every per-event pair of temporal weights summed to exactly one.
pub fn conservation(count: usize, seed: u64) -> (f64, bool) {
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    let mut exact = true;
    for _ in 0..count {
        let n = rng.random_range(1..2000);
        let bins = rng.random_range(1..10);
        let s = random_stream(&mut rng, 32, 24, n);
        let g = voxelize(&s, bins).expect("voxelize");
        worst = worst.max((g.signed_sum() - s.polarity_sum() as f64).abs());
        let ev = s.events();
        let (t0, span) = (ev[0].t, ev[ev.len() - 1].t - ev[0].t);
        for e in ev {
            let t = if span == 0 { 0.0 } else { (e.t - t0) as f64 * (bins - 1) as f64 / span as f64 };
            let [(_, a), (_, b)] = bin_weights(t, bins);
            exact &= a + b == 1.0;
        }
    }
    (worst, exact)
}

// ---------------------------------------------------------------- simulator

/// Pixels (over `instances` random 16×16 two-frame pairs) whose event count or
/// polarity differs from `floor(|Δlog I| / C)`.
pub fn simulator_count_mismatches(instances: usize, seed: u64) -> usize {
    let cfg = SimConfig::default();
    let mut rng = seeded(seed);
    let (w, h) = (16, 16);
    let mut wrong = 0;
    for _ in 0..instances {
        let mut frame = || Frame::new(w, h, (0..w * h).map(|_| rng.random_range(0.02f32..1.0)).collect()).unwrap();
        let (a, b) = (frame(), frame());
        let s = simulate_from_frames(&[a.clone(), b.clone()], &[0, 1000], &cfg).expect("simulate");
        let mut pos = vec![0u64; w * h];
        let mut neg = vec![0u64; w * h];
        for e in s.events() {
            let i = e.y as usize * w + e.x as usize;
            match e.polarity {
                Polarity::Positive => pos[i] += 1,
                Polarity::Negative => neg[i] += 1,
            }
        }
        for i in 0..w * h {
            let dl = (b.data[i] as f64 + cfg.log_eps).ln() - (a.data[i] as f64 + cfg.log_eps).ln();
            let n = (dl.abs() / cfg.contrast_threshold).floor() as u64;
            let counted = if dl >= 0.0 { (pos[i], neg[i]) } else { (neg[i], pos[i]) };
            if counted != (n, 0) {
                wrong += 1;
            }
        }
    }
    wrong
}

/// Events produced by unchanged frames with noise disabled.
pub fn static_scene_events(seed: u64) -> usize {
    let mut rng = seeded(seed);
    let f = Frame::new(20, 20, (0..400).map(|_| rng.random_range(0.0f32..1.0)).collect()).unwrap();
    simulate_from_frames(&[f.clone(), f.clone(), f], &[0, 500, 1000], &SimConfig::default())
        .expect("simulate")
        .len()
}

// ---------------------------------------------------------------- k-means

fn partition_objective(points: &[[f64; 2]], labels: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..k {
        let members: Vec<&[f64; 2]> = points.iter().zip(labels).filter(|(_, l)| **l == c).map(|(p, _)| p).collect();
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        let mx = members.iter().map(|p| p[0]).sum::<f64>() / n;
        let my = members.iter().map(|p| p[1]).sum::<f64>() / n;
        total += members.iter().map(|p| (p[0] - mx).powi(2) + (p[1] - my).powi(2)).sum::<f64>();
    }
    total
}

/// Global optimum over all two-way partitions.
pub fn exhaustive_two_means(points: &[[f64; 2]]) -> f64 {
    (0u32..1 << points.len())
        .map(|bits| {
            let labels: Vec<usize> = (0..points.len()).map(|i| ((bits >> i) & 1) as usize).collect();
            partition_objective(points, &labels, 2)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Instances (N=8, D=2, K=2) where best-of-10 Lloyd reaches the exhaustive
/// optimum within 1e-6, and whether every single-run trace was non-increasing.
pub fn kmeans_oracle_hits(instances: u64) -> (usize, bool) {
    let mut hits = 0;
    let mut monotone = true;
    for seed in 0..instances {
        let mut rng = seeded(1000 + seed);
        let points: Vec<[f64; 2]> = (0..8).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let t = Tensor::new(vec![8, 2], points.iter().flatten().copied().collect()).unwrap();
        let best = kmeans_best_of(&t, 2, 50, 10, &mut seeded(seed)).unwrap();
        if (best.objective() - exhaustive_two_means(&points)).abs() <= 1e-6 {
            hits += 1;
        }
        let single = kmeans(&t, 2, 50, &mut seeded(seed)).unwrap();
        monotone &= single.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    }
    (hits, monotone)
}

// ---------------------------------------------------------------- correspondence

/// Majority x⁺ patch over the pixels of x★ patch `i`, or `None` when any
/// pixel maps outside the image.
pub fn majority_patch(t: &Affine2, grid: &PatchGrid, i: usize) -> Option<Vec<usize>> {
    let p = grid.patch;
    let (r, c) = (i / grid.cols, i % grid.cols);
    let mut counts = vec![0usize; grid.len()];
    for y in r * p..(r + 1) * p {
        for x in c * p..(c + 1) * p {
            let (u, v) = t.apply(x as f64, y as f64);
            counts[grid.locate(u, v)?] += 1;
        }
    }
    let best = *counts.iter().max().unwrap();
    Some((0..grid.len()).filter(|&j| counts[j] == best).collect())
}

/// Distance from the mapped centre of patch `i` to the nearest x⁺ patch line.
pub fn line_distance(t: &Affine2, grid: &PatchGrid, i: usize) -> f64 {
    let (cx, cy) = grid.center(i);
    let (u, v) = t.apply(cx, cy);
    let p = grid.patch as f64;
    let d = |a: f64| {
        let f = (a + 0.5).rem_euclid(p);
        f.min(p - f)
    };
    d(u).min(d(v))
}

/// Compares the centre rule with pixel voting on `count` random transforms.
/// A patch is non-boundary when all its pixels land inside x⁺ and its mapped
/// centre is at least one pixel from every x⁺ patch line; within that band a
/// rotated footprint can put more pixels across the line than the centre.
/// Returns `(non-boundary patches, disagreements among them)`.
pub fn majority_vote_disagreements(count: usize, seed: u64) -> (usize, usize) {
    let grid = PatchGrid::new(64, 64, 8).unwrap();
    let mut rng = seeded(seed);
    let (mut checked, mut wrong) = (0, 0);
    for _ in 0..count {
        let t = sample_affine(&mut rng, &AugmentConfig::default(), 64, 64);
        let corr = build_correspondence(&t, &grid, 64, 64).unwrap();
        for i in 0..grid.len() {
            let Some(best) = majority_patch(&t, &grid, i) else { continue };
            if line_distance(&t, &grid, i) < 1.0 {
                continue;
            }
            checked += 1;
            if !corr.map[i].is_some_and(|j| best.contains(&j)) {
                wrong += 1;
            }
        }
    }
    (checked, wrong)
}

// ---------------------------------------------------------------- losses

/// Toy student/teacher pair (f64) and one prepared sample with usable contexts.
pub struct LossFixture {
    pub config: TrainConfig,
    pub arch: Architecture,
    pub student: evpretrain::model::ParamSet<f64>,
    pub inputs: SampleInputs<f64>,
    pub teacher: evpretrain::train::TeacherOutputs<f64>,
}

pub fn loss_fixture(config: TrainConfig, seed: u64) -> LossFixture {
    let model = config.model.clone();
    let (arch, student) = Architecture::init::<f64>(&model, seed).unwrap();
    let (_, teacher_params) = Architecture::init::<f64>(&model, seed + 100).unwrap();
    let grid = PatchGrid::new(model.image_height, model.image_width, model.patch).unwrap();
    for k in 0.. {
        let image = &toy_images(1, &model, seed * 1000 + k)[0];
        let inputs = SampleInputs::<f64>::prepare(image, &grid, &config.augment, seed + k).unwrap();
        let teacher = teacher_pass(&arch, &teacher_params, &inputs, &config, seed + k).unwrap();
        if !teacher.usable.is_empty() {
            return LossFixture {
                config,
                arch,
                student,
                inputs,
                teacher,
            };
        }
    }
    unreachable!()
}

/// `|L_total − (L_patch + λ1·L_context + λ2·L_image)|` for one sample under
/// the default weights, and the same identity on the batch report of one
/// training step.
pub fn decomposition_errors(seed: u64) -> (f64, f64) {
    let fx = loss_fixture(toy_train_config(), seed);
    let c = &fx.config;
    let mut tape = Tape::new();
    let p = fx.student.bind(&mut tape, true).unwrap();
    let weights = LossWeights {
        patch: 1.0,
        context: c.lambda_context,
        image: c.lambda_image,
    };
    let l = student_losses(&fx.arch, &mut tape, &p, &fx.inputs, &fx.teacher, None, c, weights).unwrap();
    let v = |x| tape.value(x).item();
    let sample = (v(l.total) - (v(l.patch) + 0.1 * v(l.context.unwrap()) + 0.9 * v(l.image))).abs();

    let mut trainer = Trainer::<f64>::new(TrainConfig { seed, ..toy_train_config() }).unwrap();
    let data = toy_images(8, &trainer.config.model, seed);
    let r = trainer.train_step(&data).unwrap();
    let batch = (r.l_total - (r.l_patch + 0.1 * r.l_context + 0.9 * r.l_image)).abs();
    (sample, batch)
}

/// Smallest `loss − H(teacher)` over the three losses, with equal
/// temperatures and centering off, across `seeds` fixtures.
pub fn entropy_bound_slack(seeds: u64) -> f64 {
    let mut slack = f64::INFINITY;
    for seed in 0..seeds {
        let config = TrainConfig {
            student_temperature: 0.1,
            teacher_temperature: 0.1,
            centering: false,
            ..toy_train_config()
        };
        let fx = loss_fixture(config, seed);
        let c = &fx.config;
        let mut tape = Tape::new();
        let p = fx.student.bind(&mut tape, false).unwrap();
        let w = LossWeights {
            patch: 1.0,
            context: 0.1,
            image: 0.9,
        };
        let l = student_losses(&fx.arch, &mut tape, &p, &fx.inputs, &fx.teacher, None, c, w).unwrap();
        let mean_entropy = |logits: &Tensor<f64>| {
            let probs = teacher_distribution(logits, None, c.teacher_temperature).unwrap();
            let h = row_entropy(&probs);
            h.iter().sum::<f64>() / h.len() as f64
        };
        let masked = fx.inputs.mask.indices();
        let patch_rows = Tensor::new(
            vec![masked.len(), fx.teacher.patch_logits.cols()],
            masked.iter().flat_map(|&r| fx.teacher.patch_logits.row(r).to_vec()).collect(),
        )
        .unwrap();
        for (loss, bound) in [
            (tape.value(l.patch).item(), mean_entropy(&patch_rows)),
            (tape.value(l.image).item(), mean_entropy(&fx.teacher.image_logits)),
            (tape.value(l.context.unwrap()).item(), mean_entropy(&fx.teacher.context_logits)),
        ] {
            slack = slack.min(loss - bound);
        }
    }
    slack
}

/// Largest `|∂L_patch/∂s_i|` over unmasked rows, and the largest change of
/// `L_patch` when the unmasked student logits are replaced.
pub fn unmasked_patch_influence(seeds: u64) -> (f64, f64) {
    let mut grad_max = 0.0f64;
    let mut value_change = 0.0f64;
    for seed in 0..seeds {
        let mut rng = seeded(seed);
        let (n, d) = (16, 32);
        let t = random_tensor(&mut rng, &[n, d], -1.0, 1.0);
        let s = random_tensor(&mut rng, &[n, d], -1.0, 1.0);
        let mask = evpretrain::augment::sample_mask(&mut rng, n, 0.3).unwrap();
        let center = random_tensor(&mut rng, &[d], -0.1, 0.1);
        let sharpen = Sharpening {
            student: 0.1,
            teacher: 0.04,
            center: Some(&center),
        };
        let mut tape = Tape::new();
        let sv = tape.leaf(s.clone(), true).unwrap();
        let l = loss_patch(&mut tape, &t, sv, &mask, sharpen).unwrap();
        let g = tape.backward(l).unwrap();
        let grad = g.get(sv).unwrap();
        let mut other = s.clone();
        for i in 0..n {
            if !mask.mask[i] {
                grad_max = grad_max.max(grad.row(i).iter().fold(0.0, |m, v| m.max(v.abs())));
                for j in 0..d {
                    other.data_mut()[i * d + j] = rng.random_range(-5.0..5.0);
                }
            }
        }
        let ov = tape.constant(other).unwrap();
        let l2 = loss_patch(&mut tape, &t, ov, &mask, sharpen).unwrap();
        value_change = value_change.max((tape.value(l).item() - tape.value(l2).item()).abs());
    }
    (grad_max, value_change)
}

// ---------------------------------------------------------------- teacher

/// After each of `steps` training steps: the largest deviation of the teacher
/// from `m·θ_t_before + (1−m)·θ_s_after`, and whether every gradient table
/// held exactly the student leaves.
pub fn teacher_isolation(steps: usize, seed: u64) -> (f64, bool) {
    let mut trainer = Trainer::<f64>::new(TrainConfig { seed, ..toy_train_config() }).unwrap();
    let data = toy_images(6, &trainer.config.model, seed);
    let mut worst = 0.0f64;
    for _ in 0..steps {
        let before = trainer.pair.teacher.clone();
        let r = trainer.train_step(&data).unwrap();
        let m = r.momentum;
        for ((t, b), s) in trainer.pair.teacher.tensors.iter().zip(&before.tensors).zip(&trainer.pair.student.tensors) {
            for ((t, b), s) in t.data().iter().zip(b.data()).zip(s.data()) {
                worst = worst.max((t - (m * b + (1.0 - m) * s)).abs());
            }
        }
    }

    // the student graph of one sample, with the teacher also bound on the tape
    let fx = loss_fixture(toy_train_config(), seed);
    let (_, teacher_params) = Architecture::init::<f64>(&fx.config.model, seed + 100).unwrap();
    let mut tape = Tape::new();
    let tp = teacher_params.bind(&mut tape, false).unwrap();
    let sp = fx.student.bind(&mut tape, true).unwrap();
    let star = tape.constant(fx.inputs.patches_star.clone()).unwrap();
    let _teacher_graph = fx.arch.encode(&mut tape, &tp, star, None).unwrap();
    let w = LossWeights {
        patch: 1.0,
        context: 0.1,
        image: 0.9,
    };
    let l = student_losses(&fx.arch, &mut tape, &sp, &fx.inputs, &fx.teacher, None, &fx.config, w).unwrap();
    let g = tape.backward(l.total).unwrap();
    let leaves: Vec<_> = g.leaves().map(|(v, _)| v).collect();
    let only_student = leaves.len() == sp.len() && sp.iter().all(|v| g.contains(*v)) && tp.iter().all(|v| !g.contains(*v));
    (worst, only_student)
}

// ---------------------------------------------------------------- persistence

/// Whether save → load → save reproduces the checkpoint bytes, after a few steps.
pub fn checkpoint_round_trip(dir: &std::path::Path) -> bool {
    let mut trainer = Trainer::<f32>::new(toy_train_config()).unwrap();
    let data = toy_images(6, &trainer.config.model, 0);
    for _ in 0..2 {
        trainer.train_step(&data).unwrap();
    }
    let a = dir.join("a.eckp");
    let b = dir.join("b.eckp");
    trainer.to_checkpoint().unwrap().save(&a).unwrap();
    let loaded = Trainer::<f32>::from_checkpoint(&Container::load(&a).unwrap()).unwrap();
    loaded.to_checkpoint().unwrap().save(&b).unwrap();
    std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap()
}

/// Whether `split` steps, a checkpoint round trip through `dir`, and the
/// remaining steps reproduce an uninterrupted run bit for bit.
pub fn resume_matches_uninterrupted(dir: &std::path::Path, total: usize, split: usize) -> bool {
    let config = toy_train_config();
    let data = toy_images(6, &config.model, 1);
    let mut straight = Trainer::<f32>::new(config.clone()).unwrap();
    let mut reports = Vec::new();
    for _ in 0..total {
        reports.push(straight.train_step(&data).unwrap());
    }
    let mut first = Trainer::<f32>::new(config).unwrap();
    let mut resumed_reports = Vec::new();
    for _ in 0..split {
        resumed_reports.push(first.train_step(&data).unwrap());
    }
    let path = dir.join("mid.eckp");
    first.to_checkpoint().unwrap().save(&path).unwrap();
    let mut second = Trainer::<f32>::from_checkpoint(&Container::load(&path).unwrap()).unwrap();
    for _ in split..total {
        resumed_reports.push(second.train_step(&data).unwrap());
    }
    let bits = |r: &evpretrain::train::LossReport| r.l_total.to_bits();
    reports.iter().map(bits).eq(resumed_reports.iter().map(bits))
        && straight.to_checkpoint().unwrap().encode().unwrap() == second.to_checkpoint().unwrap().encode().unwrap()
}
