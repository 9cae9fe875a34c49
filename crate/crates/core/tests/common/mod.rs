#![allow(dead_code)]

pub mod criteria;

use evpretrain::augment::AugmentConfig;
use evpretrain::event::EventImage;
use evpretrain::model::ModelConfig;
use evpretrain::rng::seeded;
use evpretrain::tensor::{Tape, Tensor, Var};
use evpretrain::train::TrainConfig;
use rand::Rng;

pub const FD_EPS: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error, so that near-zero gradients are
/// compared at an absolute scale of `FD_REL_TOL * FD_FLOOR`.
pub const FD_FLOOR: f64 = 1e-4;

/// 16×16 images, 4×4 patches (N = 16), two channels, d = 32 prototypes.
pub fn toy_model() -> ModelConfig {
    ModelConfig {
        image_height: 16,
        image_width: 16,
        patch: 4,
        channels: 2,
        dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        head_hidden: 16,
        bottleneck: 8,
        prototypes: 32,
    }
}

pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        num_contexts: 4,
        batch_size: 3,
        steps: 6,
        warmup_steps: 2,
        checkpoint_every: 0,
        model: toy_model(),
        augment: AugmentConfig::default(),
        ..TrainConfig::default()
    }
}

/// Sparse random event images with blob-like structure.
pub fn toy_images(count: usize, model: &ModelConfig, seed: u64) -> Vec<EventImage> {
    let mut rng = seeded(seed);
    (0..count)
        .map(|_| {
            let mut img = EventImage::zeros(model.channels, model.image_height, model.image_width);
            let (cx, cy) = (
                rng.random_range(3.0..model.image_width as f64 - 3.0),
                rng.random_range(3.0..model.image_height as f64 - 3.0),
            );
            let r = rng.random_range(2.0..5.0);
            for c in 0..model.channels {
                let plane = img.plane_mut(c);
                for y in 0..model.image_height {
                    for x in 0..model.image_width {
                        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                        let edge = (d - r).abs() < 1.0;
                        if edge || rng.random::<f64>() < 0.05 {
                            plane[y * model.image_width + x] = rng.random_range(-2.0..2.0);
                        }
                    }
                }
            }
            img
        })
        .collect()
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Largest relative error between analytic and central-difference gradients
/// of `f` with respect to every element of every input.
///
/// `f` receives leaves for `inputs` (in order) and returns any tensor; it is
/// reduced to a scalar by a fixed random projection.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    projection_seed: u64,
    f: &dyn Fn(&mut Tape<f64>, &[Var]) -> evpretrain::Result<Var>,
) -> evpretrain::Result<f64> {
    Ok(gradient_errors(inputs, projection_seed, f)?.into_iter().fold(0.0, f64::max))
}

/// Per-input worst relative error; see [`check_gradients`].
pub fn gradient_errors(
    inputs: &[Tensor<f64>],
    projection_seed: u64,
    f: &dyn Fn(&mut Tape<f64>, &[Var]) -> evpretrain::Result<Var>,
) -> evpretrain::Result<Vec<f64>> {
    let eval = |values: &[Tensor<f64>], grads: bool| -> evpretrain::Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let leaves = values
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect::<evpretrain::Result<Vec<_>>>()?;
        let out = f(&mut tape, &leaves)?;
        let shape = tape.shape(out).to_vec();
        let mut rng = seeded(projection_seed);
        let r = tape.constant(random_tensor(&mut rng, &shape, -1.0, 1.0))?;
        let prod = tape.mul(out, r)?;
        let loss = tape.sum(prod)?;
        let value = tape.value(loss).item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(loss)?;
        let grads = leaves
            .iter()
            .zip(values)
            .map(|(v, t)| g.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, grads))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut worst = vec![0.0f64; inputs.len()];
    let mut values = inputs.to_vec();
    for i in 0..values.len() {
        for j in 0..values[i].len() {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + FD_EPS;
            let (plus, _) = eval(&values, false)?;
            values[i].data_mut()[j] = orig - FD_EPS;
            let (minus, _) = eval(&values, false)?;
            values[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_EPS);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst[i] = worst[i].max(rel);
        }
    }
    Ok(worst)
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> evpretrain::Result<Var>>;

fn dims(rng: &mut impl Rng) -> (usize, usize) {
    (rng.random_range(1..=5), rng.random_range(1..=6))
}

/// One random instance of `op`: input tensors and the function to differentiate.
fn op_case(op: &str, rng: &mut impl Rng) -> (Vec<Tensor<f64>>, OpFn) {
    let (r, c) = dims(rng);
    let x = random_tensor(rng, &[r, c], -2.0, 2.0);
    match op {
        "matmul" => {
            let n = rng.random_range(1..=5);
            let b = random_tensor(rng, &[c, n], -2.0, 2.0);
            (vec![x, b], Box::new(|t, v| t.matmul(v[0], v[1])))
        }
        "matmul_t" => {
            let n = rng.random_range(1..=5);
            let b = random_tensor(rng, &[n, c], -2.0, 2.0);
            (vec![x, b], Box::new(|t, v| t.matmul_t(v[0], v[1])))
        }
        "transpose" => (vec![x], Box::new(|t, v| t.transpose(v[0]))),
        "add" | "sub" | "mul" => {
            let y = random_tensor(rng, &[r, c], -2.0, 2.0);
            let f: OpFn = match op {
                "add" => Box::new(|t, v| t.add(v[0], v[1])),
                "sub" => Box::new(|t, v| t.sub(v[0], v[1])),
                _ => Box::new(|t, v| t.mul(v[0], v[1])),
            };
            (vec![x, y], f)
        }
        "add_row" | "mul_row" => {
            let row = random_tensor(rng, &[c], -2.0, 2.0);
            let f: OpFn = if op == "add_row" {
                Box::new(|t, v| t.add_row(v[0], v[1]))
            } else {
                Box::new(|t, v| t.mul_row(v[0], v[1]))
            };
            (vec![x, row], f)
        }
        "scale" => {
            let k = rng.random_range(-3.0..3.0);
            (vec![x], Box::new(move |t, v| t.scale(v[0], k)))
        }
        "sum" => (vec![x], Box::new(|t, v| t.sum(v[0]))),
        "mean" => {
            let axis = rng.random_range(0..2);
            (vec![x], Box::new(move |t, v| t.mean(v[0], axis)))
        }
        "softmax" | "log_softmax" => {
            let axis = rng.random_range(0..2);
            let temp = rng.random_range(0.3..2.0);
            let f: OpFn = if op == "softmax" {
                Box::new(move |t, v| t.softmax(v[0], axis, temp))
            } else {
                Box::new(move |t, v| t.log_softmax(v[0], axis, temp))
            };
            (vec![x], f)
        }
        "layer_norm" => {
            let c = c.max(2);
            let x = random_tensor(rng, &[r, c], -2.0, 2.0);
            (vec![x], Box::new(|t, v| t.layer_norm(v[0], 1e-6)))
        }
        "gelu" => (vec![x], Box::new(|t, v| t.gelu(v[0]))),
        "log" => {
            let x = random_tensor(rng, &[r, c], 0.5, 3.0);
            (vec![x], Box::new(|t, v| t.log(v[0])))
        }
        "l2_normalize_rows" => (vec![x], Box::new(|t, v| t.l2_normalize_rows(v[0]))),
        "concat" => {
            let axis = rng.random_range(0..2);
            let extra = rng.random_range(1..=4);
            let shape = if axis == 0 { [extra, c] } else { [r, extra] };
            let other = random_tensor(rng, &shape, -2.0, 2.0);
            (vec![x, other], Box::new(move |t, v| t.concat(&[v[0], v[1]], axis)))
        }
        "narrow" => {
            let axis = rng.random_range(0..2);
            let len_axis = if axis == 0 { r } else { c };
            let start = rng.random_range(0..len_axis);
            let len = rng.random_range(1..=len_axis - start);
            (vec![x], Box::new(move |t, v| t.narrow(v[0], axis, start, len)))
        }
        "gather_rows" => {
            let k = rng.random_range(1..=6);
            let index: Vec<usize> = (0..k).map(|_| rng.random_range(0..r)).collect();
            (vec![x], Box::new(move |t, v| t.gather_rows(v[0], &index)))
        }
        "reshape" => (vec![x], Box::new(move |t, v| t.reshape(v[0], &[c, r]))),
        "mask_rows" => {
            let token = random_tensor(rng, &[c], -2.0, 2.0);
            let mask: Vec<bool> = (0..r).map(|_| rng.random::<bool>()).collect();
            (vec![x, token], Box::new(move |t, v| t.mask_rows(v[0], v[1], &mask)))
        }
        "cross_entropy" => {
            let c = c.max(2);
            let x = random_tensor(rng, &[r, c], -2.0, 2.0);
            let logits = random_tensor(rng, &[r, c], -2.0, 2.0);
            let target = evpretrain::tensor::softmax(&logits, 1, 1.0).expect("softmax");
            let temp = rng.random_range(0.1..1.0);
            (vec![x], Box::new(move |t, v| t.cross_entropy(&target, v[0], temp)))
        }
        other => panic!("no gradient case for {other}"),
    }
}

pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "matmul",
    "matmul_t",
    "transpose",
    "add",
    "sub",
    "mul",
    "add_row",
    "mul_row",
    "scale",
    "sum",
    "mean",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "log",
    "l2_normalize_rows",
    "concat",
    "narrow",
    "gather_rows",
    "reshape",
    "mask_rows",
    "cross_entropy",
];

/// Worst relative error per op over `cases` random instances.
pub fn op_gradient_errors(cases: usize, seed: u64) -> Vec<(&'static str, f64)> {
    DIFFERENTIABLE_OPS
        .iter()
        .enumerate()
        .map(|(k, &op)| {
            let mut rng = seeded(evpretrain::rng::derive_seed(seed, k as u64));
            let mut worst = 0.0f64;
            for case in 0..cases {
                let (inputs, f) = op_case(op, &mut rng);
                let err = check_gradients(&inputs, case as u64, f.as_ref())
                    .unwrap_or_else(|e| panic!("{op} case {case}: {e}"));
                worst = worst.max(err);
            }
            (op, worst)
        })
        .collect()
}

/// Worst relative error of the full per-sample objective
/// `L_patch + 0.1·L_context + 0.9·L_image` with respect to every student
/// parameter, on the toy model (N = 16 patches, d = 32).
pub fn l_total_gradient_error(seed: u64) -> f64 {
    l_total_gradient_errors(seed).into_iter().map(|(_, e)| e).fold(0.0, f64::max)
}

/// [`l_total_gradient_error`] per named parameter tensor.
pub fn l_total_gradient_errors(seed: u64) -> Vec<(String, f64)> {
    use evpretrain::augment::PatchGrid;
    use evpretrain::model::{Architecture, Centers};
    use evpretrain::train::{student_losses, teacher_pass, LossWeights, SampleInputs};

    let config = toy_train_config();
    let model = &config.model;
    // Random O(1) parameters: at the 0.02-std initialization the head outputs
    // are tiny and sit in the curved region of the final l2 normalization,
    // where an ε-step is no longer small.
    let (arch, mut student) = Architecture::init::<f64>(model, seed).expect("init");
    let (_, mut teacher) = Architecture::init::<f64>(model, seed + 1).expect("init");
    let mut prng = seeded(seed ^ 0x5eed);
    for t in student.tensors.iter_mut().chain(teacher.tensors.iter_mut()) {
        *t = random_tensor(&mut prng, t.shape(), -0.5, 0.5);
    }
    let grid = PatchGrid::new(model.image_height, model.image_width, model.patch).expect("grid");
    let image = &toy_images(1, model, seed)[0];
    let inputs = SampleInputs::<f64>::prepare(image, &grid, &config.augment, seed).expect("prepare");
    let t = teacher_pass(&arch, &teacher, &inputs, &config, seed).expect("teacher");
    assert!(!t.usable.is_empty(), "toy sample has no usable context");
    let mut rng = seeded(seed);
    let d = model.prototypes;
    let centers = Centers {
        patch: random_tensor(&mut rng, &[d], -0.1, 0.1),
        context: random_tensor(&mut rng, &[d], -0.1, 0.1),
        image: random_tensor(&mut rng, &[d], -0.1, 0.1),
    };
    let weights = LossWeights {
        patch: 1.0,
        context: config.lambda_context,
        image: config.lambda_image,
    };
    let f = |tape: &mut Tape<f64>, p: &[Var]| {
        student_losses(&arch, tape, p, &inputs, &t, Some(&centers), &config, weights).map(|l| l.total)
    };
    let errs = gradient_errors(&student.tensors, seed, &f).expect("L_total gradient");
    student.names.iter().cloned().zip(errs).collect()
}
