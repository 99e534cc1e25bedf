//! Finite-difference validation of every analytic gradient in the crate.
//!
//! These suites back the `glog gradcheck` subcommand and the acceptance
//! tests. The numeric side is always a central difference
//! `(f(x+h) - f(x-h)) / 2h` evaluated through a fresh forward pass, so it
//! is independent of the backward rules it checks.
//!
//! Relative error of a gradient buffer is its worst absolute deviation
//! normalized by the buffer's own magnitude,
//! `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, 1e-3)`: entries where
//! the true gradient passes through zero are judged against the gradient's
//! scale instead of amplifying finite-difference truncation noise into
//! spurious relative blow-ups.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::filters::{
    self, bank_apply, bank_param_grad, gabor_kernel, gabor_kernel_grad, log_kernel,
    log_kernel_grad, FilterBank, GaborParams, KernelGrid, LoGParams,
};
use crate::model::{model_init, ModelConfig, ModelWeights};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::train::segmentation_loss;

/// Central-difference step for tape ops and end-to-end checks.
pub const FD_STEP: f64 = 1e-4;
/// Tolerance for individual tape ops.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Tolerance for closed-form kernel derivatives.
pub const KERNEL_TOLERANCE: f64 = 1e-6;
/// Tolerance for gradients through the whole model.
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

/// Scale floor in the relative-error denominator.
const REL_FLOOR: f64 = 1e-3;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub cases: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Relative error of two scalars with a small-scale floor.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst deviation between matching gradient buffers, relative to the
/// gradient's own scale.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(REL_FLOOR, |m, &v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Builds a scalar loss on a fresh tape from leaf parameters.
pub type LossBuilder<'a> = &'a dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>;

/// Evaluate the loss once, forward only.
fn eval_loss(params: &[Tensor<f64>], build: LossBuilder) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    tape.value(loss).item()
}

/// Compare tape gradients against central differences for every element of
/// every parameter; returns the worst per-leaf relative error.
pub fn check_grads(params: &[Tensor<f64>], step: f64, build: LossBuilder) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = tape
            .grad(*id)
            .expect("backward populates every leaf")
            .to_vec();
        let mut numeric = vec![0.0; work[pi].numel()];
        for (ei, slot) in numeric.iter_mut().enumerate() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + step;
            let plus = eval_loss(&work, build)?;
            work[pi].data_mut()[ei] = orig - step;
            let minus = eval_loss(&work, build)?;
            work[pi].data_mut()[ei] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::from_vec(shape, data).expect("matching length")
}

fn random_labels(rng: &mut ChaCha8Rng, positions: usize, classes: usize) -> Vec<usize> {
    (0..positions).map(|_| rng.gen_range(0..classes)).collect()
}

/// A fixed random weighting that turns a tensor output into a scalar loss
/// with O(1), non-uniform gradients.
fn weighted_sum(tape: &mut Tape<f64>, out: NodeId, wseed: u64) -> Result<NodeId> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(wseed);
    let w = random_tensor(&mut rng, shape);
    let w = tape.leaf(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// One op-level check aggregated over `cases` random draws.
fn op_check(
    name: &str,
    cases: usize,
    seed: u64,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Result<f64>,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        worst = worst.max(draw(&mut rng)?);
    }
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_err: worst,
        tolerance: OP_TOLERANCE,
        cases,
    })
}

/// Finite-difference sweep over every registered tape op.
///
/// `cases` is the number of random draws per op.
pub fn check_tape_ops(seed: u64, cases: usize) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();

    reports.push(op_check("add", cases, seed, |rng| {
        let params = vec![
            random_tensor(rng, vec![3, 4]),
            random_tensor(rng, vec![3, 4]),
        ];
        let ws: u64 = rng.gen();
        check_grads(&params, FD_STEP, &move |t, ids| {
            let o = t.add(ids[0], ids[1])?;
            weighted_sum(t, o, ws)
        })
    })?);

    reports.push(op_check("mul", cases, seed + 1, |rng| {
        let params = vec![
            random_tensor(rng, vec![3, 4]),
            random_tensor(rng, vec![3, 4]),
        ];
        let ws: u64 = rng.gen();
        check_grads(&params, FD_STEP, &move |t, ids| {
            let o = t.mul(ids[0], ids[1])?;
            weighted_sum(t, o, ws)
        })
    })?);

    reports.push(op_check("scale", cases, seed + 2, |rng| {
        let params = vec![random_tensor(rng, vec![5])];
        let c: f64 = rng.gen_range(-3.0..3.0);
        let ws: u64 = rng.gen();
        check_grads(&params, FD_STEP, &move |t, ids| {
            let o = t.scale(ids[0], c);
            weighted_sum(t, o, ws)
        })
    })?);

    reports.push(op_check("sum", cases, seed + 3, |rng| {
        let params = vec![random_tensor(rng, vec![2, 3])];
        check_grads(&params, FD_STEP, &|t, ids| Ok(t.sum(ids[0])))
    })?);

    reports.push(op_check("mean", cases, seed + 4, |rng| {
        let params = vec![random_tensor(rng, vec![7])];
        check_grads(&params, FD_STEP, &|t, ids| Ok(t.mean(ids[0])))
    })?);

    reports.push(op_check("matmul", cases, seed + 5, |rng| {
        let params = vec![
            random_tensor(rng, vec![3, 4]),
            random_tensor(rng, vec![4, 2]),
        ];
        let ws: u64 = rng.gen();
        check_grads(&params, FD_STEP, &move |t, ids| {
            let o = t.matmul(ids[0], ids[1])?;
            weighted_sum(t, o, ws)
        })
    })?);

    reports.push(op_check("transpose", cases, seed + 6, |rng| {
        let params = vec![random_tensor(rng, vec![3, 5])];
        let ws: u64 = rng.gen();
        check_grads(&params, FD_STEP, &move |t, ids| {
            let o = t.transpose(ids[0])?;
            weighted_sum(t, o, ws)
        })
    })?);

    reports.push(op_check("linear", cases, seed + 7, |rng| {
        let params = vec![
            random_tensor(rng, vec![4, 3]),
            random_tensor(rng, vec![3, 2]),
            random_tensor(rng, vec![2]),
        ];
        let ws: u64 = rng.gen();
        check_grads(&params, FD_STEP, &move |t, ids| {
            let o = t.linear(ids[0], ids[1], ids[2])?;
            weighted_sum(t, o, ws)
        })
    })?);

    reports.push(op_check("gelu", cases, seed + 8, |rng| {
        let params = vec![random_tensor(rng, vec![9])];
        let ws: u64 = rng.gen();
        check_grads(&params, FD_STEP, &move |t, ids| {
            let o = t.gelu(ids[0]);
            weighted_sum(t, o, ws)
        })
    })?);

    reports.push(op_check("layer_norm", cases, seed + 9, |rng| {
        let params = vec![
            random_tensor(rng, vec![4, 3, 2]),
            random_tensor(rng, vec![4]),
            random_tensor(rng, vec![4]),
        ];
        let ws: u64 = rng.gen();
        check_grads(&params, FD_STEP, &move |t, ids| {
            let o = t.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
            weighted_sum(t, o, ws)
        })
    })?);

    reports.push(op_check("softmax_rows", cases, seed + 10, |rng| {
        let params = vec![random_tensor(rng, vec![3, 4])];
        let ws: u64 = rng.gen();
        check_grads(&params, FD_STEP, &move |t, ids| {
            let o = t.softmax_rows(ids[0])?;
            weighted_sum(t, o, ws)
        })
    })?);

    reports.push(op_check("softmax_channels", cases, seed + 11, |rng| {
        let params = vec![random_tensor(rng, vec![4, 2, 3])];
        let ws: u64 = rng.gen();
        check_grads(&params, FD_STEP, &move |t, ids| {
            let o = t.softmax_channels(ids[0])?;
            weighted_sum(t, o, ws)
        })
    })?);

    reports.push(op_check("conv2d", cases, seed + 12, |rng| {
        let params = vec![
            random_tensor(rng, vec![2, 6, 6]),
            random_tensor(rng, vec![3, 2, 3, 3]),
        ];
        let ws: u64 = rng.gen();
        check_grads(&params, FD_STEP, &move |t, ids| {
            let o = t.conv2d(ids[0], ids[1])?;
            weighted_sum(t, o, ws)
        })
    })?);

    reports.push(op_check("conv2d_strided", cases, seed + 13, |rng| {
        let params = vec![
            random_tensor(rng, vec![2, 6, 6]),
            random_tensor(rng, vec![3, 2, 3, 3]),
        ];
        let ws: u64 = rng.gen();
        check_grads(&params, FD_STEP, &move |t, ids| {
            let o = t.conv2d_general(ids[0], ids[1], 2, 1)?;
            weighted_sum(t, o, ws)
        })
    })?);

    reports.push(op_check("conv2d_merge2x2", cases, seed + 14, |rng| {
        let params = vec![
            random_tensor(rng, vec![2, 6, 6]),
            random_tensor(rng, vec![4, 2, 2, 2]),
        ];
        let ws: u64 = rng.gen();
        check_grads(&params, FD_STEP, &move |t, ids| {
            let o = t.conv2d_general(ids[0], ids[1], 2, 0)?;
            weighted_sum(t, o, ws)
        })
    })?);

    reports.push(op_check("add_channel_bias", cases, seed + 15, |rng| {
        let params = vec![
            random_tensor(rng, vec![3, 4, 4]),
            random_tensor(rng, vec![3]),
        ];
        let ws: u64 = rng.gen();
        check_grads(&params, FD_STEP, &move |t, ids| {
            let o = t.add_channel_bias(ids[0], ids[1])?;
            weighted_sum(t, o, ws)
        })
    })?);

    reports.push(op_check("concat_channels", cases, seed + 16, |rng| {
        let params = vec![
            random_tensor(rng, vec![2, 3, 3]),
            random_tensor(rng, vec![1, 3, 3]),
            random_tensor(rng, vec![3, 3, 3]),
        ];
        let ws: u64 = rng.gen();
        check_grads(&params, FD_STEP, &move |t, ids| {
            let o = t.concat_channels(ids)?;
            weighted_sum(t, o, ws)
        })
    })?);

    reports.push(op_check("mean_pool2", cases, seed + 17, |rng| {
        let params = vec![random_tensor(rng, vec![2, 4, 4])];
        let ws: u64 = rng.gen();
        check_grads(&params, FD_STEP, &move |t, ids| {
            let o = t.mean_pool2(ids[0])?;
            weighted_sum(t, o, ws)
        })
    })?);

    reports.push(op_check("upsample_nearest2", cases, seed + 18, |rng| {
        let params = vec![random_tensor(rng, vec![2, 3, 3])];
        let ws: u64 = rng.gen();
        check_grads(&params, FD_STEP, &move |t, ids| {
            let o = t.upsample_nearest2(ids[0])?;
            weighted_sum(t, o, ws)
        })
    })?);

    reports.push(op_check("cyclic_shift", cases, seed + 19, |rng| {
        let params = vec![random_tensor(rng, vec![2, 4, 4])];
        let dy = rng.gen_range(-3..4);
        let dx = rng.gen_range(-3..4);
        let ws: u64 = rng.gen();
        check_grads(&params, FD_STEP, &move |t, ids| {
            let o = t.cyclic_shift(ids[0], dy, dx)?;
            weighted_sum(t, o, ws)
        })
    })?);

    reports.push(op_check("window_roundtrip", cases, seed + 20, |rng| {
        let params = vec![random_tensor(rng, vec![3, 4, 4])];
        let ws: u64 = rng.gen();
        check_grads(&params, FD_STEP, &move |t, ids| {
            let part = t.window_partition(ids[0], 2)?;
            let back = t.window_unpartition(part, 2, 4, 4)?;
            weighted_sum(t, back, ws)
        })
    })?);

    reports.push(op_check("slice_concat_rows", cases, seed + 21, |rng| {
        let params = vec![random_tensor(rng, vec![6, 3])];
        let ws: u64 = rng.gen();
        check_grads(&params, FD_STEP, &move |t, ids| {
            let a = t.slice_rows(ids[0], 0, 2)?;
            let b = t.slice_rows(ids[0], 2, 4)?;
            let o = t.concat_rows(&[b, a])?;
            weighted_sum(t, o, ws)
        })
    })?);

    reports.push(op_check("slice_concat_cols", cases, seed + 22, |rng| {
        let params = vec![random_tensor(rng, vec![4, 6])];
        let ws: u64 = rng.gen();
        check_grads(&params, FD_STEP, &move |t, ids| {
            let a = t.slice_cols(ids[0], 0, 4)?;
            let b = t.slice_cols(ids[0], 4, 2)?;
            let o = t.concat_cols(&[b, a])?;
            weighted_sum(t, o, ws)
        })
    })?);

    reports.push(op_check("softmax_cross_entropy", cases, seed + 23, |rng| {
        let params = vec![random_tensor(rng, vec![4, 3, 3])];
        let labels = random_labels(rng, 9, 4);
        check_grads(&params, FD_STEP, &move |t, ids| {
            t.softmax_cross_entropy(ids[0], &labels)
        })
    })?);

    reports.push(op_check("dice_loss", cases, seed + 24, |rng| {
        let params = vec![random_tensor(rng, vec![4, 3, 3])];
        let labels = random_labels(rng, 9, 4);
        check_grads(&params, FD_STEP, &move |t, ids| t.dice_loss(ids[0], &labels))
    })?);

    reports.push(op_check("composite_graph", cases, seed + 25, |rng| {
        // conv -> bias -> gelu -> layer norm -> pool -> softmax CE.
        // Kernels at trained-weight scale and a loose layer-norm eps keep
        // the composite's curvature low enough that the central
        // difference itself stays well below the tolerance (the per-op
        // checks above cover the extreme input ranges).
        let mut kernels = random_tensor(rng, vec![3, 1, 3, 3]);
        for v in kernels.data_mut() {
            *v *= 0.25;
        }
        let params = vec![
            random_tensor(rng, vec![1, 8, 8]),
            kernels,
            random_tensor(rng, vec![3]),
            random_tensor(rng, vec![3]),
            random_tensor(rng, vec![3]),
        ];
        let labels = random_labels(rng, 16, 3);
        check_grads(&params, FD_STEP, &move |t, ids| {
            let c = t.conv2d(ids[0], ids[1])?;
            let c = t.add_channel_bias(c, ids[2])?;
            let a = t.gelu(c);
            let n = t.layer_norm(a, ids[3], ids[4], 1e-2)?;
            let p = t.mean_pool2(n)?;
            t.softmax_cross_entropy(p, &labels)
        })
    })?);

    Ok(reports)
}

/// Random Gabor parameters over the operating domain (wavelengths in the
/// initializer's range; fast oscillations below that make the step-1e-4
/// central difference itself too noisy to certify 1e-6).
fn random_gabor(rng: &mut ChaCha8Rng) -> GaborParams<f64> {
    GaborParams {
        lambda_raw: rng.gen_range(1.5f64.ln()..8.0f64.ln()),
        theta: rng.gen_range(-3.1..3.1),
        psi: rng.gen_range(-3.1..3.1),
        sigma_raw: rng.gen_range(-0.5..1.3),
        gamma_raw: rng.gen_range(-1.0..0.7),
    }
}

/// Central difference of a kernel generator with respect to one raw value.
fn fd_kernel(mut gen: impl FnMut(f64) -> Vec<f64>, raw: f64, step: f64) -> Vec<f64> {
    let plus = gen(raw + step);
    let minus = gen(raw - step);
    plus.iter()
        .zip(&minus)
        .map(|(p, m)| (p - m) / (2.0 * step))
        .collect()
}

/// Closed-form kernel derivatives against central differences: one report
/// per Gabor parameter and one for the LoG scale, each over `draws`
/// random parameter draws.
pub fn check_kernel_grads(seed: u64, draws: usize) -> Result<Vec<CheckReport>> {
    let grid = KernelGrid::new(7)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = [
        "gabor_lambda_raw",
        "gabor_theta",
        "gabor_psi",
        "gabor_sigma_raw",
        "gabor_gamma_raw",
    ];
    let mut worst = [0.0f64; 6];
    for _ in 0..draws {
        let p = random_gabor(&mut rng);
        let analytic = gabor_kernel_grad(&p, &grid);
        let raws = [p.lambda_raw, p.theta, p.psi, p.sigma_raw, p.gamma_raw];
        for pi in 0..5 {
            let fd = fd_kernel(
                |v| {
                    let mut q = p;
                    match pi {
                        0 => q.lambda_raw = v,
                        1 => q.theta = v,
                        2 => q.psi = v,
                        3 => q.sigma_raw = v,
                        _ => q.gamma_raw = v,
                    }
                    gabor_kernel(&q, &grid).data().to_vec()
                },
                raws[pi],
                FD_STEP,
            );
            worst[pi] = worst[pi].max(max_rel_err(analytic[pi].data(), &fd));
        }

        let lp = LoGParams {
            sigma_raw: rng.gen_range(-0.7..1.2),
        };
        let analytic = log_kernel_grad(&lp, &grid);
        let fd = fd_kernel(
            |v| log_kernel(&LoGParams { sigma_raw: v }, &grid).data().to_vec(),
            lp.sigma_raw,
            FD_STEP,
        );
        worst[5] = worst[5].max(max_rel_err(analytic.data(), &fd));
    }

    let mut reports = Vec::new();
    for (i, name) in names.iter().enumerate() {
        reports.push(CheckReport {
            name: (*name).to_string(),
            max_rel_err: worst[i],
            tolerance: KERNEL_TOLERANCE,
            cases: draws,
        });
    }
    reports.push(CheckReport {
        name: "log_sigma_raw".to_string(),
        max_rel_err: worst[5],
        tolerance: KERNEL_TOLERANCE,
        cases: draws,
    });
    Ok(reports)
}

/// The exact chain rule from bank outputs to raw parameters, against
/// central differences of a weighted-sum loss on a random 16x16 image.
pub fn check_bank_chain(seed: u64, cases: usize) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let mut bank = filters::init_bank::<f64>(2, 2, 5, 0)?;
        // Perturb the raw parameters away from the deterministic init.
        let mut raw = bank.raw_params();
        for v in raw.iter_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
        bank.set_raw_params(&raw)?;

        let image = random_tensor(&mut rng, vec![1, 16, 16]);
        let weights: Vec<f64> = (0..4 * 256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |b: &FilterBank<f64>| -> Result<f64> {
            let out = bank_apply(&image, b)?;
            Ok(out
                .data()
                .iter()
                .zip(&weights)
                .map(|(&o, &w)| o * w)
                .sum())
        };

        let grad_maps = Tensor::from_vec(vec![4, 16, 16], weights.clone())?;
        let analytic = bank_param_grad(&grad_maps, &image, &bank)?;

        let mut numeric = Vec::with_capacity(raw.len());
        let base = bank.raw_params();
        for i in 0..base.len() {
            let mut r = base.clone();
            r[i] = base[i] + FD_STEP;
            bank.set_raw_params(&r)?;
            let plus = loss(&bank)?;
            r[i] = base[i] - FD_STEP;
            bank.set_raw_params(&r)?;
            let minus = loss(&bank)?;
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
        bank.set_raw_params(&base)?;
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    Ok(CheckReport {
        name: "bank_param_chain".to_string(),
        max_rel_err: worst,
        tolerance: OP_TOLERANCE,
        cases,
    })
}

/// Gradient of the training loss through the whole default model against
/// central differences: every raw bank parameter plus sampled scalars
/// from each weight family.
pub fn check_model_end_to_end(seed: u64) -> Result<CheckReport> {
    let config = ModelConfig::default();
    let bank_cfg = filters::BankConfig::default();
    let model = model_init::<f64>(config, bank_cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE2E);
    let image = {
        let data: Vec<f64> = (0..64 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(vec![1, 64, 64], data)?
    };
    let labels: Vec<usize> = (0..64 * 64).map(|_| rng.gen_range(0..4)).collect();

    let loss_of = |m: &ModelWeights<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let nodes = m.insert(&mut tape);
        let logits = m.forward_on(&mut tape, &nodes, &image)?;
        let loss = segmentation_loss(&mut tape, logits, &labels)?;
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let nodes = model.insert(&mut tape);
    let logits = model.forward_on(&mut tape, &nodes, &image)?;
    let loss = segmentation_loss(&mut tape, logits, &labels)?;
    tape.backward(loss)?;
    let grads = model.collect_grads(&tape, &nodes)?;
    let names = model.param_group_names();

    let mut worst = 0.0f64;
    let mut cases = 0usize;

    // Every raw bank parameter.
    {
        let mut m = model.clone();
        let base = m.bank.raw_params();
        let mut numeric = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut r = base.clone();
            r[i] = base[i] + FD_STEP;
            m.bank.set_raw_params(&r)?;
            let plus = loss_of(&m)?;
            r[i] = base[i] - FD_STEP;
            m.bank.set_raw_params(&r)?;
            let minus = loss_of(&m)?;
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
        worst = worst.max(max_rel_err(&grads[0], &numeric));
        cases += base.len();
    }

    // Two sampled scalars per representative weight family.
    for family in [
        "embed0.kernels",
        "embed1.ln_gain",
        "enc1.block0.wq",
        "enc2.block0.wv",
        "bottleneck.block0.conv3",
        "dec2.block0.conv1",
        "dec1.block0.ln2_bias",
        "merge1.kernels",
        "fuse2.kernels",
        "up1.bias",
        "head.kernels",
    ] {
        let gi = names
            .iter()
            .position(|n| n == family)
            .expect("family name exists");
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for _ in 0..2 {
            let ei = rng.gen_range(0..grads[gi].len());
            let mut m = model.clone();
            let bump = |m: &mut ModelWeights<f64>, delta: f64| {
                let mut idx = 1;
                m.for_each_tensor_mut(&mut |_, t| {
                    if idx == gi {
                        t.data_mut()[ei] += delta;
                    }
                    idx += 1;
                });
            };
            bump(&mut m, FD_STEP);
            let plus = loss_of(&m)?;
            bump(&mut m, -2.0 * FD_STEP);
            let minus = loss_of(&m)?;
            analytic.push(grads[gi][ei]);
            numeric.push((plus - minus) / (2.0 * FD_STEP));
            cases += 1;
        }
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }

    Ok(CheckReport {
        name: "model_end_to_end".to_string(),
        max_rel_err: worst,
        tolerance: END_TO_END_TOLERANCE,
        cases,
    })
}

/// Every suite, at the quick or full (acceptance-grade) budget.
pub fn run_all(seed: u64, full: bool) -> Result<Vec<CheckReport>> {
    let (op_cases, kernel_draws, bank_cases) = if full { (4, 120, 3) } else { (1, 20, 1) };
    let mut reports = check_tape_ops(seed, op_cases)?;
    reports.extend(check_kernel_grads(seed + 101, kernel_draws)?);
    reports.push(check_bank_chain(seed + 202, bank_cases)?);
    reports.push(check_model_end_to_end(seed + 303)?);
    Ok(reports)
}
