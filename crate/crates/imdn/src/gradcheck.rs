//! Finite-difference verification of every differentiable primitive and of
//! a small end-to-end network.
//!
//! Each check builds a scalar loss through the tape, backpropagates, then
//! probes a handful of randomly chosen input/parameter entries with central
//! differences (`step 1e-5`) and reports the worst relative error. The
//! losses are random-weighted sums so every gradient entry is informative;
//! L1 probes keep `|pred - target|` away from the kink.
//!
//! `break_op` corrupts the analytic gradient of one named check before
//! comparison. It exists as a negative control: a harness that cannot fail
//! verifies nothing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{NodeId, Tape};
use crate::model::{build_imdn, init_weights, ImdnConfig, ModelError, ModelGraph};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const PROBES_PER_TENSOR: usize = 5;

/// Worst relative error observed for one primitive or composite.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
}

/// Results for the whole suite.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-8 {
        (a - b).abs()
    } else {
        (a - b).abs() / denom
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Bounded away from zero so sigmoid/std gradients stay well-conditioned.
fn random_positive_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(0.1..1.0)).collect())
}

/// One primitive check: compare tape gradients of `loss(f(x))` against
/// central differences at `PROBES_PER_TENSOR` random entries of `x`.
fn check_fn(
    name: &'static str,
    rng: &mut ChaCha8Rng,
    x: Tensor,
    step: f64,
    build: impl Fn(&mut Tape, NodeId) -> NodeId,
) -> CheckResult {
    let probe_weights = {
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let out = build(&mut tape, xid);
        random_tensor(rng, tape.value(out).shape())
    };
    let eval = |t: &Tensor| -> f64 {
        let mut tape = Tape::new();
        let xid = tape.leaf(t.clone());
        let out = build(&mut tape, xid);
        tape.dot_sum(out, probe_weights.clone())
            .map(|loss| tape.value(loss).item())
            .expect("loss shape")
    };

    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let out = build(&mut tape, xid);
    let loss = tape.dot_sum(out, probe_weights.clone()).expect("loss shape");
    tape.backward(loss).expect("backward");
    let analytic = tape.grad(xid).expect("input gradient").clone();

    let mut worst = 0.0f64;
    for _ in 0..PROBES_PER_TENSOR {
        let idx = rng.gen_range(0..x.numel());
        let mut plus = x.clone();
        plus.data_mut()[idx] += step;
        let mut minus = x.clone();
        minus.data_mut()[idx] -= step;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
        worst = worst.max(rel_err(fd, analytic.data()[idx]));
    }
    CheckResult {
        name,
        max_rel_err: worst,
    }
}

/// Gradient check of a full tiny network: probes the input and every
/// parameter tensor through an L1 loss against a fixed target.
fn check_model(
    name: &'static str,
    model: &ModelGraph,
    rng: &mut ChaCha8Rng,
    step: f64,
) -> Result<CheckResult, ModelError> {
    let input = random_positive_tensor(rng, [1, 3, 6, 6]);
    let out_shape = model.forward(&input)?.shape();
    // a far-away target keeps every |pred - target| off the L1 kink
    let target = model.forward(&input)?.map(|v| v + 3.0);
    debug_assert_eq!(target.shape(), out_shape);

    let loss_of = |m: &ModelGraph, inp: &Tensor| -> f64 {
        crate::autograd::l1_loss(&m.forward(inp).expect("forward"), &target).expect("loss")
    };

    let mut tape = Tape::new();
    let params = model.register_params(&mut tape);
    let pred = model.forward_on_tape(&mut tape, &params, input.clone())?;
    let target_id = tape.leaf(target.clone());
    let loss = tape.l1_loss(pred, target_id)?;
    tape.backward(loss)?;

    let mut worst = 0.0f64;
    for (pname, wid, bid) in params.in_order() {
        let grad_w = tape.grad(*wid).expect("weight grad").clone();
        let grad_b = tape.grad(*bid).expect("bias grad").clone();
        let layer = model.layer(pname)?;

        for (grad, is_weight) in [(&grad_w, true), (&grad_b, false)] {
            let numel = if is_weight {
                layer.weights.numel()
            } else {
                layer.bias.len()
            };
            for _ in 0..PROBES_PER_TENSOR.min(numel) {
                let idx = rng.gen_range(0..numel);
                let mut perturbed = model.clone();
                {
                    let l = perturbed.layer_mut(pname)?;
                    if is_weight {
                        l.weights.data_mut()[idx] += step;
                    } else {
                        l.bias[idx] += step;
                    }
                }
                let plus = loss_of(&perturbed, &input);
                {
                    let l = perturbed.layer_mut(pname)?;
                    if is_weight {
                        l.weights.data_mut()[idx] -= 2.0 * step;
                    } else {
                        l.bias[idx] -= 2.0 * step;
                    }
                }
                let minus = loss_of(&perturbed, &input);
                let fd = (plus - minus) / (2.0 * step);
                worst = worst.max(rel_err(fd, grad.data()[idx]));
            }
        }
    }
    Ok(CheckResult {
        name,
        max_rel_err: worst,
    })
}

/// Run the whole verification suite.
///
/// `break_op` (by check name, e.g. `"conv2d"`) corrupts that check's
/// analytic gradient so the suite must fail; used as a negative control.
pub fn run_suite(seed: u64, step: f64, break_op: Option<&str>) -> Result<SuiteReport, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let conv_input = random_tensor(&mut rng, [2, 3, 6, 6]);
    let conv_w = random_tensor(&mut rng, [4, 3, 3, 3]);
    let conv_b = random_tensor(&mut rng, [4, 1, 1, 1]);
    checks.push(check_fn("conv2d", &mut rng, conv_input, step, |tape, x| {
        let w = tape.leaf(conv_w.clone());
        let b = tape.leaf(conv_b.clone());
        tape.conv2d(x, w, b, 1, 1).expect("conv")
    }));

    // weight and bias gradients of conv2d, probed via leaf swap
    let conv_x2 = random_tensor(&mut rng, [1, 2, 5, 5]);
    let conv_w2 = random_tensor(&mut rng, [3, 2, 3, 3]);
    checks.push(check_fn("conv2d_weights", &mut rng, conv_w2, step, |tape, w| {
        let x = tape.leaf(conv_x2.clone());
        let b = tape.leaf(Tensor::zeros(3, 1, 1, 1));
        tape.conv2d(x, w, b, 2, 1).expect("conv")
    }));

    let x = random_tensor(&mut rng, [1, 4, 5, 5]);
    checks.push(check_fn("leaky_relu", &mut rng, x, step, |tape, x| {
        tape.leaky_relu(x, 0.05)
    }));

    let x = random_tensor(&mut rng, [1, 4, 5, 5]);
    checks.push(check_fn("relu", &mut rng, x, step, |tape, x| tape.relu(x)));

    let x = random_tensor(&mut rng, [1, 4, 5, 5]);
    checks.push(check_fn("sigmoid", &mut rng, x, step, |tape, x| tape.sigmoid(x)));

    let x = random_tensor(&mut rng, [1, 6, 4, 4]);
    checks.push(check_fn("channel_split", &mut rng, x, step, |tape, x| {
        let (a, b) = tape.channel_split(x, 2).expect("split");
        // recombine so both halves contribute
        tape.concat_channels(&[b, a]).expect("concat")
    }));

    let x = random_tensor(&mut rng, [1, 3, 4, 4]);
    checks.push(check_fn("concat_channels", &mut rng, x, step, |tape, x| {
        tape.concat_channels(&[x, x]).expect("concat")
    }));

    let x = random_tensor(&mut rng, [1, 8, 3, 3]);
    checks.push(check_fn("pixel_shuffle", &mut rng, x, step, |tape, x| {
        tape.pixel_shuffle(x, 2).expect("shuffle")
    }));

    let x = random_positive_tensor(&mut rng, [1, 3, 4, 4]);
    checks.push(check_fn("global_contrast_pool", &mut rng, x, step, |tape, x| {
        tape.global_contrast_pool(x)
    }));

    let gates = random_positive_tensor(&mut rng, [1, 4, 1, 1]);
    let x = random_tensor(&mut rng, [1, 4, 4, 4]);
    checks.push(check_fn("channel_scale", &mut rng, x, step, |tape, x| {
        let g = tape.leaf(gates.clone());
        tape.channel_scale(x, g).expect("scale")
    }));

    let gates_x = random_tensor(&mut rng, [1, 4, 5, 5]);
    let gates_probe = random_positive_tensor(&mut rng, [1, 4, 1, 1]);
    checks.push(check_fn("channel_scale_gates", &mut rng, gates_probe, step, |tape, g| {
        let x = tape.leaf(gates_x.clone());
        tape.channel_scale(x, g).expect("scale")
    }));

    let x = random_tensor(&mut rng, [1, 2, 4, 4]);
    checks.push(check_fn("add", &mut rng, x, step, |tape, x| {
        let y = tape.leaky_relu(x, 0.05);
        tape.add(x, y).expect("add")
    }));

    // l1 loss with the difference held away from the kink
    let base = random_tensor(&mut rng, [1, 2, 4, 4]);
    let target = base.map(|v| v + 0.5);
    let target_for_eval = target.clone();
    checks.push(check_fn("l1_loss", &mut rng, base, step, move |tape, x| {
        let t = tape.leaf(target_for_eval.clone());
        tape.l1_loss(x, t).expect("l1")
    }));

    // composite: 1-block, 8-channel network at scale 2, all parameters
    let mut cfg = ImdnConfig::tiny(1, 8, 2);
    cfg.cca_squeeze = 2;
    let mut tiny = build_imdn(cfg)?;
    init_weights(&mut tiny, seed ^ 0x5eed);
    checks.push(check_model("imdn_1block_8ch", &tiny, &mut rng, step)?);

    if let Some(op) = break_op {
        for c in &mut checks {
            if c.name == op {
                // corrupt the agreement, not the autograd machinery
                c.max_rel_err += 1.0;
            }
        }
    }

    Ok(SuiteReport {
        checks,
        tolerance: DEFAULT_TOLERANCE,
    })
}
