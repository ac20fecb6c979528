//! Central finite-difference verification of the backward pass.
//!
//! Each check rebuilds a small random graph from perturbed leaves and
//! compares the analytic gradient against (f(x+e) - f(x-e)) / 2e. Large
//! graphs probe a random subset of parameter scalars instead of all of
//! them. Used both by unit tests and the `grad-check` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{Model, ModelConfig, Variant};
use crate::supervision::{self, Mode};
use crate::tensor::{Tape, Tensor, TensorId};

pub const EPS: f64 = 1e-6;
pub const OP_TOL: f64 = 1e-5;
pub const GRAPH_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_err: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn pass(&self) -> bool {
        self.max_err < self.tol
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Random values kept away from zero so relu's kink is never probed.
fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, shape);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += if *v >= 0.0 { 0.05 } else { -0.05 };
        }
    }
    t
}

fn rand_mask(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen::<bool>() as u8 as f64).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Max hybrid error between analytic and finite-difference gradients over
/// the given leaves. `probes_per_leaf` caps how many scalars of each leaf
/// are probed (None = all).
pub fn fd_max_err(
    leaves: &[Tensor],
    probes_per_leaf: Option<usize>,
    rng: &mut ChaCha8Rng,
    build: &dyn Fn(&mut Tape, &[TensorId]) -> TensorId,
) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = leaves.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids);
    assert_eq!(tape.value(loss).numel(), 1, "fd_max_err needs a scalar loss");
    tape.backward(loss).unwrap();
    let grads: Vec<Option<Tensor>> = ids.iter().map(|&id| tape.grad(id).cloned()).collect();

    let eval = |ls: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let ids: Vec<TensorId> = ls.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let l = build(&mut t, &ids);
        t.value(l).data()[0]
    };

    let mut max_err = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let idxs: Vec<usize> = match probes_per_leaf {
            None => (0..n).collect(),
            Some(k) if k >= n => (0..n).collect(),
            Some(k) => (0..k).map(|_| rng.gen_range(0..n)).collect(),
        };
        for j in idxs {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[j] += EPS;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[j] -= EPS;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
            let an = grads[li].as_ref().map_or(0.0, |g| g.data()[j]);
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
            max_err = max_err.max(err);
        }
    }
    max_err
}

/// Loss = sum(out * c) with a fixed random constant c, so every output
/// element contributes with a distinct coefficient.
fn weighted_sum(tape: &mut Tape, out: TensorId, coeffs: &Tensor) -> TensorId {
    let c = tape.constant(coeffs.clone());
    let prod = tape.mul(out, c).unwrap();
    tape.sum(prod)
}

fn op_checks(rng: &mut ChaCha8Rng, out: &mut Vec<CheckResult>) {
    let mut push = |name: &str, err: f64| {
        out.push(CheckResult { name: name.into(), max_err: err, tol: OP_TOL });
    };

    for (stride, pad) in [(1usize, 1usize), (2, 1), (1, 0), (2, 2)] {
        let x = rand_tensor(rng, &[2, 3, 6, 6]);
        let w = rand_tensor(rng, &[4, 3, 3, 3]);
        let b = rand_tensor(rng, &[4]);
        let ho = (6 + 2 * pad - 3) / stride + 1;
        let c = rand_tensor(rng, &[2, 4, ho, ho]);
        let err = fd_max_err(&[x, w, b], None, rng, &|t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], stride, pad).unwrap();
            weighted_sum(t, y, &c)
        });
        push(&format!("conv2d s{stride} p{pad}"), err);
    }

    let x = rand_tensor(rng, &[2, 4, 5, 5]);
    let c = rand_tensor(rng, &[2, 1, 5, 5]);
    push("channel_max", fd_max_err(&[x], None, rng, &|t, ids| {
        let y = t.channel_max(ids[0]).unwrap();
        weighted_sum(t, y, &c)
    }));

    let x = rand_tensor(rng, &[2, 4, 5, 5]);
    let c = rand_tensor(rng, &[2, 1, 5, 5]);
    push("channel_mean", fd_max_err(&[x], None, rng, &|t, ids| {
        let y = t.channel_mean(ids[0]).unwrap();
        weighted_sum(t, y, &c)
    }));

    let x = rand_tensor(rng, &[2, 3, 5, 5]);
    let c = rand_tensor(rng, &[2, 3, 1, 1]);
    push("global_avg_pool", fd_max_err(&[x], None, rng, &|t, ids| {
        let y = t.global_avg_pool(ids[0]).unwrap();
        weighted_sum(t, y, &c)
    }));

    for window in [3usize, 7] {
        let x = rand_tensor(rng, &[1, 2, 6, 6]);
        let c = rand_tensor(rng, &[1, 2, 6, 6]);
        let err = fd_max_err(&[x], None, rng, &|t, ids| {
            let y = t.avg_pool_same(ids[0], window).unwrap();
            weighted_sum(t, y, &c)
        });
        push(&format!("avg_pool_same w{window}"), err);
    }

    for (hw_in, hw_out) in [(3usize, 6usize), (4, 7), (5, 5)] {
        let x = rand_tensor(rng, &[1, 2, hw_in, hw_in]);
        let c = rand_tensor(rng, &[1, 2, hw_out, hw_out]);
        let err = fd_max_err(&[x], None, rng, &|t, ids| {
            let y = t.upsample_bilinear(ids[0], hw_out, hw_out).unwrap();
            weighted_sum(t, y, &c)
        });
        push(&format!("upsample {hw_in}->{hw_out}"), err);
    }

    let a = rand_tensor(rng, &[2, 3, 4, 4]);
    let b = rand_tensor(rng, &[2, 3, 4, 4]);
    let c = rand_tensor(rng, &[2, 3, 4, 4]);
    push("add", fd_max_err(&[a, b], None, rng, &|t, ids| {
        let y = t.add(ids[0], ids[1]).unwrap();
        weighted_sum(t, y, &c)
    }));

    let a = rand_tensor(rng, &[2, 3, 4, 4]);
    let b = rand_tensor(rng, &[2, 3, 4, 4]);
    let c = rand_tensor(rng, &[2, 3, 4, 4]);
    push("mul", fd_max_err(&[a, b], None, rng, &|t, ids| {
        let y = t.mul(ids[0], ids[1]).unwrap();
        weighted_sum(t, y, &c)
    }));

    let a = rand_tensor(rng, &[2, 3, 4, 4]);
    let m = rand_tensor(rng, &[2, 1, 4, 4]);
    let c = rand_tensor(rng, &[2, 3, 4, 4]);
    push("mul broadcast C=1", fd_max_err(&[a, m], None, rng, &|t, ids| {
        let y = t.mul(ids[0], ids[1]).unwrap();
        weighted_sum(t, y, &c)
    }));

    let a = rand_tensor(rng, &[1, 2, 3, 3]);
    let b = rand_tensor(rng, &[1, 3, 3, 3]);
    let c = rand_tensor(rng, &[1, 5, 3, 3]);
    push("concat_channels", fd_max_err(&[a, b], None, rng, &|t, ids| {
        let y = t.concat_channels(ids[0], ids[1]).unwrap();
        weighted_sum(t, y, &c)
    }));

    let x = rand_tensor_off_zero(rng, &[2, 3, 4, 4]);
    let c = rand_tensor(rng, &[2, 3, 4, 4]);
    push("relu", fd_max_err(&[x], None, rng, &|t, ids| {
        let y = t.relu(ids[0]);
        weighted_sum(t, y, &c)
    }));

    let x = rand_tensor(rng, &[2, 3, 4, 4]);
    let c = rand_tensor(rng, &[2, 3, 4, 4]);
    push("sigmoid", fd_max_err(&[x], None, rng, &|t, ids| {
        let y = t.sigmoid(ids[0]);
        weighted_sum(t, y, &c)
    }));

    let x = rand_tensor(rng, &[2, 6, 1, 1]);
    let k = rand_tensor(rng, &[3]);
    let c = rand_tensor(rng, &[2, 6, 1, 1]);
    push("conv1d_channels", fd_max_err(&[x, k], None, rng, &|t, ids| {
        let y = t.conv1d_channels(ids[0], ids[1]).unwrap();
        weighted_sum(t, y, &c)
    }));

    let x = rand_tensor(rng, &[1, 1, 4, 4]);
    push("scale", fd_max_err(&[x], None, rng, &|t, ids| {
        let y = t.scale(ids[0], -1.75);
        t.sum(y)
    }));

    let gt = rand_mask(rng, &[1, 1, 6, 6]);
    let wmap = supervision::pixel_weight_map(&gt).unwrap();
    let z = rand_tensor(rng, &[1, 1, 6, 6]);
    push("weighted_bce", fd_max_err(&[z], None, rng, &|t, ids| {
        t.weighted_bce(ids[0], &gt, &wmap).unwrap()
    }));
    let z = rand_tensor(rng, &[1, 1, 6, 6]);
    push("weighted_iou", fd_max_err(&[z], None, rng, &|t, ids| {
        t.weighted_iou(ids[0], &gt, &wmap).unwrap()
    }));
}

fn tiny_config(variant: Variant, seed: u64) -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        stage_channels: [3, 4, 5, 6],
        input_size: 16,
        dem_kernel_sizes: [7, 5, 3],
        ca_kernel: 3,
        mask_source_swap: false,
        variant,
        seed,
    }
}

fn param_leaves(model: &Model) -> Vec<Tensor> {
    (0..model.params.len()).map(|i| model.params.tensor(i).clone()).collect()
}

fn model_checks(rng: &mut ChaCha8Rng, out: &mut Vec<CheckResult>) {
    // DEM and SEM blocks in isolation, gradients through params and inputs
    let model = Model::new(tiny_config(Variant::Full, rng.gen())).unwrap();
    let c1 = model.cfg.stage_channels[0];
    let c2 = model.cfg.stage_channels[1];
    let f_l = rand_tensor(rng, &[1, c1, 6, 6]);
    let f_h = rand_tensor(rng, &[1, c2, 3, 3]);
    let coeffs = rand_tensor(rng, &[1, c1, 6, 6]);

    let mut leaves = param_leaves(&model);
    let np = leaves.len();
    leaves.push(f_l.clone());
    leaves.push(f_h.clone());
    let err = fd_max_err(&leaves, Some(4), rng, &|t, ids| {
        let pids = &ids[..np];
        let y = model.dem_forward(t, pids, 1, ids[np], ids[np + 1]).unwrap();
        weighted_sum(t, y, &coeffs)
    });
    out.push(CheckResult { name: "dem_forward graph".into(), max_err: err, tol: GRAPH_TOL });

    let err = fd_max_err(&leaves, Some(4), rng, &|t, ids| {
        let pids = &ids[..np];
        let y = model.sem_forward(t, pids, 1, ids[np], ids[np + 1]).unwrap();
        weighted_sum(t, y, &coeffs)
    });
    out.push(CheckResult { name: "sem_forward graph".into(), max_err: err, tol: GRAPH_TOL });

    // full forward + adaptive loss, probing a parameter subset
    for variant in [Variant::Full, Variant::Baseline] {
        let model = Model::new(tiny_config(variant, rng.gen())).unwrap();
        let np = model.params.len();
        let image = rand_tensor(rng, &[1, 1, 16, 16]);
        let gt = rand_mask(rng, &[1, 1, 16, 16]);
        let mut leaves = param_leaves(&model);
        leaves.push(image);
        let err = fd_max_err(&leaves, Some(3), rng, &|t, ids| {
            let signals = model.forward(t, &ids[..np], ids[np]).unwrap();
            let (loss, _, _) = supervision::total_loss(t, &signals, &gt, Mode::PlusMaxScaling).unwrap();
            loss
        });
        out.push(CheckResult {
            name: format!("forward+total_loss ({})", variant.as_str()),
            max_err: err,
            tol: GRAPH_TOL,
        });
    }
}

/// The whole suite: per-op checks repeated over several random draws, then
/// the composite-graph checks.
pub fn run_all(seed: u64, op_rounds: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..op_rounds.max(1) {
        op_checks(&mut rng, &mut out);
    }
    model_checks(&mut rng, &mut out);
    out
}
