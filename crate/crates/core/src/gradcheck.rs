//! Central finite-difference checks of every primitive, layer and the
//! composite network, used by the `gradcheck` command and the test suite.
//!
//! Each check reduces the op's output to a scalar through a fixed random
//! projection, then compares reverse-mode gradients of every input with
//! `(f(x + ε) − f(x − ε)) / 2ε`. Large inputs are spot-checked on a seeded
//! subset of coordinates.

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{DropoutLayer, Mode};
use crate::model::{ForwardOptions, Model, ModelConfig};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::train::{loss, LossKind};

pub const FD_EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
const MAX_COORDS: usize = 48;

/// `|analytic − fd| / max(1, |fd|)`.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

type BuildFn<'a> = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'a;

fn normal(shape: &[usize], r: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(r)).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

fn coords(len: usize, r: &mut Rng) -> Vec<usize> {
    if len <= MAX_COORDS {
        (0..len).collect()
    } else {
        sample(r, len, MAX_COORDS).into_vec()
    }
}

/// Projects `y` onto a fixed random tensor to get a scalar.
fn project(g: &mut Graph, y: NodeId, proj: &Tensor) -> Result<NodeId> {
    let p = g.constant(proj.clone());
    let prod = g.mul(y, p)?;
    let m = g.reduce_mean(prod);
    g.mul_scalar(m, proj.len() as f64)
}

/// Max relative error between analytic and numeric gradients of `build`
/// with respect to every input. Coordinates whose ±ε evaluations straddle a
/// kink are skipped, as in [`check_model`].
pub fn check_op(inputs: &[Tensor], build: &BuildFn, seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, &[0x6c]);
    let eval = |xs: &[Tensor], proj: Option<&Tensor>| -> Result<(Graph, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let y = build(&mut g, &ids)?;
        let out = match proj {
            Some(p) => project(&mut g, y, p)?,
            None => y,
        };
        Ok((g, ids, out))
    };
    let (g0, _, y0) = eval(inputs, None)?;
    let proj = if g0.value(y0).is_scalar() {
        Tensor::from_vec(g0.shape(y0), vec![1.0])?
    } else {
        normal(g0.shape(y0), &mut r)
    };
    let (g, ids, l) = eval(inputs, Some(&proj))?;
    let pattern = g.kink_pattern();
    let grads = g.backward(l)?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, &id) in ids.iter().enumerate() {
        let analytic = grads.get(id).expect("leaf gradient");
        for i in coords(inputs[k].len(), &mut r) {
            let mut xs = inputs.to_vec();
            let mut at = |delta: f64| -> Result<(f64, bool)> {
                xs[k].data_mut()[i] = inputs[k].data()[i] + delta;
                let (g, _, l) = eval(&xs, Some(&proj))?;
                Ok((g.value(l).item(), g.kink_pattern() == pattern))
            };
            let ((hi, same_hi), (lo, same_lo)) = (at(FD_EPSILON)?, at(-FD_EPSILON)?);
            if !(same_hi && same_lo) {
                continue;
            }
            checked += 1;
            worst = worst.max(rel_err(analytic.data()[i], (hi - lo) / (2.0 * FD_EPSILON)));
        }
    }
    if checked == 0 {
        return Err(Error::InvalidConfig("no coordinate away from a kink".into()));
    }
    Ok(worst)
}

/// Same check for a model's parameters through a train-mode forward pass
/// and L1 loss. A coordinate whose ±ε evaluations land on different linear
/// pieces of some ReLU, abs or max-pool has no derivative to compare and is
/// skipped; it is an error if every coordinate is.
pub fn check_model(model: &Model, x: &Tensor, targets: &Tensor, seed: u64) -> Result<f64> {
    let opts = ForwardOptions::train(seed);
    let run = |m: &Model| -> Result<(Graph, NodeId)> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let t = g.constant(targets.clone());
        let out = m.forward_graph(&mut g, xn, &opts)?;
        let l = loss(&mut g, out.output, t, LossKind::L1)?;
        Ok((g, l))
    };
    let (g, l) = run(model)?;
    let pattern = g.kink_pattern();
    let grads = g.backward(l)?.by_name();

    let mut names = Vec::new();
    model.visit_params(&mut |n, t| names.push((n.to_string(), t.len())));
    let mut r = rng::stream(seed, &[0x6d]);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, len) in names {
        for i in coords(len, &mut r) {
            let at = |delta: f64| -> Result<(f64, bool)> {
                let mut m = model.clone();
                m.visit_params_mut(&mut |n, t| {
                    if n == name {
                        t.data_mut()[i] += delta;
                    }
                });
                let (g, l) = run(&m)?;
                Ok((g.value(l).item(), g.kink_pattern() == pattern))
            };
            let ((hi, same_hi), (lo, same_lo)) = (at(FD_EPSILON)?, at(-FD_EPSILON)?);
            if !(same_hi && same_lo) {
                continue;
            }
            checked += 1;
            worst = worst.max(rel_err(grads[&name].data()[i], (hi - lo) / (2.0 * FD_EPSILON)));
        }
    }
    if checked == 0 {
        return Err(Error::InvalidConfig("no coordinate away from a kink".into()));
    }
    Ok(worst)
}

/// A named family of checks; each case draws its own shapes from the seed.
struct Family {
    name: &'static str,
    case: fn(u64) -> Result<f64>,
}

fn dims(r: &mut Rng, lo: usize, hi: usize, n: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(lo..=hi)).collect()
}

fn elementwise(seed: u64, f: fn(&mut Graph, NodeId, NodeId) -> Result<NodeId>) -> Result<f64> {
    let mut r = rng::stream(seed, &[1]);
    let rank = r.random_range(1..=3);
    let s = dims(&mut r, 1, 4, rank);
    check_op(&[normal(&s, &mut r), normal(&s, &mut r)], &|g, x| f(g, x[0], x[1]), seed)
}

fn unary(seed: u64, f: fn(&mut Graph, NodeId) -> Result<NodeId>) -> Result<f64> {
    let mut r = rng::stream(seed, &[2]);
    let rank = r.random_range(1..=4);
    let s = dims(&mut r, 1, 5, rank);
    check_op(&[normal(&s, &mut r)], &|g, x| f(g, x[0]), seed)
}

/// `[B, C, H, W]` conv input plus weight for a valid geometry.
fn conv_case(r: &mut Rng) -> (Tensor, Tensor, Tensor, usize, usize) {
    let (b, cin, cout) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
    let k = [1, 3][r.random_range(0..2)];
    let stride = r.random_range(1..=2);
    let pad = if k == 3 { r.random_range(0..=1) } else { 0 };
    let side = |out: usize| (out - 1) * stride + k - 2 * pad;
    let (h, w) = (side(r.random_range(1..=4)), side(r.random_range(1..=4)));
    (
        normal(&[b, cin, h, w], r),
        normal(&[cout, cin, k, k], r),
        normal(&[cout], r),
        stride,
        pad,
    )
}

fn families() -> Vec<Family> {
    vec![
        Family { name: "add", case: |s| elementwise(s, |g, a, b| g.add(a, b)) },
        Family { name: "sub", case: |s| elementwise(s, |g, a, b| g.sub(a, b)) },
        Family { name: "mul", case: |s| elementwise(s, |g, a, b| g.mul(a, b)) },
        Family { name: "add_scalar", case: |s| unary(s, |g, a| g.add_scalar(a, 1.7)) },
        Family { name: "mul_scalar", case: |s| unary(s, |g, a| g.mul_scalar(a, -2.3)) },
        Family { name: "relu", case: |s| unary(s, |g, a| Ok(g.relu(a))) },
        Family { name: "abs", case: |s| unary(s, |g, a| Ok(g.abs(a))) },
        Family { name: "reduce_mean", case: |s| unary(s, |g, a| Ok(g.reduce_mean(a))) },
        Family {
            name: "reshape",
            case: |s| {
                let mut r = rng::stream(s, &[3]);
                let (a, b, c) = (r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=3));
                check_op(&[normal(&[a, b, c], &mut r)], &|g, x| g.reshape(x[0], &[a * b, c]), s)
            },
        },
        Family {
            name: "matmul",
            case: |s| {
                let mut r = rng::stream(s, &[4]);
                let d = dims(&mut r, 1, 5, 3);
                check_op(&[normal(&[d[0], d[1]], &mut r), normal(&[d[1], d[2]], &mut r)], &|g, x| g.matmul(x[0], x[1]), s)
            },
        },
        Family {
            name: "concat",
            case: |s| {
                let mut r = rng::stream(s, &[5]);
                let (b, h) = (r.random_range(1..=3), r.random_range(1..=3));
                let axis = r.random_range(0..3);
                let mut shapes = vec![vec![b, 2, h]; 3];
                for sh in shapes.iter_mut() {
                    sh[axis] = r.random_range(1..=3);
                }
                let xs: Vec<Tensor> = shapes.iter().map(|sh| normal(sh, &mut r)).collect();
                check_op(&xs, &|g, x| g.concat(x, axis), s)
            },
        },
        Family {
            name: "linear",
            case: |s| {
                let mut r = rng::stream(s, &[6]);
                let d = dims(&mut r, 1, 5, 3);
                let xs = [normal(&[d[0], d[1]], &mut r), normal(&[d[2], d[1]], &mut r), normal(&[d[2]], &mut r)];
                check_op(&xs, &|g, x| g.linear(x[0], x[1], x[2]), s)
            },
        },
        Family {
            name: "conv2d",
            case: |s| {
                let mut r = rng::stream(s, &[7]);
                let (x, w, b, stride, pad) = conv_case(&mut r);
                if s % 2 == 0 {
                    check_op(&[x, w, b], &|g, x| g.conv2d(x[0], x[1], Some(x[2]), stride, pad), s)
                } else {
                    check_op(&[x, w], &|g, x| g.conv2d(x[0], x[1], None, stride, pad), s)
                }
            },
        },
        Family {
            name: "maxpool2d",
            case: |s| {
                let mut r = rng::stream(s, &[8]);
                let (window, stride) = [(2, 2), (3, 1), (2, 1), (3, 2)][r.random_range(0..4)];
                let (oh, ow) = (r.random_range(1..=3), r.random_range(1..=3));
                let shape = [r.random_range(1..=2), r.random_range(1..=3), (oh - 1) * stride + window, (ow - 1) * stride + window];
                check_op(&[normal(&shape, &mut r)], &|g, x| g.maxpool2d(x[0], window, stride), s)
            },
        },
        Family {
            name: "global_avg_pool",
            case: |s| {
                let mut r = rng::stream(s, &[9]);
                let d = dims(&mut r, 1, 4, 4);
                check_op(&[normal(&d, &mut r)], &|g, x| g.global_avg_pool(x[0]), s)
            },
        },
        Family {
            name: "batch_norm_train",
            case: |s| {
                let mut r = rng::stream(s, &[10]);
                let (b, c, h, w) = (r.random_range(2..=3), r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=3));
                let xs = [normal(&[b, c, h, w], &mut r), normal(&[c], &mut r), normal(&[c], &mut r)];
                check_op(&xs, &|g, x| Ok(g.batch_norm(x[0], x[1], x[2], 1e-5, None)?.0), s)
            },
        },
        Family {
            name: "batch_norm_eval",
            case: |s| {
                let mut r = rng::stream(s, &[11]);
                let (b, c) = (r.random_range(1..=3), r.random_range(1..=3));
                let mean: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
                let var: Vec<f64> = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
                let xs = [normal(&[b, c, 2, 3], &mut r), normal(&[c], &mut r), normal(&[c], &mut r)];
                check_op(&xs, &|g, x| Ok(g.batch_norm(x[0], x[1], x[2], 1e-5, Some((&mean, &var)))?.0), s)
            },
        },
        Family {
            name: "dropout",
            case: |s| {
                let mut r = rng::stream(s, &[12]);
                let shape = dims(&mut r, 1, 5, 2);
                let layer = DropoutLayer::new(0.5, Mode::Train, s)?;
                check_op(&[normal(&shape, &mut r)], &|g, x| layer.forward(g, x[0]), s)
            },
        },
        Family {
            name: "loss_l1",
            case: |s| {
                let mut r = rng::stream(s, &[13]);
                let b = r.random_range(1..=6);
                let xs = [normal(&[b, 1], &mut r), normal(&[b, 1], &mut r)];
                check_op(&xs, &|g, x| loss(g, x[0], x[1], LossKind::L1), s)
            },
        },
        Family {
            name: "loss_l2",
            case: |s| {
                let mut r = rng::stream(s, &[14]);
                let b = r.random_range(1..=6);
                let xs = [normal(&[b, 1], &mut r), normal(&[b, 1], &mut r)];
                check_op(&xs, &|g, x| loss(g, x[0], x[1], LossKind::L2), s)
            },
        },
        Family {
            name: "conv_bn_relu_pool_fc_loss",
            case: |s| {
                let mut r = rng::stream(s, &[15]);
                let (b, cin, cout) = (r.random_range(2..=3), r.random_range(1..=2), r.random_range(1..=3));
                let side = 2 * r.random_range(1..=3);
                let hidden = cout * (side / 2) * (side / 2);
                let xs = [
                    normal(&[b, cin, side, side], &mut r),
                    normal(&[cout, cin, 3, 3], &mut r),
                    normal(&[cout], &mut r),
                    normal(&[cout], &mut r),
                    normal(&[1, hidden], &mut r),
                    normal(&[1], &mut r),
                    normal(&[b, 1], &mut r),
                ];
                check_op(
                    &xs,
                    &|g, x| {
                        let h = g.conv2d(x[0], x[1], None, 1, 1)?;
                        let (h, _, _) = g.batch_norm(h, x[2], x[3], 1e-5, None)?;
                        let h = g.relu(h);
                        let h = g.maxpool2d(h, 2, 2)?;
                        let h = g.flatten(h)?;
                        let y = g.linear(h, x[4], x[5])?;
                        loss(g, y, x[6], LossKind::L1)
                    },
                    s,
                )
            },
        },
        Family {
            name: "model",
            case: |s| {
                let mut r = rng::stream(s, &[16]);
                let cfg = ModelConfig {
                    input_size: 32,
                    block_channels: [2, 2, 3, 2, 2],
                    convs_per_block: 1 + (s % 2) as usize,
                    n_units: 4,
                    head_dims: [8, 6],
                    dropout_rate: 0.25,
                    global_pool_connections: s % 3 == 0,
                    ..ModelConfig::default()
                };
                let mut model = Model::build(&cfg, s)?;
                // Zero-initialized biases behind a fully dropped input sit
                // exactly on a ReLU kink, where no derivative exists.
                model.visit_params_mut(&mut |n, t| {
                    if n.ends_with(".bias") || n.ends_with(".beta") {
                        for v in t.data_mut() {
                            let z: f64 = StandardNormal.sample(&mut r);
                            *v += 0.1 * z;
                        }
                    }
                });
                model.set_target_scale(r.random_range(-2.0..2.0), r.random_range(0.5..2.0));
                let b = r.random_range(2..=3);
                check_model(&model, &normal(&[b, 1, 32, 32], &mut r), &normal(&[b, 1], &mut r), s)
            },
        },
    ]
}

/// Runs every family over `cases` seeds.
pub fn run_suite(cases: usize, seed: u64) -> Result<Vec<CheckReport>> {
    families()
        .into_iter()
        .map(|f| {
            let mut worst: f64 = 0.0;
            for c in 0..cases {
                worst = worst.max((f.case)(rng::derive_seed(seed, &[rng::name_key(f.name), c as u64]))?);
            }
            Ok(CheckReport {
                name: f.name,
                cases,
                max_rel_err: worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // A build whose forward disagrees with its recorded backward: the
        // value is x², the tape is that of 3x.
        let err = check_op(
            &[Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap()],
            &|g, x| {
                let y = g.mul_scalar(x[0], 3.0)?;
                let sq = g.value(x[0]).map(|v| v * v - 3.0 * v);
                let c = g.constant(sq);
                g.add(y, c)
            },
            1,
        )
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn every_family_passes_one_case() {
        for r in run_suite(1, 9).unwrap() {
            assert!(r.passed(), "{} rel err {}", r.name, r.max_rel_err);
        }
    }
}
