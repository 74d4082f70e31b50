//! Central finite-difference checks of every differentiable op at 64-bit
//! precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::graph::{layer_norm_backward, Graph, Var};
use super::param::ParamStore;
use crate::compression::Codec;
use crate::error::Result;
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Maximum accepted relative error.
pub const TOLERANCE: f64 = 1e-5;
/// Denominator floor so near-zero gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-4;

type Forward = Box<dyn Fn(&mut Graph<f64>, &[Var], &ParamStore<f64>) -> Result<Var>>;

/// One random instance: leaf inputs, parameters and the op under test.
pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    pub params: ParamStore<f64>,
    pub forward: Forward,
}

/// A named generator of random cases for one op.
pub struct OpCheck {
    pub name: &'static str,
    pub make: fn(&mut ChaCha8Rng) -> Case,
}

/// Worst error observed for one op.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=4)
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Scalar objective `sum(out * weights)` for a fixed random weighting.
fn objective(
    case: &Case,
    inputs: &[Tensor<f64>],
    params: &ParamStore<f64>,
    weights: &Tensor<f64>,
) -> Result<f64> {
    let mut g = Graph::inference();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (case.forward)(&mut g, &leaves, params)?;
    Ok(g.value(out)
        .data()
        .iter()
        .zip(weights.data())
        .map(|(a, b)| a * b)
        .sum())
}

/// Max relative error between analytic and numeric gradients for one case.
pub fn check_case(case: &Case, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut params = case.params.clone();
    params.zero_grad();
    let mut g = Graph::new();
    let leaves: Vec<Var> = case.inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (case.forward)(&mut g, &leaves, &params)?;
    let weights = randn(rng, g.value(out).shape());
    let w = g.input(weights.clone());
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod);
    g.backward(loss, &mut params)?;

    let mut worst = 0.0f64;
    for (k, leaf) in leaves.iter().enumerate() {
        let Some(analytic) = g.grad(*leaf) else {
            continue;
        };
        for i in 0..case.inputs[k].numel() {
            let mut inputs = case.inputs.clone();
            inputs[k].data_mut()[i] += STEP;
            let up = objective(case, &inputs, &case.params, &weights)?;
            inputs[k].data_mut()[i] -= 2.0 * STEP;
            let down = objective(case, &inputs, &case.params, &weights)?;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    for (id, p) in params.iter() {
        let Some(analytic) = p.tensor.grad() else {
            continue;
        };
        for (i, &a) in analytic.iter().enumerate() {
            let mut perturbed = case.params.clone();
            perturbed.get_mut(id).tensor.data_mut()[i] += STEP;
            let up = objective(case, &case.inputs, &perturbed, &weights)?;
            perturbed.get_mut(id).tensor.data_mut()[i] -= 2.0 * STEP;
            let down = objective(case, &case.inputs, &perturbed, &weights)?;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

/// Runs `instances` seeded cases of each check.
pub fn run_suite(checks: &[OpCheck], instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    checks
        .iter()
        .enumerate()
        .map(|(k, check)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64 + 1) << 32));
            let mut max_rel_err = 0.0f64;
            for _ in 0..instances {
                let case = (check.make)(&mut rng);
                max_rel_err = max_rel_err.max(check_case(&case, &mut rng)?);
            }
            Ok(CheckReport {
                name: check.name,
                instances,
                max_rel_err,
            })
        })
        .collect()
}

fn case(inputs: Vec<Tensor<f64>>, params: ParamStore<f64>, forward: Forward) -> Case {
    Case {
        inputs,
        params,
        forward,
    }
}

/// Every differentiable op, including the active LayerNorm backward.
pub fn standard_checks() -> Vec<OpCheck> {
    vec![
        OpCheck {
            name: "add",
            make: |rng| {
                let (a, b) = (dim(rng), dim(rng));
                let lhs = randn(rng, &[a, b]);
                let rhs = if rng.random_bool(0.5) {
                    randn(rng, &[b])
                } else {
                    randn(rng, &[a, b])
                };
                case(
                    vec![lhs, rhs],
                    ParamStore::new(),
                    Box::new(|g, v, _| g.add(v[0], v[1])),
                )
            },
        },
        OpCheck {
            name: "mul",
            make: |rng| {
                let shape = [dim(rng), dim(rng)];
                let inputs = vec![randn(rng, &shape), randn(rng, &shape)];
                case(
                    inputs,
                    ParamStore::new(),
                    Box::new(|g, v, _| g.mul(v[0], v[1])),
                )
            },
        },
        OpCheck {
            name: "scale",
            make: |rng| {
                let x = {
                    let s = [dim(rng), dim(rng)];
                    randn(rng, &s)
                };
                let f: f64 = rng.random_range(-2.0..2.0);
                case(
                    vec![x],
                    ParamStore::new(),
                    Box::new(move |g, v, _| Ok(g.scale(v[0], f))),
                )
            },
        },
        OpCheck {
            name: "sum",
            make: |rng| {
                let x = {
                    let s = [dim(rng), dim(rng), dim(rng)];
                    randn(rng, &s)
                };
                case(
                    vec![x],
                    ParamStore::new(),
                    Box::new(|g, v, _| Ok(g.sum(v[0]))),
                )
            },
        },
        OpCheck {
            name: "matmul",
            make: |rng| {
                let (b, m, k, n) = (dim(rng), dim(rng), dim(rng), dim(rng));
                let a = randn(rng, &[b, m, k]);
                let rhs = if rng.random_bool(0.5) {
                    randn(rng, &[k, n])
                } else {
                    randn(rng, &[b, k, n])
                };
                case(
                    vec![a, rhs],
                    ParamStore::new(),
                    Box::new(|g, v, _| g.matmul(v[0], v[1])),
                )
            },
        },
        OpCheck {
            name: "transpose",
            make: |rng| {
                let x = {
                    let s = [dim(rng), dim(rng), dim(rng)];
                    randn(rng, &s)
                };
                case(
                    vec![x],
                    ParamStore::new(),
                    Box::new(|g, v, _| g.transpose(v[0])),
                )
            },
        },
        OpCheck {
            name: "permute",
            make: |rng| {
                let x = {
                    let s = [dim(rng), dim(rng), dim(rng), dim(rng)];
                    randn(rng, &s)
                };
                case(
                    vec![x],
                    ParamStore::new(),
                    Box::new(|g, v, _| g.permute(v[0], &[0, 2, 1, 3])),
                )
            },
        },
        OpCheck {
            name: "reshape",
            make: |rng| {
                let (a, b) = (dim(rng), dim(rng));
                let x = randn(rng, &[a, b, 2]);
                case(
                    vec![x],
                    ParamStore::new(),
                    Box::new(move |g, v, _| g.reshape(v[0], &[2 * b, a])),
                )
            },
        },
        OpCheck {
            name: "softmax",
            make: |rng| {
                let x = {
                    let s = [dim(rng), dim(rng) + 1, dim(rng)];
                    randn(rng, &s)
                };
                let axis = rng.random_range(0..3);
                case(
                    vec![x],
                    ParamStore::new(),
                    Box::new(move |g, v, _| g.softmax(v[0], axis, Codec::Raw)),
                )
            },
        },
        OpCheck {
            name: "gelu",
            make: |rng| {
                let x = {
                    let s = [dim(rng), dim(rng)];
                    randn(rng, &s)
                }
                .map(|v| 2.0 * v);
                case(
                    vec![x],
                    ParamStore::new(),
                    Box::new(|g, v, _| g.gelu(v[0], Codec::Raw)),
                )
            },
        },
        OpCheck {
            name: "tanh",
            make: |rng| {
                let x = {
                    let s = [dim(rng), dim(rng)];
                    randn(rng, &s)
                };
                case(vec![x], ParamStore::new(), Box::new(|g, v, _| g.tanh(v[0])))
            },
        },
        OpCheck {
            name: "layer_norm",
            make: |rng| {
                let h = dim(rng) + 1;
                let x = {
                    let s = [dim(rng), dim(rng), h];
                    randn(rng, &s)
                };
                let mut params = ParamStore::new();
                let gamma = params.add("ln.weight", randn(rng, &[h]).map(|v| 1.0 + 0.5 * v), 0);
                let beta = params.add("ln.bias", randn(rng, &[h]), 0);
                case(
                    vec![x],
                    params,
                    Box::new(move |g, v, p| g.layer_norm(v[0], p, gamma, beta, 1e-5, Codec::Raw)),
                )
            },
        },
        OpCheck {
            name: "linear",
            make: |rng| {
                let (din, dout) = (dim(rng), dim(rng));
                let x = {
                    let s = [dim(rng), dim(rng), din];
                    randn(rng, &s)
                };
                let mut params = ParamStore::new();
                let w = params.add("fc.weight", randn(rng, &[din, dout]), 0);
                let b = params.add("fc.bias", randn(rng, &[dout]), 0);
                case(
                    vec![x],
                    params,
                    Box::new(move |g, v, p| g.linear(v[0], p, w, Some(b), Codec::Raw)),
                )
            },
        },
        OpCheck {
            name: "linear_frozen",
            make: |rng| {
                let (din, dout) = (dim(rng), dim(rng));
                let x = {
                    let s = [dim(rng), din];
                    randn(rng, &s)
                };
                let mut params = ParamStore::new();
                let w = params.add("fc.weight", randn(rng, &[din, dout]), 0);
                let b = params.add("fc.bias", randn(rng, &[dout]), 0);
                params.set_layer_enabled(0, false).expect("layer 0 exists");
                Case {
                    inputs: vec![x],
                    params,
                    forward: Box::new(move |g, v, p| g.linear(v[0], p, w, Some(b), Codec::Raw)),
                }
            },
        },
        OpCheck {
            name: "embedding",
            make: |rng| {
                let (rows, h) = (dim(rng) + 1, dim(rng));
                let (b, t) = (dim(rng), dim(rng));
                let ids: Vec<u32> = (0..b * t)
                    .map(|_| rng.random_range(0..rows as u32))
                    .collect();
                let mut params = ParamStore::new();
                let table = params.add("emb.weight", randn(rng, &[rows, h]), 0);
                case(
                    vec![],
                    params,
                    Box::new(move |g, _, p| g.embedding(&ids, &[b, t], p, table)),
                )
            },
        },
        OpCheck {
            name: "select_token",
            make: |rng| {
                let t = dim(rng);
                let x = {
                    let s = [dim(rng), t, dim(rng)];
                    randn(rng, &s)
                };
                let index = rng.random_range(0..t);
                case(
                    vec![x],
                    ParamStore::new(),
                    Box::new(move |g, v, _| g.select_token(v[0], index)),
                )
            },
        },
        OpCheck {
            name: "key_mask",
            make: |rng| {
                let (b, tk) = (dim(rng), dim(rng) + 1);
                let x = {
                    let s = [b, dim(rng), dim(rng), tk];
                    randn(rng, &s)
                };
                let keep: Vec<bool> = (0..b * tk)
                    .map(|i| i % tk == 0 || rng.random_bool(0.7))
                    .collect();
                case(
                    vec![x],
                    ParamStore::new(),
                    Box::new(move |g, v, _| {
                        let masked = g.key_mask(v[0], &keep)?;
                        g.softmax(masked, 3, Codec::Raw)
                    }),
                )
            },
        },
        OpCheck {
            name: "cross_entropy",
            make: |rng| {
                let (b, c) = (dim(rng), dim(rng) + 1);
                let x = randn(rng, &[b, c]);
                let labels: Vec<u32> = (0..b).map(|_| rng.random_range(0..c as u32)).collect();
                case(
                    vec![x],
                    ParamStore::new(),
                    Box::new(move |g, v, _| g.cross_entropy(v[0], &labels)),
                )
            },
        },
    ]
}

/// A LayerNorm whose backward omits the `normed * sum(g * normed)` term.
/// Used to confirm the checker detects a broken rule.
pub fn corrupted_layer_norm_check() -> OpCheck {
    OpCheck {
        name: "layer_norm_corrupted",
        make: |rng| {
            let h = dim(rng) + 2;
            let x = {
                let s = [dim(rng), h];
                randn(rng, &s)
            };
            case(
                vec![x],
                ParamStore::new(),
                Box::new(move |g, v, _| {
                    let x = g.value(v[0]).clone();
                    let rows = x.numel() / h;
                    let mut normed = vec![0.0; x.numel()];
                    let mut inv_std = vec![0.0; rows];
                    for (r, row) in x.data().chunks(h).enumerate() {
                        let mean = row.iter().sum::<f64>() / h as f64;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / h as f64;
                        inv_std[r] = 1.0 / (var + 1e-5).sqrt();
                        for j in 0..h {
                            normed[r * h + j] = (row[j] - mean) * inv_std[r];
                        }
                    }
                    let value = Tensor::new(x.shape().to_vec(), normed.clone())?;
                    let gamma = vec![1.0; h];
                    Ok(g.custom(&[v[0]], value, move |dy| {
                        let zeros = vec![0.0; normed.len()];
                        let (dx, _, _) =
                            layer_norm_backward(dy.data(), &zeros, &inv_std, &gamma, h, false);
                        vec![Some(
                            Tensor::new(dy.shape().to_vec(), dx).expect("same shape"),
                        )]
                    }))
                }),
            )
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for report in run_suite(&standard_checks(), 20, 7).unwrap() {
            assert!(
                report.passed(),
                "{} rel err {:e}",
                report.name,
                report.max_rel_err
            );
        }
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let reports = run_suite(&[corrupted_layer_norm_check()], 5, 1).unwrap();
        assert!(!reports[0].passed());
    }
}
