//! Central-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::Array;
use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// A primitive together with its non-differentiable attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Matmul,
    MatmulNt,
    Add,
    Mul,
    Scale(f64),
    Relu,
    Concat {
        axis: usize,
    },
    SoftmaxLastDim,
    /// inputs: x, kernel, bias
    Conv2d {
        stride: usize,
        pad: usize,
    },
    AdaptiveAvgPool {
        out_h: usize,
        out_w: usize,
    },
    UpsampleNearest {
        factor: usize,
    },
    MaxPool2,
    /// inputs: x, weight, bias
    Linear,
    BroadcastExpand {
        shape: Vec<usize>,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Sum,
    CrossEntropyPixels {
        targets: Vec<usize>,
    },
    CrossEntropyDist {
        target: Array<f64>,
    },
    MaskedFill {
        mask: Vec<bool>,
        value: f64,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::MatmulNt => "matmul_nt",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Relu => "relu",
            OpKind::Concat { .. } => "concat",
            OpKind::SoftmaxLastDim => "softmax_lastdim",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::AdaptiveAvgPool { .. } => "adaptive_avgpool",
            OpKind::UpsampleNearest { .. } => "upsample_nearest",
            OpKind::MaxPool2 => "max_pool2",
            OpKind::Linear => "linear",
            OpKind::BroadcastExpand { .. } => "broadcast_expand",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Sum => "sum",
            OpKind::CrossEntropyPixels { .. } => "cross_entropy_pixels",
            OpKind::CrossEntropyDist { .. } => "cross_entropy_dist",
            OpKind::MaskedFill { .. } => "masked_fill",
        }
    }
}

impl Graph<'_, f64> {
    /// Dispatches `kind` over already-recorded inputs.
    pub fn apply(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::shape(
                    kind.name(),
                    format!("expected {n} inputs, got {}", inputs.len()),
                ))
            }
        };
        match kind {
            OpKind::Matmul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::MatmulNt => {
                arity(2)?;
                self.matmul_nt(inputs[0], inputs[1])
            }
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Scale(s) => {
                arity(1)?;
                Ok(self.scale(inputs[0], *s))
            }
            OpKind::Relu => {
                arity(1)?;
                Ok(self.relu(inputs[0]))
            }
            OpKind::Concat { axis } => self.concat(inputs, *axis),
            OpKind::SoftmaxLastDim => {
                arity(1)?;
                self.softmax(inputs[0])
            }
            OpKind::Conv2d { stride, pad } => {
                if inputs.len() != 2 && inputs.len() != 3 {
                    arity(3)?;
                }
                self.conv2d(inputs[0], inputs[1], inputs.get(2).copied(), *stride, *pad)
            }
            OpKind::AdaptiveAvgPool { out_h, out_w } => {
                arity(1)?;
                self.adaptive_avg_pool(inputs[0], *out_h, *out_w)
            }
            OpKind::UpsampleNearest { factor } => {
                arity(1)?;
                self.upsample_nearest(inputs[0], *factor)
            }
            OpKind::MaxPool2 => {
                arity(1)?;
                self.max_pool2(inputs[0])
            }
            OpKind::Linear => {
                if inputs.len() != 2 && inputs.len() != 3 {
                    arity(3)?;
                }
                self.linear(inputs[0], inputs[1], inputs.get(2).copied())
            }
            OpKind::BroadcastExpand { shape } => {
                arity(1)?;
                self.broadcast_expand(inputs[0], shape)
            }
            OpKind::Reshape { shape } => {
                arity(1)?;
                self.reshape(inputs[0], shape)
            }
            OpKind::Sum => {
                arity(1)?;
                Ok(self.sum(inputs[0]))
            }
            OpKind::CrossEntropyPixels { targets } => {
                arity(1)?;
                self.cross_entropy_pixels(inputs[0], targets)
            }
            OpKind::CrossEntropyDist { target } => {
                arity(1)?;
                self.cross_entropy_dist(inputs[0], target)
            }
            OpKind::MaskedFill { mask, value } => {
                arity(1)?;
                self.masked_fill(inputs[0], mask, *value)
            }
        }
    }
}

/// Worst coordinate found by [`grad_check_report`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Max relative error between analytic and central-difference gradients of a
/// scalar function of parameters, over every coordinate of every parameter.
///
/// The relative error per coordinate is `|analytic - numeric| / (|analytic| + 1e-12)`.
pub fn grad_check_fn<F>(store: &ParamStore<f64>, eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    grad_check_report(store, eps, f).map(|r| r.max_rel_error)
}

/// [`grad_check_fn`] with the location of the worst coordinate.
pub fn grad_check_report<F>(store: &ParamStore<f64>, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let mut probe = store.clone();
    let mut worst = GradCheckReport::default();
    for id in store.ids() {
        for idx in 0..store.get(id).len() {
            let orig = store.get(id).data()[idx];
            probe.get_mut(id).data_mut()[idx] = orig + eps;
            let plus = eval_scalar(&probe, &f)?;
            probe.get_mut(id).data_mut()[idx] = orig - eps;
            let minus = eval_scalar(&probe, &f)?;
            probe.get_mut(id).data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).data()[idx];
            let rel = (a - numeric).abs() / (a.abs() + 1e-12);
            if rel > worst.max_rel_error || worst.param.is_empty() {
                worst = GradCheckReport {
                    max_rel_error: rel,
                    param: store.name(id).to_string(),
                    index: idx,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}

fn eval_scalar<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::no_grad(store);
    let v = f(&mut g)?;
    Ok(g.value(v).item())
}

/// Gradient check of a single primitive. Non-scalar outputs are reduced by
/// a fixed random projection so every output coordinate contributes.
pub fn grad_check(kind: &OpKind, inputs: &[Array<f64>], eps: f64) -> Result<f64> {
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, a)| store.add(format!("in{i}"), a.clone()))
        .collect();
    let probe_shape = {
        let mut g = Graph::no_grad(&store);
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let out = g.apply(kind, &vars)?;
        g.shape(out).to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let n: usize = probe_shape.iter().product();
    let weights = Array::from_vec(
        &probe_shape,
        (0..n)
            .map(|_| rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
            .collect(),
    )?;
    grad_check_fn(&store, eps, |g| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let out = g.apply(kind, &vars)?;
        let w = g.input(weights.clone());
        let prod = g.mul(out, w)?;
        Ok(g.sum(prod))
    })
}

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    let n: usize = shape.iter().product();
    Array::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, so a small perturbation never crosses a
/// ReLU kink.
fn kink_free_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    random_array(rng, shape).map(|x| if x >= 0.0 { x + 0.1 } else { x - 0.1 })
}

/// Distinct values at least 1e-2 apart, so max-pool winners are stable under
/// perturbation.
fn spaced_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let data = order
        .iter()
        .map(|&r| r as f64 * 0.02 - 1.0 + rng.gen_range(0.0..0.005))
        .collect();
    Array::from_vec(shape, data).unwrap()
}

fn random_simplex(rng: &mut ChaCha8Rng, rows: usize, cols: usize, floor: f64) -> Array<f64> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| rng.gen_range(floor..1.0)).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|x| x / s));
    }
    Array::from_vec(&[rows, cols], data).unwrap()
}

/// One randomly shaped instance of every primitive, drawn from `seed`.
pub fn primitive_cases(seed: u64) -> Vec<(OpKind, Vec<Array<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = |lo: usize, hi: usize| rng.gen_range(lo..=hi);
    let (m, k, n, b) = (d(1, 5), d(1, 5), d(1, 5), d(1, 3));
    let (c_in, c_out, hw, rows) = (d(1, 3), d(1, 3), d(3, 6), d(1, 4));
    let cls = d(2, 5);
    let kernel = if d(0, 1) == 0 { 1 } else { 3 };
    let stride = d(1, 2);
    let pad = if kernel == 3 { d(0, 1) } else { 0 };
    let factor = d(1, 3);
    let (oh, ow) = (d(1, hw), d(1, hw));
    let concat_axis = d(0, 2);
    let mut widths = [d(1, 3), d(1, 3), d(1, 3)];
    let expand_from = d(0, 2);
    let target_ids: Vec<usize> = (0..rows * hw * hw).map(|_| d(0, cls - 1)).collect();
    let mask_bits: Vec<bool> = (0..rows * cls).map(|_| d(0, 1) == 1).collect();

    let r = &mut rng;
    let mut cases = Vec::new();
    cases.push((
        OpKind::Matmul,
        vec![random_array(r, &[m, k]), random_array(r, &[k, n])],
    ));
    cases.push((
        OpKind::Matmul,
        vec![random_array(r, &[b, m, k]), random_array(r, &[b, k, n])],
    ));
    cases.push((
        OpKind::MatmulNt,
        vec![random_array(r, &[b, m, k]), random_array(r, &[b, n, k])],
    ));
    cases.push((
        OpKind::Add,
        vec![random_array(r, &[m, n]), random_array(r, &[m, n])],
    ));
    cases.push((
        OpKind::Mul,
        vec![random_array(r, &[m, n]), random_array(r, &[m, n])],
    ));
    cases.push((
        OpKind::Scale(r.gen_range(-2.0..2.0)),
        vec![random_array(r, &[m, n])],
    ));
    cases.push((OpKind::Relu, vec![kink_free_array(r, &[b, m, n])]));
    let concat_inputs = widths
        .iter_mut()
        .map(|w| {
            let mut shape = vec![2, 3, 2];
            shape[concat_axis] = *w;
            random_array(r, &shape)
        })
        .collect();
    cases.push((OpKind::Concat { axis: concat_axis }, concat_inputs));
    cases.push((OpKind::SoftmaxLastDim, vec![random_array(r, &[rows, cls])]));
    cases.push((
        OpKind::Conv2d { stride, pad },
        vec![
            random_array(r, &[2, c_in, hw, hw]),
            random_array(r, &[c_out, c_in, kernel, kernel]),
            random_array(r, &[c_out]),
        ],
    ));
    cases.push((
        OpKind::AdaptiveAvgPool {
            out_h: oh,
            out_w: ow,
        },
        vec![random_array(r, &[2, c_in, hw, hw])],
    ));
    cases.push((
        OpKind::UpsampleNearest { factor },
        vec![random_array(r, &[1, c_in, 3, 2])],
    ));
    cases.push((OpKind::MaxPool2, vec![spaced_array(r, &[2, c_in, 4, 6])]));
    cases.push((
        OpKind::Linear,
        vec![
            random_array(r, &[b, m, k]),
            random_array(r, &[k, n]),
            random_array(r, &[n]),
        ],
    ));
    let mut small = vec![b, m, 3];
    let full = small.clone();
    small[expand_from] = 1;
    cases.push((
        OpKind::BroadcastExpand { shape: full },
        vec![random_array(r, &small)],
    ));
    cases.push((
        OpKind::Reshape { shape: vec![m * n] },
        vec![random_array(r, &[m, n])],
    ));
    cases.push((OpKind::Sum, vec![random_array(r, &[m, k])]));
    cases.push((
        OpKind::CrossEntropyPixels {
            targets: target_ids,
        },
        vec![random_array(r, &[rows, cls, hw, hw])],
    ));
    let target = random_simplex(r, rows, cls, 0.0);
    cases.push((
        OpKind::CrossEntropyDist { target },
        vec![random_simplex(r, rows, cls, 0.05)],
    ));
    cases.push((
        OpKind::MaskedFill {
            mask: mask_bits,
            value: -3.0,
        },
        vec![random_array(r, &[rows, cls])],
    ));
    cases
}
