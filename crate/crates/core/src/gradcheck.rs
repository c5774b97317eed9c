//! Central finite-difference gradient verification (f64).
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of every backward rule it checks.

use alloc::vec::Vec;

use num_traits::Float;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Step used for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>();
    let na = a.iter().map(|x| x * x).sum::<f64>();
    let nb = b.iter().map(|x| x * x).sum::<f64>();
    let (diff, na, nb) = (Float::sqrt(diff), Float::sqrt(na), Float::sqrt(nb));
    let denom = na.max(nb);
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}

/// Reduces `out` to a scalar with fixed random weights so that a single
/// gradient check exercises the whole Jacobian of a non-scalar output.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = SeededRng::with_stream(seed, 0xfd);
    let weights: Vec<f64> = (0..tape.value(out).numel())
        .map(|_| rng.uniform_in(-1.0, 1.0))
        .collect();
    let w = tape.constant(Tensor::new(shape, weights)?);
    let prod = tape.hadamard(out, w)?;
    Ok(tape.sum(prod))
}

fn scalar_of(tape: &Tape<f64>, loss: Var) -> Result<f64> {
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(Error::Contract("gradient check needs a scalar loss".into()));
    }
    Ok(v.data()[0])
}

/// Checks gradients with respect to every element of `inputs`.
///
/// `f` receives the leaves (one per input) and must return a scalar loss.
/// Returns the relative error per input.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        scalar_of(&tape, loss)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut errors = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.wrt(*var) {
            Some(g) => g.to_vec(),
            None => alloc::vec![0.0; inputs[idx].numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..inputs[idx].numel() {
            let orig = inputs[idx].data()[k];
            work[idx].data_mut()[k] = orig + step;
            let up = eval(&work)?;
            work[idx].data_mut()[k] = orig - step;
            let down = eval(&work)?;
            work[idx].data_mut()[k] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(errors)
}

/// Per-parameter result of [`check_params`].
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: alloc::string::String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl ParamCheck {
    pub fn relative_error(&self) -> f64 {
        relative_error(&self.analytic, &self.numeric)
    }
}

/// Checks parameter gradients of `f`, probing up to `per_param` randomly
/// chosen elements of each parameter.
pub fn check_params<F>(
    store: &ParamStore<f64>,
    step: f64,
    per_param: usize,
    seed: u64,
    f: F,
) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;

    let mut rng = SeededRng::with_stream(seed, 0x9c);
    let mut work = store.clone();
    let mut out = Vec::new();
    let ids: Vec<ParamId> = store.param_ids().collect();
    for id in ids {
        let numel = store.param(id).numel();
        let picks: Vec<usize> = if numel <= per_param {
            (0..numel).collect()
        } else {
            (0..per_param).map(|_| rng.below(numel)).collect()
        };
        let full = grads.param(id);
        let mut analytic = Vec::with_capacity(picks.len());
        let mut numeric = Vec::with_capacity(picks.len());
        for &k in &picks {
            analytic.push(full.map_or(0.0, |g| g[k]));
            let orig = store.param(id).data()[k];
            work.param_mut(id).data_mut()[k] = orig + step;
            let up = {
                let mut t = Tape::new();
                let l = f(&mut t, &work)?;
                scalar_of(&t, l)?
            };
            work.param_mut(id).data_mut()[k] = orig - step;
            let down = {
                let mut t = Tape::new();
                let l = f(&mut t, &work)?;
                scalar_of(&t, l)?
            };
            work.param_mut(id).data_mut()[k] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
        out.push(ParamCheck {
            name: store.param_name(id).into(),
            analytic,
            numeric,
        });
    }
    Ok(out)
}

fn rand_tensor(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).expect("shape matches data")
}

fn dim(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Worst relative error of one op over its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub error: f64,
}

type ScalarFn<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Runs a projected finite-difference check of every differentiable tape op
/// on random shapes drawn from `seed`.
pub fn op_sweep(seed: u64) -> Result<Vec<OpCheck>> {
    use crate::autodiff::{BatchNormRunning, ConvSpec, Mode};

    let mut out = Vec::new();
    let mut check = |op: &'static str, inputs: &[Tensor<f64>], f: &ScalarFn<'_>| {
        let errs = check_inputs(inputs, DEFAULT_STEP, |t, v| {
            let y = f(t, v)?;
            project(t, y, seed)
        })?;
        out.push(OpCheck {
            op,
            error: errs.into_iter().fold(0.0, f64::max),
        });
        Ok::<(), Error>(())
    };
    let mut rng = SeededRng::with_stream(seed, 0x0b);

    let shape = [dim(&mut rng, 1, 4), dim(&mut rng, 1, 5), dim(&mut rng, 2, 4)];
    let a = rand_tensor(&mut rng, &shape);
    let b = rand_tensor(&mut rng, &shape);
    let ab = [a.clone(), b.clone()];
    let one = [a.clone()];
    check("add", &ab, &|t, v| t.add(v[0], v[1]))?;
    check("sub", &ab, &|t, v| t.sub(v[0], v[1]))?;
    check("hadamard", &ab, &|t, v| t.hadamard(v[0], v[1]))?;
    check("scale", &one, &|t, v| Ok(t.scale(v[0], -1.7)))?;
    check("relu", &one, &|t, v| Ok(t.relu(v[0])))?;
    check("sigmoid", &one, &|t, v| Ok(t.sigmoid(v[0])))?;
    check("sum", &one, &|t, v| Ok(t.sum(v[0])))?;
    for axis in 0..3 {
        check("softmax", &one, &|t, v| t.softmax(v[0], axis))?;
        check("mean_axis", &one, &|t, v| t.mean_axis(v[0], axis))?;
        check("max_axis", &one, &|t, v| t.max_axis(v[0], axis))?;
    }
    check("dropout", &one, &|t, v| {
        let mut r = SeededRng::new(seed + 100);
        t.dropout(v[0], 0.3, &mut Mode::Train(&mut r))
    })?;

    let (bt, m, n) = (dim(&mut rng, 1, 3), dim(&mut rng, 2, 5), dim(&mut rng, 2, 5));
    let x = rand_tensor(&mut rng, &[bt, m, n]);
    let c = rand_tensor(&mut rng, &[bt, 3, n]);
    check("reshape", std::slice::from_ref(&x), &|t, v| t.reshape(v[0], &[bt * m, n]))?;
    check("transpose", std::slice::from_ref(&x), &|t, v| t.transpose(v[0]))?;
    check("narrow", std::slice::from_ref(&x), &|t, v| t.narrow(v[0], 1, 1, m - 1))?;
    check("concat", &[x.clone(), c], &|t, v| t.concat(&[v[0], v[1]], 1))?;

    let k = dim(&mut rng, 1, 5);
    let p = dim(&mut rng, 1, 4);
    let lhs = rand_tensor(&mut rng, &[bt, m, k]);
    let rhs = rand_tensor(&mut rng, &[bt, k, p]);
    check("matmul", &[lhs.clone(), rhs], &|t, v| t.matmul(v[0], v[1]))?;
    let w = rand_tensor(&mut rng, &[p, k]);
    let bias = rand_tensor(&mut rng, &[p]);
    check("linear", &[lhs, w, bias], &|t, v| t.linear(v[0], v[1], Some(v[2])))?;

    let (ni, ci, co) = (dim(&mut rng, 1, 2), dim(&mut rng, 1, 3), dim(&mut rng, 1, 3));
    let (h, wd) = (dim(&mut rng, 4, 7), dim(&mut rng, 4, 7));
    let img = rand_tensor(&mut rng, &[ni, ci, h, wd]);
    let kern = rand_tensor(&mut rng, &[co, ci, 3, 3]);
    let cb = rand_tensor(&mut rng, &[co]);
    check("conv2d", &[img.clone(), kern, cb], &|t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), ConvSpec { stride: 1, padding: 1 })
    })?;
    check("max_pool2d", std::slice::from_ref(&img), &|t, v| t.max_pool2d(v[0], 2))?;
    check("global_avg_pool", &[img], &|t, v| t.global_avg_pool(v[0]))?;

    let (nb, cn) = (dim(&mut rng, 2, 3), dim(&mut rng, 1, 3));
    let bx = rand_tensor(&mut rng, &[nb, cn, 3, 2]);
    let gamma = rand_tensor(&mut rng, &[cn]);
    let beta = rand_tensor(&mut rng, &[cn]);
    let mean: Vec<f64> = (0..cn).map(|_| rng.uniform_in(-0.5, 0.5)).collect();
    let var: Vec<f64> = (0..cn).map(|_| rng.uniform_in(0.5, 2.0)).collect();
    for (op, training) in [("batch_norm_train", true), ("batch_norm_eval", false)] {
        check(op, &[bx.clone(), gamma.clone(), beta.clone()], &|t, v| {
            let running = BatchNormRunning { mean: &mean, var: &var, ids: None };
            t.batch_norm(v[0], v[1], v[2], running, training, 1e-5)
        })?;
    }

    let (gb, gn, gd) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 5), dim(&mut rng, 1, 6));
    let ah = rand_tensor(&mut rng, &[gb, gn, gd]);
    let bh = rand_tensor(&mut rng, &[gb, gn, gd]);
    let vh = rand_tensor(&mut rng, &[gb, gn, gd]);
    check("edge_gate_mean", &[ah.clone(), bh, vh], &|t, v| t.edge_gate_mean(v[0], v[1], v[2]))?;
    let nw = rand_tensor(&mut rng, &[gn, gd]);
    let nbias = rand_tensor(&mut rng, &[gn]);
    check("node_dot", &[ah, nw, nbias], &|t, v| t.node_dot(v[0], v[1], v[2]))?;

    let len = dim(&mut rng, 1, 12);
    let probs = Tensor::new([len], (0..len).map(|_| rng.uniform_in(0.05, 0.95)).collect())?;
    let y: Vec<f64> = (0..len).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
    let target: Vec<f64> = (0..len).map(|_| rng.uniform_in(1.0, 10.0)).collect();
    check("bce_mean", std::slice::from_ref(&probs), &|t, v| t.bce_mean(v[0], &y, 1e-7))?;
    check("mse", &[probs], &|t, v| t.mse(v[0], &target))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_covers_every_op_within_tolerance() {
        let checks = op_sweep(3).unwrap();
        assert!(checks.len() >= 30);
        for c in &checks {
            assert!(c.error <= 1e-4, "{} {}", c.op, c.error);
        }
    }
}
