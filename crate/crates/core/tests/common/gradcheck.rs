//! Central finite-difference gradient oracle, independent of the tape's
//! backward rules: it only ever evaluates forward passes.

#![allow(dead_code)]

use axform_core::{Graph, ParamSet, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-6;

/// Denominator floor of the relative error. Central differences of an O(10)
/// loss carry roundoff near eps * |f| / H ~ 1e-9, so gradients below the
/// floor are compared at an absolute 1e-8 instead.
pub const FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Report {
    pub max_rel: f64,
    pub checked: usize,
}

impl Report {
    pub fn merge(self, o: Report) -> Report {
        Report { max_rel: self.max_rel.max(o.max_rel), checked: self.checked + o.checked }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Contracts a tensor with fixed pseudo-random weights into a scalar, so that
/// every output element contributes to the checked gradient.
pub fn project(g: &mut Graph<'_>, v: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = uniform(&mut rng(seed ^ 0x5eed), &shape, -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

type Build<'a> = dyn Fn(&mut Graph<'_>, &[Var]) -> Result<Var> + 'a;

fn eval(inputs: &[Tensor], build: &Build<'_>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars).unwrap();
    g.value(loss).item().unwrap()
}

/// Checks the gradient of the scalar `build(inputs)` with respect to every
/// element of every input.
pub fn check_inputs(inputs: &[Tensor], build: &Build<'_>) -> Report {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(&g, v)).collect();
    let mut rep = Report::default();
    let mut work = inputs.to_vec();
    for (t, a) in analytic.iter().enumerate() {
        for i in 0..inputs[t].numel() {
            let x0 = inputs[t].data()[i];
            work[t].data_mut()[i] = x0 + H;
            let up = eval(&work, build);
            work[t].data_mut()[i] = x0 - H;
            let down = eval(&work, build);
            work[t].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * H);
            rep.max_rel = rep.max_rel.max(rel_err(a.data()[i], numeric));
            rep.checked += 1;
        }
    }
    rep
}

type ParamBuild<'a> = dyn Fn(&mut Graph<'_>) -> Result<Var> + 'a;

fn eval_params(params: &ParamSet, build: &ParamBuild<'_>) -> f64 {
    let mut g = Graph::with_params(params);
    let loss = build(&mut g).unwrap();
    g.value(loss).item().unwrap()
}

/// Checks the gradient with respect to parameter entries `(tensor, element)`;
/// `None` checks every entry.
pub fn check_params(params: &ParamSet, build: &ParamBuild<'_>, entries: Option<&[(usize, usize)]>) -> Report {
    let analytic = {
        let mut g = Graph::with_params(params);
        let loss = build(&mut g).unwrap();
        g.backward(loss).unwrap().into_param_grads(params)
    };
    let all: Vec<(usize, usize)>;
    let entries = match entries {
        Some(e) => e,
        None => {
            all = params.tensors().iter().enumerate().flat_map(|(t, x)| (0..x.numel()).map(move |i| (t, i))).collect();
            &all
        }
    };
    let mut work = params.clone();
    let mut rep = Report::default();
    for &(t, i) in entries {
        let x0 = params.tensors()[t].data()[i];
        work.tensors_mut()[t].data_mut()[i] = x0 + H;
        let up = eval_params(&work, build);
        work.tensors_mut()[t].data_mut()[i] = x0 - H;
        let down = eval_params(&work, build);
        work.tensors_mut()[t].data_mut()[i] = x0;
        let numeric = (up - down) / (2.0 * H);
        rep.max_rel = rep.max_rel.max(rel_err(analytic[t][i], numeric));
        rep.checked += 1;
    }
    rep
}
