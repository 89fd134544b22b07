//! Gradient cases: each op, layer and loss over random small instances.

#![allow(dead_code)]

use axform_core::data::{sample_shape, Family, SyntheticShapeSpec};
use axform_core::layers::{fc_layer, folding_grid, Activation, AXformBlock, AXformConfig, FcDecoder, FoldingDecoder};
use axform_core::models::{AXformNet, AXformNetConfig, CompletionMode, EncoderConfig};
use axform_core::training::completion_loss;
use axform_core::{ChamferKind, ParamSet, Tensor};
use rand::Rng;

use super::gradcheck::{check_inputs, check_params, project, rng, uniform, Report};

pub const INSTANCES: u64 = 100;

/// Inputs bounded away from zero, so ReLU kinks lie far beyond the FD step.
fn off_zero(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(r, shape, 0.05, 1.0);
    for v in t.data_mut() {
        if r.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn dims(r: &mut impl Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

fn run(name: &'static str, seed: u64, case: impl Fn(&mut rand_chacha::ChaCha8Rng, u64) -> Report) -> (&'static str, Report) {
    let mut rep = Report::default();
    for i in 0..INSTANCES {
        let s = seed * 1000 + i;
        rep = rep.merge(case(&mut rng(s), s));
    }
    (name, rep)
}

pub fn matmul() -> (&'static str, Report) {
    run("matmul", 1, |r, s| {
        let (b, p, q, n) = (dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4));
        let a = uniform(r, &[b, p, q], -1.0, 1.0);
        let shared = r.random_bool(0.5);
        let bt = if shared { uniform(r, &[q, n], -1.0, 1.0) } else { uniform(r, &[b, q, n], -1.0, 1.0) };
        check_inputs(&[a, bt], &|g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, s)
        })
    })
}

pub fn elementwise() -> (&'static str, Report) {
    run("add/sub/mul", 2, |r, s| {
        let (b, n, c) = (dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 4));
        let a = uniform(r, &[b, n, c], -1.0, 1.0);
        let other: Vec<usize> = match r.random_range(0..4) {
            0 => vec![b, n, c],
            1 => vec![c],
            2 => vec![b, 1, c],
            _ => vec![n, 1],
        };
        let other = if other == [n, 1] { vec![n, c] } else { other };
        let o = uniform(r, &other, -1.0, 1.0);
        let op = r.random_range(0..3);
        check_inputs(&[a, o], &|g, v| {
            let y = match op {
                0 => g.add(v[0], v[1])?,
                1 => g.sub(v[1], v[0])?,
                _ => g.mul(v[0], v[1])?,
            };
            project(g, y, s)
        })
    })
}

pub fn scale_relu() -> (&'static str, Report) {
    run("scale/relu", 3, |r, s| {
        let shape = [dims(r, 1, 3), dims(r, 1, 5)];
        let a = off_zero(r, &shape);
        let c = r.random_range(-2.0..2.0);
        check_inputs(&[a], &|g, v| {
            let y = g.scale(v[0], c);
            let y = g.relu(y);
            project(g, y, s)
        })
    })
}

pub fn softmax() -> (&'static str, Report) {
    run("softmax", 4, |r, s| {
        let shape = [dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 4)];
        let a = uniform(r, &shape, -3.0, 3.0);
        let axis = r.random_range(0..3);
        check_inputs(&[a], &|g, v| {
            let y = g.softmax(v[0], axis)?;
            project(g, y, s)
        })
    })
}

pub fn shape_ops() -> (&'static str, Report) {
    run("transpose/reshape/concat/index_select", 5, |r, s| {
        let (b, n, c) = (dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 4));
        let a = uniform(r, &[b, n, c], -1.0, 1.0);
        let extra = dims(r, 1, 3);
        let o = uniform(r, &[b, extra, c], -1.0, 1.0);
        let count = dims(r, 1, 6);
        let idx: Vec<usize> = (0..count).map(|_| r.random_range(0..n)).collect();
        check_inputs(&[a, o], &|g, v| {
            let cat = g.concat(&[v[0], v[1]], 1)?;
            let t = g.transpose(v[0], 1, 2)?;
            let t = g.reshape(t, &[b * c, n])?;
            let sel = g.index_select(v[0], 1, &idx)?;
            let p1 = project(g, cat, s)?;
            let p2 = project(g, t, s + 1)?;
            let p3 = project(g, sel, s + 2)?;
            let y = g.add(p1, p2)?;
            g.add(y, p3)
        })
    })
}

pub fn reductions() -> (&'static str, Report) {
    run("reduce_max/sum/mean", 6, |r, s| {
        let shape = [dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 4)];
        let a = uniform(r, &shape, -1.0, 1.0);
        let axis = r.random_range(0..3);
        check_inputs(&[a], &|g, v| {
            let mx = g.reduce_max(v[0], axis)?;
            let sm = g.reduce_sum(v[0], axis)?;
            let mn = g.reduce_mean(v[0], axis)?;
            let all = g.mean(v[0]);
            let p1 = project(g, mx, s)?;
            let p2 = project(g, sm, s + 1)?;
            let p3 = project(g, mn, s + 2)?;
            let y = g.add(p1, p2)?;
            let y = g.add(y, p3)?;
            g.add(y, all)
        })
    })
}

fn chamfer_case(kind: ChamferKind, seed: u64) -> (&'static str, Report) {
    let name = match kind {
        ChamferKind::L1 => "chamfer L1",
        ChamferKind::L2 => "chamfer L2",
    };
    run(name, seed, |r, _| {
        let b = dims(r, 1, 2);
        let (na, nb) = (dims(r, 1, 10), dims(r, 1, 10));
        let a = uniform(r, &[b, na, 3], -1.0, 1.0);
        let o = uniform(r, &[b, nb, 3], -1.0, 1.0);
        check_inputs(&[a, o], &|g, v| {
            let d = g.chamfer(v[0], v[1], kind)?;
            Ok(g.sum(d))
        })
    })
}

pub fn chamfer_l1() -> (&'static str, Report) {
    chamfer_case(ChamferKind::L1, 7)
}

pub fn chamfer_l2() -> (&'static str, Report) {
    chamfer_case(ChamferKind::L2, 8)
}

pub fn fc() -> (&'static str, Report) {
    run("fc layer", 9, |r, s| {
        let (din, dout) = (dims(r, 1, 5), dims(r, 1, 5));
        let batch = dims(r, 1, 3);
        let x = off_zero(r, &[batch, din]);
        let w = uniform(r, &[din, dout], -1.0, 1.0);
        let b = uniform(r, &[dout], -1.0, 1.0);
        let act = if r.random_bool(0.5) { Activation::Relu } else { Activation::None };
        check_inputs(&[x, w, b], &|g, v| {
            let y = fc_layer(g, v[0], v[1], v[2], act)?;
            project(g, y, s)
        })
    })
}

pub fn axform_block() -> (&'static str, Report) {
    run("axform block", 10, |r, s| {
        let mut cfg = AXformConfig::new(dims(r, 1, 4), dims(r, 1, 3), dims(r, 2, 5), dims(r, 1, 5));
        cfg.attn_widths = vec![dims(r, 1, 4)];
        let mut params = ParamSet::new();
        let block = AXformBlock::new(&mut params, "b", cfg.clone(), r).unwrap();
        // Larger weights than the default init so the softmax is far from uniform.
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v *= 3.0;
            }
        }
        let batch = dims(r, 1, 2);
        let x = uniform(r, &[batch, cfg.k1], -1.0, 1.0);
        check_params(&params, &|g| {
            let xv = g.constant(x.clone());
            let out = block.forward(g, xv)?;
            project(g, out.cloud, s)
        }, None)
    })
}

pub fn baseline_decoders() -> (&'static str, Report) {
    run("fc/folding decoders", 11, |r, s| {
        let latent = dims(r, 1, 4);
        let points = dims(r, 2, 6);
        let mut params = ParamSet::new();
        let fcd = FcDecoder::new(&mut params, "fc", latent, points, r);
        let hidden = dims(r, 1, 4);
        let fold = FoldingDecoder::new(&mut params, "fold", latent, points, &[hidden], r).unwrap();
        let x = uniform(r, &[1, latent], -1.0, 1.0);
        let grid = folding_grid(points);
        check_params(&params, &|g| {
            let xv = g.constant(x.clone());
            let gv = g.constant(grid.clone());
            let a = fcd.forward(g, xv)?;
            let b = fold.forward(g, xv, gv)?;
            let pa = project(g, a, s)?;
            let pb = project(g, b, s + 1)?;
            g.add(pa, pb)
        }, None)
    })
}

pub fn all_cases() -> Vec<(&'static str, Report)> {
    vec![
        matmul(),
        elementwise(),
        scale_relu(),
        softmax(),
        shape_ops(),
        reductions(),
        chamfer_l1(),
        chamfer_l2(),
        fc(),
        axform_block(),
        baseline_decoders(),
    ]
}

/// Gradient of the weighted two-stage completion loss of a tiny completion
/// network (K=2, M_c=4, 8-point clouds) with respect to every parameter.
pub fn full_model_completion() -> Report {
    let cfg = AXformNetConfig {
        branches: 2,
        coarse_points: 4,
        encoder: EncoderConfig { hidden: vec![6], out: 6 },
        feature_widths: vec![6, 5],
        shared_feature_map: false,
        interim_dim: 3,
        interim_points: 4,
        attn_widths: vec![5],
    };
    let mut report = Report::default();
    for seed in 0..3 {
        let (params, net) = AXformNet::build(cfg.clone(), seed).unwrap();
        let gt = sample_shape(&SyntheticShapeSpec::random(Family::MultiPartPlane, seed + 5, 8)).unwrap();
        let partial = gt.select(&[0, 2, 3, 5, 6]);
        report = report.merge(check_params(&params, &|g| {
            let out = net.forward(g, &partial, CompletionMode::Full)?;
            let gtv = g.constant(gt.to_tensor());
            completion_loss(g, out.coarse, out.final_cloud, gtv, 0.3)
        }, None));
    }
    report
}
