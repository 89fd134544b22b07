//! Differentiable building blocks: fully connected layers, shared per-point
//! MLPs, the AXform block, and the FC and folding baseline decoders.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{config_err, dim_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

/// Half-width of the uniform initialization range for a layer with `fan_in` inputs.
pub fn init_bound(fan_in: usize) -> f64 {
    1.0 / libm::sqrt(fan_in.max(1) as f64)
}

/// `x . W + b` over the last axis of `x`, optionally rectified.
pub fn fc_layer(g: &mut Graph<'_>, x: Var, weight: Var, bias: Var, act: Activation) -> Result<Var> {
    let ws = g.shape(weight).to_vec();
    let xs = g.shape(x).to_vec();
    if ws.len() != 2 || xs.last() != Some(&ws[0]) || g.shape(bias) != [ws[1]] {
        return Err(dim_err!(
            "fc layer: input {:?}, weight {:?}, bias {:?}",
            xs,
            ws,
            g.shape(bias)
        ));
    }
    let y = if xs.len() == 1 {
        let x2 = g.reshape(x, &[1, xs[0]])?;
        let y = g.matmul(x2, weight)?;
        g.reshape(y, &[ws[1]])?
    } else {
        g.matmul(x, weight)?
    };
    let y = g.add(y, bias)?;
    Ok(match act {
        Activation::Relu => g.relu(y),
        Activation::None => y,
    })
}

/// A fully connected layer backed by two parameters, `<name>.weight` of
/// shape `[din, dout]` and `<name>.bias` of shape `[dout]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let s = init_bound(din);
        let weight = params.add_uniform(format!("{name}.weight"), &[din, dout], s, rng);
        let bias = params.add_uniform(format!("{name}.bias"), &[dout], s, rng);
        Linear { weight, bias, din, dout }
    }

    pub fn param_count(din: usize, dout: usize) -> usize {
        din * dout + dout
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, act: Activation) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        fc_layer(g, x, w, b, act)
    }
}

/// A stack of [`Linear`] layers with ReLU between them and no activation
/// after the last. Applied to `[.., count, din]` inputs it is a shared
/// per-point MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists the input width followed by every layer's output width.
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(config_err!("mlp {name}: widths {:?} need >= 2 positive entries", widths));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(params, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Ok(Mlp { layers })
    }

    pub fn param_count(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| Linear::param_count(w[0], w[1])).sum()
    }

    pub fn din(&self) -> usize {
        self.layers[0].din
    }

    pub fn dout(&self) -> usize {
        self.layers[self.layers.len() - 1].dout
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let act = if i == last { Activation::None } else { Activation::Relu };
            h = layer.forward(g, h, act)?;
        }
        Ok(h)
    }
}

/// Shared per-point MLP over `points: [batch, count, din]`.
pub fn shared_mlp(g: &mut Graph<'_>, points: Var, mlp: &Mlp) -> Result<Var> {
    let s = g.shape(points);
    if s.len() != 3 || s[2] != mlp.din() {
        return Err(dim_err!("shared mlp expects [batch, count, {}], got {:?}", mlp.din(), s));
    }
    mlp.forward(g, points)
}

/// Dimensions of one AXform block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AXformConfig {
    /// Input feature dimension.
    pub k1: usize,
    /// Interim space dimension.
    pub k2: usize,
    /// Number of interim points.
    pub n: usize,
    /// Number of output points.
    pub m: usize,
    /// Hidden widths of the attention MLP.
    pub attn_widths: Vec<usize>,
}

impl Default for AXformConfig {
    fn default() -> Self {
        AXformConfig { k1: 128, k2: 32, n: 128, m: 2048, attn_widths: vec![64, 128] }
    }
}

impl AXformConfig {
    pub fn new(k1: usize, k2: usize, n: usize, m: usize) -> Self {
        AXformConfig { k1, k2, n, m, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 || self.k2 == 0 || self.n == 0 || self.m == 0 {
            return Err(config_err!("axform dimensions must be positive: {:?}", self));
        }
        if self.attn_widths.is_empty() || self.attn_widths.contains(&0) {
            return Err(config_err!("attention widths must be nonempty and positive: {:?}", self.attn_widths));
        }
        Ok(())
    }

    fn attn_mlp_widths(&self) -> Vec<usize> {
        let mut w = vec![self.k2];
        w.extend_from_slice(&self.attn_widths);
        w.push(self.m);
        w
    }

    /// Exact parameter count of an [`AXformBlock`] with this configuration.
    pub fn param_count(&self) -> usize {
        Linear::param_count(self.k1, self.n * self.k2)
            + Mlp::param_count(&self.attn_mlp_widths())
            + Linear::param_count(self.k2, 3)
    }
}

/// Attention-based latent-to-points transformation.
///
/// A fully connected layer lifts the input feature to `n` interim points in
/// a `k2`-dimensional space; a shared MLP scores each interim point against
/// the `m` outputs; softmax over the interim axis turns those scores into
/// an `m x n` row-stochastic map whose rows aggregate the interim points; a
/// shared linear map sends each aggregated point to 3D.
#[derive(Debug, Clone, PartialEq)]
pub struct AXformBlock {
    pub config: AXformConfig,
    pub interim_fc: Linear,
    pub attn_mlp: Mlp,
    pub map3d: Linear,
}

/// Every intermediate of an AXform forward pass.
#[derive(Debug, Clone, Copy)]
pub struct AXformOutput {
    /// `[batch, m, 3]`
    pub cloud: Var,
    /// `[batch, n, k2]`
    pub interim: Var,
    /// `[batch, m, n]`, rows sum to one.
    pub attn: Var,
    /// `[batch, m, k2]`
    pub aggregated: Var,
}

impl AXformBlock {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, config: AXformConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let interim_fc = Linear::new(params, &format!("{name}.interim_fc"), config.k1, config.n * config.k2, rng);
        let attn_mlp = Mlp::new(params, &format!("{name}.attn"), &config.attn_mlp_widths(), rng)?;
        let map3d = Linear::new(params, &format!("{name}.map3d"), config.k2, 3, rng);
        Ok(AXformBlock { config, interim_fc, attn_mlp, map3d })
    }

    /// `f_in: [batch, k1]`.
    pub fn forward(&self, g: &mut Graph<'_>, f_in: Var) -> Result<AXformOutput> {
        let c = &self.config;
        let s = g.shape(f_in);
        if s.len() != 2 || s[1] != c.k1 {
            return Err(dim_err!("axform expects input [batch, {}], got {:?}", c.k1, s));
        }
        let batch = s[0];
        let h = self.interim_fc.forward(g, f_in, Activation::None)?;
        let interim = g.reshape(h, &[batch, c.n, c.k2])?;
        let logits = shared_mlp(g, interim, &self.attn_mlp)?;
        let weights = g.softmax(logits, 1)?;
        let attn = g.transpose(weights, 1, 2)?;
        let aggregated = g.matmul(attn, interim)?;
        let cloud = self.map3d.forward(g, aggregated, Activation::None)?;
        Ok(AXformOutput { cloud, interim, attn, aggregated })
    }
}

/// One batch item's `m x n` attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub m: usize,
    pub n: usize,
    pub weights: Vec<f64>,
}

impl AttentionMap {
    /// Extracts item `item` of an `[batch, m, n]` attention tensor.
    pub fn from_tensor(t: &Tensor, item: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || item >= s[0] {
            return Err(dim_err!("attention tensor {:?} has no item {item}", s));
        }
        let (m, n) = (s[1], s[2]);
        Ok(AttentionMap { m, n, weights: t.data()[item * m * n..(item + 1) * m * n].to_vec() })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.n..(i + 1) * self.n]
    }

    /// Largest deviation of a row sum from one, or infinity if any weight is negative.
    pub fn stochastic_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.m {
            let row = self.row(i);
            if row.iter().any(|&w| w < 0.0) {
                return f64::INFINITY;
            }
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        worst
    }
}

/// Baseline decoder generating every point directly with one fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FcDecoder {
    pub fc: Linear,
    pub m: usize,
}

impl FcDecoder {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, latent: usize, m: usize, rng: &mut R) -> Self {
        FcDecoder { fc: Linear::new(params, &format!("{name}.fc"), latent, m * 3, rng), m }
    }

    pub fn param_count(latent: usize, m: usize) -> usize {
        Linear::param_count(latent, m * 3)
    }

    /// `f_in: [batch, latent]` to `[batch, m, 3]`.
    pub fn forward(&self, g: &mut Graph<'_>, f_in: Var) -> Result<Var> {
        let s = g.shape(f_in);
        if s.len() != 2 || s[1] != self.fc.din {
            return Err(dim_err!("fc decoder expects input [batch, {}], got {:?}", self.fc.din, s));
        }
        let batch = s[0];
        let y = self.fc.forward(g, f_in, Activation::None)?;
        g.reshape(y, &[batch, self.m, 3])
    }
}

/// Factor `count` as `rows x cols` with `rows <= cols` as close to square as possible.
pub fn grid_dims(count: usize) -> (usize, usize) {
    let mut rows = libm::sqrt(count as f64) as usize;
    while rows > 1 && count % rows != 0 {
        rows -= 1;
    }
    let rows = rows.max(1);
    (rows, count / rows)
}

/// Uniform `rows x cols` lattice over `[-0.5, 0.5]^2` as a `[rows * cols, 2]` tensor.
pub fn folding_grid(count: usize) -> Tensor {
    let (rows, cols) = grid_dims(count);
    let lin = |i: usize, n: usize| if n == 1 { 0.0 } else { -0.5 + i as f64 / (n - 1) as f64 };
    let mut data = Vec::with_capacity(count * 2);
    for r in 0..rows {
        for c in 0..cols {
            data.push(lin(r, rows));
            data.push(lin(c, cols));
        }
    }
    Tensor::new([count, 2], data).expect("grid shape")
}

/// Two-round folding decoder: each round concatenates the latent code with
/// per-point coordinates (2D grid, then first-round 3D output) and applies a
/// shared MLP producing 3D points.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldingDecoder {
    pub latent: usize,
    pub points: usize,
    pub fold1: Mlp,
    pub fold2: Mlp,
}

impl FoldingDecoder {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        latent: usize,
        points: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let widths = |din: usize| {
            let mut w = vec![din];
            w.extend_from_slice(hidden);
            w.push(3);
            w
        };
        let fold1 = Mlp::new(params, &format!("{name}.fold1"), &widths(latent + 2), rng)?;
        let fold2 = Mlp::new(params, &format!("{name}.fold2"), &widths(latent + 3), rng)?;
        Ok(FoldingDecoder { latent, points, fold1, fold2 })
    }

    pub fn param_count(latent: usize, hidden: &[usize]) -> usize {
        let widths = |din: usize| {
            let mut w = vec![din];
            w.extend_from_slice(hidden);
            w.push(3);
            w
        };
        Mlp::param_count(&widths(latent + 2)) + Mlp::param_count(&widths(latent + 3))
    }

    /// One folding round. The first layer acts on `concat(latent, coords)`;
    /// it is evaluated as `latent . W_top + coords . W_bottom + b`, which is
    /// the same affine map without materializing the tiled latent code.
    fn fold(&self, g: &mut Graph<'_>, mlp: &Mlp, f_in: Var, coords: Var) -> Result<Var> {
        let first = &mlp.layers[0];
        let w = g.param(first.weight);
        let b = g.param(first.bias);
        let top: Vec<usize> = (0..self.latent).collect();
        let bottom: Vec<usize> = (self.latent..first.din).collect();
        let w_top = g.index_select(w, 0, &top)?;
        let w_bottom = g.index_select(w, 0, &bottom)?;
        let batch = g.shape(f_in)[0];
        let lat = g.matmul(f_in, w_top)?;
        let lat = g.reshape(lat, &[batch, 1, first.dout])?;
        let pts = g.matmul(coords, w_bottom)?;
        let h = g.add(pts, lat)?;
        let h = g.add(h, b)?;
        let mut h = if mlp.layers.len() == 1 { h } else { g.relu(h) };
        let last = mlp.layers.len() - 1;
        for (i, layer) in mlp.layers.iter().enumerate().skip(1) {
            let act = if i == last { Activation::None } else { Activation::Relu };
            h = layer.forward(g, h, act)?;
        }
        Ok(h)
    }

    /// `f_in: [batch, latent]`, `grid: [points, 2]` to `[batch, points, 3]`.
    pub fn forward(&self, g: &mut Graph<'_>, f_in: Var, grid: Var) -> Result<Var> {
        let s = g.shape(f_in);
        if s.len() != 2 || s[1] != self.latent {
            return Err(dim_err!("folding decoder expects input [batch, {}], got {:?}", self.latent, s));
        }
        let gs = g.shape(grid);
        if gs.len() != 2 || gs[1] != 2 {
            return Err(dim_err!("folding grid must be [points, 2], got {:?}", gs));
        }
        let first = self.fold(g, &self.fold1, f_in, grid)?;
        self.fold(g, &self.fold2, f_in, first)
    }

    /// Reference evaluation that tiles the latent code and concatenates it
    /// with the coordinates explicitly.
    pub fn forward_explicit(&self, g: &mut Graph<'_>, f_in: Var, grid: Var) -> Result<Var> {
        let batch = g.shape(f_in)[0];
        let count = g.shape(grid)[0];
        let tiled = g.reshape(f_in, &[batch, 1, self.latent])?;
        let tiled = g.index_select(tiled, 1, &vec![0; count])?;
        let grid3 = g.reshape(grid, &[1, count, 2])?;
        let grid_b = g.index_select(grid3, 0, &vec![0; batch])?;
        let x1 = g.concat(&[tiled, grid_b], 2)?;
        let first = self.fold1.forward(g, x1)?;
        let x2 = g.concat(&[tiled, first], 2)?;
        self.fold2.forward(g, x2)
    }
}
