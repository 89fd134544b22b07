//! Complete architectures: a PointNet-style encoder, single and multi-branch
//! AXform decoders, the FC and folding baselines, and the two-stage
//! completion network.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloud::PointCloud;
use crate::error::{config_err, contract_err, dim_err, Result};
use crate::graph::{to_points, Graph, Var};
use crate::layers::{folding_grid, shared_mlp, AXformBlock, AXformConfig, AXformOutput, Activation, FcDecoder, FoldingDecoder, Linear, Mlp};
use crate::metrics::fps_indices;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Shared per-point MLP `(3, hidden.., out)` followed by max pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub hidden: Vec<usize>,
    pub out: usize,
}

impl EncoderConfig {
    pub fn with_out(out: usize) -> Self {
        EncoderConfig { hidden: vec![64, 128], out }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![3];
        w.extend_from_slice(&self.hidden);
        w.push(self.out);
        w
    }
}

impl Encoder {
    pub fn new(params: &mut ParamSet, name: &str, config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Encoder { mlp: Mlp::new(params, name, &config.widths(), rng)? })
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.dout()
    }

    /// `points: [batch, count, 3]` to `[batch, out]`.
    pub fn forward(&self, g: &mut Graph<'_>, points: Var) -> Result<Var> {
        let s = g.shape(points);
        if s.len() == 3 && s[1] == 0 {
            return Err(contract_err!("cannot encode an empty point cloud"));
        }
        let per_point = shared_mlp(g, points, &self.mlp)?;
        g.reduce_max(per_point, 1)
    }

    /// Feature vector of a single cloud.
    pub fn encode(&self, params: &ParamSet, cloud: &PointCloud) -> Result<Tensor> {
        cloud.require_nonempty("encode")?;
        let mut g = Graph::with_params(params);
        let x = g.constant(cloud.to_tensor());
        let f = self.forward(&mut g, x)?;
        let out = self.out_dim();
        g.value(f).clone().reshape([out])
    }
}

/// `K` independent AXform blocks whose outputs are concatenated in branch order.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiBranchDecoder {
    pub branches: Vec<AXformBlock>,
}

/// Output of a multi-branch decode.
#[derive(Debug, Clone)]
pub struct BranchOutput {
    /// `[batch, K * m, 3]`
    pub cloud: Var,
    /// Branch of every output point.
    pub branch_ids: Vec<usize>,
    pub per_branch: Vec<AXformOutput>,
}

impl MultiBranchDecoder {
    /// Builds `branches` blocks, each emitting `block.m` points.
    pub fn new(params: &mut ParamSet, name: &str, branches: usize, block: &AXformConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if branches == 0 {
            return Err(config_err!("multi-branch decoder needs at least one branch"));
        }
        let branches = (0..branches)
            .map(|b| AXformBlock::new(params, &format!("{name}.branch{b}"), block.clone(), rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(MultiBranchDecoder { branches })
    }

    /// Splits `total` output points evenly over `branches`.
    pub fn per_branch_points(total: usize, branches: usize) -> Result<usize> {
        if branches == 0 || total % branches != 0 {
            return Err(config_err!("{total} output points do not divide evenly over {branches} branches"));
        }
        Ok(total / branches)
    }

    pub fn forward(&self, g: &mut Graph<'_>, f: Var) -> Result<BranchOutput> {
        let mut per_branch = Vec::with_capacity(self.branches.len());
        let mut branch_ids = Vec::new();
        for (b, block) in self.branches.iter().enumerate() {
            let out = block.forward(g, f)?;
            branch_ids.extend(core::iter::repeat_n(b, block.config.m));
            per_branch.push(out);
        }
        let clouds: Vec<Var> = per_branch.iter().map(|o| o.cloud).collect();
        let cloud = if clouds.len() == 1 { clouds[0] } else { g.concat(&clouds, 1)? };
        Ok(BranchOutput { cloud, branch_ids, per_branch })
    }
}

/// Single-branch decode of one feature vector `f: [k1]`.
pub fn decode_single(block: &AXformBlock, params: &ParamSet, f: &Tensor) -> Result<PointCloud> {
    let mut g = Graph::with_params(params);
    let x = g.constant(f.clone().reshape([1, f.numel()])?);
    let out = block.forward(&mut g, x)?;
    Ok(PointCloud::from_tensor(g.value(out.cloud)))
}

/// Multi-branch decode of one feature vector, with per-point branch ids.
pub fn decode_multibranch(dec: &MultiBranchDecoder, params: &ParamSet, f: &Tensor) -> Result<(PointCloud, Vec<usize>)> {
    let mut g = Graph::with_params(params);
    let x = g.constant(f.clone().reshape([1, f.numel()])?);
    let out = dec.forward(&mut g, x)?;
    Ok((PointCloud::from_tensor(g.value(out.cloud)), out.branch_ids))
}

/// Decoder half of a reconstruction network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecoderConfig {
    /// One AXform block producing `m` points.
    AXform(AXformConfig),
    /// `branches` AXform blocks of `block.m` points each.
    MultiBranch { branches: usize, block: AXformConfig },
    /// A single FC layer to `points * 3` values.
    Fc { points: usize },
    /// Two folding rounds over a lattice of `points` grid points.
    Folding { points: usize, hidden: Vec<usize> },
}

impl DecoderConfig {
    pub fn output_points(&self) -> usize {
        match self {
            DecoderConfig::AXform(c) => c.m,
            DecoderConfig::MultiBranch { branches, block } => branches * block.m,
            DecoderConfig::Fc { points } | DecoderConfig::Folding { points, .. } => *points,
        }
    }

    pub fn branches(&self) -> usize {
        match self {
            DecoderConfig::MultiBranch { branches, .. } => *branches,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReconConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        let latent = self.encoder.out;
        match &self.decoder {
            DecoderConfig::AXform(c) | DecoderConfig::MultiBranch { block: c, .. } => {
                c.validate()?;
                if c.k1 != latent {
                    return Err(config_err!("encoder output {latent} does not match axform input {}", c.k1));
                }
            }
            DecoderConfig::Fc { points } | DecoderConfig::Folding { points, .. } => {
                if *points == 0 {
                    return Err(config_err!("decoder must emit at least one point"));
                }
            }
        }
        if let DecoderConfig::MultiBranch { branches: 0, .. } = self.decoder {
            return Err(config_err!("multi-branch decoder needs at least one branch"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decoder {
    Single(AXformBlock),
    MultiBranch(MultiBranchDecoder),
    Fc(FcDecoder),
    Folding { decoder: FoldingDecoder, grid: Tensor },
}

/// Encoder plus decoder trained to reproduce its input cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionNet {
    pub config: ReconConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Graph outputs of a reconstruction forward pass.
#[derive(Debug, Clone)]
pub struct ReconOutput {
    /// `[batch, M, 3]`
    pub cloud: Var,
    pub branch_ids: Vec<usize>,
}

impl ReconstructionNet {
    /// Registers all parameters in a fresh set, initialized from `seed`.
    pub fn build(config: ReconConfig, seed: u64) -> Result<(ParamSet, Self)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = Encoder::new(&mut params, "encoder", &config.encoder, &mut rng)?;
        let latent = config.encoder.out;
        let decoder = match &config.decoder {
            DecoderConfig::AXform(c) => Decoder::Single(AXformBlock::new(&mut params, "decoder", c.clone(), &mut rng)?),
            DecoderConfig::MultiBranch { branches, block } => {
                Decoder::MultiBranch(MultiBranchDecoder::new(&mut params, "decoder", *branches, block, &mut rng)?)
            }
            DecoderConfig::Fc { points } => Decoder::Fc(FcDecoder::new(&mut params, "decoder", latent, *points, &mut rng)),
            DecoderConfig::Folding { points, hidden } => Decoder::Folding {
                decoder: FoldingDecoder::new(&mut params, "decoder", latent, *points, hidden, &mut rng)?,
                grid: folding_grid(*points),
            },
        };
        Ok((params, ReconstructionNet { config, encoder, decoder }))
    }

    pub fn output_points(&self) -> usize {
        self.config.decoder.output_points()
    }

    pub fn branches(&self) -> usize {
        self.config.decoder.branches()
    }

    /// `points: [batch, count, 3]`.
    pub fn forward(&self, g: &mut Graph<'_>, points: Var) -> Result<ReconOutput> {
        let f = self.encoder.forward(g, points)?;
        let m = self.output_points();
        match &self.decoder {
            Decoder::Single(block) => {
                let out = block.forward(g, f)?;
                Ok(ReconOutput { cloud: out.cloud, branch_ids: vec![0; m] })
            }
            Decoder::MultiBranch(dec) => {
                let out = dec.forward(g, f)?;
                Ok(ReconOutput { cloud: out.cloud, branch_ids: out.branch_ids })
            }
            Decoder::Fc(dec) => Ok(ReconOutput { cloud: dec.forward(g, f)?, branch_ids: vec![0; m] }),
            Decoder::Folding { decoder, grid } => {
                let grid = g.constant(grid.clone());
                Ok(ReconOutput { cloud: decoder.forward(g, f, grid)?, branch_ids: vec![0; m] })
            }
        }
    }

    /// Reconstruction of one cloud and the branch of every generated point.
    pub fn reconstruct(&self, params: &ParamSet, cloud: &PointCloud) -> Result<(PointCloud, Vec<usize>)> {
        cloud.require_nonempty("reconstruct")?;
        let mut g = Graph::with_params(params);
        let x = g.constant(cloud.to_tensor());
        let out = self.forward(&mut g, x)?;
        Ok((PointCloud::from_tensor(g.value(out.cloud)), out.branch_ids))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompletionMode {
    /// Coarse stage only.
    Vanilla,
    /// Coarse stage plus per-branch refinement.
    Full,
}

/// Two-stage completion network with `branches` branches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AXformNetConfig {
    pub branches: usize,
    /// Coarse points per branch.
    pub coarse_points: usize,
    pub encoder: EncoderConfig,
    /// Output widths of the per-branch feature mapping FC layers.
    pub feature_widths: Vec<usize>,
    /// Replace the per-branch feature maps by one FC layer shared by all branches.
    pub shared_feature_map: bool,
    pub interim_dim: usize,
    pub interim_points: usize,
    pub attn_widths: Vec<usize>,
}

impl Default for AXformNetConfig {
    fn default() -> Self {
        AXformNetConfig {
            branches: 4,
            coarse_points: 64,
            encoder: EncoderConfig::with_out(1024),
            feature_widths: vec![1024, 1024, 1024, 128],
            shared_feature_map: false,
            interim_dim: 32,
            interim_points: 128,
            attn_widths: vec![64, 128],
        }
    }
}

impl AXformNetConfig {
    fn feature_dim(&self) -> usize {
        *self.feature_widths.last().unwrap_or(&self.encoder.out)
    }

    fn block(&self, m: usize) -> AXformConfig {
        AXformConfig {
            k1: self.feature_dim(),
            k2: self.interim_dim,
            n: self.interim_points,
            m,
            attn_widths: self.attn_widths.clone(),
        }
    }

    pub fn coarse_block(&self) -> AXformConfig {
        self.block(self.coarse_points)
    }

    pub fn refine_block(&self) -> AXformConfig {
        self.block(2 * self.coarse_points)
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches == 0 || self.coarse_points == 0 {
            return Err(config_err!("completion network needs positive branches and coarse points"));
        }
        if self.feature_widths.is_empty() {
            return Err(config_err!("feature mapping needs at least one layer"));
        }
        self.coarse_block().validate()
    }

    /// Points in the final cloud for `mode`.
    pub fn output_points(&self, mode: CompletionMode) -> usize {
        match mode {
            CompletionMode::Vanilla => self.branches * self.coarse_points,
            CompletionMode::Full => 2 * self.branches * self.coarse_points,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureMap {
    PerBranch(Vec<Mlp>),
    Shared(Linear),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionBranch {
    pub coarse: AXformBlock,
    pub refine: AXformBlock,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AXformNet {
    pub config: AXformNetConfig,
    pub encoder: Encoder,
    pub feature_map: FeatureMap,
    pub branches: Vec<CompletionBranch>,
}

/// Graph outputs of a completion forward pass.
#[derive(Debug, Clone)]
pub struct CompletionOutput {
    /// `[1, K * M_c, 3]`
    pub coarse: Var,
    /// `[1, K * M_c, 3]` (vanilla) or `[1, 2 * K * M_c, 3]` (full)
    pub final_cloud: Var,
    pub coarse_branch_ids: Vec<usize>,
    pub final_branch_ids: Vec<usize>,
}

impl AXformNet {
    pub fn build(config: AXformNetConfig, seed: u64) -> Result<(ParamSet, Self)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = Encoder::new(&mut params, "encoder", &config.encoder, &mut rng)?;
        let feature_map = if config.shared_feature_map {
            FeatureMap::Shared(Linear::new(&mut params, "feature_map", config.encoder.out, config.feature_dim(), &mut rng))
        } else {
            let mut widths = vec![config.encoder.out];
            widths.extend_from_slice(&config.feature_widths);
            FeatureMap::PerBranch(
                (0..config.branches)
                    .map(|b| Mlp::new(&mut params, &format!("branch{b}.feature_map"), &widths, &mut rng))
                    .collect::<Result<_>>()?,
            )
        };
        let branches = (0..config.branches)
            .map(|b| {
                Ok(CompletionBranch {
                    coarse: AXformBlock::new(&mut params, &format!("branch{b}.coarse"), config.coarse_block(), &mut rng)?,
                    refine: AXformBlock::new(&mut params, &format!("branch{b}.refine"), config.refine_block(), &mut rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok((params, AXformNet { config, encoder, feature_map, branches }))
    }

    fn branch_feature(&self, g: &mut Graph<'_>, b: usize, f: Var) -> Result<Var> {
        match &self.feature_map {
            FeatureMap::PerBranch(maps) => maps[b].forward(g, f),
            FeatureMap::Shared(fc) => fc.forward(g, f, Activation::None),
        }
    }

    /// Completes one partial cloud.
    pub fn forward(&self, g: &mut Graph<'_>, partial: &PointCloud, mode: CompletionMode) -> Result<CompletionOutput> {
        partial.require_nonempty("complete")?;
        let mc = self.config.coarse_points;
        let partial_sel = if mode == CompletionMode::Full {
            if partial.len() < mc {
                return Err(contract_err!(
                    "full completion needs at least {mc} partial points for sampling, got {}",
                    partial.len()
                ));
            }
            let idx = fps_indices(&partial.points, mc, 0)?;
            Some(g.constant(partial.select(&idx).to_tensor()))
        } else {
            None
        };
        let x = g.constant(partial.to_tensor());
        let f = self.encoder.forward(g, x)?;
        let mut coarse_parts = Vec::with_capacity(self.branches.len());
        let mut final_parts = Vec::with_capacity(self.branches.len());
        let mut coarse_ids = Vec::new();
        let mut final_ids = Vec::new();
        for (b, branch) in self.branches.iter().enumerate() {
            let fb = self.branch_feature(g, b, f)?;
            let coarse = branch.coarse.forward(g, fb)?.cloud;
            coarse_parts.push(coarse);
            coarse_ids.extend(core::iter::repeat_n(b, mc));
            if let Some(partial_sel) = partial_sel {
                let pts = to_points(g.value(coarse).data());
                let idx = fps_indices(&pts, mc, 0)?;
                let coarse_sel = g.index_select(coarse, 1, &idx)?;
                let base = g.concat(&[coarse_sel, partial_sel], 1)?;
                let bias = branch.refine.forward(g, fb)?.cloud;
                if g.shape(bias) != g.shape(base) {
                    return Err(dim_err!("refinement bias {:?} does not match base {:?}", g.shape(bias), g.shape(base)));
                }
                final_parts.push(g.add(base, bias)?);
                final_ids.extend(core::iter::repeat_n(b, 2 * mc));
            }
        }
        let coarse = if coarse_parts.len() == 1 { coarse_parts[0] } else { g.concat(&coarse_parts, 1)? };
        let (final_cloud, final_branch_ids) = match mode {
            CompletionMode::Vanilla => (coarse, coarse_ids.clone()),
            CompletionMode::Full => {
                let fin = if final_parts.len() == 1 { final_parts[0] } else { g.concat(&final_parts, 1)? };
                (fin, final_ids)
            }
        };
        Ok(CompletionOutput { coarse, final_cloud, coarse_branch_ids: coarse_ids, final_branch_ids })
    }

    /// Coarse cloud, final cloud and per-point branch ids of the final cloud.
    pub fn complete(&self, params: &ParamSet, partial: &PointCloud, mode: CompletionMode) -> Result<(PointCloud, PointCloud, Vec<usize>)> {
        let mut g = Graph::with_params(params);
        let out = self.forward(&mut g, partial, mode)?;
        Ok((
            PointCloud::from_tensor(g.value(out.coarse)),
            PointCloud::from_tensor(g.value(out.final_cloud)),
            out.final_branch_ids,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new((0..n).map(|_| [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5]).collect())
    }

    fn small_recon(decoder: DecoderConfig) -> (ParamSet, ReconstructionNet) {
        ReconstructionNet::build(ReconConfig { encoder: EncoderConfig { hidden: vec![8], out: 6 }, decoder }, 11).unwrap()
    }

    #[test]
    fn encoder_is_permutation_and_duplication_invariant() {
        let (ps, net) = small_recon(DecoderConfig::Fc { points: 4 });
        let cloud = random_cloud(1, 20);
        let f = net.encoder.encode(&ps, &cloud).unwrap();
        let mut rev = cloud.clone();
        rev.points.reverse();
        assert_eq!(f, net.encoder.encode(&ps, &rev).unwrap());
        let mut dup = cloud.clone();
        dup.points.extend(cloud.points.clone());
        assert_eq!(f, net.encoder.encode(&ps, &dup).unwrap());
        assert!(net.encoder.encode(&ps, &PointCloud::default()).is_err());
    }

    #[test]
    fn single_point_encoding_is_that_points_mlp_output() {
        let (ps, net) = small_recon(DecoderConfig::Fc { points: 4 });
        let p = random_cloud(2, 1);
        let f = net.encoder.encode(&ps, &p).unwrap();
        let mut g = Graph::with_params(&ps);
        let x = g.constant(Tensor::new([1, 3], p.points[0].to_vec()).unwrap());
        let y = net.encoder.mlp.forward(&mut g, x).unwrap();
        assert_eq!(f.data(), g.value(y).data());
    }

    #[test]
    fn multibranch_counts_and_k1_reduction() {
        let block = AXformConfig::new(6, 4, 5, 3);
        let (ps, net) = small_recon(DecoderConfig::MultiBranch { branches: 4, block: block.clone() });
        let (cloud, ids) = net.reconstruct(&ps, &random_cloud(3, 10)).unwrap();
        assert_eq!(cloud.len(), 12);
        for b in 0..4 {
            assert_eq!(ids.iter().filter(|&&i| i == b).count(), 3);
        }
        let (ps1, net1) = small_recon(DecoderConfig::MultiBranch { branches: 1, block: block.clone() });
        let (ps2, net2) = small_recon(DecoderConfig::AXform(block));
        let c = random_cloud(4, 10);
        assert_eq!(ps1.tensors(), ps2.tensors());
        assert_eq!(net1.reconstruct(&ps1, &c).unwrap().0, net2.reconstruct(&ps2, &c).unwrap().0);
        assert_eq!(MultiBranchDecoder::per_branch_points(10, 4).ok(), None);
    }

    fn tiny_net(mode_points: usize) -> (ParamSet, AXformNet) {
        let cfg = AXformNetConfig {
            branches: 2,
            coarse_points: mode_points,
            encoder: EncoderConfig { hidden: vec![8], out: 10 },
            feature_widths: vec![12, 6],
            interim_dim: 4,
            interim_points: 5,
            attn_widths: vec![6],
            ..Default::default()
        };
        AXformNet::build(cfg, 5).unwrap()
    }

    #[test]
    fn zero_refinement_gives_sampled_concatenation() {
        let (mut ps, net) = tiny_net(4);
        for br in &net.branches {
            ps.get_mut(br.refine.map3d.weight).data_mut().fill(0.0);
            ps.get_mut(br.refine.map3d.bias).data_mut().fill(0.0);
        }
        let partial = random_cloud(9, 12);
        let (coarse, fin, ids) = net.complete(&ps, &partial, CompletionMode::Full).unwrap();
        assert_eq!(fin.len(), 16);
        assert_eq!(ids.len(), 16);
        let psel = partial.select(&fps_indices(&partial.points, 4, 0).unwrap());
        for b in 0..2 {
            let cb = PointCloud::new(coarse.points[b * 4..(b + 1) * 4].to_vec());
            let csel = cb.select(&fps_indices(&cb.points, 4, 0).unwrap());
            let block = &fin.points[b * 8..(b + 1) * 8];
            assert_eq!(&block[..4], &csel.points[..]);
            assert_eq!(&block[4..], &psel.points[..]);
        }
    }

    #[test]
    fn vanilla_and_full_share_coarse_stage() {
        let (ps, net) = tiny_net(4);
        let partial = random_cloud(10, 12);
        let (cv, fv, _) = net.complete(&ps, &partial, CompletionMode::Vanilla).unwrap();
        let (cf, _, _) = net.complete(&ps, &partial, CompletionMode::Full).unwrap();
        assert_eq!(cv, cf);
        assert_eq!(cv, fv);
        let err = net.complete(&ps, &random_cloud(1, 3), CompletionMode::Full).unwrap_err();
        assert!(alloc::format!("{err}").contains("at least 4"));
    }

    #[test]
    fn output_counts() {
        let cfg = AXformNetConfig { branches: 16, coarse_points: 64, ..Default::default() };
        assert_eq!(cfg.output_points(CompletionMode::Vanilla), 1024);
        let cfg = AXformNetConfig { branches: 4, coarse_points: 32, ..Default::default() };
        assert_eq!(cfg.output_points(CompletionMode::Full), 256);
    }
}
