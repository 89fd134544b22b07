//! The subcommands as library functions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use axform_core::data::{make_partial, normalize, sample_shape, Family, Normalization, SyntheticShapeSpec};
use axform_core::metrics::{chamfer_l1, chamfer_l2, fscore, jsd, mmd_cov_1nna};
use axform_core::models::{AXformNet, CompletionMode, ReconstructionNet};
use axform_core::segmentation::{assign_branches, segment, BranchSemanticMap};
use axform_core::training::{
    train, CompletionObjective, CompletionPair, EpochReport, Executor, ReconObjective, Task, TrainState,
};
use axform_core::{ParamSet, PointCloud};

use crate::checkpoint;
use crate::cloud_io::{read_cloud, write_cloud};
use crate::config::RunConfig;
use crate::error::{read_file, write_file, AppError, AppResult, FormatError};
use crate::exec::Pool;
use crate::manifest::{
    category_of, list_clouds, normalization_tsv, partial_path, Dataset, Manifest, ManifestEntry, Split, MANIFEST_FILE,
    NORMALIZATION_FILE,
};
use crate::report::{loss_csv, report_csv, MetricRow};

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.axck";
pub const LOSS_FILE: &str = "loss.csv";

/// splitmix64 finalizer, used to derive independent per-shape seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn shape_seed(data_seed: u64, family: Family, split: Split, index: usize) -> u64 {
    let f = Family::ALL.iter().position(|&x| x == family).unwrap() as u64;
    let s = Split::ALL.iter().position(|&x| x == split).unwrap() as u64;
    mix(mix(mix(data_seed) ^ (f << 8 | s)) ^ index as u64)
}

const PARTIAL_ATTEMPTS: u64 = 32;

struct Generated {
    path: String,
    split: Split,
    cloud: PointCloud,
    norm: Normalization,
    partial: PointCloud,
}

/// Writes the synthetic dataset: `family/split/NNNN.pcf` shapes with
/// `.partial.pcf` companions, then `normalization.tsv`, `manifest.tsv` and
/// `config.txt`.
pub fn gen_data(cfg: &RunConfig, out_dir: &Path, exec: &Pool) -> AppResult<usize> {
    let mut jobs = Vec::new();
    for &family in &cfg.families {
        for (split, count) in [(Split::Train, cfg.train_per_family), (Split::Val, cfg.val_per_family), (Split::Test, cfg.test_per_family)] {
            for i in 0..count {
                jobs.push((family, split, i));
            }
        }
    }
    let method = cfg.partial_method();
    let results = exec.map(&jobs, &|&(family, split, i)| -> axform_core::Result<Generated> {
        let seed = shape_seed(cfg.data_seed, family, split, i);
        let raw = sample_shape(&SyntheticShapeSpec::random(family, seed, cfg.points))?;
        let (cloud, norm) = normalize(&raw)?;
        // Round through f32 first so the partial is an exact subset of the stored cloud.
        let cloud = PointCloud { points: cloud.points.iter().map(|p| p.map(|v| v as f32 as f64)).collect(), ..cloud };
        let mut last = None;
        for attempt in 0..PARTIAL_ATTEMPTS {
            match make_partial(&cloud, &method, mix(seed ^ attempt)) {
                Ok(partial) => {
                    let path = format!("{}/{}/{i:04}.pcf", family.name(), split.name());
                    return Ok(Generated { path, split, cloud, norm, partial });
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last.unwrap())
    });
    std::fs::create_dir_all(out_dir).map_err(|e| AppError::io(out_dir, e))?;
    let mut manifest = Manifest::default();
    let mut norms = Vec::new();
    for r in results {
        let g = r?;
        write_cloud(&out_dir.join(&g.path), &g.cloud)?;
        write_cloud(&out_dir.join(partial_path(&g.path)), &g.partial)?;
        norms.push((g.path.clone(), g.norm));
        manifest.entries.push(ManifestEntry { path: g.path, split: g.split });
    }
    write_file(&out_dir.join(NORMALIZATION_FILE), normalization_tsv(&norms).as_bytes())?;
    write_file(&out_dir.join(MANIFEST_FILE), manifest.to_text().as_bytes())?;
    write_file(&out_dir.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    Ok(manifest.entries.len())
}

/// A network built from a run configuration.
pub enum Model {
    Recon(ReconstructionNet),
    Completion(AXformNet, CompletionMode),
}

impl Model {
    pub fn build(cfg: &RunConfig) -> AppResult<(ParamSet, Model)> {
        Ok(match cfg.task {
            Task::Reconstruct => {
                let (p, net) = ReconstructionNet::build(cfg.recon_config()?, cfg.seed)?;
                (p, Model::Recon(net))
            }
            Task::Complete => {
                let (p, net) = AXformNet::build(cfg.completion_config(), cfg.seed)?;
                (p, Model::Completion(net, cfg.completion_mode))
            }
        })
    }

    /// Builds the network and loads its parameters from `ckpt`.
    pub fn load(cfg: &RunConfig, ckpt: &Path) -> AppResult<(ParamSet, Model, TrainState)> {
        let (mut params, model) = Model::build(cfg)?;
        let state = checkpoint::load_into(ckpt, &mut params)?;
        Ok((params, model, state))
    }

    /// The model's output for a dataset sample: a reconstruction, or the
    /// final completion of the sample's partial cloud.
    pub fn predict(&self, params: &ParamSet, cloud: &PointCloud, partial: Option<&PointCloud>) -> axform_core::Result<PointCloud> {
        match self {
            Model::Recon(net) => Ok(net.reconstruct(params, cloud)?.0),
            Model::Completion(net, mode) => {
                let partial = partial.ok_or_else(|| axform_core::Error::Contract("sample has no partial cloud".into()))?;
                Ok(net.complete(params, partial, *mode)?.1)
            }
        }
    }
}

fn need_partial<'a>(root: &Path, s: &'a crate::manifest::Sample) -> AppResult<&'a PointCloud> {
    s.partial
        .as_ref()
        .ok_or_else(|| AppError::invalid(&root.join(partial_path(&s.entry.path)), "completion sample lacks its partial cloud"))
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub checkpoint: PathBuf,
}

/// Trains on the train split, validates on the val split, and writes
/// `config.txt`, `loss.csv` and checkpoints into `out_dir`.
pub fn train_run(cfg: &RunConfig, data_dir: &Path, out_dir: &Path, resume: Option<&Path>, exec: &Pool) -> AppResult<TrainSummary> {
    let data = Dataset::load(data_dir)?;
    let tc = cfg.train_config();
    tc.validate()?;
    let (mut params, model) = Model::build(cfg)?;
    let mut state = match resume {
        Some(p) => checkpoint::load_into(p, &mut params)?,
        None => TrainState::new(&params, tc.lr),
    };
    write_file(&out_dir.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    let loss_path = out_dir.join(LOSS_FILE);
    let mut on_epoch = |r: &EpochReport, p: &ParamSet, s: &TrainState| -> axform_core::Result<()> {
        let io = |e: AppError| axform_core::Error::Contract(e.to_string());
        write_file(&loss_path, loss_csv(&s.history.train, &s.history.val).as_bytes()).map_err(io)?;
        let done = r.epoch + 1;
        if tc.should_checkpoint(done) && done != tc.epochs {
            checkpoint::save(&out_dir.join(format!("checkpoint_e{done:04}.axck")), p, s).map_err(io)?;
        }
        Ok(())
    };
    match &model {
        Model::Recon(net) => {
            let split = |sp| data.split(sp).into_iter().map(|s| s.cloud.clone()).collect::<Vec<_>>();
            let objective = ReconObjective { net };
            train(&objective, &mut params, &mut state, &tc, &split(Split::Train), &split(Split::Val), exec, &mut on_epoch)?;
        }
        Model::Completion(net, mode) => {
            let split = |sp| -> AppResult<Vec<CompletionPair>> {
                data.split(sp)
                    .into_iter()
                    .map(|s| Ok(CompletionPair { partial: need_partial(&data.root, s)?.clone(), gt: s.cloud.clone() }))
                    .collect()
            };
            let objective = CompletionObjective { net, mode: *mode, alpha: tc.alpha };
            train(&objective, &mut params, &mut state, &tc, &split(Split::Train)?, &split(Split::Val)?, exec, &mut on_epoch)?;
        }
    }
    let ck = out_dir.join(CHECKPOINT_FILE);
    checkpoint::save(&ck, &params, &state)?;
    write_file(&loss_path, loss_csv(&state.history.train, &state.history.val).as_bytes())?;
    Ok(TrainSummary { epochs: state.epoch, train_loss: state.history.train, val_loss: state.history.val, checkpoint: ck })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    CdL1,
    CdL2,
    FScore,
    Jsd,
    MmdCovNna,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::CdL1, Metric::CdL2, Metric::FScore, Metric::Jsd, Metric::MmdCovNna];

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "cd-l1" => Metric::CdL1,
            "cd-l2" => Metric::CdL2,
            "fscore" => Metric::FScore,
            "jsd" => Metric::Jsd,
            "mmd-cov-nna" => Metric::MmdCovNna,
            _ => return None,
        })
    }
}

/// Predicted and ground-truth clouds with their categories.
pub struct EvalSet {
    pub categories: Vec<String>,
    pub pred: Vec<PointCloud>,
    pub gt: Vec<PointCloud>,
}

/// Pairs files with equal relative paths under two directories.
pub fn eval_set_from_dirs(pred_dir: &Path, gt_dir: &Path) -> AppResult<EvalSet> {
    let names = list_clouds(gt_dir)?;
    if names.is_empty() {
        return Err(AppError::invalid(gt_dir, "no cloud files found"));
    }
    let mut set = EvalSet { categories: Vec::new(), pred: Vec::new(), gt: Vec::new() };
    for n in &names {
        let p = pred_dir.join(n);
        if !p.is_file() {
            return Err(AppError::invalid(&p, "prediction missing for ground-truth file"));
        }
        set.categories.push(category_of(n).to_string());
        set.pred.push(read_cloud(&p)?);
        set.gt.push(read_cloud(&gt_dir.join(n))?);
    }
    Ok(set)
}

/// Runs a trained model over the configured split of a dataset.
pub fn eval_set_from_model(cfg: &RunConfig, ckpt: &Path, data_dir: &Path, exec: &Pool) -> AppResult<EvalSet> {
    let data = Dataset::load(data_dir)?;
    let (params, model, _) = Model::load(cfg, ckpt)?;
    let split = Split::parse(&cfg.eval_split).expect("validated split");
    let samples = data.split(split);
    if samples.is_empty() {
        return Err(AppError::invalid(&data_dir.join(MANIFEST_FILE), format!("split {split} is empty")));
    }
    if matches!(model, Model::Completion(..)) {
        for s in &samples {
            need_partial(&data.root, s)?;
        }
    }
    let preds = exec.map(&samples, &|s| model.predict(&params, &s.cloud, s.partial.as_ref()));
    let mut set = EvalSet { categories: Vec::new(), pred: Vec::new(), gt: Vec::new() };
    for (s, p) in samples.iter().zip(preds) {
        set.categories.push(s.entry.category().to_string());
        set.pred.push(p?);
        set.gt.push(s.cloud.clone());
    }
    Ok(set)
}

fn clamp_box(c: &PointCloud) -> PointCloud {
    PointCloud { points: c.points.iter().map(|p| p.map(|v| v.clamp(-0.5, 0.5))).collect(), labels: None }
}

/// Metric rows per category plus an `average` row (mean over categories).
pub fn evaluate_metrics(cfg: &RunConfig, set: &EvalSet, metrics: &[Metric], exec: &Pool) -> AppResult<Vec<MetricRow>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in set.categories.iter().enumerate() {
        groups.entry(c.as_str()).or_default().push(i);
    }
    let idx: Vec<usize> = (0..set.pred.len()).collect();
    let per_shape = |f: &(dyn Fn(&PointCloud, &PointCloud) -> axform_core::Result<f64> + Sync)| -> AppResult<Vec<f64>> {
        exec.map(&idx, &|&i| f(&set.pred[i], &set.gt[i])).into_iter().map(|r| r.map_err(AppError::from)).collect()
    };
    let mut rows = Vec::new();
    let push_group = |rows: &mut Vec<MetricRow>, name: &str, scale: f64, values: Vec<(String, f64)>| {
        let mean = values.iter().map(|v| v.1).sum::<f64>() / values.len() as f64;
        for (cat, v) in values {
            rows.push(MetricRow { metric: name.into(), category: cat, value: v, scale });
        }
        rows.push(MetricRow { metric: name.into(), category: "average".into(), value: mean, scale });
    };
    for m in metrics {
        match m {
            Metric::CdL1 | Metric::CdL2 | Metric::FScore => {
                let t = cfg.fscore_threshold;
                let (name, scale, vals) = match m {
                    Metric::CdL1 => ("cd-l1", 1e3, per_shape(&|a, b| chamfer_l1(a, b))?),
                    Metric::CdL2 => ("cd-l2", 1e4, per_shape(&|a, b| chamfer_l2(a, b))?),
                    _ => ("fscore", 1.0, per_shape(&|a, b| fscore(a, b, t))?),
                };
                let cats = groups
                    .iter()
                    .map(|(c, ids)| (c.to_string(), ids.iter().map(|&i| vals[i]).sum::<f64>() / ids.len() as f64))
                    .collect();
                push_group(&mut rows, name, scale, cats);
            }
            Metric::Jsd => {
                let mut cats = Vec::new();
                for (c, ids) in &groups {
                    let p: Vec<PointCloud> = ids.iter().map(|&i| clamp_box(&set.pred[i])).collect();
                    let g: Vec<PointCloud> = ids.iter().map(|&i| clamp_box(&set.gt[i])).collect();
                    cats.push((c.to_string(), jsd(&p, &g, cfg.jsd_resolution)?));
                }
                push_group(&mut rows, "jsd", 1e2, cats);
            }
            Metric::MmdCovNna => {
                let (mut mmd, mut cov, mut nna) = (Vec::new(), Vec::new(), Vec::new());
                for (c, ids) in &groups {
                    let p: Vec<PointCloud> = ids.iter().map(|&i| set.pred[i].clone()).collect();
                    let g: Vec<PointCloud> = ids.iter().map(|&i| set.gt[i].clone()).collect();
                    let s = mmd_cov_1nna(&p, &g)?;
                    mmd.push((c.to_string(), s.mmd_cd));
                    cov.push((c.to_string(), s.cov));
                    nna.push((c.to_string(), s.nna));
                }
                push_group(&mut rows, "mmd-cd", 1e2, mmd);
                push_group(&mut rows, "cov", 1e2, cov);
                push_group(&mut rows, "1-nna", 1e2, nna);
            }
        }
    }
    Ok(rows)
}

pub fn write_report(path: &Path, rows: &[MetricRow]) -> AppResult<()> {
    write_file(path, report_csv(rows).as_bytes())
}

/// Writes `coarse.pcf` and `final.pcf` for one partial cloud.
pub fn complete_cloud(cfg: &RunConfig, ckpt: &Path, input: &Path, out_dir: &Path, vanilla: bool) -> AppResult<()> {
    let (params, model, _) = Model::load(cfg, ckpt)?;
    let Model::Completion(net, _) = model else {
        return Err(AppError::Usage("complete needs a checkpoint trained with task = complete".into()));
    };
    let partial = read_cloud(input)?;
    let mode = if vanilla { CompletionMode::Vanilla } else { CompletionMode::Full };
    let (coarse, fin, _) = net.complete(&params, &partial, mode)?;
    write_cloud(&out_dir.join("coarse.pcf"), &coarse)?;
    write_cloud(&out_dir.join("final.pcf"), &fin)
}

fn recon_model(model: Model) -> AppResult<ReconstructionNet> {
    match model {
        Model::Recon(net) => Ok(net),
        Model::Completion(..) => Err(AppError::Usage("segmentation needs a reconstruction checkpoint (task = reconstruct)".into())),
    }
}

pub fn map_tsv(map: &BranchSemanticMap) -> String {
    let mut s = format!("# reference\t{}\n", map.reference);
    if !map.degenerate_branches.is_empty() {
        let ids: Vec<String> = map.degenerate_branches.iter().map(|b| b.to_string()).collect();
        s.push_str(&format!("# degenerate\t{}\n", ids.join(",")));
    }
    for (b, &l) in map.labels.iter().enumerate() {
        s.push_str(&format!("{b}\t{l}\t{}\n", map.label_names[l as usize]));
    }
    s
}

pub fn parse_map(text: &str) -> Result<BranchSemanticMap, FormatError> {
    let mut reference = String::new();
    let mut degenerate = Vec::new();
    let mut rows: Vec<(usize, u16, String)> = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len() as u64;
        let l = line.trim_end_matches(['\n', '\r']);
        if let Some(rest) = l.strip_prefix("# reference\t") {
            reference = rest.to_string();
            continue;
        }
        if let Some(rest) = l.strip_prefix("# degenerate\t") {
            degenerate = rest.split(',').filter_map(|x| x.parse().ok()).collect();
            continue;
        }
        if l.trim().is_empty() || l.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = l.split('\t').collect();
        if f.len() != 3 {
            return Err(FormatError::new(start, "expected branch_id<TAB>label_id<TAB>label_name"));
        }
        let b = f[0].parse().map_err(|_| FormatError::new(start, format!("bad branch id {:?}", f[0])))?;
        let lab = f[1].parse().map_err(|_| FormatError::new(start, format!("bad label id {:?}", f[1])))?;
        rows.push((b, lab, f[2].to_string()));
    }
    rows.sort_by_key(|r| r.0);
    if rows.iter().enumerate().any(|(i, r)| r.0 != i) {
        return Err(FormatError::new(0, "branch ids must be 0..K without gaps or repeats"));
    }
    let nlabels = rows.iter().map(|r| r.1 as usize + 1).max().unwrap_or(0);
    let mut names = vec![String::new(); nlabels];
    for (_, l, n) in &rows {
        let slot = &mut names[*l as usize];
        if !slot.is_empty() && slot != n {
            return Err(FormatError::new(0, format!("label {l} has two names")));
        }
        *slot = n.clone();
    }
    for (i, n) in names.iter_mut().enumerate() {
        if n.is_empty() {
            *n = format!("part{i}");
        }
    }
    let mut map = BranchSemanticMap::new(rows.iter().map(|r| r.1).collect(), names, reference)
        .map_err(|e| FormatError::new(0, e.to_string()))?;
    map.degenerate_branches = degenerate;
    Ok(map)
}

/// Label names for `assign`: explicit names, else the part names of a single
/// configured family, else `part<i>`.
pub fn default_label_names(cfg: &RunConfig) -> Option<Vec<String>> {
    match cfg.families.as_slice() {
        [f] => Some(f.part_names().iter().map(|s| s.to_string()).collect()),
        _ => None,
    }
}

pub fn assign_map(cfg: &RunConfig, ckpt: &Path, reference: &Path, out_map: &Path, names: Option<Vec<String>>) -> AppResult<BranchSemanticMap> {
    let (params, model, _) = Model::load(cfg, ckpt)?;
    let net = recon_model(model)?;
    let cloud = read_cloud(reference)?;
    if cloud.labels.is_none() {
        return Err(AppError::invalid(reference, "reference cloud has no part labels"));
    }
    let mut names = names.or_else(|| default_label_names(cfg));
    let max_label = cloud.labels.as_ref().unwrap().iter().copied().max().unwrap_or(0) as usize;
    if names.as_ref().is_some_and(|n| n.len() <= max_label) {
        names = None;
    }
    let map = assign_branches(&net, &params, &cloud, names.as_deref(), &reference.display().to_string())?;
    write_file(out_map, map_tsv(&map).as_bytes())?;
    Ok(map)
}

pub fn segment_cloud(cfg: &RunConfig, ckpt: &Path, map_path: &Path, input: &Path, out: &Path) -> AppResult<()> {
    let (params, model, _) = Model::load(cfg, ckpt)?;
    let net = recon_model(model)?;
    let text = String::from_utf8(read_file(map_path)?)
        .map_err(|e| AppError::parse(map_path, FormatError::new(e.utf8_error().valid_up_to() as u64, "invalid UTF-8")))?;
    let map = parse_map(&text).map_err(|e| AppError::parse(map_path, e))?;
    let cloud = read_cloud(input)?;
    let labeled = segment(&net, &params, &cloud, &map)?;
    write_cloud(out, &labeled)
}
