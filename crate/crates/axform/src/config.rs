//! Run configuration: line-based `key = value` text.
//!
//! Every key has a default; unknown keys and malformed values are rejected
//! at parse time. [`RunConfig::to_text`] renders the effective configuration
//! with every key, which is what runs copy next to their outputs.

use axform_core::data::{Family, PartialMethod};
use axform_core::layers::AXformConfig;
use axform_core::models::{AXformNetConfig, CompletionMode, DecoderConfig, EncoderConfig, MultiBranchDecoder, ReconConfig};
use axform_core::training::{AlphaSchedule, Task, TrainConfig};

use crate::error::FormatError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    AXform,
    Fc,
    Folding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartialKind {
    Halfspace,
    Occlusion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub shuffle_seed: u64,
    /// Task defaults apply when unset.
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub alpha_ramp_epochs: f64,
    pub grad_clip: Option<f64>,
    pub checkpoint_every: Option<usize>,
    pub threads: usize,

    pub decoder: DecoderKind,
    pub branches: Option<usize>,
    pub latent: usize,
    pub encoder_hidden: Vec<usize>,
    pub interim_dim: usize,
    pub interim_points: usize,
    pub attn_widths: Vec<usize>,
    pub output_points: usize,
    pub folding_hidden: Vec<usize>,

    pub completion_latent: usize,
    pub coarse_points: usize,
    pub feature_widths: Vec<usize>,
    pub shared_feature_map: bool,
    pub completion_mode: CompletionMode,

    pub families: Vec<Family>,
    pub train_per_family: usize,
    pub val_per_family: usize,
    pub test_per_family: usize,
    pub points: usize,
    pub data_seed: u64,
    pub partial_method: PartialKind,
    pub partial_offset: f64,
    pub occlusion_resolution: usize,
    pub occlusion_shell: f64,

    pub fscore_threshold: f64,
    pub jsd_resolution: usize,
    pub eval_split: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Reconstruct,
            seed: 0,
            shuffle_seed: 0,
            epochs: None,
            batch_size: None,
            lr: None,
            alpha_start: 0.01,
            alpha_end: 1.0,
            alpha_ramp_epochs: 25.0,
            grad_clip: None,
            checkpoint_every: None,
            threads: 1,
            decoder: DecoderKind::AXform,
            branches: None,
            latent: 128,
            encoder_hidden: vec![64, 128],
            interim_dim: 32,
            interim_points: 128,
            attn_widths: vec![64, 128],
            output_points: 512,
            folding_hidden: vec![128, 128],
            completion_latent: 1024,
            coarse_points: 64,
            feature_widths: vec![1024, 1024, 1024, 128],
            shared_feature_map: false,
            completion_mode: CompletionMode::Full,
            families: Family::ALL.to_vec(),
            train_per_family: 200,
            val_per_family: 40,
            test_per_family: 40,
            points: 512,
            data_seed: 0,
            partial_method: PartialKind::Halfspace,
            partial_offset: 0.0,
            occlusion_resolution: 32,
            occlusion_shell: 0.02,
            fscore_threshold: 0.01,
            jsd_resolution: 28,
            eval_split: "test".into(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "task", "seed", "shuffle_seed", "epochs", "batch_size", "lr", "alpha_start", "alpha_end", "alpha_ramp_epochs",
    "grad_clip", "checkpoint_every", "threads", "decoder", "branches", "latent", "encoder_hidden", "interim_dim",
    "interim_points", "attn_widths", "output_points", "folding_hidden", "completion_latent", "coarse_points",
    "feature_widths", "shared_feature_map", "completion_mode", "families", "train_per_family", "val_per_family",
    "test_per_family", "points", "data_seed", "partial_method", "partial_offset", "occlusion_resolution",
    "occlusion_shell", "fscore_threshold", "jsd_resolution", "eval_split",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
}

fn positive(key: &str, v: &str) -> Result<usize, String> {
    match num::<usize>(key, v)? {
        0 => Err(format!("{key} must be positive")),
        n => Ok(n),
    }
}

fn finite(key: &str, v: &str) -> Result<f64, String> {
    let x: f64 = num(key, v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{key} must be finite"))
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| positive(key, x.trim())).collect()
}

fn optional<T>(v: &str, f: impl FnOnce(&str) -> Result<T, String>) -> Result<Option<T>, String> {
    if v == "none" {
        Ok(None)
    } else {
        f(v).map(Some)
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn opt_text<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), |x| x.to_string())
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let mut cfg = RunConfig::default();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len() as u64;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| FormatError::new(start, format!("expected key = value, got {body:?}")))?;
            cfg.set(k.trim(), v.trim()).map_err(|m| FormatError::new(start, m))?;
        }
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), String> {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("override {kv:?} is not key=value"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "task" => {
                self.task = match v {
                    "reconstruct" => Task::Reconstruct,
                    "complete" => Task::Complete,
                    _ => return Err(format!("task must be reconstruct or complete, got {v:?}")),
                }
            }
            "seed" => self.seed = num(key, v)?,
            "shuffle_seed" => self.shuffle_seed = num(key, v)?,
            "epochs" => self.epochs = Some(positive(key, v)?),
            "batch_size" => self.batch_size = Some(positive(key, v)?),
            "lr" => {
                let x = finite(key, v)?;
                if x < 0.0 {
                    return Err("lr must be nonnegative".into());
                }
                self.lr = Some(x)
            }
            "alpha_start" => self.alpha_start = finite(key, v)?,
            "alpha_end" => self.alpha_end = finite(key, v)?,
            "alpha_ramp_epochs" => self.alpha_ramp_epochs = finite(key, v)?,
            "grad_clip" => self.grad_clip = optional(v, |x| finite(key, x))?,
            "checkpoint_every" => self.checkpoint_every = optional(v, |x| positive(key, x))?,
            "threads" => self.threads = positive(key, v)?,
            "decoder" => {
                self.decoder = match v {
                    "axform" => DecoderKind::AXform,
                    "fc" => DecoderKind::Fc,
                    "folding" => DecoderKind::Folding,
                    _ => return Err(format!("decoder must be axform, fc or folding, got {v:?}")),
                }
            }
            "branches" => self.branches = Some(positive(key, v)?),
            "latent" => self.latent = positive(key, v)?,
            "encoder_hidden" => self.encoder_hidden = list(key, v)?,
            "interim_dim" => self.interim_dim = positive(key, v)?,
            "interim_points" => self.interim_points = positive(key, v)?,
            "attn_widths" => self.attn_widths = list(key, v)?,
            "output_points" => self.output_points = positive(key, v)?,
            "folding_hidden" => self.folding_hidden = list(key, v)?,
            "completion_latent" => self.completion_latent = positive(key, v)?,
            "coarse_points" => self.coarse_points = positive(key, v)?,
            "feature_widths" => self.feature_widths = list(key, v)?,
            "shared_feature_map" => self.shared_feature_map = num(key, v)?,
            "completion_mode" => {
                self.completion_mode = match v {
                    "full" => CompletionMode::Full,
                    "vanilla" => CompletionMode::Vanilla,
                    _ => return Err(format!("completion_mode must be full or vanilla, got {v:?}")),
                }
            }
            "families" => {
                self.families = v
                    .split(',')
                    .map(|f| Family::from_name(f.trim()).ok_or_else(|| format!("unknown family {f:?}")))
                    .collect::<Result<_, _>>()?;
                if self.families.is_empty() {
                    return Err("families must not be empty".into());
                }
            }
            "train_per_family" => self.train_per_family = num(key, v)?,
            "val_per_family" => self.val_per_family = num(key, v)?,
            "test_per_family" => self.test_per_family = num(key, v)?,
            "points" => self.points = positive(key, v)?,
            "data_seed" => self.data_seed = num(key, v)?,
            "partial_method" => {
                self.partial_method = match v {
                    "halfspace" => PartialKind::Halfspace,
                    "occlusion" => PartialKind::Occlusion,
                    _ => return Err(format!("partial_method must be halfspace or occlusion, got {v:?}")),
                }
            }
            "partial_offset" => self.partial_offset = finite(key, v)?,
            "occlusion_resolution" => self.occlusion_resolution = positive(key, v)?,
            "occlusion_shell" => self.occlusion_shell = finite(key, v)?,
            "fscore_threshold" => self.fscore_threshold = finite(key, v)?,
            "jsd_resolution" => self.jsd_resolution = positive(key, v)?,
            "eval_split" => {
                if !["train", "val", "test"].contains(&v) {
                    return Err(format!("eval_split must be train, val or test, got {v:?}"));
                }
                self.eval_split = v.into()
            }
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "task" => match self.task {
                Task::Reconstruct => "reconstruct".into(),
                Task::Complete => "complete".into(),
            },
            "seed" => self.seed.to_string(),
            "shuffle_seed" => self.shuffle_seed.to_string(),
            "epochs" => self.train_config().epochs.to_string(),
            "batch_size" => self.train_config().batch_size.to_string(),
            "lr" => format!("{:e}", self.train_config().lr),
            "alpha_start" => self.alpha_start.to_string(),
            "alpha_end" => self.alpha_end.to_string(),
            "alpha_ramp_epochs" => self.alpha_ramp_epochs.to_string(),
            "grad_clip" => opt_text(&self.grad_clip),
            "checkpoint_every" => opt_text(&self.checkpoint_every),
            "threads" => self.threads.to_string(),
            "decoder" => match self.decoder {
                DecoderKind::AXform => "axform".into(),
                DecoderKind::Fc => "fc".into(),
                DecoderKind::Folding => "folding".into(),
            },
            "branches" => self.resolved_branches().to_string(),
            "latent" => self.latent.to_string(),
            "encoder_hidden" => join(&self.encoder_hidden),
            "interim_dim" => self.interim_dim.to_string(),
            "interim_points" => self.interim_points.to_string(),
            "attn_widths" => join(&self.attn_widths),
            "output_points" => self.output_points.to_string(),
            "folding_hidden" => join(&self.folding_hidden),
            "completion_latent" => self.completion_latent.to_string(),
            "coarse_points" => self.coarse_points.to_string(),
            "feature_widths" => join(&self.feature_widths),
            "shared_feature_map" => self.shared_feature_map.to_string(),
            "completion_mode" => match self.completion_mode {
                CompletionMode::Full => "full".into(),
                CompletionMode::Vanilla => "vanilla".into(),
            },
            "families" => self.families.iter().map(|f| f.name()).collect::<Vec<_>>().join(","),
            "train_per_family" => self.train_per_family.to_string(),
            "val_per_family" => self.val_per_family.to_string(),
            "test_per_family" => self.test_per_family.to_string(),
            "points" => self.points.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "partial_method" => match self.partial_method {
                PartialKind::Halfspace => "halfspace".into(),
                PartialKind::Occlusion => "occlusion".into(),
            },
            "partial_offset" => self.partial_offset.to_string(),
            "occlusion_resolution" => self.occlusion_resolution.to_string(),
            "occlusion_shell" => self.occlusion_shell.to_string(),
            "fscore_threshold" => self.fscore_threshold.to_string(),
            "jsd_resolution" => self.jsd_resolution.to_string(),
            "eval_split" => self.eval_split.clone(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Every key with its effective value.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }

    pub fn resolved_branches(&self) -> usize {
        self.branches.unwrap_or(match self.task {
            Task::Reconstruct => 1,
            Task::Complete => 4,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let base = match self.task {
            Task::Reconstruct => TrainConfig::reconstruction(),
            Task::Complete => TrainConfig::completion(),
        };
        TrainConfig {
            epochs: self.epochs.unwrap_or(base.epochs),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            lr: self.lr.unwrap_or(base.lr),
            alpha: AlphaSchedule { start: self.alpha_start, end: self.alpha_end, ramp_epochs: self.alpha_ramp_epochs },
            shuffle_seed: self.shuffle_seed,
            grad_clip: self.grad_clip,
            checkpoint_every: self.checkpoint_every,
            ..base
        }
    }

    fn block(&self, k1: usize, m: usize) -> AXformConfig {
        AXformConfig { k1, k2: self.interim_dim, n: self.interim_points, m, attn_widths: self.attn_widths.clone() }
    }

    pub fn recon_config(&self) -> axform_core::Result<ReconConfig> {
        let encoder = EncoderConfig { hidden: self.encoder_hidden.clone(), out: self.latent };
        let k = self.resolved_branches();
        let decoder = match self.decoder {
            DecoderKind::AXform if k == 1 => DecoderConfig::AXform(self.block(self.latent, self.output_points)),
            DecoderKind::AXform => DecoderConfig::MultiBranch {
                branches: k,
                block: self.block(self.latent, MultiBranchDecoder::per_branch_points(self.output_points, k)?),
            },
            DecoderKind::Fc => DecoderConfig::Fc { points: self.output_points },
            DecoderKind::Folding => DecoderConfig::Folding { points: self.output_points, hidden: self.folding_hidden.clone() },
        };
        Ok(ReconConfig { encoder, decoder })
    }

    pub fn completion_config(&self) -> AXformNetConfig {
        AXformNetConfig {
            branches: self.resolved_branches(),
            coarse_points: self.coarse_points,
            encoder: EncoderConfig { hidden: self.encoder_hidden.clone(), out: self.completion_latent },
            feature_widths: self.feature_widths.clone(),
            shared_feature_map: self.shared_feature_map,
            interim_dim: self.interim_dim,
            interim_points: self.interim_points,
            attn_widths: self.attn_widths.clone(),
        }
    }

    pub fn partial_method(&self) -> PartialMethod {
        match self.partial_method {
            PartialKind::Halfspace => PartialMethod::HalfspaceCut { direction: None, offset: self.partial_offset },
            PartialKind::Occlusion => {
                PartialMethod::ViewpointOcclusion { resolution: self.occlusion_resolution, shell: self.occlusion_shell }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_task() {
        let r = RunConfig::default().train_config();
        assert_eq!((r.epochs, r.batch_size, r.lr), (200, 32, 1e-4));
        let c = RunConfig::parse("task = complete\n").unwrap();
        let t = c.train_config();
        assert_eq!((t.epochs, t.batch_size, t.lr), (100, 16, 1e-3));
        assert_eq!(c.resolved_branches(), 4);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let e = RunConfig::parse("epochs = 3\nbogus = 1\n").unwrap_err();
        assert_eq!(e.offset, 11);
        assert!(RunConfig::parse("epochs = -1").is_err());
        assert!(RunConfig::parse("decoder = mlp").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::parse("# comment\nbranches = 8 # trailing\nlr = 0.001\nfamilies = plane\n").unwrap();
        c.apply_override("grad_clip=5").unwrap();
        let again = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(again.to_text(), c.to_text());
        assert_eq!(again.train_config(), c.train_config());
        assert_eq!(again.recon_config().unwrap(), c.recon_config().unwrap());
    }
}
