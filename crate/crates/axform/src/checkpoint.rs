//! Checkpoint files.
//!
//! Layout (little-endian): magic `AXCK`, u32 version, u32 tensor count, then
//! per tensor u16 name length, name bytes, u8 rank, rank x u64 dims and f64
//! values. The optimizer section follows in the same encoding (its own u32
//! count, then tensors named `adam/...` and `history/...`), then a u64 epoch.

use std::path::Path;

use axform_core::training::{AdamState, LossHistory, TrainState};
use axform_core::{ParamSet, Tensor};

use crate::error::{read_file, write_file, AppError, AppResult, FormatError};

pub const MAGIC: &[u8; 4] = b"AXCK";
pub const VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    pub state: TrainState,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn tensor_section(out: &mut Vec<u8>, tensors: &[(String, Tensor)]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        put_tensor(out, name, t);
    }
}

fn owned(v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec())
}

pub fn encode(params: &ParamSet, state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let named: Vec<(String, Tensor)> = params.names().iter().cloned().zip(params.tensors().iter().cloned()).collect();
    tensor_section(&mut out, &named);
    let a = &state.adam;
    let mut opt = vec![
        ("adam/step".to_string(), Tensor::scalar(a.step as f64)),
        ("adam/lr".to_string(), Tensor::scalar(a.lr)),
        ("adam/beta1".to_string(), Tensor::scalar(a.beta1)),
        ("adam/beta2".to_string(), Tensor::scalar(a.beta2)),
        ("adam/eps".to_string(), Tensor::scalar(a.eps)),
        ("history/train".to_string(), owned(&state.history.train)),
        ("history/val".to_string(), owned(&state.history.val)),
    ];
    for (i, (name, t)) in named.iter().enumerate() {
        opt.push((format!("adam/m/{name}"), Tensor::new(t.shape().to_vec(), a.m[i].clone()).expect("moment shape")));
        opt.push((format!("adam/v/{name}"), Tensor::new(t.shape().to_vec(), a.v[i].clone()).expect("moment shape")));
    }
    tensor_section(&mut out, &opt);
    out.extend_from_slice(&(state.epoch as u64).to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        let s = self
            .bytes
            .get(self.pos..self.pos.saturating_add(n))
            .ok_or_else(|| FormatError::new(self.bytes.len() as u64, format!("truncated {what} at offset {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor), FormatError> {
        let start = self.pos as u64;
        let len = self.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| FormatError::new(start + 2, "tensor name is not UTF-8"))?
            .to_string();
        let rank = self.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("dimension")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| FormatError::new(start, "tensor too large"))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| FormatError::new(start, "tensor too large"))?, "tensor values")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, Tensor::new(shape, data).map_err(|e| FormatError::new(start, e.to_string()))?))
    }

    fn section(&mut self) -> Result<Vec<(String, Tensor)>, FormatError> {
        let count = self.u32("tensor count")? as usize;
        (0..count).map(|_| self.tensor()).collect()
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(FormatError::new(0, "bad magic, expected \"AXCK\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FormatError::new(4, format!("unsupported checkpoint version {version} (this build reads {VERSION})")));
    }
    let params = r.section()?;
    let opt_start = r.pos as u64;
    let opt = r.section()?;
    let epoch = r.u64("epoch")? as usize;
    if r.pos != bytes.len() {
        return Err(FormatError::new(r.pos as u64, "trailing bytes after checkpoint"));
    }
    let find = |name: &str| {
        opt.iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| FormatError::new(opt_start, format!("optimizer section lacks {name}")))
    };
    let scalar = |name: &str| -> Result<f64, FormatError> {
        find(name)?.item().ok_or_else(|| FormatError::new(opt_start, format!("{name} is not a scalar")))
    };
    let mut m = Vec::with_capacity(params.len());
    let mut v = Vec::with_capacity(params.len());
    for (name, t) in &params {
        for (buf, prefix) in [(&mut m, "adam/m/"), (&mut v, "adam/v/")] {
            let x = find(&format!("{prefix}{name}"))?;
            if x.shape() != t.shape() {
                return Err(FormatError::new(opt_start, format!("{prefix}{name} shape {:?} differs from {:?}", x.shape(), t.shape())));
            }
            buf.push(x.data().to_vec());
        }
    }
    let adam = AdamState {
        lr: scalar("adam/lr")?,
        beta1: scalar("adam/beta1")?,
        beta2: scalar("adam/beta2")?,
        eps: scalar("adam/eps")?,
        step: scalar("adam/step")? as u64,
        m,
        v,
    };
    let history = LossHistory { train: find("history/train")?.data().to_vec(), val: find("history/val")?.data().to_vec() };
    Ok(Checkpoint { params, state: TrainState { epoch, adam, history } })
}

impl Checkpoint {
    /// Copies stored tensors into `params`, which must have the same names and shapes.
    pub fn restore(&self, params: &mut ParamSet) -> Result<(), String> {
        if params.len() != self.params.len() {
            return Err(format!("checkpoint holds {} tensors, model has {}", self.params.len(), params.len()));
        }
        for (i, (name, t)) in self.params.iter().enumerate() {
            if params.names()[i] != *name || params.tensors()[i].shape() != t.shape() {
                return Err(format!(
                    "checkpoint tensor {name} {:?} does not match model tensor {} {:?}",
                    t.shape(),
                    params.names()[i],
                    params.tensors()[i].shape()
                ));
            }
        }
        for (dst, (_, src)) in params.tensors_mut().iter_mut().zip(&self.params) {
            *dst = src.clone();
        }
        Ok(())
    }
}

pub fn save(path: &Path, params: &ParamSet, state: &TrainState) -> AppResult<()> {
    write_file(path, &encode(params, state))
}

pub fn load(path: &Path) -> AppResult<Checkpoint> {
    decode(&read_file(path)?).map_err(|e| AppError::parse(path, e))
}

/// Loads a checkpoint into `params`, returning its training state.
pub fn load_into(path: &Path, params: &mut ParamSet) -> AppResult<TrainState> {
    let ck = load(path)?;
    ck.restore(params).map_err(|msg| AppError::invalid(path, msg))?;
    Ok(ck.state)
}
