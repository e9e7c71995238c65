//! Binary checkpoints.
//!
//! Layout (little-endian): magic `SPRW`, format version `u32`, section
//! count `u32`, then per section a `u32`-length name and a `u64`-length
//! payload. Floats are stored as raw bits, so a save/load round trip is
//! exact and a resumed run replays the uninterrupted one.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use sparse_at_core::metrics::MetricsRecord;
use sparse_at_core::models::ModelSpec;
use sparse_at_core::sparsity::LayerMask;
use sparse_at_core::train::{OptimizerState, Topology, TrainConfig, Trainer, TrendQueues};
use sparse_at_core::{Model, Real, Tensor};

use crate::error::{HarnessError, Result};

/// Trainer, history index of the best epoch, and checkpoint metadata.
pub type Restored<T> = (Trainer<T>, Option<usize>, BTreeMap<String, String>);

pub const MAGIC: &[u8; 4] = b"SPRW";
pub const VERSION: u32 = 1;

/// SHA-256 of the model spec's canonical text.
pub fn spec_hash(spec: &ModelSpec) -> [u8; 32] {
    Sha256::digest(spec.canonical().as_bytes()).into()
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend(s.as_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend(b);
    }
    fn values<T: Real>(&mut self, v: &[T]) {
        self.bytes(&T::to_le_bytes_vec(v));
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| HarnessError::Checkpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| HarnessError::Checkpoint("invalid utf-8".into()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
    fn values<T: Real>(&mut self, expect: usize) -> Result<Vec<T>> {
        let b = self.bytes()?;
        if b.len() != expect * std::mem::size_of::<T>() {
            return Err(HarnessError::Checkpoint(format!(
                "expected {expect} values, found {} bytes",
                b.len()
            )));
        }
        Ok(T::from_le_bytes_slice(b))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        (0..n).map(|_| self.f64()).collect()
    }
}

/// Named sections of a checkpoint file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sections(pub Vec<(String, Vec<u8>)>);

impl Sections {
    pub fn get(&self, name: &str) -> Result<&[u8]> {
        self.0
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
            .ok_or_else(|| HarnessError::Checkpoint(format!("missing section {name:?}")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.0.extend(MAGIC);
        w.u32(VERSION);
        w.u32(self.0.len() as u32);
        for (name, body) in &self.0 {
            w.str(name);
            w.bytes(body);
        }
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(HarnessError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(HarnessError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let n = r.u32()?;
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name = r.str()?;
            out.push((name, r.bytes()?.to_vec()));
        }
        Ok(Sections(out))
    }
}

fn model_sections<T: Real>(model: &Model<T>, out: &mut Sections) {
    out.0.push(("spec_hash".into(), spec_hash(&model.spec).to_vec()));
    let mut w = Writer::default();
    w.str(T::DTYPE);
    w.u32(model.params.len() as u32);
    for p in &model.params {
        w.str(&p.name);
        w.u32(p.value.shape().len() as u32);
        p.value.shape().iter().for_each(|&d| w.u64(d as u64));
        w.values(p.value.data());
    }
    out.0.push(("params".into(), w.0));

    let mut w = Writer::default();
    w.u32(model.bn_stats.len() as u32);
    for s in &model.bn_stats {
        w.u64(s.mean.len() as u64);
        w.values(&s.mean);
        w.values(&s.var);
    }
    out.0.push(("batchnorm".into(), w.0));

    let mut w = Writer::default();
    let masked: Vec<_> = model.params.iter().filter(|p| p.mask.is_some()).collect();
    w.u32(masked.len() as u32);
    for p in masked {
        let m = p.mask.as_ref().expect("filtered");
        w.str(&p.name);
        w.u64(m.len() as u64);
        w.bytes(&m.to_packed());
    }
    out.0.push(("masks".into(), w.0));
}

/// Rebuilds a model of `spec` from checkpoint sections, refusing files
/// written for another spec or element type.
fn restore_model<T: Real>(spec: &ModelSpec, s: &Sections) -> Result<Model<T>> {
    if s.get("spec_hash")? != spec_hash(spec).as_slice() {
        return Err(HarnessError::HashMismatch);
    }
    let mut model: Model<T> = Model::build(spec, 0)?;
    let mut r = Reader::new(s.get("params")?);
    let dtype = r.str()?;
    if dtype != T::DTYPE {
        return Err(HarnessError::Checkpoint(format!(
            "checkpoint holds {dtype} values, expected {}",
            T::DTYPE
        )));
    }
    let n = r.u32()? as usize;
    if n != model.params.len() {
        return Err(HarnessError::Checkpoint(format!("{n} parameters, model has {}", model.params.len())));
    }
    for p in &mut model.params {
        let name = r.str()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if name != p.name || shape != p.value.shape() {
            return Err(HarnessError::Checkpoint(format!("parameter {name} {shape:?} does not match {}", p.name)));
        }
        let len = p.value.len();
        p.value = Tensor::from_vec(&shape, r.values(len)?)?;
        p.mask = None;
    }

    let mut r = Reader::new(s.get("batchnorm")?);
    let n = r.u32()? as usize;
    if n != model.bn_stats.len() {
        return Err(HarnessError::Checkpoint("batch-norm layer count mismatch".into()));
    }
    for st in &mut model.bn_stats {
        let c = r.u64()? as usize;
        if c != st.mean.len() {
            return Err(HarnessError::Checkpoint("batch-norm width mismatch".into()));
        }
        st.mean = r.values(c)?;
        st.var = r.values(c)?;
    }

    let mut r = Reader::new(s.get("masks")?);
    let n = r.u32()? as usize;
    for _ in 0..n {
        let name = r.str()?;
        let len = r.u64()? as usize;
        let mask = LayerMask::from_packed(len, r.bytes()?)?;
        let p = model
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| HarnessError::Checkpoint(format!("mask for unknown parameter {name}")))?;
        if p.value.len() != len {
            return Err(HarnessError::Checkpoint(format!("mask length mismatch for {name}")));
        }
        p.mask = Some(mask);
    }
    Ok(model)
}

fn meta_section(meta: &BTreeMap<String, String>) -> Vec<u8> {
    meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect::<String>().into_bytes()
}

fn parse_meta(bytes: &[u8]) -> Result<BTreeMap<String, String>> {
    let text = std::str::from_utf8(bytes).map_err(|_| HarnessError::Checkpoint("invalid meta".into()))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| HarnessError::Io(tmp.clone(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| HarnessError::Io(path.to_path_buf(), e))
}

fn read_sections(path: &Path) -> Result<Sections> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::Io(path.to_path_buf(), e))?;
    Sections::decode(&bytes)
}

/// Model-only checkpoint with free-form metadata.
pub fn save_model<T: Real>(path: &Path, model: &Model<T>, meta: &BTreeMap<String, String>) -> Result<()> {
    let mut s = Sections::default();
    model_sections(model, &mut s);
    s.0.push(("meta".into(), meta_section(meta)));
    write_file(path, &s.encode())
}

pub fn load_model<T: Real>(path: &Path, spec: &ModelSpec) -> Result<(Model<T>, BTreeMap<String, String>)> {
    let s = read_sections(path)?;
    Ok((restore_model(spec, &s)?, parse_meta(s.get("meta")?)?))
}

/// Everything in a [`Trainer`] except its configuration and best snapshot.
pub fn encode_trainer<T: Real>(t: &Trainer<T>, meta: &BTreeMap<String, String>) -> Vec<u8> {
    let mut s = Sections::default();
    model_sections(&t.model, &mut s);

    let mut w = Writer::default();
    w.u64(t.opt.step);
    w.f64(t.opt.lr);
    w.u32(t.opt.velocity.len() as u32);
    for v in &t.opt.velocity {
        w.values(v.data());
    }
    s.0.push(("optimizer".into(), w.0));

    let mut w = Writer::default();
    w.u64(t.epoch as u64);
    w.u64(t.iteration);
    w.f64(t.cum_flops);
    w.u64(t.topology_updates);
    w.u32(u32::from(t.boost.0) | (u32::from(t.boost.1) << 1));
    w.u64(t.best.as_ref().map_or(u64::MAX, |(i, _)| *i as u64));
    s.0.push(("progress".into(), w.0));

    // Every random stream is keyed by (seed, epoch, purpose); the seed and
    // the next epoch index fully determine the generators of the remaining
    // run.
    let mut w = Writer::default();
    w.u64(t.seed);
    w.u64(t.epoch as u64);
    s.0.push(("rng".into(), w.0));

    let mut w = Writer::default();
    w.f64s(&t.trends.gaps_vec());
    w.f64s(&t.trends.val_losses_vec());
    s.0.push(("trends".into(), w.0));

    let rows: String = t.history.iter().map(|r| r.to_csv_row() + "\n").collect();
    s.0.push(("history".into(), rows.into_bytes()));
    s.0.push(("meta".into(), meta_section(meta)));
    s.encode()
}

pub fn save_trainer<T: Real>(path: &Path, t: &Trainer<T>, meta: &BTreeMap<String, String>) -> Result<()> {
    write_file(path, &encode_trainer(t, meta))
}

/// Trainer state from a checkpoint; `best` is left empty (it lives in its
/// own file) and its history index is returned alongside the metadata.
pub fn decode_trainer<T: Real>(
    bytes: &[u8],
    spec: &ModelSpec,
    cfg: TrainConfig,
    topology: Topology,
) -> Result<Restored<T>> {
    let s = Sections::decode(bytes)?;
    let model: Model<T> = restore_model(spec, &s)?;

    let mut r = Reader::new(s.get("optimizer")?);
    let mut opt = OptimizerState::new(&model);
    opt.step = r.u64()?;
    opt.lr = r.f64()?;
    if r.u32()? as usize != opt.velocity.len() {
        return Err(HarnessError::Checkpoint("optimizer buffer count mismatch".into()));
    }
    for v in &mut opt.velocity {
        let n = v.len();
        let shape = v.shape().to_vec();
        *v = Tensor::from_vec(&shape, r.values(n)?)?;
    }

    let mut r = Reader::new(s.get("progress")?);
    let epoch = r.u64()? as usize;
    let iteration = r.u64()?;
    let cum_flops = r.f64()?;
    let topology_updates = r.u64()?;
    let flags = r.u32()?;
    let best = r.u64()?;

    let mut r = Reader::new(s.get("rng")?);
    let seed = r.u64()?;

    let mut r = Reader::new(s.get("trends")?);
    let trends = TrendQueues {
        gaps: r.f64s()?.into(),
        val_losses: r.f64s()?.into(),
    };

    let history_text = std::str::from_utf8(s.get("history")?)
        .map_err(|_| HarnessError::Checkpoint("invalid history".into()))?;
    let history = history_text
        .lines()
        .map(MetricsRecord::from_csv_row)
        .collect::<std::result::Result<Vec<_>, _>>()?;

    let mut t = Trainer::new(model, cfg, topology, seed, cum_flops)?;
    t.opt = opt;
    t.epoch = epoch;
    t.iteration = iteration;
    t.topology_updates = topology_updates;
    t.boost = (flags & 1 != 0, flags & 2 != 0);
    t.trends = trends;
    t.history = history;
    let best = (best != u64::MAX).then_some(best as usize);
    Ok((t, best, parse_meta(s.get("meta")?)?))
}

pub fn load_trainer<T: Real>(
    path: &Path,
    spec: &ModelSpec,
    cfg: TrainConfig,
    topology: Topology,
) -> Result<Restored<T>> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::Io(path.to_path_buf(), e))?;
    decode_trainer(&bytes, spec, cfg, topology)
}
