//! The "FBIC1" checkpoint file: config text block, counters, dataset
//! cursor and skip set, RNG state, spike-detector state, then every named
//! parameter tensor followed by the Adam moments in the same order.
//! Everything is little-endian; save → load → save is byte-identical.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::bytesio::*;
use crate::config::{parse_kv_block, ModelConfig, TrainConfig};
use crate::data::DatasetCursor;
use crate::error::{Error, Result};
use crate::metrics::{FlipFlopReport, SignSnapshot};
use crate::model::ModelParams;
use crate::params::ParamSet;

pub const CKPT_MAGIC: &[u8] = b"FBIC1";

/// Adam first/second moments, aligned with the parameter store order.
#[derive(Clone)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(store: &ParamSet) -> Self {
        AdamState {
            t: 0,
            m: store.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            v: store.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// Spike-detector state that must survive checkpoint resume so a resumed
/// run is bit-identical to an uninterrupted one.
#[derive(Clone, Debug, Default)]
pub struct DetectorState {
    pub window: Vec<f32>,
    pub run: u64,
}

#[derive(Clone)]
pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub step: u64,
    pub adam_t: u64,
    pub cursor: DatasetCursor,
    pub skips: BTreeSet<usize>,
    pub rng_state: [u8; 48],
    pub detector: DetectorState,
    pub tracker_prev: Option<SignSnapshot>,
    pub tracker_last: Option<FlipFlopReport>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[allow(clippy::too_many_arguments)]
pub fn save(
    path: &Path,
    model: &ModelParams,
    train_cfg: &TrainConfig,
    adam: &AdamState,
    step: u64,
    cursor: DatasetCursor,
    skips: &BTreeSet<usize>,
    rng_state: [u8; 48],
    detector: &DetectorState,
    tracker: (Option<&SignSnapshot>, Option<&FlipFlopReport>),
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    write_str(&mut w, &format!("{}{}", model.cfg.to_kv(), train_cfg.to_kv()))?;
    write_u64(&mut w, step)?;
    write_u64(&mut w, adam.t)?;
    write_u64(&mut w, cursor.chunk_ordinal as u64)?;
    write_u64(&mut w, cursor.windows_done as u64)?;
    write_u64(&mut w, skips.len() as u64)?;
    for &s in skips {
        write_u64(&mut w, s as u64)?;
    }
    w.write_all(&rng_state)?;
    write_u64(&mut w, detector.window.len() as u64)?;
    write_f32s(&mut w, &detector.window)?;
    write_u64(&mut w, detector.run)?;
    match tracker.0 {
        Some(snap) => {
            write_u64(&mut w, 1)?;
            snap.write_to(&mut w)?;
        }
        None => write_u64(&mut w, 0)?,
    }
    match tracker.1 {
        Some(r) => {
            write_u64(&mut w, 1)?;
            write_u64(&mut w, r.step_from)?;
            write_u64(&mut w, r.step_to)?;
            write_u64(&mut w, r.total_flips)?;
            write_u64(&mut w, r.n_total as u64)?;
        }
        None => write_u64(&mut w, 0)?,
    }
    write_u64(&mut w, model.store.len() as u64)?;
    for (_, p) in model.store.iter() {
        write_str(&mut w, &p.name)?;
        write_u64(&mut w, p.shape.len() as u64)?;
        for &d in &p.shape {
            write_u64(&mut w, d as u64)?;
        }
        write_f32s(&mut w, &p.data)?;
    }
    for buf in &adam.m {
        write_f32s(&mut w, buf)?;
    }
    for buf in &adam.v {
        write_f32s(&mut w, buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, CKPT_MAGIC)?;
    let cfg_text = read_str(&mut r)?;
    let (model_cfg, train_cfg) =
        parse_kv_block(&cfg_text, ModelConfig::toy(), TrainConfig::default())?;
    let step = read_u64(&mut r)?;
    let adam_t = read_u64(&mut r)?;
    let cursor = DatasetCursor {
        chunk_ordinal: read_u64(&mut r)? as usize,
        windows_done: read_u64(&mut r)? as usize,
    };
    let n_skips = read_u64(&mut r)? as usize;
    let mut skips = BTreeSet::new();
    for _ in 0..n_skips {
        skips.insert(read_u64(&mut r)? as usize);
    }
    let mut rng_state = [0u8; 48];
    r.read_exact(&mut rng_state)
        .map_err(|_| Error::Format("truncated checkpoint: rng state".into()))?;
    let wlen = read_u64(&mut r)? as usize;
    let window = read_f32s(&mut r, wlen)?;
    let run = read_u64(&mut r)?;
    let tracker_prev = if read_u64(&mut r)? == 1 {
        Some(SignSnapshot::read_from(&mut r)?)
    } else {
        None
    };
    let tracker_last = if read_u64(&mut r)? == 1 {
        let step_from = read_u64(&mut r)?;
        let step_to = read_u64(&mut r)?;
        let total_flips = read_u64(&mut r)?;
        let n_total = read_u64(&mut r)? as usize;
        Some(FlipFlopReport {
            step_from,
            step_to,
            per_tensor: Vec::new(),
            total_flips,
            n_total,
            ff_ratio: total_flips as f64 / n_total as f64,
        })
    } else {
        None
    };
    let n_params = read_u64(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = read_str(&mut r)?;
        let ndim = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let data = read_f32s(&mut r, shape.iter().product())?;
        tensors.push((name, shape, data));
    }
    let mut m = Vec::with_capacity(n_params);
    for t in &tensors {
        m.push(read_f32s(&mut r, t.2.len())?);
    }
    let mut v = Vec::with_capacity(n_params);
    for t in &tensors {
        v.push(read_f32s(&mut r, t.2.len())?);
    }
    let mut trailing = Vec::new();
    if r.read_to_end(&mut trailing)? > 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint {
        model_cfg,
        train_cfg,
        step,
        adam_t,
        cursor,
        skips,
        rng_state,
        detector: DetectorState { window, run },
        tracker_prev,
        tracker_last,
        tensors,
        m,
        v,
    })
}

impl Checkpoint {
    /// Rebuild the model and optimizer state. Parameter names and shapes
    /// must match the config's layout exactly.
    pub fn into_model(self) -> Result<(ModelParams, AdamState)> {
        let mut model = ModelParams::init(&self.model_cfg, 0)?;
        if self.tensors.len() != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, config implies {}",
                self.tensors.len(),
                model.store.len()
            )));
        }
        for (name, shape, data) in &self.tensors {
            let id = model
                .store
                .by_name(name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
            let p = model.store.get_mut(id);
            if &p.shape != shape {
                return Err(Error::Format(format!(
                    "tensor {name}: shape {:?} != expected {:?}",
                    shape, p.shape
                )));
            }
            p.data.copy_from_slice(data);
        }
        // moments are stored in tensor order, which is the store order
        let mut adam = AdamState::new(&model.store);
        adam.t = self.adam_t;
        for (i, (name, _, _)) in self.tensors.iter().enumerate() {
            let id = model.store.by_name(name).expect("checked above");
            adam.m[id.0].copy_from_slice(&self.m[i]);
            adam.v[id.0].copy_from_slice(&self.v[i]);
        }
        Ok((model, adam))
    }
}
