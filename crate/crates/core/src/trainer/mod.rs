//! The pretraining loop: Adam with warmup+cosine schedule, global-norm
//! gradient clipping, chunked data consumption, loss-spike detection with
//! checkpoint rollback and chunk skipping, and checkpoint persistence.

pub mod checkpoint;

use std::collections::{BTreeSet, VecDeque};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::TrainConfig;
use crate::data::{ChunkedDataset, DatasetCursor, DatasetReader};
use crate::distill::{self, TokenBatch};
use crate::error::{Error, Result};
use crate::metrics::SignTracker;
use crate::model::{InferModel, ModelParams};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tensor::{kernels, Graph};

pub use checkpoint::{AdamState, Checkpoint, DetectorState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Autoregressive distillation against a frozen teacher.
    Ad,
    /// Normal autoregressive one-hot objective.
    Na,
}

/// Warmup+cosine schedule: linear 0→peak over `warmup_steps`, then cosine
/// decay from peak to final at `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> Result<f32> {
    if step > cfg.total_steps as u64 {
        return Err(Error::Contract(format!(
            "step {step} outside schedule 0..={}",
            cfg.total_steps
        )));
    }
    let warmup = cfg.warmup_steps as f64;
    let total = cfg.total_steps as f64;
    let s = step as f64;
    let lr = if s <= warmup && cfg.warmup_steps > 0 {
        cfg.peak_lr as f64 * s / warmup
    } else {
        let progress = (s - warmup) / (total - warmup);
        cfg.final_lr as f64
            + 0.5 * (cfg.peak_lr as f64 - cfg.final_lr as f64)
                * (1.0 + (std::f64::consts::PI * progress).cos())
    };
    Ok(lr as f32)
}

/// Scale all gradients so the global L2 norm does not exceed `clip_norm`.
/// Returns the pre-clip norm (logged before clipping) and whether scaling
/// was applied.
pub fn clip_global_norm(store: &mut ParamSet, clip_norm: f32) -> (f32, bool) {
    let mut ss = 0.0f64;
    for (_, p) in store.iter() {
        for &g in &p.grad {
            ss += g as f64 * g as f64;
        }
    }
    let norm = ss.sqrt() as f32;
    if norm.is_finite() && norm > clip_norm {
        let scale = clip_norm / norm;
        for (_, p) in store.iter_mut() {
            for g in p.grad.iter_mut() {
                *g *= scale;
            }
        }
        (norm, true)
    } else {
        (norm, false)
    }
}

/// Bias-corrected Adam over every trainable tensor. Gradients must already
/// be finite (the trainer routes non-finite norms to the spike path before
/// calling this).
pub fn adam_step(store: &mut ParamSet, st: &mut AdamState, lr: f32, cfg: &TrainConfig) -> Result<()> {
    if lr < 0.0 {
        return Err(Error::Contract(format!("negative learning rate {lr}")));
    }
    st.t += 1;
    let b1 = cfg.adam_beta1;
    let b2 = cfg.adam_beta2;
    let bc1 = (1.0 - (b1 as f64).powi(st.t as i32)) as f32;
    let bc2 = (1.0 - (b2 as f64).powi(st.t as i32)) as f32;
    for (id, p) in store.iter_mut() {
        let m = &mut st.m[id.0];
        let v = &mut st.v[id.0];
        for i in 0..p.data.len() {
            let g = p.grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p.data[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Median-based spike rule: spike when the loss exceeds factor × median of
/// the last `window` losses for `patience` consecutive steps; non-finite
/// losses spike immediately. The window only arms once full.
pub struct SpikeDetector {
    window: VecDeque<f32>,
    cap: usize,
    factor: f32,
    patience: usize,
    run: usize,
}

impl SpikeDetector {
    pub fn new(cfg: &crate::config::SpikeConfig) -> Self {
        SpikeDetector {
            window: VecDeque::with_capacity(cfg.window),
            cap: cfg.window,
            factor: cfg.factor,
            patience: cfg.patience,
            run: 0,
        }
    }

    pub fn observe(&mut self, loss: f32) -> bool {
        if !loss.is_finite() {
            return true;
        }
        let elevated = self.window.len() == self.cap && loss > self.factor * self.median();
        if elevated {
            self.run += 1;
        } else {
            self.run = 0;
        }
        self.window.push_back(loss);
        if self.window.len() > self.cap {
            self.window.pop_front();
        }
        self.run >= self.patience
    }

    fn median(&self) -> f32 {
        let mut sorted: Vec<f32> = self.window.iter().copied().collect();
        sorted.sort_by(f32::total_cmp);
        let n = sorted.len();
        if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        }
    }

    pub fn reset(&mut self) {
        self.window.clear();
        self.run = 0;
    }

    pub fn state(&self) -> DetectorState {
        DetectorState {
            window: self.window.iter().copied().collect(),
            run: self.run as u64,
        }
    }

    pub fn restore(&mut self, st: &DetectorState) {
        self.window = st.window.iter().copied().collect();
        self.run = st.run as usize;
    }
}

/// One training-log record. `chunk_id` is −1 for rows not tied to a batch.
#[derive(Clone, Debug)]
pub struct LogRow {
    pub step: u64,
    pub loss: f32,
    pub lr: f32,
    pub grad_norm_preclip: f32,
    pub ff_ratio: f64,
    pub chunk_id: i64,
    pub event: String,
}

pub const LOG_CSV_HEADER: &str = "step,loss,lr,grad_norm_preclip,ff_ratio,chunk_id,event";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.loss,
            self.lr,
            self.grad_norm_preclip,
            self.ff_ratio,
            self.chunk_id,
            self.event
        )
    }
}

/// Replay a log with rollbacks applied: returns only the rows whose updates
/// survive into the final parameters (rows undone by a rollback are dropped).
pub fn audit_retained(rows: &[LogRow]) -> Vec<LogRow> {
    let mut retained: Vec<LogRow> = Vec::new();
    for row in rows {
        if let Some(rest) = row.event.strip_prefix("rollback:") {
            let to_step: u64 = rest
                .split(';')
                .next()
                .and_then(|s| s.parse().ok())
                .unwrap_or(0);
            retained.retain(|r| r.step <= to_step);
        } else if row.event != "spike" {
            retained.push(row.clone());
        }
    }
    retained
}

struct Snapshot {
    step: u64,
    adam_t: u64,
    cursor: DatasetCursor,
    rng_state: [u8; 48],
    params: Vec<Vec<f32>>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_step: u64,
    pub rollbacks: usize,
    pub skipped_chunks: Vec<usize>,
    pub early_stopped: bool,
    pub log: Vec<LogRow>,
    pub final_checkpoint: Option<PathBuf>,
}

type EvalHook<'h> = Box<dyn FnMut(u64, &ModelParams) -> Result<()> + 'h>;

pub struct TrainSession<'h> {
    pub model: ModelParams,
    teacher: Option<InferModel>,
    reader: DatasetReader,
    cfg: TrainConfig,
    mode: TrainMode,
    adam: AdamState,
    rng: Rng,
    step: u64,
    detector: SpikeDetector,
    tracker: SignTracker,
    snapshots: VecDeque<Snapshot>,
    log: Vec<LogRow>,
    log_writer: Option<BufWriter<File>>,
    ckpt_dir: Option<PathBuf>,
    eval_every: u64,
    eval_hook: Option<EvalHook<'h>>,
    rollbacks: usize,
}

const SNAPSHOT_RING: usize = 4;

impl<'h> TrainSession<'h> {
    pub fn new(
        model: ModelParams,
        teacher: Option<InferModel>,
        dataset: ChunkedDataset,
        cfg: TrainConfig,
        mode: TrainMode,
    ) -> Result<Self> {
        cfg.validate()?;
        model.cfg.validate()?;
        if mode == TrainMode::Ad {
            let t = teacher
                .as_ref()
                .ok_or_else(|| Error::Config("AD mode requires a teacher model".into()))?;
            distill::ensure_compatible(&t.cfg, &model.cfg)?;
        }
        if cfg.seq_len > model.cfg.max_seq_len {
            return Err(Error::Config(format!(
                "train seq_len {} exceeds model context {}",
                cfg.seq_len, model.cfg.max_seq_len
            )));
        }
        if dataset.seq_len != cfg.seq_len {
            return Err(Error::Config(format!(
                "dataset seq_len {} != train seq_len {}",
                dataset.seq_len, cfg.seq_len
            )));
        }
        kernels::set_parallel(cfg.threads != 1);
        let adam = AdamState::new(&model.store);
        let reader = DatasetReader::new(dataset, cfg.seed);
        let rng = Rng::seed_from_u64(cfg.seed ^ 0xD1574F11);
        let detector = SpikeDetector::new(&cfg.spike);
        let tracker = SignTracker::new(cfg.ff_interval);
        Ok(TrainSession {
            model,
            teacher,
            reader,
            cfg,
            mode,
            adam,
            rng,
            step: 0,
            detector,
            tracker,
            snapshots: VecDeque::new(),
            log: Vec::new(),
            log_writer: None,
            ckpt_dir: None,
            eval_every: 0,
            eval_hook: None,
            rollbacks: 0,
        })
    }

    /// Continue from an on-disk checkpoint over the same (or a re-built,
    /// identical) dataset.
    pub fn resume(
        ckpt_path: &Path,
        teacher: Option<InferModel>,
        dataset: ChunkedDataset,
        mode: TrainMode,
    ) -> Result<Self> {
        let ck = checkpoint::load(ckpt_path)?;
        let cfg = ck.train_cfg.clone();
        let cursor = ck.cursor;
        let skips = ck.skips.clone();
        let rng = Rng::from_state_bytes(&ck.rng_state);
        let det_state = ck.detector.clone();
        let tracker_prev = ck.tracker_prev.clone();
        let tracker_last = ck.tracker_last.clone();
        let step = ck.step;
        let (model, adam) = ck.into_model()?;
        let mut session = TrainSession::new(model, teacher, dataset, cfg, mode)?;
        session.adam = adam;
        session.rng = rng;
        session.step = step;
        session.detector.restore(&det_state);
        session.tracker.restore(tracker_prev, tracker_last);
        session.reader.seek(cursor, skips);
        Ok(session)
    }

    pub fn with_checkpoint_dir(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        self.ckpt_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn with_log_file(mut self, path: &Path) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{LOG_CSV_HEADER}")?;
        self.log_writer = Some(w);
        Ok(self)
    }

    pub fn with_eval_hook<F>(mut self, every: u64, hook: F) -> Self
    where
        F: FnMut(u64, &ModelParams) -> Result<()> + 'h,
    {
        self.eval_every = every;
        self.eval_hook = Some(Box::new(hook));
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn skip_set(&self) -> &BTreeSet<usize> {
        self.reader.skip_set()
    }

    fn take_snapshot(&mut self) {
        let snap = Snapshot {
            step: self.step,
            adam_t: self.adam.t,
            cursor: self.reader.cursor(),
            rng_state: self.rng.state_bytes(),
            params: self.model.store.iter().map(|(_, p)| p.data.clone()).collect(),
            m: self.adam.m.clone(),
            v: self.adam.v.clone(),
        };
        self.snapshots.push_back(snap);
        while self.snapshots.len() > SNAPSHOT_RING {
            self.snapshots.pop_front();
        }
    }

    fn log_row(&mut self, row: LogRow) -> Result<()> {
        if let Some(w) = self.log_writer.as_mut() {
            writeln!(w, "{}", row.to_csv())?;
        }
        self.log.push(row);
        Ok(())
    }

    fn write_checkpoint(&mut self, name: &str) -> Result<Option<PathBuf>> {
        let Some(dir) = self.ckpt_dir.clone() else {
            return Ok(None);
        };
        let path = dir.join(name);
        checkpoint::save(
            &path,
            &self.model,
            &self.cfg,
            &self.adam,
            self.step,
            self.reader.cursor(),
            self.reader.skip_set(),
            self.rng.state_bytes(),
            &self.detector.state(),
            self.tracker.state(),
        )?;
        Ok(Some(path))
    }

    /// Loss of one batch; for finite losses the graph is differentiated and
    /// gradients land in the parameter store.
    fn batch_loss(&mut self, batch: &TokenBatch) -> Result<f32> {
        let mut g = Graph::new();
        let fwd = self
            .model
            .forward_train(&mut g, &batch.ids, batch.batch, batch.seq)?;
        let loss = match self.mode {
            TrainMode::Ad => {
                let teacher = self.teacher.as_ref().expect("checked in new()");
                let probs = distill::teacher_forward(teacher, batch)?;
                let (_, mask) = batch.targets();
                distill::ad_loss(&mut g, fwd.logits, &probs, &mask)?
            }
            TrainMode::Na => distill::na_loss(&mut g, fwd.logits, batch)?,
        };
        let loss_val = g.value(loss);
        if !loss_val.is_finite() {
            return Ok(loss_val);
        }
        g.backward(loss)?;
        for (pid, node) in &fwd.leaves {
            let p = self.model.store.get_mut(*pid);
            match g.grad(*node) {
                Some(grad) => p.grad.copy_from_slice(grad),
                None => p.grad.iter_mut().for_each(|v| *v = 0.0),
            }
        }
        Ok(loss_val)
    }

    fn rollback(&mut self, spiking_chunk: usize) -> Result<u64> {
        // newest snapshot that predates any consumption of the spiking chunk
        let idx = self
            .snapshots
            .iter()
            .rposition(|s| {
                s.cursor.chunk_ordinal < spiking_chunk
                    || (s.cursor.chunk_ordinal == spiking_chunk && s.cursor.windows_done == 0)
            })
            .ok_or_else(|| {
                Error::Aborted(format!(
                    "loss spike in chunk {spiking_chunk} at step {} with no checkpoint predating the chunk",
                    self.step
                ))
            })?;
        let snap = &self.snapshots[idx];
        for (i, (_, p)) in self.model.store.iter_mut().enumerate() {
            p.data.copy_from_slice(&snap.params[i]);
            p.grad.iter_mut().for_each(|v| *v = 0.0);
        }
        for (i, buf) in self.adam.m.iter_mut().enumerate() {
            buf.copy_from_slice(&snap.m[i]);
        }
        for (i, buf) in self.adam.v.iter_mut().enumerate() {
            buf.copy_from_slice(&snap.v[i]);
        }
        self.adam.t = snap.adam_t;
        self.rng = Rng::from_state_bytes(&snap.rng_state);
        self.step = snap.step;
        let cursor = snap.cursor;
        let restored_step = snap.step;
        // drop snapshots taken after the restore point
        self.snapshots.truncate(idx + 1);
        let mut skips = self.reader.skip_set().clone();
        skips.insert(spiking_chunk);
        self.reader.seek(cursor, skips);
        self.detector.reset();
        self.tracker.reset_to(restored_step);
        self.rollbacks += 1;
        Ok(restored_step)
    }

    pub fn run(&mut self) -> Result<TrainOutcome> {
        let batch_seqs = (self.cfg.batch_tokens / self.cfg.seq_len).max(1);
        let mut early_stopped = false;
        if self.snapshots.is_empty() {
            self.take_snapshot();
        }
        while self.step < self.cfg.total_steps as u64 {
            if self.reader.at_chunk_start() {
                self.take_snapshot();
            }
            let Some((batch, chunk)) = self.reader.next_batch(batch_seqs)? else {
                early_stopped = true;
                let row = LogRow {
                    step: self.step,
                    loss: f32::NAN,
                    lr: 0.0,
                    grad_norm_preclip: 0.0,
                    ff_ratio: self.tracker.last_ratio(),
                    chunk_id: -1,
                    event: "early_stop:dataset_exhausted".into(),
                };
                self.log_row(row)?;
                break;
            };
            let candidate = self.step + 1;
            let lr = lr_at(candidate, &self.cfg)?;
            let loss = self.batch_loss(&batch)?;

            if self.detector.observe(loss) {
                self.log_row(LogRow {
                    step: candidate,
                    loss,
                    lr,
                    grad_norm_preclip: f32::NAN,
                    ff_ratio: self.tracker.last_ratio(),
                    chunk_id: chunk as i64,
                    event: "spike".into(),
                })?;
                let restored = self.rollback(chunk)?;
                self.log_row(LogRow {
                    step: restored,
                    loss: f32::NAN,
                    lr: 0.0,
                    grad_norm_preclip: 0.0,
                    ff_ratio: self.tracker.last_ratio(),
                    chunk_id: chunk as i64,
                    event: format!("rollback:{restored};skip_chunk:{chunk}"),
                })?;
                continue;
            }

            let (grad_norm, _) = clip_global_norm(&mut self.model.store, self.cfg.clip_norm);
            if !grad_norm.is_finite() {
                // non-finite gradients take the same spike path as a bad loss
                self.log_row(LogRow {
                    step: candidate,
                    loss,
                    lr,
                    grad_norm_preclip: grad_norm,
                    ff_ratio: self.tracker.last_ratio(),
                    chunk_id: chunk as i64,
                    event: "spike".into(),
                })?;
                let restored = self.rollback(chunk)?;
                self.log_row(LogRow {
                    step: restored,
                    loss: f32::NAN,
                    lr: 0.0,
                    grad_norm_preclip: 0.0,
                    ff_ratio: self.tracker.last_ratio(),
                    chunk_id: chunk as i64,
                    event: format!("rollback:{restored};skip_chunk:{chunk}"),
                })?;
                continue;
            }
            adam_step(&mut self.model.store, &mut self.adam, lr, &self.cfg)?;
            self.step = candidate;
            self.tracker.update(self.step, &self.model)?;

            let mut event = String::new();
            if self.step % self.cfg.checkpoint_every as u64 == 0 {
                self.take_snapshot();
                self.write_checkpoint(&format!("ckpt_{:08}.fbic", self.step))?;
                event = "ckpt".into();
            }
            self.log_row(LogRow {
                step: self.step,
                loss,
                lr,
                grad_norm_preclip: grad_norm,
                ff_ratio: self.tracker.last_ratio(),
                chunk_id: chunk as i64,
                event,
            })?;
            if self.eval_every > 0 && self.step % self.eval_every == 0 {
                if let Some(hook) = self.eval_hook.as_mut() {
                    hook(self.step, &self.model)?;
                }
            }
        }
        if let Some(w) = self.log_writer.as_mut() {
            w.flush()?;
        }
        let final_checkpoint = self.write_checkpoint("final.fbic")?;
        Ok(TrainOutcome {
            final_step: self.step,
            rollbacks: self.rollbacks,
            skipped_chunks: self.reader.skip_set().iter().copied().collect(),
            early_stopped,
            log: self.log.clone(),
            final_checkpoint,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, SpikeConfig};
    use crate::data::build_chunks_from_tokens;
    use crate::model::InferModel;
    use tempfile::tempdir;

    fn tiny_model_cfg(binarize: bool) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            hidden_size: 32,
            n_heads: 2,
            n_kv_heads: 2,
            intermediate_size: 48,
            vocab_size: 259,
            max_seq_len: 32,
            initializer_range: 0.02,
            binarize,
        }
    }

    fn tiny_train_cfg(total: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            total_steps: total,
            warmup_steps: (total / 10).max(1),
            batch_tokens: 64,
            seq_len: 16,
            seed,
            checkpoint_every: 10,
            ff_interval: 5,
            ..TrainConfig::default()
        }
    }

    /// Repeating phrase with a position-dependent twist: learnable quickly.
    fn pattern_tokens(n: usize) -> Vec<u32> {
        let phrase = b"the cat sat on the mat. ";
        (0..n).map(|i| phrase[i % phrase.len()] as u32).collect()
    }

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig {
            total_steps: 10000,
            warmup_steps: 2000,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
        assert!((lr_at(2000, &cfg).unwrap() - 3e-4).abs() <= 1e-9);
        assert!((lr_at(10000, &cfg).unwrap() - 3e-5).abs() <= 1e-9);
        // midpoint of decay: final + 0.5(peak − final)
        assert!((lr_at(6000, &cfg).unwrap() - 1.65e-4).abs() <= 1e-9);
        assert!(lr_at(10001, &cfg).is_err());
        // monotone through warmup
        assert!(lr_at(1000, &cfg).unwrap() < lr_at(2000, &cfg).unwrap());
    }

    #[test]
    fn adam_zero_grads_keep_params_and_decay_moments() {
        let mut store = ParamSet::new();
        store.add("w", &[2], vec![1.0, -2.0]).unwrap();
        let mut st = AdamState::new(&store);
        st.m[0][0] = 1.0;
        st.v[0][0] = 1.0;
        let cfg = TrainConfig::default();
        adam_step(&mut store, &mut st, 0.1, &cfg).unwrap();
        let p = store.by_name("w").unwrap();
        // zero grad but nonzero first moment still moves the parameter
        // (decayed moment, standard Adam); second element is untouched
        assert!((st.m[0][0] - 0.9).abs() <= 1e-7);
        assert!((st.v[0][0] - 0.98).abs() <= 1e-7);
        assert_eq!(store.get(p).data[1], -2.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamSet::new();
        store.add("w", &[1], vec![0.0]).unwrap();
        store.get_mut(store.by_name("w").unwrap()).grad[0] = 1.0;
        let mut st = AdamState::new(&store);
        let cfg = TrainConfig::default();
        adam_step(&mut store, &mut st, 0.1, &cfg).unwrap();
        let w = store.get(store.by_name("w").unwrap()).data[0];
        assert!((w + 0.1).abs() <= 1e-6, "w = {w}");
        assert!(adam_step(&mut store, &mut st, -0.1, &cfg).is_err());
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut store = ParamSet::new();
            store.add("w", &[3], vec![0.5, -0.5, 0.25]).unwrap();
            let id = store.by_name("w").unwrap();
            let mut st = AdamState::new(&store);
            let cfg = TrainConfig::default();
            for step in 0..20 {
                for (i, g) in store.get_mut(id).grad.iter_mut().enumerate() {
                    *g = ((step * 3 + i) as f32 * 0.37).sin();
                }
                adam_step(&mut store, &mut st, 0.01, &cfg).unwrap();
            }
            store.get(id).data.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clip_examples() {
        let mut store = ParamSet::new();
        store.add("g", &[2], vec![0.0, 0.0]).unwrap();
        let id = store.by_name("g").unwrap();
        store.get_mut(id).grad.copy_from_slice(&[0.3, 0.4]);
        let (norm, scaled) = clip_global_norm(&mut store, 1.0);
        assert!((norm - 0.5).abs() <= 1e-6 && !scaled);
        assert_eq!(store.get(id).grad, vec![0.3, 0.4]);

        store.get_mut(id).grad.copy_from_slice(&[3.0, 4.0]);
        let (norm, scaled) = clip_global_norm(&mut store, 1.0);
        assert!((norm - 5.0).abs() <= 1e-5 && scaled);
        let g = &store.get(id).grad;
        assert!((g[0] - 0.6).abs() <= 1e-6 && (g[1] - 0.8).abs() <= 1e-6);

        // random grads → post-clip norm ≤ clip + 1e-6
        let mut rng = crate::rng::Rng::seed_from_u64(5);
        for v in store.get_mut(id).grad.iter_mut() {
            *v = rng.normal(10.0);
        }
        clip_global_norm(&mut store, 1.0);
        let (post, _) = clip_global_norm(&mut store, f32::MAX);
        assert!(post <= 1.0 + 1e-6);
    }

    #[test]
    fn spike_detector_rules() {
        let cfg = SpikeConfig {
            window: 4,
            factor: 3.0,
            patience: 2,
        };
        let mut d = SpikeDetector::new(&cfg);
        assert!(d.observe(f32::NAN));
        d.reset();
        assert!(d.observe(f32::INFINITY));
        d.reset();
        // fill window with ~1.0 losses
        for _ in 0..4 {
            assert!(!d.observe(1.0));
        }
        // 10x jump: first elevated step arms, second triggers
        assert!(!d.observe(10.0));
        assert!(d.observe(10.0));
        d.reset();
        for _ in 0..4 {
            assert!(!d.observe(1.0));
        }
        // single elevated step followed by recovery never triggers
        assert!(!d.observe(10.0));
        assert!(!d.observe(1.0));
        assert!(!d.observe(10.0));
    }

    fn make_dataset(dir: &std::path::Path, n_tokens: usize, seq_len: usize) -> ChunkedDataset {
        build_chunks_from_tokens(&pattern_tokens(n_tokens), 320, seq_len, dir).unwrap()
    }

    #[test]
    fn smoke_run_loss_decreases() {
        let dir = tempdir().unwrap();
        let ds = make_dataset(dir.path(), 10240, 16);
        let mut improved = 0;
        for seed in 0..3u64 {
            let model = ModelParams::init(&tiny_model_cfg(true), seed).unwrap();
            let mut cfg = tiny_train_cfg(50, seed);
            cfg.peak_lr = 1e-3;
            cfg.final_lr = 1e-4;
            let mut session =
                TrainSession::new(model, None, ds.clone(), cfg, TrainMode::Na).unwrap();
            let out = session.run().unwrap();
            assert_eq!(out.final_step, 50);
            let first = out.log.first().unwrap().loss;
            let last = out.log.last().unwrap().loss;
            if last < first {
                improved += 1;
            }
        }
        assert!(improved >= 2, "loss decreased in {improved}/3 seeds");
    }

    #[test]
    fn na_equals_ad_with_one_hot_teacher_trajectory() {
        // two identical models stepped manually: one on the NA loss, one on
        // the AD loss with a one-hot teacher built from the targets
        let dir = tempdir().unwrap();
        let ds = make_dataset(dir.path(), 2048, 16);
        let cfg = tiny_train_cfg(5, 3);
        let mut m_na = ModelParams::init(&tiny_model_cfg(true), 3).unwrap();
        let mut m_ad = ModelParams::init(&tiny_model_cfg(true), 3).unwrap();
        let mut adam_na = AdamState::new(&m_na.store);
        let mut adam_ad = AdamState::new(&m_ad.store);
        let mut reader_na = DatasetReader::new(ds.clone(), cfg.seed);
        let mut reader_ad = DatasetReader::new(ds, cfg.seed);
        for step in 1..=5u64 {
            let (batch_na, _) = reader_na.next_batch(4).unwrap().unwrap();
            let (batch_ad, _) = reader_ad.next_batch(4).unwrap().unwrap();
            assert_eq!(batch_na.ids, batch_ad.ids);
            let lr = lr_at(step, &cfg).unwrap();

            let mut g = Graph::new();
            let fwd = m_na
                .forward_train(&mut g, &batch_na.ids, batch_na.batch, batch_na.seq)
                .unwrap();
            let loss_na = distill::na_loss(&mut g, fwd.logits, &batch_na).unwrap();
            let na_val = g.value(loss_na);
            g.backward(loss_na).unwrap();
            for (pid, node) in &fwd.leaves {
                let p = m_na.store.get_mut(*pid);
                match g.grad(*node) {
                    Some(gr) => p.grad.copy_from_slice(gr),
                    None => p.grad.iter_mut().for_each(|v| *v = 0.0),
                }
            }
            clip_global_norm(&mut m_na.store, cfg.clip_norm);
            adam_step(&mut m_na.store, &mut adam_na, lr, &cfg).unwrap();

            let mut g = Graph::new();
            let fwd = m_ad
                .forward_train(&mut g, &batch_ad.ids, batch_ad.batch, batch_ad.seq)
                .unwrap();
            let teacher = distill::one_hot_teacher(&batch_ad, 259);
            let (_, mask) = batch_ad.targets();
            let loss_ad = distill::ad_loss(&mut g, fwd.logits, &teacher, &mask).unwrap();
            let ad_val = g.value(loss_ad);
            g.backward(loss_ad).unwrap();
            for (pid, node) in &fwd.leaves {
                let p = m_ad.store.get_mut(*pid);
                match g.grad(*node) {
                    Some(gr) => p.grad.copy_from_slice(gr),
                    None => p.grad.iter_mut().for_each(|v| *v = 0.0),
                }
            }
            clip_global_norm(&mut m_ad.store, cfg.clip_norm);
            adam_step(&mut m_ad.store, &mut adam_ad, lr, &cfg).unwrap();

            assert!(
                (na_val - ad_val).abs() <= 1e-5,
                "step {step}: na {na_val} vs ad {ad_val}"
            );
        }
    }

    #[test]
    fn two_runs_same_seed_bit_identical() {
        let dir = tempdir().unwrap();
        let ds = make_dataset(dir.path(), 4096, 16);
        let run = |ckdir: &std::path::Path| {
            let model = ModelParams::init(&tiny_model_cfg(true), 7).unwrap();
            let mut cfg = tiny_train_cfg(20, 7);
            cfg.threads = 1;
            let mut session = TrainSession::new(model, None, ds.clone(), cfg, TrainMode::Na)
                .unwrap()
                .with_checkpoint_dir(ckdir)
                .unwrap();
            session.run().unwrap()
        };
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        let a = run(d1.path());
        let b = run(d2.path());
        let ca = std::fs::read(a.final_checkpoint.unwrap()).unwrap();
        let cb = std::fs::read(b.final_checkpoint.unwrap()).unwrap();
        assert_eq!(ca, cb, "final checkpoints differ");
        // logged numbers identical too
        for (ra, rb) in a.log.iter().zip(&b.log) {
            assert_eq!(ra.to_csv(), rb.to_csv());
        }
    }

    #[test]
    fn checkpoint_save_load_save_byte_identical() {
        let dir = tempdir().unwrap();
        let ds = make_dataset(dir.path(), 2048, 16);
        let model = ModelParams::init(&tiny_model_cfg(true), 9).unwrap();
        let cfg = tiny_train_cfg(12, 9);
        let ckdir = tempdir().unwrap();
        let mut session = TrainSession::new(model, None, ds, cfg, TrainMode::Na)
            .unwrap()
            .with_checkpoint_dir(ckdir.path())
            .unwrap();
        let out = session.run().unwrap();
        let p1 = out.final_checkpoint.unwrap();
        let ck = checkpoint::load(&p1).unwrap();
        let p2 = ckdir.path().join("resaved.fbic");
        let (model2, adam2) = ck.clone().into_model().unwrap();
        checkpoint::save(
            &p2,
            &model2,
            &ck.train_cfg,
            &adam2,
            ck.step,
            ck.cursor,
            &ck.skips,
            ck.rng_state,
            &ck.detector,
            (ck.tracker_prev.as_ref(), ck.tracker_last.as_ref()),
        )
        .unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        // loaded model reproduces forward outputs bit-exactly
        let (model3, _) = checkpoint::load(&p1).unwrap().into_model().unwrap();
        let tokens: Vec<u32> = (0..16).collect();
        assert_eq!(
            session.model.forward_logits(&tokens, 1, 16).unwrap(),
            model3.forward_logits(&tokens, 1, 16).unwrap()
        );
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let dir = tempdir().unwrap();
        let ds = make_dataset(dir.path(), 4096, 16);
        let ckdir = tempdir().unwrap();
        let model = ModelParams::init(&tiny_model_cfg(true), 11).unwrap();
        let mut cfg = tiny_train_cfg(20, 11);
        cfg.checkpoint_every = 10;
        let mut full = TrainSession::new(model, None, ds.clone(), cfg, TrainMode::Na)
            .unwrap()
            .with_checkpoint_dir(ckdir.path())
            .unwrap();
        let full_out = full.run().unwrap();

        let mid = ckdir.path().join("ckpt_00000010.fbic");
        let ckdir2 = tempdir().unwrap();
        let mut resumed = TrainSession::resume(&mid, None, ds, TrainMode::Na)
            .unwrap()
            .with_checkpoint_dir(ckdir2.path())
            .unwrap();
        let resumed_out = resumed.run().unwrap();
        assert_eq!(resumed_out.final_step, 20);
        // steps 11..20 bit-identical to the uninterrupted run
        let tail_full: Vec<String> = full_out
            .log
            .iter()
            .filter(|r| r.step > 10)
            .map(|r| r.to_csv())
            .collect();
        let tail_resumed: Vec<String> = resumed_out.log.iter().map(|r| r.to_csv()).collect();
        assert_eq!(tail_full, tail_resumed);
        let ca = std::fs::read(full_out.final_checkpoint.unwrap()).unwrap();
        let cb = std::fs::read(resumed_out.final_checkpoint.unwrap()).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn hair_trigger_spike_rule_skips_chunks_and_never_retries() {
        let dir = tempdir().unwrap();
        let ds = make_dataset(dir.path(), 1600, 16); // 5 chunks of 320 tokens
        let n_chunks = ds.chunk_files.len();
        let model = ModelParams::init(&tiny_model_cfg(true), 13).unwrap();
        let mut cfg = tiny_train_cfg(200, 13);
        cfg.spike = SpikeConfig {
            window: 3,
            factor: 0.0001,
            patience: 1,
        };
        let mut session = TrainSession::new(model, None, ds, cfg, TrainMode::Na).unwrap();
        let out = session.run().unwrap();
        assert!(out.early_stopped);
        assert_eq!(out.rollbacks, n_chunks);
        assert_eq!(out.skipped_chunks.len(), n_chunks);
        // every spiking chunk appears exactly once in the skip list
        let unique: std::collections::BTreeSet<usize> =
            out.skipped_chunks.iter().copied().collect();
        assert_eq!(unique.len(), n_chunks);
        // nothing from a skipped chunk survives in the retained timeline
        let retained = audit_retained(&out.log);
        for row in &retained {
            if row.chunk_id >= 0 && row.event.is_empty() {
                assert!(!unique.contains(&(row.chunk_id as usize)));
            }
        }
    }

    #[test]
    fn spike_with_no_safe_checkpoint_aborts() {
        let dir = tempdir().unwrap();
        let ds = make_dataset(dir.path(), 1600, 16);
        let ckdir = tempdir().unwrap();
        let model = ModelParams::init(&tiny_model_cfg(true), 17).unwrap();
        let mut cfg = tiny_train_cfg(40, 17);
        cfg.checkpoint_every = 7; // lands mid-chunk (5 steps per chunk)
        let mut session = TrainSession::new(model, None, ds.clone(), cfg, TrainMode::Na)
            .unwrap()
            .with_checkpoint_dir(ckdir.path())
            .unwrap();
        session.run().unwrap();
        // resume mid-chunk, then force an immediate spike: the only snapshot
        // is the resume point inside the spiking chunk
        let mid = ckdir.path().join("ckpt_00000007.fbic");
        let mut resumed = TrainSession::resume(&mid, None, ds, TrainMode::Na).unwrap();
        resumed.cfg.spike = SpikeConfig {
            window: 2,
            factor: 0.0001,
            patience: 1,
        };
        resumed.detector = SpikeDetector::new(&resumed.cfg.spike);
        // pre-fill the window so the very first batch can trigger
        resumed.detector.observe(1e-6);
        resumed.detector.observe(1e-6);
        match resumed.run() {
            Err(Error::Aborted(_)) => {}
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn all_trainable_tensors_receive_updates() {
        let dir = tempdir().unwrap();
        let ds = make_dataset(dir.path(), 4096, 16);
        let model = ModelParams::init(&tiny_model_cfg(true), 19).unwrap();
        let before: Vec<Vec<f32>> = model.store.iter().map(|(_, p)| p.data.clone()).collect();
        let mut cfg = tiny_train_cfg(10, 19);
        cfg.peak_lr = 1e-3;
        let mut session = TrainSession::new(model, None, ds, cfg, TrainMode::Na).unwrap();
        session.run().unwrap();
        for ((_, p), initial) in session.model.store.iter().zip(&before) {
            assert!(
                p.data.iter().zip(initial).any(|(a, b)| a != b),
                "tensor {} frozen after 10 steps",
                p.name
            );
        }
    }

    #[test]
    fn ad_mode_requires_teacher_and_matching_vocab() {
        let dir = tempdir().unwrap();
        let ds = make_dataset(dir.path(), 1024, 16);
        let model = ModelParams::init(&tiny_model_cfg(true), 1).unwrap();
        let cfg = tiny_train_cfg(10, 1);
        assert!(matches!(
            TrainSession::new(model, None, ds.clone(), cfg.clone(), TrainMode::Ad),
            Err(Error::Config(_))
        ));
        let mut bad_cfg = tiny_model_cfg(false);
        bad_cfg.vocab_size = 300;
        let teacher = ModelParams::init(&bad_cfg, 1).unwrap();
        let model = ModelParams::init(&tiny_model_cfg(true), 1).unwrap();
        assert!(matches!(
            TrainSession::new(
                model,
                Some(InferModel::dense(&teacher).unwrap()),
                ds,
                cfg,
                TrainMode::Ad
            ),
            Err(Error::Config(_))
        ));
    }
}
