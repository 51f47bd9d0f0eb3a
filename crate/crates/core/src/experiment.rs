//! Scripted toy-scale studies: the distillation-vs-one-hot training
//! comparison and the random-init vs harvested-init comparison, each
//! emitting a replayable CSV whose header records everything needed to
//! reproduce the run.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{ModelConfig, TrainConfig};
use crate::data::ChunkedDataset;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{InferModel, ModelParams};
use crate::trainer::{TrainMode, TrainSession};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    sha256_hex(format!("{}{}", model.to_kv(), train.to_kv()).as_bytes())[..12].to_string()
}

/// Everything both experiments share: the chunked corpus, a held-out token
/// stream, the student topology, and the per-run training template (the
/// seed field is overridden per run).
pub struct ExperimentSetup {
    pub dataset: ChunkedDataset,
    pub eval_tokens: Vec<u32>,
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub eval_every: u64,
    pub corpus_hash: String,
}

impl ExperimentSetup {
    fn header(&self, seeds: &[u64]) -> String {
        format!(
            "# seeds={}\n# corpus_sha256={}\n# config_hash={}\n",
            seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join("/"),
            self.corpus_hash,
            config_hash(&self.model_cfg, &self.train_cfg)
        )
    }
}

#[derive(Clone, Debug)]
pub struct AblateRow {
    pub seed: u64,
    pub mode: &'static str,
    pub step: u64,
    pub heldout_ppl: f64,
    pub avg_loss: f32,
}

#[derive(Debug, Default)]
pub struct AblateSummary {
    pub rows: Vec<AblateRow>,
    /// (seed, final AD ppl, final NA ppl)
    pub finals: Vec<(u64, f64, f64)>,
}

/// Train one binarized student per (seed, objective) with everything else
/// identical; log held-out perplexity at every eval interval.
pub fn ablate_ad_vs_na(
    setup: &ExperimentSetup,
    teacher: &ModelParams,
    seeds: &[u64],
    out_csv: &Path,
) -> Result<AblateSummary> {
    if teacher.cfg.binarize {
        return Err(Error::Config(
            "the teacher for the ablation must be full precision".into(),
        ));
    }
    let teacher_infer = InferModel::dense(teacher)?;
    let mut summary = AblateSummary::default();
    let mut w = BufWriter::new(File::create(out_csv)?);
    write!(w, "{}", setup.header(seeds))?;
    writeln!(w, "seed,mode,step,heldout_ppl,avg_loss")?;

    for &seed in seeds {
        let mut finals = (0.0, 0.0);
        for mode in [TrainMode::Ad, TrainMode::Na] {
            let mode_name = match mode {
                TrainMode::Ad => "ad",
                TrainMode::Na => "na",
            };
            let student = ModelParams::init(&setup.model_cfg, seed)?;
            let mut cfg = setup.train_cfg.clone();
            cfg.seed = seed;
            let teacher_arg = match mode {
                TrainMode::Ad => Some(InferModel::dense(teacher)?),
                TrainMode::Na => None,
            };
            let evals: std::cell::RefCell<Vec<(u64, f64)>> = std::cell::RefCell::new(Vec::new());
            let eval_tokens = &setup.eval_tokens;
            let seq_len = cfg.seq_len;
            let mut session =
                TrainSession::new(student, teacher_arg, setup.dataset.clone(), cfg, mode)?
                    .with_eval_hook(setup.eval_every, |step, model| {
                        let im = InferModel::dense(model)?;
                        let ppl = metrics::perplexity(&im, eval_tokens, seq_len)?;
                        evals.borrow_mut().push((step, ppl));
                        Ok(())
                    });
            let out = session.run()?;
            // final eval if the last step missed the interval
            if evals.borrow().last().map(|(s, _)| *s) != Some(out.final_step) {
                let im = InferModel::dense(&session.model)?;
                evals.borrow_mut().push((
                    out.final_step,
                    metrics::perplexity(&im, eval_tokens, seq_len)?,
                ));
            }
            drop(session);
            let evals = evals.into_inner();
            let mut prev_step = 0u64;
            for (step, ppl) in &evals {
                let losses: Vec<f32> = out
                    .log
                    .iter()
                    .filter(|r| r.step > prev_step && r.step <= *step && r.event != "spike")
                    .map(|r| r.loss)
                    .collect();
                let avg = if losses.is_empty() {
                    f32::NAN
                } else {
                    losses.iter().sum::<f32>() / losses.len() as f32
                };
                let row = AblateRow {
                    seed,
                    mode: mode_name,
                    step: *step,
                    heldout_ppl: *ppl,
                    avg_loss: avg,
                };
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    row.seed, row.mode, row.step, row.heldout_ppl, row.avg_loss
                )?;
                summary.rows.push(row);
                prev_step = *step;
            }
            let final_ppl = evals.last().map(|(_, p)| *p).unwrap_or(f64::NAN);
            match mode {
                TrainMode::Ad => finals.0 = final_ppl,
                TrainMode::Na => finals.1 = final_ppl,
            }
        }
        summary.finals.push((seed, finals.0, finals.1));
    }
    w.flush()?;
    drop(teacher_infer);
    Ok(summary)
}

#[derive(Clone, Debug)]
pub struct CompareRow {
    pub run: &'static str,
    pub seed: u64,
    pub step: u64,
    pub loss: f32,
    pub grad_norm: f32,
    pub ff_ratio: f64,
}

#[derive(Debug, Default)]
pub struct CompareSummary {
    pub rows: Vec<CompareRow>,
    /// (seed, mean ff over first 100 steps: random-init run, harvested run)
    pub early_ff_means: Vec<(u64, f64, f64)>,
}

/// Train binarized students from (a) random init and (b) latents harvested
/// from a pretrained full-precision twin, logging the per-step loss,
/// pre-clip gradient norm, and flip-flop ratio traces.
pub fn compare_init(
    setup: &ExperimentSetup,
    twin: &ModelParams,
    seeds: &[u64],
    out_csv: &Path,
) -> Result<CompareSummary> {
    if twin.cfg.binarize {
        return Err(Error::Config(
            "compare_init needs a full-precision twin to harvest".into(),
        ));
    }
    {
        let want = ModelConfig {
            binarize: false,
            ..setup.model_cfg.clone()
        };
        if twin.cfg != want {
            return Err(Error::Config(
                "twin topology differs from the student config".into(),
            ));
        }
    }
    let mut summary = CompareSummary::default();
    let mut w = BufWriter::new(File::create(out_csv)?);
    write!(w, "{}", setup.header(seeds))?;
    writeln!(w, "run,seed,step,loss,grad_norm_preclip,ff_ratio")?;

    for &seed in seeds {
        let mut early_means = (0.0f64, 0.0f64);
        for run in ["scratch", "harvested"] {
            let student = match run {
                "scratch" => ModelParams::init(&setup.model_cfg, seed)?,
                _ => ModelParams::init_from_twin(twin)?,
            };
            let mut cfg = setup.train_cfg.clone();
            cfg.seed = seed;
            let mut session =
                TrainSession::new(student, None, setup.dataset.clone(), cfg, TrainMode::Na)?;
            let out = session.run()?;
            let mut ff_sum = 0.0f64;
            let mut ff_count = 0usize;
            for r in &out.log {
                if r.event == "spike" || r.event.starts_with("rollback") {
                    continue;
                }
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    run, seed, r.step, r.loss, r.grad_norm_preclip, r.ff_ratio
                )?;
                summary.rows.push(CompareRow {
                    run: if run == "scratch" { "scratch" } else { "harvested" },
                    seed,
                    step: r.step,
                    loss: r.loss,
                    grad_norm: r.grad_norm_preclip,
                    ff_ratio: r.ff_ratio,
                });
                if r.step <= 100 && r.ff_ratio > 0.0 {
                    ff_sum += r.ff_ratio;
                    ff_count += 1;
                }
            }
            let mean = if ff_count > 0 {
                ff_sum / ff_count as f64
            } else {
                0.0
            };
            if run == "scratch" {
                early_means.0 = mean;
            } else {
                early_means.1 = mean;
            }
        }
        summary.early_ff_means.push((seed, early_means.0, early_means.1));
    }
    w.flush()?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_chunks_from_tokens, synth_corpus, tokenize_corpus};
    use tempfile::tempdir;

    fn small_cfg(binarize: bool) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
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

    fn setup(dir: &std::path::Path, total_steps: usize) -> ExperimentSetup {
        let corpus = synth_corpus(40_000, 5);
        let tokens = tokenize_corpus(&corpus);
        let split = tokens.len() - 2000;
        let dataset =
            build_chunks_from_tokens(&tokens[..split], 4096, 16, &dir.join("chunks")).unwrap();
        ExperimentSetup {
            dataset,
            eval_tokens: tokens[split..].to_vec(),
            model_cfg: small_cfg(true),
            train_cfg: TrainConfig {
                total_steps,
                warmup_steps: (total_steps / 10).max(1),
                batch_tokens: 64,
                seq_len: 16,
                checkpoint_every: 1000,
                ff_interval: 2,
                ..TrainConfig::default()
            },
            eval_every: (total_steps / 2) as u64,
            corpus_hash: sha256_hex(&corpus),
        }
    }

    #[test]
    fn ablate_produces_rows_per_seed_mode_interval() {
        let dir = tempdir().unwrap();
        let s = setup(dir.path(), 8);
        let teacher = ModelParams::init(&small_cfg(false), 42).unwrap();
        let out_csv = dir.path().join("ablate.csv");
        let summary = ablate_ad_vs_na(&s, &teacher, &[1, 2], &out_csv).unwrap();
        // 2 seeds × 2 modes × 2 intervals
        assert_eq!(summary.rows.len(), 8);
        assert_eq!(summary.finals.len(), 2);
        for (_, ad, na) in &summary.finals {
            assert!(ad.is_finite() && na.is_finite());
        }
        let text = std::fs::read_to_string(&out_csv).unwrap();
        assert!(text.starts_with("# seeds=1/2\n# corpus_sha256="));
        assert!(text.contains("seed,mode,step,heldout_ppl,avg_loss"));
        // binarized teacher rejected
        let bad = ModelParams::init(&small_cfg(true), 42).unwrap();
        assert!(ablate_ad_vs_na(&s, &bad, &[1], &out_csv).is_err());
    }

    #[test]
    fn compare_init_traces_bounded_and_replayable() {
        let dir = tempdir().unwrap();
        let s = setup(dir.path(), 10);
        let twin = ModelParams::init(&small_cfg(false), 7).unwrap();
        let out_csv = dir.path().join("init.csv");
        let summary = compare_init(&s, &twin, &[3], &out_csv).unwrap();
        assert!(!summary.rows.is_empty());
        for r in &summary.rows {
            assert!(r.ff_ratio >= 0.0 && r.ff_ratio <= 1.0);
        }
        // config-mismatched twin rejected
        let mut other = small_cfg(false);
        other.hidden_size = 64;
        other.intermediate_size = 96;
        let bad_twin = ModelParams::init(&other, 7).unwrap();
        assert!(compare_init(&s, &bad_twin, &[3], &out_csv).is_err());
    }
}
