//! Command-line entry point for the binarized LM stack.
//!
//! Exit codes: 0 success, 1 contract/config error, 2 I/O or format error,
//! 3 training aborted by an unrecoverable loss spike.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use binlm_core::bitpack;
use binlm_core::config::{parse_config_file, ModelConfig, TrainConfig};
use binlm_core::data;
use binlm_core::error::{Error, Result};
use binlm_core::experiment::{self, sha256_hex, ExperimentSetup};
use binlm_core::fbi_linear::FbiLinearParams;
use binlm_core::metrics::{self, CensusMode};
use binlm_core::model::{InferModel, ModelParams};
use binlm_core::rng::Rng;
use binlm_core::trainer::{checkpoint, TrainMode, TrainSession};

#[derive(Parser)]
#[command(name = "binlm", about = "Train and run fully weight-binarized transformer LMs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Config file (key=value lines with model./train. prefixes, or JSON)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override: random seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override: total training steps
    #[arg(long)]
    steps: Option<usize>,
    /// Override: tokens per optimizer step
    #[arg(long)]
    batch_tokens: Option<usize>,
    /// Override: training sequence length
    #[arg(long)]
    seq_len: Option<usize>,
    /// Override: peak learning rate
    #[arg(long)]
    peak_lr: Option<f32>,
    /// Override: checkpoint interval in steps
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Override: 1 = strict single-threaded kernels
    #[arg(long)]
    threads: Option<usize>,
}

impl ConfigArgs {
    /// CLI flag > config file > built-in default.
    fn resolve(&self, model_default: ModelConfig, train_default: TrainConfig) -> Result<(ModelConfig, TrainConfig)> {
        let (model, mut train) = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                parse_config_file(&text, model_default, train_default)?
            }
            None => (model_default, train_default),
        };
        if let Some(s) = self.seed {
            train.seed = s;
        }
        if let Some(s) = self.steps {
            train.total_steps = s;
            train.warmup_steps = train.warmup_steps.min((s / 10).max(1));
        }
        if let Some(b) = self.batch_tokens {
            train.batch_tokens = b;
        }
        if let Some(s) = self.seq_len {
            train.seq_len = s;
        }
        if let Some(lr) = self.peak_lr {
            train.peak_lr = lr;
        }
        if let Some(c) = self.checkpoint_every {
            train.checkpoint_every = c;
        }
        if let Some(t) = self.threads {
            train.threads = t;
        }
        model.validate()?;
        train.validate()?;
        Ok((model, train))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize a corpus into chunk files
    Tokenize {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 65536)]
        tokens_per_chunk: usize,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
    },
    /// Write a deterministic synthetic text corpus
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1_200_000)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the full-precision teacher with the one-hot objective
    TrainTeacher {
        #[arg(long)]
        chunks: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a binarized student (distillation or one-hot objective)
    Train {
        #[arg(long, value_parser = parse_mode)]
        mode: TrainMode,
        #[arg(long)]
        chunks: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Held-out perplexity of a checkpoint (dense or packed)
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
    },
    /// Export the 1-bit packed inference file from a checkpoint
    Pack {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify packed/dense logits parity
    UnpackCheck {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        packed: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f32,
    },
    /// Packed vs dense matvec timing and byte accounting
    Bench {
        #[arg(long, default_value_t = 1024)]
        m: usize,
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long, default_value_t = 50)]
        repetitions: usize,
    },
    /// Bit-width, storage, and training-log summaries
    Report {
        /// toy | 130m | 1.3b | 7b
        #[arg(long, default_value = "toy")]
        preset: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train_log: Option<PathBuf>,
    },
    /// Distillation-vs-one-hot student comparison
    Ablate {
        #[arg(long)]
        chunks: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        eval_text: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1u64, 2, 3])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        eval_every: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Random-init vs harvested-init comparison
    CompareInit {
        #[arg(long)]
        chunks: PathBuf,
        #[arg(long)]
        twin: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1u64])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Sample text from a dense checkpoint or packed model
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "The ")]
        prompt: String,
        #[arg(long, default_value_t = 128)]
        max_new: usize,
        #[arg(long, default_value_t = 0.0)]
        temperature: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_mode(s: &str) -> std::result::Result<TrainMode, String> {
    match s {
        "ad" => Ok(TrainMode::Ad),
        "na" => Ok(TrainMode::Na),
        other => Err(format!("mode must be ad or na, got {other}")),
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

/// Load either model file format by magic: a training checkpoint (dense
/// weights) or a packed 1-bit model.
fn load_any_model(path: &Path) -> Result<InferModel> {
    let mut magic = [0u8; 5];
    {
        use std::io::Read;
        let mut f = fs::File::open(path)?;
        f.read_exact(&mut magic)
            .map_err(|_| Error::Format("file too short for magic".into()))?;
    }
    match &magic {
        b"FBIC1" => {
            let (model, _) = checkpoint::load(path)?.into_model()?;
            InferModel::dense(&model)
        }
        b"FBIP1" => bitpack::import_packed(path),
        _ => Err(Error::Format(format!(
            "unrecognized model file magic {:?}",
            String::from_utf8_lossy(&magic)
        ))),
    }
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?)[..12].to_string())
}

fn run_header(seed: u64, model: &ModelConfig, train: &TrainConfig, corpus: Option<&Path>) -> Result<String> {
    let corpus_part = match corpus {
        Some(p) => format!(" corpus_sha={}", file_hash(p)?),
        None => String::new(),
    };
    Ok(format!(
        "run: seed={} config_sha={}{}",
        seed,
        experiment::config_hash(model, train),
        corpus_part
    ))
}

fn echo_config(model: &ModelConfig, train: &TrainConfig) {
    print!("{}", model.to_kv());
    print!("{}", train.to_kv());
}

fn hash_dir(chunks: &Path) -> Result<String> {
    let ds = data::ChunkedDataset::load(chunks, 2)?;
    let mut all = Vec::new();
    for f in &ds.chunk_files {
        all.extend(fs::read(f)?);
    }
    Ok(sha256_hex(&all)[..12].to_string())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Tokenize {
            corpus,
            out_dir,
            tokens_per_chunk,
            seq_len,
        } => {
            let ds = data::build_chunks(&corpus, tokens_per_chunk, seq_len, &out_dir)?;
            println!(
                "tokenize: corpus_sha={} chunks={} tokens={}",
                file_hash(&corpus)?,
                ds.chunk_files.len(),
                ds.total_tokens()
            );
            Ok(())
        }
        Command::GenCorpus { out, bytes, seed } => {
            let text = data::synth_corpus(bytes, seed);
            fs::write(&out, &text)?;
            println!(
                "gen-corpus: seed={} bytes={} sha={}",
                seed,
                text.len(),
                sha256_hex(&text)[..12].to_string()
            );
            Ok(())
        }
        Command::TrainTeacher {
            chunks,
            out_dir,
            log,
            cfg,
        } => {
            let mut model_default = ModelConfig::toy();
            model_default.binarize = false;
            let (mut model_cfg, train_cfg) =
                cfg.resolve(model_default, TrainConfig::for_total_steps(2000))?;
            model_cfg.binarize = false;
            println!(
                "{} chunks_sha={}",
                run_header(train_cfg.seed, &model_cfg, &train_cfg, None)?,
                hash_dir(&chunks)?
            );
            echo_config(&model_cfg, &train_cfg);
            let ds = data::ChunkedDataset::load(&chunks, train_cfg.seq_len)?;
            let model = ModelParams::init(&model_cfg, train_cfg.seed)?;
            let mut session = TrainSession::new(model, None, ds, train_cfg, TrainMode::Na)?
                .with_checkpoint_dir(&out_dir)?;
            if let Some(log_path) = log {
                session = session.with_log_file(&log_path)?;
            }
            let out = session.run()?;
            println!(
                "train-teacher: steps={} rollbacks={} skipped={:?} final={}",
                out.final_step,
                out.rollbacks,
                out.skipped_chunks,
                out.final_checkpoint
                    .map(|p| p.display().to_string())
                    .unwrap_or_default()
            );
            Ok(())
        }
        Command::Train {
            mode,
            chunks,
            teacher,
            resume,
            out_dir,
            log,
            cfg,
        } => {
            let (model_cfg, train_cfg) =
                cfg.resolve(ModelConfig::toy(), TrainConfig::for_total_steps(5000))?;
            if mode == TrainMode::Ad && teacher.is_none() && resume.is_none() {
                return Err(Error::Config(
                    "train --mode ad requires --teacher <checkpoint>".into(),
                ));
            }
            let teacher_model = match &teacher {
                Some(path) => {
                    let (t, _) = checkpoint::load(path)?.into_model()?;
                    if t.cfg.binarize {
                        return Err(Error::Config(
                            "teacher checkpoint is binarized; teachers must be full precision"
                                .into(),
                        ));
                    }
                    Some(InferModel::dense(&t)?)
                }
                None => None,
            };
            if mode == TrainMode::Ad && teacher_model.is_none() {
                return Err(Error::Config(
                    "train --mode ad requires --teacher <checkpoint>".into(),
                ));
            }
            println!(
                "{} chunks_sha={}",
                run_header(train_cfg.seed, &model_cfg, &train_cfg, None)?,
                hash_dir(&chunks)?
            );
            echo_config(&model_cfg, &train_cfg);
            let ds = data::ChunkedDataset::load(&chunks, train_cfg.seq_len)?;
            let mut session = match resume {
                Some(ckpt) => TrainSession::resume(&ckpt, teacher_model, ds, mode)?,
                None => {
                    let model = ModelParams::init(&model_cfg, train_cfg.seed)?;
                    TrainSession::new(model, teacher_model, ds, train_cfg, mode)?
                }
            }
            .with_checkpoint_dir(&out_dir)?;
            if let Some(log_path) = log {
                session = session.with_log_file(&log_path)?;
            }
            let out = session.run()?;
            println!(
                "train: steps={} rollbacks={} skipped={:?} final={}",
                out.final_step,
                out.rollbacks,
                out.skipped_chunks,
                out.final_checkpoint
                    .map(|p| p.display().to_string())
                    .unwrap_or_default()
            );
            Ok(())
        }
        Command::Eval { model, text, seq_len } => {
            let im = load_any_model(&model)?;
            let corpus = fs::read(&text)?;
            let tokens = data::tokenize_corpus(&corpus);
            let ppl = metrics::perplexity(&im, &tokens, seq_len)?;
            println!("eval: tokens={} perplexity={:.4}", tokens.len(), ppl);
            Ok(())
        }
        Command::Pack { ckpt, out } => {
            let (model, _) = checkpoint::load(&ckpt)?.into_model()?;
            bitpack::export_packed(&model, &out)?;
            let size = fs::metadata(&out)?.len();
            println!("pack: wrote {} ({size} bytes)", out.display());
            Ok(())
        }
        Command::UnpackCheck {
            ckpt,
            packed,
            tolerance,
        } => {
            let (model, _) = checkpoint::load(&ckpt)?.into_model()?;
            let packed_model = bitpack::import_packed(&packed)?;
            let v = model.cfg.vocab_size as u32;
            let seq = model.cfg.max_seq_len.min(32);
            let tokens: Vec<u32> = (0..2 * seq as u32).map(|i| (i * 97 + 13) % v).collect();
            let dense = model.forward_logits(&tokens, 2, seq)?;
            let pl = packed_model.forward(&tokens, 2, seq)?;
            let max_diff = dense
                .iter()
                .zip(&pl)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            println!("unpack-check: max_abs_diff={max_diff:.3e}");
            if max_diff <= tolerance {
                Ok(())
            } else {
                Err(Error::Contract(format!(
                    "packed/dense parity {max_diff} exceeds tolerance {tolerance}"
                )))
            }
        }
        Command::Bench { m, n, repetitions } => {
            let mut rng = Rng::seed_from_u64(0);
            let p = FbiLinearParams::random(m, n, 0.02, &mut rng)?;
            let pl = bitpack::pack(&p);
            let rep = bitpack::bench(&pl, repetitions)?;
            println!("{}", bitpack::BenchReport::csv_header());
            println!("{}", rep.csv_row());
            Ok(())
        }
        Command::Report {
            preset,
            config,
            train_log,
        } => {
            let model_cfg = match (&config, preset.as_str()) {
                (Some(path), _) => {
                    let text = fs::read_to_string(path)?;
                    parse_config_file(&text, ModelConfig::toy(), TrainConfig::default())?.0
                }
                (None, "toy") => ModelConfig::toy(),
                (None, "130m") => ModelConfig::size_130m(),
                (None, "1.3b") => ModelConfig::size_1_3b(),
                (None, "7b") => ModelConfig::size_7b(),
                (None, other) => {
                    return Err(Error::Config(format!(
                        "unknown preset {other}; use toy, 130m, 1.3b, or 7b"
                    )))
                }
            };
            model_cfg.validate()?;
            println!("report for {preset}:");
            println!(
                "avg bit-width (excluding embedding/head): {:.4}",
                metrics::avg_bitwidth(&model_cfg, CensusMode::Paper)
            );
            println!(
                "avg bit-width (all parameters):           {:.4}",
                metrics::avg_bitwidth(&model_cfg, CensusMode::Strict)
            );
            println!("{}", metrics::storage_report(&model_cfg).summary());
            if preset == "1.3b" || preset == "7b" {
                // both sizes are commonly quoted at 0.39 GB; only one is
                // consistent with the byte census
                let check = metrics::check_storage_claim(&preset, &model_cfg, 0.39, 0.01);
                println!(
                    "published 0.39GB figure: computed {:.4} GiB → {}",
                    check.computed_gib,
                    if check.consistent {
                        "consistent"
                    } else {
                        "INCONSISTENT with the byte census"
                    }
                );
            }
            if let Some(log_path) = train_log {
                summarize_train_log(&log_path)?;
            }
            Ok(())
        }
        Command::Ablate {
            chunks,
            teacher,
            eval_text,
            seeds,
            out,
            eval_every,
            cfg,
        } => {
            let (model_cfg, train_cfg) =
                cfg.resolve(ModelConfig::toy(), TrainConfig::for_total_steps(5000))?;
            let (teacher_model, _) = checkpoint::load(&teacher)?.into_model()?;
            let eval_corpus = fs::read(&eval_text)?;
            let ds = data::ChunkedDataset::load(&chunks, train_cfg.seq_len)?;
            let mut all = Vec::new();
            for f in &ds.chunk_files {
                all.extend(fs::read(f)?);
            }
            println!(
                "{} chunks_sha={}",
                run_header(train_cfg.seed, &model_cfg, &train_cfg, None)?,
                sha256_hex(&all)[..12].to_string()
            );
            let setup = ExperimentSetup {
                dataset: ds,
                eval_tokens: data::tokenize_corpus(&eval_corpus),
                model_cfg,
                train_cfg: train_cfg.clone(),
                eval_every: if eval_every > 0 {
                    eval_every
                } else {
                    (train_cfg.total_steps as u64 / 5).max(1)
                },
                corpus_hash: sha256_hex(&all)[..12].to_string(),
            };
            let summary = experiment::ablate_ad_vs_na(&setup, &teacher_model, &seeds, &out)?;
            for (seed, ad, na) in &summary.finals {
                println!("ablate: seed={seed} ad_ppl={ad:.4} na_ppl={na:.4}");
            }
            println!("ablate: wrote {}", out.display());
            Ok(())
        }
        Command::CompareInit {
            chunks,
            twin,
            seeds,
            out,
            cfg,
        } => {
            let (model_cfg, train_cfg) =
                cfg.resolve(ModelConfig::toy(), TrainConfig::for_total_steps(500))?;
            let (twin_model, _) = checkpoint::load(&twin)?.into_model()?;
            let ds = data::ChunkedDataset::load(&chunks, train_cfg.seq_len)?;
            let mut all = Vec::new();
            for f in &ds.chunk_files {
                all.extend(fs::read(f)?);
            }
            println!(
                "{} chunks_sha={}",
                run_header(train_cfg.seed, &model_cfg, &train_cfg, None)?,
                sha256_hex(&all)[..12].to_string()
            );
            let setup = ExperimentSetup {
                dataset: ds,
                eval_tokens: Vec::new(),
                model_cfg,
                train_cfg,
                eval_every: 0,
                corpus_hash: sha256_hex(&all)[..12].to_string(),
            };
            let summary = experiment::compare_init(&setup, &twin_model, &seeds, &out)?;
            for (seed, scratch, harvested) in &summary.early_ff_means {
                println!(
                    "compare-init: seed={seed} early_ff_scratch={scratch:.3e} early_ff_harvested={harvested:.3e}"
                );
            }
            println!("compare-init: wrote {}", out.display());
            Ok(())
        }
        Command::Generate {
            model,
            prompt,
            max_new,
            temperature,
            seed,
        } => {
            let im = load_any_model(&model)?;
            let tok = data::Tokenizer;
            let mut ids = vec![data::BOS];
            ids.extend(tok.encode(prompt.as_bytes()));
            let mut rng = Rng::seed_from_u64(seed);
            let out_ids = im.generate(&ids, max_new, temperature, &mut rng)?;
            let text = tok.decode(&out_ids);
            println!("{}", String::from_utf8_lossy(&text));
            Ok(())
        }
    }
}

fn summarize_train_log(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path)?;
    let mut losses = Vec::new();
    let mut ff = Vec::new();
    let mut rollbacks = 0usize;
    let mut spikes = 0usize;
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 7 {
            continue;
        }
        if let Ok(l) = fields[1].parse::<f32>() {
            if l.is_finite() {
                losses.push(l);
            }
        }
        if let Ok(f) = fields[4].parse::<f64>() {
            if f > 0.0 {
                ff.push(f);
            }
        }
        if fields[6].starts_with("rollback") {
            rollbacks += 1;
        }
        if fields[6] == "spike" {
            spikes += 1;
        }
    }
    if losses.is_empty() {
        return Err(Error::Input(format!("no parsable rows in {}", path.display())));
    }
    let mean_ff = if ff.is_empty() {
        0.0
    } else {
        ff.iter().sum::<f64>() / ff.len() as f64
    };
    println!(
        "train log: rows={} first_loss={:.4} last_loss={:.4} mean_ff_ratio={:.3e} spikes={} rollbacks={}",
        losses.len(),
        losses.first().unwrap(),
        losses.last().unwrap(),
        mean_ff,
        spikes,
        rollbacks
    );
    Ok(())
}
