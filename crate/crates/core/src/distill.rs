//! Training objectives: autoregressive distillation against a frozen
//! full-precision teacher (soft-label cross-entropy over the whole
//! vocabulary), and the standard one-hot autoregressive loss used by the
//! ablation baseline.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::InferModel;
use crate::tensor::{Graph, NodeId};

pub const TEACHER_NORM_TOL: f32 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Teacher,
    Student,
}

/// Per-position vocabulary distributions, flattened row-major
/// (batch·seq)×vocab.
#[derive(Clone, Debug)]
pub struct DistributionBatch {
    pub probs: Vec<f32>,
    pub batch: usize,
    pub seq: usize,
    pub vocab: usize,
    pub provenance: Provenance,
}

impl DistributionBatch {
    pub fn new(probs: Vec<f32>, batch: usize, seq: usize, vocab: usize) -> Self {
        DistributionBatch {
            probs,
            batch,
            seq,
            vocab,
            provenance: Provenance::Student,
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }

    /// Every row must be a distribution: entries >= 0, sum within `tol` of 1.
    pub fn validate(&self, tol: f32) -> Result<()> {
        if self.probs.len() != self.rows() * self.vocab {
            return Err(Error::Dimension(format!(
                "probs length {} != {}x{}",
                self.probs.len(),
                self.rows(),
                self.vocab
            )));
        }
        for (r, row) in self.probs.chunks(self.vocab).enumerate() {
            let mut sum = 0.0f64;
            for &p in row {
                if p < 0.0 {
                    return Err(Error::Input(format!("negative probability in row {r}")));
                }
                sum += p as f64;
            }
            if (sum - 1.0).abs() > tol as f64 {
                return Err(Error::Input(format!(
                    "row {r} sums to {sum}, not normalized within {tol}"
                )));
            }
        }
        Ok(())
    }
}

/// Token windows with next-token targets: targets[t] = ids[t+1] within each
/// sequence, the last position of each sequence is masked.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<u32>, batch: usize, seq: usize) -> Result<Self> {
        if ids.len() != batch * seq {
            return Err(Error::Dimension(format!(
                "ids length {} != batch {batch} x seq {seq}",
                ids.len()
            )));
        }
        if seq < 1 {
            return Err(Error::Contract("seq must be >= 1".into()));
        }
        Ok(TokenBatch { ids, batch, seq })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }

    /// (targets, mask): target of the last position in each sequence is
    /// arbitrary (0) and masked out.
    pub fn targets(&self) -> (Vec<u32>, Vec<bool>) {
        let rows = self.rows();
        let mut targets = vec![0u32; rows];
        let mut mask = vec![false; rows];
        for r in 0..rows {
            if (r + 1) % self.seq != 0 {
                targets[r] = self.ids[r + 1];
                mask[r] = true;
            }
        }
        (targets, mask)
    }
}

/// Autoregressive distillation loss (soft labels from the teacher):
/// −(1/n)·Σ_unmasked Σ_v p_T·log softmax(student_logits). The teacher batch
/// is a constant; no gradient flows into it.
pub fn ad_loss(
    g: &mut Graph,
    student_logits: NodeId,
    teacher: &DistributionBatch,
    mask: &[bool],
) -> Result<NodeId> {
    let s = g.shape(student_logits);
    if s != [teacher.rows(), teacher.vocab] {
        return Err(Error::Dimension(format!(
            "student logits {s:?} vs teacher {}x{}",
            teacher.rows(),
            teacher.vocab
        )));
    }
    g.soft_cross_entropy(student_logits, &teacher.probs, mask, TEACHER_NORM_TOL)
}

/// Normal autoregressive loss: mean NLL of the shifted targets.
pub fn na_loss(g: &mut Graph, student_logits: NodeId, tokens: &TokenBatch) -> Result<NodeId> {
    let (targets, mask) = tokens.targets();
    g.nll_loss(student_logits, &targets, &mask)
}

/// One-hot distributions built from the batch targets; masked rows are
/// uniform (they never contribute to a loss).
pub fn one_hot_teacher(tokens: &TokenBatch, vocab: usize) -> DistributionBatch {
    let (targets, mask) = tokens.targets();
    let rows = tokens.rows();
    let mut probs = vec![0.0f32; rows * vocab];
    for r in 0..rows {
        if mask[r] {
            probs[r * vocab + targets[r] as usize] = 1.0;
        } else {
            let u = 1.0 / vocab as f32;
            probs[r * vocab..(r + 1) * vocab].iter_mut().for_each(|p| *p = u);
        }
    }
    DistributionBatch {
        probs,
        batch: tokens.batch,
        seq: tokens.seq,
        vocab,
        provenance: Provenance::Teacher,
    }
}

/// Gradient-free teacher evaluation: next-token distributions per Eq-style
/// softmax(h·W_head), marked with teacher provenance.
pub fn teacher_forward(teacher: &InferModel, tokens: &TokenBatch) -> Result<DistributionBatch> {
    let mut out = teacher.next_token_distribution(&tokens.ids, tokens.batch, tokens.seq)?;
    out.provenance = Provenance::Teacher;
    Ok(out)
}

/// Teacher and student must share the tokenizer, i.e. the vocabulary.
pub fn ensure_compatible(teacher: &ModelConfig, student: &ModelConfig) -> Result<()> {
    if teacher.vocab_size != student.vocab_size {
        return Err(Error::Config(format!(
            "teacher vocab {} != student vocab {}",
            teacher.vocab_size, student.vocab_size
        )));
    }
    if teacher.max_seq_len < student.max_seq_len {
        return Err(Error::Config(format!(
            "teacher context {} shorter than student context {}",
            teacher.max_seq_len, student.max_seq_len
        )));
    }
    Ok(())
}
