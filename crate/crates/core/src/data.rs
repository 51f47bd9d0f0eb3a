//! Corpus ingestion: byte-level tokenization, document segmentation, and
//! chunked dataset files (8-byte count header + 32-bit little-endian token
//! ids) consumed by the trainer.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::bytesio::{read_u64, write_u64};
use crate::distill::TokenBatch;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// 256 byte values plus BOS, EOS, PAD.
pub const VOCAB_SIZE: usize = 259;
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;

/// Stateless byte-level tokenizer. Encoding maps each byte to its own id;
/// special ids are inserted only by the corpus pipeline and dropped on
/// decode, so decode(encode(text)) == text for arbitrary byte strings.
#[derive(Clone, Copy, Debug, Default)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        text.iter().map(|&b| b as u32).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<u8> {
        ids.iter()
            .filter(|&&id| id < 256)
            .map(|&id| id as u8)
            .collect()
    }
}

/// Deterministic synthetic English-like corpus: zipf-weighted words in
/// short sentences, blank-line paragraph breaks (document boundaries for
/// BOS insertion). Used by the demo pipeline and the end-to-end tests so
/// no external text needs to ship with the repository.
pub fn synth_corpus(n_bytes: usize, seed: u64) -> Vec<u8> {
    const WORDS: &[&str] = &[
        "the", "of", "and", "a", "to", "in", "is", "was", "he", "for", "it", "with", "as",
        "his", "on", "be", "at", "by", "had", "not", "are", "but", "from", "or", "have",
        "an", "they", "which", "one", "you", "were", "her", "all", "she", "there", "would",
        "their", "we", "him", "been", "has", "when", "who", "will", "more", "no", "if",
        "out", "so", "said", "what", "up", "its", "about", "into", "than", "them", "can",
        "only", "other", "new", "some", "could", "time", "these", "two", "may", "then",
        "do", "first", "any", "my", "now", "such", "like", "our", "over", "man", "me",
        "even", "most", "made", "after", "also", "did", "many", "before", "must", "through",
        "years", "where", "much", "your", "way", "well", "down", "should", "because",
        "each", "just", "those", "people", "how", "too", "little", "state", "good", "very",
        "make", "world", "still", "own", "see", "men", "work", "long", "get", "here",
        "between", "both", "life", "being", "under", "never", "day", "same", "another",
        "know", "while", "last", "might", "us", "great", "old", "year", "off", "come",
        "since", "against", "go", "came", "right", "used", "take", "three", "house",
    ];
    let mut rng = Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_bytes + 128);
    // zipf-ish sampling: rank r chosen so that P(r) ∝ 1/(r+1)
    let harmonics: Vec<f64> = {
        let mut acc = 0.0;
        WORDS
            .iter()
            .enumerate()
            .map(|(i, _)| {
                acc += 1.0 / (i as f64 + 1.0);
                acc
            })
            .collect()
    };
    let total = *harmonics.last().unwrap();
    let pick_word = |rng: &mut Rng| -> &'static str {
        let u = rng.uniform(0.0, total as f32) as f64;
        let idx = harmonics.partition_point(|&h| h < u);
        WORDS[idx.min(WORDS.len() - 1)]
    };
    while out.len() < n_bytes {
        let sentences = 3 + rng.below(6);
        for si in 0..sentences {
            let words = 4 + rng.below(6);
            for wi in 0..words {
                let w = pick_word(&mut rng);
                if wi == 0 {
                    let mut chars = w.chars();
                    if let Some(c) = chars.next() {
                        out.extend(c.to_uppercase().to_string().as_bytes());
                        out.extend(chars.as_str().as_bytes());
                    }
                } else {
                    out.extend(w.as_bytes());
                }
                if wi + 1 < words {
                    out.push(b' ');
                }
            }
            out.push(b'.');
            if si + 1 < sentences {
                out.push(b' ');
            }
        }
        out.push(b'\n');
        out.push(b'\n');
    }
    out.truncate(n_bytes);
    out
}

/// Documents are delimited by blank lines; every document gets a BOS.
pub fn tokenize_corpus(corpus: &[u8]) -> Vec<u32> {
    let tok = Tokenizer;
    let mut out = Vec::with_capacity(corpus.len() + 64);
    let mut doc_start = 0usize;
    let mut i = 0usize;
    let push_doc = |doc: &[u8], out: &mut Vec<u32>| {
        if !doc.is_empty() {
            out.push(BOS);
            out.extend(tok.encode(doc));
        }
    };
    while i < corpus.len() {
        // blank line: \n followed by optional spaces/\r then \n
        if corpus[i] == b'\n' {
            let mut j = i + 1;
            while j < corpus.len() && (corpus[j] == b'\r' || corpus[j] == b' ') {
                j += 1;
            }
            if j < corpus.len() && corpus[j] == b'\n' {
                push_doc(&corpus[doc_start..i], &mut out);
                while j < corpus.len() && (corpus[j] == b'\n' || corpus[j] == b'\r') {
                    j += 1;
                }
                doc_start = j;
                i = j;
                continue;
            }
        }
        i += 1;
    }
    push_doc(&corpus[doc_start..], &mut out);
    out
}

/// Ordered chunk files plus the iteration parameters.
#[derive(Clone, Debug)]
pub struct ChunkedDataset {
    pub dir: PathBuf,
    pub chunk_files: Vec<PathBuf>,
    pub chunk_token_counts: Vec<usize>,
    pub tokens_per_chunk: usize,
    pub seq_len: usize,
}

pub fn chunk_file_name(index: usize) -> String {
    format!("chunk_{index:05}.bin")
}

pub fn write_chunk(path: &Path, tokens: &[u32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_u64(&mut w, tokens.len() as u64)?;
    for &t in tokens {
        w.write_all(&t.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_chunk(path: &Path) -> Result<Vec<u32>> {
    let mut r = BufReader::new(File::open(path)?);
    let count = read_u64(&mut r)? as usize;
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("chunk {} truncated", path.display())))?;
    let mut tail = Vec::new();
    if r.read_to_end(&mut tail)? > 0 {
        return Err(Error::Format(format!(
            "chunk {} has trailing bytes",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Tokenize a corpus file and split it into fixed-size chunk files.
pub fn build_chunks(
    corpus_path: &Path,
    tokens_per_chunk: usize,
    seq_len: usize,
    out_dir: &Path,
) -> Result<ChunkedDataset> {
    if tokens_per_chunk < seq_len {
        return Err(Error::Contract(format!(
            "tokens_per_chunk {tokens_per_chunk} must be >= seq_len {seq_len}"
        )));
    }
    let corpus = fs::read(corpus_path)?;
    if corpus.is_empty() {
        return Err(Error::Input(format!(
            "corpus {} is empty",
            corpus_path.display()
        )));
    }
    let tokens = tokenize_corpus(&corpus);
    if tokens.is_empty() {
        return Err(Error::Input("corpus tokenized to zero tokens".into()));
    }
    build_chunks_from_tokens(&tokens, tokens_per_chunk, seq_len, out_dir)
}

/// Chunking of an already tokenized stream (used by tests and poisoning).
pub fn build_chunks_from_tokens(
    tokens: &[u32],
    tokens_per_chunk: usize,
    seq_len: usize,
    out_dir: &Path,
) -> Result<ChunkedDataset> {
    if tokens_per_chunk < seq_len {
        return Err(Error::Contract(format!(
            "tokens_per_chunk {tokens_per_chunk} must be >= seq_len {seq_len}"
        )));
    }
    fs::create_dir_all(out_dir)?;
    let mut chunk_files = Vec::new();
    let mut chunk_token_counts = Vec::new();
    for (i, chunk) in tokens.chunks(tokens_per_chunk).enumerate() {
        let path = out_dir.join(chunk_file_name(i));
        write_chunk(&path, chunk)?;
        chunk_files.push(path);
        chunk_token_counts.push(chunk.len());
    }
    Ok(ChunkedDataset {
        dir: out_dir.to_path_buf(),
        chunk_files,
        chunk_token_counts,
        tokens_per_chunk,
        seq_len,
    })
}

impl ChunkedDataset {
    /// Rescan a directory of chunk files written by `build_chunks`.
    pub fn load(dir: &Path, seq_len: usize) -> Result<Self> {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("chunk_") && n.ends_with(".bin"))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Input(format!(
                "no chunk files found in {}",
                dir.display()
            )));
        }
        let mut counts = Vec::with_capacity(files.len());
        for f in &files {
            counts.push(read_chunk(f)?.len());
        }
        let tokens_per_chunk = counts.iter().copied().max().unwrap_or(0);
        Ok(ChunkedDataset {
            dir: dir.to_path_buf(),
            chunk_files: files,
            chunk_token_counts: counts,
            tokens_per_chunk,
            seq_len,
        })
    }

    pub fn total_tokens(&self) -> usize {
        self.chunk_token_counts.iter().sum()
    }

    pub fn windows_in_chunk(&self, index: usize) -> usize {
        self.chunk_token_counts[index] / self.seq_len
    }
}

/// Position of a reader: which chunk (ordinal into the file list) and how
/// many windows of it have been consumed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetCursor {
    pub chunk_ordinal: usize,
    pub windows_done: usize,
}

/// Deterministic batch iterator: chunks in file order (skipped ones never
/// yielded), windows within a chunk in an order seeded by (seed, chunk).
/// Batches never span chunks; the last batch of a chunk may be short.
pub struct DatasetReader {
    ds: ChunkedDataset,
    seed: u64,
    skip: BTreeSet<usize>,
    cursor: DatasetCursor,
    loaded: Option<LoadedChunk>,
}

struct LoadedChunk {
    ordinal: usize,
    tokens: Vec<u32>,
    order: Vec<u32>,
}

impl DatasetReader {
    pub fn new(ds: ChunkedDataset, seed: u64) -> Self {
        DatasetReader {
            ds,
            seed,
            skip: BTreeSet::new(),
            cursor: DatasetCursor {
                chunk_ordinal: 0,
                windows_done: 0,
            },
            loaded: None,
        }
    }

    pub fn dataset(&self) -> &ChunkedDataset {
        &self.ds
    }

    pub fn cursor(&self) -> DatasetCursor {
        self.cursor
    }

    pub fn skip_set(&self) -> &BTreeSet<usize> {
        &self.skip
    }

    pub fn add_skip(&mut self, chunk: usize) {
        self.skip.insert(chunk);
        if self.cursor.chunk_ordinal == chunk {
            self.cursor = DatasetCursor {
                chunk_ordinal: chunk + 1,
                windows_done: 0,
            };
            self.loaded = None;
        }
    }

    /// Restore a saved position (checkpoint resume / rollback).
    pub fn seek(&mut self, cursor: DatasetCursor, skip: BTreeSet<usize>) {
        self.cursor = cursor;
        self.skip = skip;
        self.loaded = None;
    }

    /// True when the next batch would be the first of a fresh chunk.
    pub fn at_chunk_start(&mut self) -> bool {
        self.advance_to_available();
        self.cursor.windows_done == 0 && self.cursor.chunk_ordinal < self.ds.chunk_files.len()
    }

    fn advance_to_available(&mut self) {
        loop {
            let c = self.cursor.chunk_ordinal;
            if c >= self.ds.chunk_files.len() {
                return;
            }
            if self.skip.contains(&c) {
                self.cursor = DatasetCursor {
                    chunk_ordinal: c + 1,
                    windows_done: 0,
                };
                continue;
            }
            if self.cursor.windows_done >= self.ds.windows_in_chunk(c) {
                self.cursor = DatasetCursor {
                    chunk_ordinal: c + 1,
                    windows_done: 0,
                };
                continue;
            }
            return;
        }
    }

    fn ensure_loaded(&mut self) -> Result<()> {
        let c = self.cursor.chunk_ordinal;
        if self.loaded.as_ref().map(|l| l.ordinal) != Some(c) {
            let tokens = read_chunk(&self.ds.chunk_files[c])?;
            let windows = tokens.len() / self.ds.seq_len;
            let mut rng = Rng::seed_from_u64(self.seed ^ (c as u64).wrapping_mul(0x9E3779B97F4A7C15));
            let order = rng.permutation(windows);
            self.loaded = Some(LoadedChunk {
                ordinal: c,
                tokens,
                order,
            });
        }
        Ok(())
    }

    /// Next batch of up to `batch_seqs` windows and the chunk it came from.
    /// None once every chunk is exhausted.
    pub fn next_batch(&mut self, batch_seqs: usize) -> Result<Option<(TokenBatch, usize)>> {
        self.advance_to_available();
        let c = self.cursor.chunk_ordinal;
        if c >= self.ds.chunk_files.len() {
            return Ok(None);
        }
        self.ensure_loaded()?;
        let seq = self.ds.seq_len;
        let loaded = self.loaded.as_ref().expect("chunk loaded");
        let windows = loaded.order.len();
        let take = batch_seqs.min(windows - self.cursor.windows_done);
        let mut ids = Vec::with_capacity(take * seq);
        for wi in 0..take {
            let w = loaded.order[self.cursor.windows_done + wi] as usize;
            ids.extend_from_slice(&loaded.tokens[w * seq..(w + 1) * seq]);
        }
        self.cursor.windows_done += take;
        Ok(Some((TokenBatch::new(ids, take, seq)?, c)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn tokenizer_round_trip_utf8_and_binary() {
        let tok = Tokenizer;
        let text = "héllo wörld…".as_bytes();
        assert_eq!(tok.decode(&tok.encode(text)), text);
        let binary: Vec<u8> = (0..=255).collect();
        assert_eq!(tok.decode(&tok.encode(&binary)), binary);
        assert_eq!(tok.vocab_size(), 259);
        assert!(tok.encode(&binary).iter().all(|&t| t < 256));
    }

    #[test]
    fn documents_get_bos_per_blank_line() {
        let corpus = b"first doc line a\nline b\n\nsecond doc\n\n\nthird";
        let tokens = tokenize_corpus(corpus);
        let bos_count = tokens.iter().filter(|&&t| t == BOS).count();
        assert_eq!(bos_count, 3);
        assert_eq!(tokens[0], BOS);
        // round trip of the non-special content
        let tok = Tokenizer;
        let decoded = tok.decode(&tokens);
        assert!(decoded.starts_with(b"first doc line a\nline b"));
    }

    #[test]
    fn chunk_count_arithmetic() {
        let dir = tempdir().unwrap();
        // ~1 MB of text, 64 kilotokens per chunk → 16-ish chunks, all but last full
        let text: Vec<u8> = std::iter::repeat_with(|| b"the quick brown fox jumps. ".to_vec())
            .take(40000)
            .flatten()
            .collect();
        let corpus_path = dir.path().join("corpus.txt");
        std::fs::write(&corpus_path, &text).unwrap();
        let ds = build_chunks(&corpus_path, 65536, 64, dir.path().join("chunks").as_path()).unwrap();
        let n_tokens = tokenize_corpus(&text).len();
        assert_eq!(ds.chunk_files.len(), n_tokens.div_ceil(65536));
        for count in &ds.chunk_token_counts[..ds.chunk_token_counts.len() - 1] {
            assert_eq!(*count, 65536);
        }
        assert_eq!(ds.total_tokens(), n_tokens);
        // token ids in range
        for f in &ds.chunk_files {
            assert!(read_chunk(f).unwrap().iter().all(|&t| (t as usize) < VOCAB_SIZE));
        }
    }

    #[test]
    fn chunk_files_deterministic() {
        let dir = tempdir().unwrap();
        let corpus_path = dir.path().join("c.txt");
        std::fs::write(&corpus_path, b"some repeated text. ".repeat(5000)).unwrap();
        let d1 = dir.path().join("a");
        let d2 = dir.path().join("b");
        build_chunks(&corpus_path, 8192, 32, &d1).unwrap();
        build_chunks(&corpus_path, 8192, 32, &d2).unwrap();
        for (f1, f2) in std::fs::read_dir(&d1)
            .unwrap()
            .zip(std::fs::read_dir(&d2).unwrap())
        {
            let b1 = std::fs::read(f1.unwrap().path()).unwrap();
            let b2 = std::fs::read(f2.unwrap().path()).unwrap();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn reader_is_deterministic_and_respects_skips() {
        let dir = tempdir().unwrap();
        let tokens: Vec<u32> = (0..1000u32).map(|i| i % 256).collect();
        let ds = build_chunks_from_tokens(&tokens, 200, 10, dir.path()).unwrap();
        assert_eq!(ds.chunk_files.len(), 5);

        let run = |skip: &[usize]| {
            let mut reader = DatasetReader::new(ds.clone(), 42);
            for &s in skip {
                reader.add_skip(s);
            }
            let mut seen = Vec::new();
            while let Some((batch, chunk)) = reader.next_batch(3).unwrap() {
                seen.push((batch.ids.clone(), chunk));
            }
            seen
        };
        let a = run(&[]);
        let b = run(&[]);
        assert_eq!(a, b);
        let skipped = run(&[2]);
        assert!(skipped.iter().all(|(_, c)| *c != 2));
        let all_chunks: BTreeSet<usize> = skipped.iter().map(|(_, c)| *c).collect();
        assert_eq!(all_chunks, BTreeSet::from([0, 1, 3, 4]));
    }

    #[test]
    fn reader_seek_resumes_identically() {
        let dir = tempdir().unwrap();
        let tokens: Vec<u32> = (0..600u32).map(|i| i % 250).collect();
        let ds = build_chunks_from_tokens(&tokens, 150, 10, dir.path()).unwrap();
        let mut full = DatasetReader::new(ds.clone(), 9);
        let mut first_half = Vec::new();
        for _ in 0..3 {
            first_half.push(full.next_batch(2).unwrap().unwrap().0.ids);
        }
        let cursor = full.cursor();
        let skip = full.skip_set().clone();
        let mut rest_full = Vec::new();
        while let Some((b, _)) = full.next_batch(2).unwrap() {
            rest_full.push(b.ids);
        }
        let mut resumed = DatasetReader::new(ds, 9);
        resumed.seek(cursor, skip);
        let mut rest_resumed = Vec::new();
        while let Some((b, _)) = resumed.next_batch(2).unwrap() {
            rest_resumed.push(b.ids);
        }
        assert_eq!(rest_full, rest_resumed);
    }

    #[test]
    fn empty_corpus_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("empty.txt");
        std::fs::write(&p, b"").unwrap();
        assert!(matches!(
            build_chunks(&p, 100, 10, dir.path()),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            build_chunks_from_tokens(&[1, 2, 3], 5, 10, dir.path()),
            Err(Error::Contract(_))
        ));
    }
}
