//! Timestamped dialogue memory with exact cosine top-k retrieval.
//!
//! Each question-answer pair becomes one chunk. The text that gets embedded
//! carries the timestamp, so temporal wording in a query can match it.
//! Retrieval is an exhaustive scan; with the `parallel` feature the scan is
//! split across the rayon pool, and both paths return identical results.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Timestamp;
use crate::gateway::{Embedder, EmbeddingVector, GatewayError};

pub const DEFAULT_K: usize = 5;
const STORE_FORMAT: &str = "tidyhome-memory/1";

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("entry {0} is already stored")]
    DuplicateEntry(u64),
    #[error("invalid entry {id}: {reason}")]
    InvalidEntry { id: u64, reason: String },
    #[error("memory store is empty")]
    EmptyStore,
    #[error("k must be positive")]
    ZeroK,
    #[error("embedding model mismatch: store uses `{store}` (dim {store_dim}), got `{got}` (dim {got_dim})")]
    ModelMismatch {
        store: String,
        store_dim: usize,
        got: String,
        got_dim: usize,
    },
    #[error("store file {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueEntry {
    pub entry_id: u64,
    pub timestamp: Timestamp,
    pub question: String,
    pub answer: String,
}

impl DialogueEntry {
    pub fn new(
        entry_id: u64,
        timestamp: Timestamp,
        question: impl Into<String>,
        answer: impl Into<String>,
    ) -> Self {
        Self {
            entry_id,
            timestamp,
            question: question.into(),
            answer: answer.into(),
        }
    }

    fn validate(&self) -> Result<(), MemoryError> {
        if self.question.trim().is_empty() || self.answer.trim().is_empty() {
            return Err(MemoryError::InvalidEntry {
                id: self.entry_id,
                reason: "question and answer must be non-empty".into(),
            });
        }
        Ok(())
    }
}

/// The exact string embedded for a dialogue entry.
pub fn render_chunk(entry: &DialogueEntry) -> String {
    format!("[{}] Q: {} A: {}", entry.timestamp, entry.question, entry.answer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryChunk {
    pub entry: DialogueEntry,
    pub rendered_text: String,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub entry: DialogueEntry,
    pub rendered_text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// Best first; equal scores are ordered by descending entry id.
    pub hits: Vec<RetrievalHit>,
    pub k_requested: usize,
    pub k_returned: usize,
}

impl RetrievalResult {
    pub fn empty(k_requested: usize) -> Self {
        Self {
            hits: Vec::new(),
            k_requested,
            k_returned: 0,
        }
    }

    /// Hits re-ordered oldest first.
    pub fn chronological(&self) -> Vec<&RetrievalHit> {
        let mut v: Vec<&RetrievalHit> = self.hits.iter().collect();
        v.sort_by_key(|h| h.entry.entry_id);
        v
    }

    pub fn ids(&self) -> Vec<u64> {
        self.hits.iter().map(|h| h.entry.entry_id).collect()
    }
}

/// A stored vector with its precomputed norm.
#[derive(Debug, Clone)]
struct Indexed {
    chunk: MemoryChunk,
    norm: f64,
}

#[derive(Debug, Default)]
struct Inner {
    model_id: Option<String>,
    dim: usize,
    rows: Vec<Indexed>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    model_id: String,
    dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Line {
    entry_id: u64,
    timestamp: Timestamp,
    question: String,
    answer: String,
    vector: Vec<f64>,
    model_id: String,
}

/// In-memory chunk matrix, optionally backed by an append-only journal file.
///
/// Cloning shares the underlying store. Readers never observe a partially
/// applied ingest.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    inner: Arc<RwLock<Inner>>,
    journal: Option<PathBuf>,
}

/// Whether retrieval scans on the rayon pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    Sequential,
    #[default]
    Auto,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens (or starts) a journal-backed store. An existing file must have
    /// been written with `model_id`.
    pub fn open(path: &Path, model_id: &str) -> Result<Self, MemoryError> {
        if path.exists() {
            let store = Self::load(path)?;
            {
                let inner = store.inner.read();
                if inner.model_id.as_deref() != Some(model_id) {
                    return Err(MemoryError::ModelMismatch {
                        store: inner.model_id.clone().unwrap_or_default(),
                        store_dim: inner.dim,
                        got: model_id.to_string(),
                        got_dim: inner.dim,
                    });
                }
            }
            return Ok(store);
        }
        Ok(Self {
            inner: Arc::new(RwLock::new(Inner::default())),
            journal: Some(path.to_path_buf()),
        })
    }

    pub fn len(&self) -> usize {
        self.inner.read().rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn model_id(&self) -> Option<String> {
        self.inner.read().model_id.clone()
    }

    pub fn dim(&self) -> usize {
        self.inner.read().dim
    }

    pub fn entries(&self) -> Vec<DialogueEntry> {
        self.inner.read().rows.iter().map(|r| r.chunk.entry.clone()).collect()
    }

    pub fn chunks(&self) -> Vec<MemoryChunk> {
        self.inner.read().rows.iter().map(|r| r.chunk.clone()).collect()
    }

    pub fn last_entry(&self) -> Option<DialogueEntry> {
        self.inner.read().rows.last().map(|r| r.chunk.entry.clone())
    }

    /// Embeds and stores one chunk per entry. All-or-nothing.
    pub fn ingest(&self, entries: &[DialogueEntry], embedder: &dyn Embedder) -> Result<(), MemoryError> {
        if entries.is_empty() {
            return Ok(());
        }
        for e in entries {
            e.validate()?;
        }
        self.check_new_ids(&self.inner.read(), entries)?;

        let texts: Vec<String> = entries.iter().map(render_chunk).collect();
        let vectors = embedder.embed(&texts)?;
        let chunks: Vec<MemoryChunk> = entries
            .iter()
            .zip(texts)
            .zip(vectors)
            .map(|((entry, rendered_text), vector)| MemoryChunk {
                entry: entry.clone(),
                rendered_text,
                vector,
            })
            .collect();
        self.insert_chunks(chunks)
    }

    fn check_new_ids(&self, inner: &Inner, entries: &[DialogueEntry]) -> Result<(), MemoryError> {
        let mut last = inner.rows.last().map(|r| &r.chunk.entry);
        for e in entries {
            if inner.rows.iter().any(|r| r.chunk.entry.entry_id == e.entry_id)
                || entries.iter().filter(|o| o.entry_id == e.entry_id).count() > 1
            {
                return Err(MemoryError::DuplicateEntry(e.entry_id));
            }
            if let Some(prev) = last {
                if e.entry_id <= prev.entry_id || e.timestamp < prev.timestamp {
                    return Err(MemoryError::InvalidEntry {
                        id: e.entry_id,
                        reason: format!(
                            "entries must follow entry {} in id and timestamp order",
                            prev.entry_id
                        ),
                    });
                }
            }
            last = Some(e);
        }
        Ok(())
    }

    fn insert_chunks(&self, chunks: Vec<MemoryChunk>) -> Result<(), MemoryError> {
        let mut inner = self.inner.write();
        let entries: Vec<DialogueEntry> = chunks.iter().map(|c| c.entry.clone()).collect();
        self.check_new_ids(&inner, &entries)?;

        let model = chunks[0].vector.model_id.clone();
        let dim = chunks[0].vector.dim();
        let (store_model, store_dim) = match &inner.model_id {
            Some(m) => (m.clone(), inner.dim),
            None => (model.clone(), dim),
        };
        for c in &chunks {
            if c.vector.model_id != store_model || c.vector.dim() != store_dim {
                return Err(MemoryError::ModelMismatch {
                    store: store_model,
                    store_dim,
                    got: c.vector.model_id.clone(),
                    got_dim: c.vector.dim(),
                });
            }
            if !(c.vector.norm() > 0.0) {
                return Err(MemoryError::InvalidEntry {
                    id: c.entry.entry_id,
                    reason: "zero-norm embedding".into(),
                });
            }
        }

        if let Some(path) = &self.journal {
            let fresh = !path.exists() || inner.model_id.is_none();
            let file = OpenOptions::new().create(true).append(true).open(path)?;
            let mut w = BufWriter::new(file);
            if fresh {
                write_header(&mut w, &store_model, store_dim)?;
            }
            for c in &chunks {
                write_line(&mut w, c)?;
            }
            w.flush()?;
        }

        inner.model_id = Some(store_model);
        inner.dim = store_dim;
        inner.rows.extend(chunks.into_iter().map(|chunk| Indexed {
            norm: chunk.vector.norm(),
            chunk,
        }));
        Ok(())
    }

    pub fn retrieve(
        &self,
        query: &str,
        k: usize,
        embedder: &dyn Embedder,
    ) -> Result<RetrievalResult, MemoryError> {
        self.retrieve_with(query, k, embedder, ScanMode::Auto)
    }

    pub fn retrieve_with(
        &self,
        query: &str,
        k: usize,
        embedder: &dyn Embedder,
        mode: ScanMode,
    ) -> Result<RetrievalResult, MemoryError> {
        if k == 0 {
            return Err(MemoryError::ZeroK);
        }
        if self.is_empty() {
            return Err(MemoryError::EmptyStore);
        }
        let q = embedder
            .embed(&[query.to_string()])?
            .pop()
            .ok_or_else(|| GatewayError::Protocol("embedder returned no vector".into()))?;
        self.search_vector(&q, k, mode)
    }

    /// Top-k by cosine against an already-embedded query.
    pub fn search_vector(
        &self,
        query: &EmbeddingVector,
        k: usize,
        mode: ScanMode,
    ) -> Result<RetrievalResult, MemoryError> {
        if k == 0 {
            return Err(MemoryError::ZeroK);
        }
        let inner = self.inner.read();
        if inner.rows.is_empty() {
            return Err(MemoryError::EmptyStore);
        }
        let store_model = inner.model_id.clone().unwrap_or_default();
        if query.model_id != store_model || query.dim() != inner.dim {
            return Err(MemoryError::ModelMismatch {
                store: store_model,
                store_dim: inner.dim,
                got: query.model_id.clone(),
                got_dim: query.dim(),
            });
        }
        let qnorm = query.norm();
        let ranked = match mode {
            ScanMode::Sequential => top_k_sequential(&inner.rows, &query.values, qnorm, k),
            ScanMode::Auto => top_k(&inner.rows, &query.values, qnorm, k),
        };
        let hits: Vec<RetrievalHit> = ranked
            .into_iter()
            .map(|(i, score)| {
                let c = &inner.rows[i].chunk;
                RetrievalHit {
                    entry: c.entry.clone(),
                    rendered_text: c.rendered_text.clone(),
                    score,
                }
            })
            .collect();
        Ok(RetrievalResult {
            k_returned: hits.len(),
            hits,
            k_requested: k,
        })
    }

    /// Writes a complete store file (header plus one line per chunk).
    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        let inner = self.inner.read();
        let mut w = BufWriter::new(File::create(path)?);
        if let Some(model) = &inner.model_id {
            write_header(&mut w, model, inner.dim)?;
            for r in &inner.rows {
                write_line(&mut w, &r.chunk)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a store file. The returned store journals further ingests to `path`.
    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        let corrupt = |reason: String| MemoryError::Corrupt {
            path: path.display().to_string(),
            reason,
        };
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let mut inner = Inner::default();
        if let Some(first) = lines.next() {
            let header: Header = serde_json::from_str(&first?)
                .map_err(|e| corrupt(format!("bad header: {e}")))?;
            if header.format != STORE_FORMAT {
                return Err(corrupt(format!("unsupported format `{}`", header.format)));
            }
            inner.model_id = Some(header.model_id);
            inner.dim = header.dim;
        }
        let store_model = inner.model_id.clone().unwrap_or_default();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: Line = serde_json::from_str(&line)
                .map_err(|e| corrupt(format!("line {}: {e}", n + 2)))?;
            if l.model_id != store_model || l.vector.len() != inner.dim {
                return Err(MemoryError::ModelMismatch {
                    store: store_model,
                    store_dim: inner.dim,
                    got: l.model_id,
                    got_dim: l.vector.len(),
                });
            }
            let entry = DialogueEntry {
                entry_id: l.entry_id,
                timestamp: l.timestamp,
                question: l.question,
                answer: l.answer,
            };
            let chunk = MemoryChunk {
                rendered_text: render_chunk(&entry),
                entry,
                vector: EmbeddingVector {
                    values: l.vector,
                    model_id: l.model_id,
                },
            };
            inner.rows.push(Indexed {
                norm: chunk.vector.norm(),
                chunk,
            });
        }
        Ok(Self {
            inner: Arc::new(RwLock::new(inner)),
            journal: Some(path.to_path_buf()),
        })
    }

    /// Loads a store file, failing unless it was written by `embedder`'s model.
    pub fn load_for(path: &Path, model_id: &str) -> Result<Self, MemoryError> {
        let store = Self::load(path)?;
        let found = store.model_id();
        if found.is_some() && found.as_deref() != Some(model_id) {
            return Err(MemoryError::ModelMismatch {
                store: found.unwrap_or_default(),
                store_dim: store.dim(),
                got: model_id.to_string(),
                got_dim: store.dim(),
            });
        }
        Ok(store)
    }
}

fn write_header(w: &mut impl Write, model_id: &str, dim: usize) -> Result<(), MemoryError> {
    let h = Header {
        format: STORE_FORMAT.to_string(),
        model_id: model_id.to_string(),
        dim,
    };
    serde_json::to_writer(&mut *w, &h).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn write_line(w: &mut impl Write, c: &MemoryChunk) -> Result<(), MemoryError> {
    let l = Line {
        entry_id: c.entry.entry_id,
        timestamp: c.entry.timestamp,
        question: c.entry.question.clone(),
        answer: c.entry.answer.clone(),
        vector: c.vector.values.clone(),
        model_id: c.vector.model_id.clone(),
    };
    serde_json::to_writer(&mut *w, &l).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn score(row: &Indexed, query: &[f64], qnorm: f64) -> f64 {
    let dot: f64 = row
        .chunk
        .vector
        .values
        .iter()
        .zip(query)
        .map(|(a, b)| a * b)
        .sum();
    let denom = row.norm * qnorm;
    if denom == 0.0 {
        0.0
    } else {
        (dot / denom).clamp(-1.0, 1.0)
    }
}

/// Ranking order: score descending, then entry id descending.
fn rank_cmp(rows: &[Indexed]) -> impl Fn(&(usize, f64), &(usize, f64)) -> std::cmp::Ordering + '_ {
    move |a, b| {
        b.1.total_cmp(&a.1).then_with(|| {
            rows[b.0]
                .chunk
                .entry
                .entry_id
                .cmp(&rows[a.0].chunk.entry.entry_id)
        })
    }
}

fn select(rows: &[Indexed], mut scored: Vec<(usize, f64)>, k: usize) -> Vec<(usize, f64)> {
    let cmp = rank_cmp(rows);
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, &cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(&cmp);
    scored
}

fn top_k_sequential(rows: &[Indexed], query: &[f64], qnorm: f64, k: usize) -> Vec<(usize, f64)> {
    let scored = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (i, score(r, query, qnorm)))
        .collect();
    select(rows, scored, k)
}

#[cfg(feature = "parallel")]
fn top_k(rows: &[Indexed], query: &[f64], qnorm: f64, k: usize) -> Vec<(usize, f64)> {
    use rayon::prelude::*;
    // Below this size the pool overhead dominates.
    const PAR_THRESHOLD: usize = 2048;
    if rows.len() < PAR_THRESHOLD {
        return top_k_sequential(rows, query, qnorm, k);
    }
    let scored = rows
        .par_iter()
        .enumerate()
        .map(|(i, r)| (i, score(r, query, qnorm)))
        .collect();
    select(rows, scored, k)
}

#[cfg(not(feature = "parallel"))]
fn top_k(rows: &[Indexed], query: &[f64], qnorm: f64, k: usize) -> Vec<(usize, f64)> {
    top_k_sequential(rows, query, qnorm, k)
}
