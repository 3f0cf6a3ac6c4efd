//! Knowledge base agent: answers questions about past actions from memory.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::UserRequest;
use crate::gateway::{ChatBackend, ChatMessage, Embedder, GatewayError};
use crate::memory::{MemoryError, MemoryStore, RetrievalHit, RetrievalResult, ScanMode};
use crate::prompts::HistorianPromptConfig;

pub const NO_HISTORY_ANSWER: &str =
    "I have no history of past actions yet, so I cannot answer that.";
const CONTEXT_HEADER: &str = "Known history:";
const FULL_HISTORY_HEADER: &str = "Full conversation history:";
const CONTEXT_FOOTER: &str = "Answer using only the history above.";

#[derive(Debug, Error)]
pub enum HistorianError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Memory(MemoryError),
}

impl From<MemoryError> for HistorianError {
    fn from(e: MemoryError) -> Self {
        match e {
            MemoryError::Gateway(g) => HistorianError::Gateway(g),
            other => HistorianError::Memory(other),
        }
    }
}

/// Which chunks are given to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// Top-k retrieval.
    Rag,
    /// The whole dialogue, used for the no-retrieval ablation.
    FullHistory,
}

/// Order in which chunks appear in the context block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextOrder {
    #[default]
    Chronological,
    Score,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistorianOptions {
    pub k: usize,
    pub mode: ContextMode,
    pub order: ContextOrder,
}

impl Default for HistorianOptions {
    fn default() -> Self {
        Self {
            k: crate::memory::DEFAULT_K,
            mode: ContextMode::Rag,
            order: ContextOrder::Chronological,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistorianAnswer {
    pub answer: String,
    pub provenance: RetrievalResult,
    pub transcript: Vec<ChatMessage>,
}

pub fn context_block(hits: &[&RetrievalHit], mode: ContextMode) -> String {
    let mut s = String::from(match mode {
        ContextMode::Rag => CONTEXT_HEADER,
        ContextMode::FullHistory => FULL_HISTORY_HEADER,
    });
    s.push('\n');
    for h in hits {
        s.push_str(&h.rendered_text);
        s.push('\n');
    }
    s.push_str(CONTEXT_FOOTER);
    s
}

pub fn build_messages(
    query: &UserRequest,
    provenance: &RetrievalResult,
    config: &HistorianPromptConfig,
    options: HistorianOptions,
) -> Vec<ChatMessage> {
    let hits: Vec<&RetrievalHit> = match options.order {
        ContextOrder::Chronological => provenance.chronological(),
        ContextOrder::Score => provenance.hits.iter().collect(),
    };
    vec![
        ChatMessage::system(config.system_prompt.clone()),
        ChatMessage::system(context_block(&hits, options.mode)),
        ChatMessage::user(query.text.clone()),
    ]
}

pub fn answer(
    query: &UserRequest,
    store: &MemoryStore,
    config: &HistorianPromptConfig,
    embedder: &dyn Embedder,
    backend: &dyn ChatBackend,
    options: HistorianOptions,
) -> Result<HistorianAnswer, HistorianError> {
    if store.is_empty() {
        return Ok(HistorianAnswer {
            answer: NO_HISTORY_ANSWER.to_string(),
            provenance: RetrievalResult::empty(options.k),
            transcript: Vec::new(),
        });
    }
    let provenance = match options.mode {
        ContextMode::Rag => store.retrieve(&query.text, options.k, embedder)?,
        ContextMode::FullHistory => {
            store.retrieve_with(&query.text, store.len(), embedder, ScanMode::Auto)?
        }
    };
    let mut transcript = build_messages(query, &provenance, config, options);
    let reply = backend.chat(&transcript, &[])?;
    let answer = reply.content.trim().to_string();
    transcript.push(reply);
    Ok(HistorianAnswer {
        answer,
        provenance,
        transcript,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Timestamp;
    use crate::gateway::{HashEmbedder, ScriptedBackend};
    use crate::memory::DialogueEntry;
    use crate::prompts::PromptPack;
    use serde_json::json;

    fn store_with(entries: &[(&str, &str)]) -> MemoryStore {
        let store = MemoryStore::new();
        let list: Vec<_> = entries
            .iter()
            .enumerate()
            .map(|(i, (q, a))| DialogueEntry::new(i as u64 + 1, Timestamp::from_unix(1000 + i as i64 * 60), *q, *a))
            .collect();
        store.ingest(&list, &HashEmbedder::new()).unwrap();
        store
    }

    fn req(text: &str) -> UserRequest {
        UserRequest::new(text, "s", Timestamp::from_unix(5000)).unwrap()
    }

    #[test]
    fn empty_store_answers_without_backend() {
        let pack = PromptPack::builtin();
        let b = ScriptedBackend::new("none", vec![]);
        let a = answer(&req("Where is the plate?"), &MemoryStore::new(), &pack.historian, &HashEmbedder::new(), &b, HistorianOptions::default()).unwrap();
        assert_eq!(a.answer, NO_HISTORY_ANSWER);
        assert_eq!(a.provenance.k_returned, 0);
    }

    #[test]
    fn provenance_is_exactly_what_was_retrieved_and_shown() {
        let pack = PromptPack::builtin();
        let store = store_with(&[
            ("Please clear the desk.", "Moved Crumbs to the trash can."),
            ("Tidy the living room.", "Moved Salt packet to the trash can."),
            ("Put the chips away.", "Moved Bag of chips to the trash can."),
            ("What time is it?", "It is noon."),
            ("Water the plant.", "I cannot water plants."),
            ("Close the window.", "I cannot reach the window."),
            ("Hello", "Hello!"),
        ]);
        let emb = HashEmbedder::new();
        let q = req("How many objects are in the trash can?");
        let retrieved = store.retrieve(&q.text, 5, &emb).unwrap();
        let expected_messages = build_messages(&q, &retrieved, &pack.historian, HistorianOptions::default());
        let b = ScriptedBackend::from_json(
            "h",
            &json!([{"match": {"last_user_message": q.text}, "reply": {"content": "Three: Crumbs, Salt packet and Bag of chips."}}]).to_string(),
        )
        .unwrap();
        let a = answer(&q, &store, &pack.historian, &emb, &b, HistorianOptions::default()).unwrap();
        assert_eq!(a.provenance, retrieved);
        assert_eq!(&a.transcript[..3], &expected_messages[..]);
        assert!(a.answer.contains("Crumbs"));

        let ctx = &a.transcript[1].content;
        assert!(ctx.starts_with("Known history:\n"));
        assert!(ctx.ends_with("\nAnswer using only the history above."));
        // Chronological order inside the block.
        let positions: Vec<usize> = a.provenance.chronological().iter().map(|h| ctx.find(&h.rendered_text).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(ctx.lines().count(), 2 + a.provenance.k_returned);
    }

    #[test]
    fn full_history_mode_shows_every_chunk() {
        let pack = PromptPack::builtin();
        let store = store_with(&[("a", "b"), ("c", "d"), ("e", "f"), ("g", "h"), ("i", "j"), ("k", "l"), ("m", "n")]);
        let b = ScriptedBackend::from_json("h", r#"[{"match": {"last_user_message": "what happened?"}, "reply": {"content": "stuff"}}]"#).unwrap();
        let opts = HistorianOptions { mode: ContextMode::FullHistory, ..Default::default() };
        let a = answer(&req("what happened?"), &store, &pack.historian, &HashEmbedder::new(), &b, opts).unwrap();
        assert_eq!(a.provenance.k_returned, 7);
        assert_eq!(a.transcript[1].content.lines().count(), 9);
        assert!(a.transcript[1].content.starts_with("Full conversation history:\n"));
    }
}
