use std::path::Path;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use super::{
    check_chat_request, transcript_digest, ChatBackend, ChatMessage, GatewayError, Role, ToolCall,
    ToolSpec,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptMatch {
    LastUserMessage(String),
    TranscriptDigest(String),
    /// Last user message equals `last_user_message` and some system
    /// message contains `context_contains`.
    UserAndContext {
        last_user_message: String,
        context_contains: String,
    },
}

impl ScriptMatch {
    fn matches(&self, messages: &[ChatMessage], last_user: &str) -> bool {
        match self {
            ScriptMatch::LastUserMessage(m) => m == last_user,
            ScriptMatch::TranscriptDigest(_) => false,
            ScriptMatch::UserAndContext {
                last_user_message,
                context_contains,
            } => {
                last_user_message == last_user
                    && messages
                        .iter()
                        .any(|m| m.role == Role::System && m.content.contains(context_contains.as_str()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptReply {
    #[serde(default)]
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub matcher: ScriptMatch,
    pub reply: ScriptReply,
}

/// Canned-reply backend keyed on the transcript.
///
/// Digest entries are consulted first; otherwise the first matching entry
/// in file order wins.
#[derive(Debug)]
pub struct ScriptedBackend {
    model_id: String,
    entries: RwLock<Vec<ScriptEntry>>,
}

impl ScriptedBackend {
    pub fn new(model_id: impl Into<String>, entries: Vec<ScriptEntry>) -> Self {
        Self {
            model_id: model_id.into(),
            entries: RwLock::new(entries),
        }
    }

    pub fn from_json(model_id: impl Into<String>, json: &str) -> Result<Self, GatewayError> {
        let entries: Vec<ScriptEntry> = serde_json::from_str(json)
            .map_err(|e| GatewayError::Protocol(format!("invalid script document: {e}")))?;
        Ok(Self::new(model_id, entries))
    }

    /// Loads a script file; the model id defaults to the file stem.
    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::InvalidRequest(format!("cannot read script {}: {e}", path.display())))?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("scripted")
            .to_string();
        Self::from_json(stem, &text)
    }

    pub fn push(&self, entry: ScriptEntry) {
        self.entries.write().push(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookup(&self, messages: &[ChatMessage]) -> Option<ScriptReply> {
        let entries = self.entries.read();
        let digest = transcript_digest(messages);
        if let Some(e) = entries
            .iter()
            .find(|e| matches!(&e.matcher, ScriptMatch::TranscriptDigest(d) if *d == digest))
        {
            return Some(e.reply.clone());
        }
        let last_user = messages.iter().rev().find(|m| m.role == Role::User)?;
        entries
            .iter()
            .find(|e| e.matcher.matches(messages, &last_user.content))
            .map(|e| e.reply.clone())
    }
}

impl ChatBackend for ScriptedBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn chat(&self, messages: &[ChatMessage], tools: &[ToolSpec]) -> Result<ChatMessage, GatewayError> {
        check_chat_request(messages, tools)?;
        let reply = self.lookup(messages).ok_or_else(|| {
            let last = messages
                .iter()
                .rev()
                .find(|m| m.role == Role::User)
                .map(|m| m.content.as_str())
                .unwrap_or("");
            GatewayError::Protocol(format!(
                "script `{}` has no reply for transcript {} (last user message: {:?})",
                self.model_id,
                transcript_digest(messages),
                last
            ))
        })?;
        Ok(ChatMessage {
            role: Role::Assistant,
            content: reply.content,
            tool_calls: reply.tool_calls,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn transcript(user: &str) -> Vec<ChatMessage> {
        vec![ChatMessage::system("sys"), ChatMessage::user(user)]
    }

    #[test]
    fn canned_reply_by_last_user_message() {
        let b = ScriptedBackend::from_json(
            "t",
            r#"[{"match": {"last_user_message": "hello"}, "reply": {"content": "hi there"}}]"#,
        )
        .unwrap();
        let r = b.chat(&transcript("hello"), &[]).unwrap();
        assert_eq!(r.content, "hi there");
        assert_eq!(r.role, Role::Assistant);
    }

    #[test]
    fn unmatched_transcript_is_protocol_error() {
        let b = ScriptedBackend::new("t", vec![]);
        let err = b.chat(&transcript("nope"), &[]).unwrap_err();
        match err {
            GatewayError::Protocol(msg) => {
                assert!(msg.contains(&transcript_digest(&transcript("nope"))));
                assert!(msg.contains("nope"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn digest_takes_precedence() {
        let t = transcript("q");
        let b = ScriptedBackend::new(
            "t",
            vec![
                ScriptEntry {
                    matcher: ScriptMatch::LastUserMessage("q".into()),
                    reply: ScriptReply { content: "generic".into(), tool_calls: vec![] },
                },
                ScriptEntry {
                    matcher: ScriptMatch::TranscriptDigest(transcript_digest(&t)),
                    reply: ScriptReply { content: "exact".into(), tool_calls: vec![] },
                },
            ],
        );
        assert_eq!(b.chat(&t, &[]).unwrap().content, "exact");
        let other = vec![ChatMessage::system("other"), ChatMessage::user("q")];
        assert_eq!(b.chat(&other, &[]).unwrap().content, "generic");
    }

    #[test]
    fn context_entries_in_file_order() {
        let b = ScriptedBackend::from_json(
            "t",
            r#"[{"match": {"user_and_context": {"last_user_message": "q", "context_contains": "jacket"}}, "reply": {"content": "ctx"}},
                {"match": {"last_user_message": "q"}, "reply": {"content": "plain"}}]"#,
        )
        .unwrap();
        let with = vec![ChatMessage::system("sys"), ChatMessage::system("the jacket"), ChatMessage::user("q")];
        assert_eq!(b.chat(&with, &[]).unwrap().content, "ctx");
        assert_eq!(b.chat(&transcript("q"), &[]).unwrap().content, "plain");
        // Context in a user message does not count.
        let in_user = vec![ChatMessage::system("sys"), ChatMessage::user("jacket"), ChatMessage::user("q")];
        assert_eq!(b.chat(&in_user, &[]).unwrap().content, "plain");
    }

    #[test]
    fn tool_call_replies_and_concurrent_readers() {
        let b = Arc::new(
            ScriptedBackend::from_json(
                "t",
                r#"[{"match": {"last_user_message": "clear it"},
                     "reply": {"content": "", "tool_calls": [{"name": "transfer_to_task_planner", "arguments": {}}]}}]"#,
            )
            .unwrap(),
        );
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let b = Arc::clone(&b);
                std::thread::spawn(move || b.chat(&transcript("clear it"), &[]).unwrap())
            })
            .collect();
        let replies: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert!(replies.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(replies[0].tool_calls[0].name, "transfer_to_task_planner");
    }
}
