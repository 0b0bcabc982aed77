//! Chat prompt rendering.
//!
//! The `orca-mini` template flattens a conversation to
//!
//! ```text
//! ### System:\n{system}\n\n### User:\n{user}\n\n### Response:\n
//! ```
//!
//! with earlier turns repeated as `User`/`Response` sections. Each header is
//! the full literal prefix (header line plus its newline), so a header
//! override can also change the separator, e.g. `"#### System:\n "`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SYSTEM_PROMPT: &str =
    "You are an AI assistant that follows instruction extremely well. Help as much as you can.";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("conversation is empty")]
    EmptyConversation,
    #[error("wrong turn order: {0}")]
    WrongTurnOrder(String),
    #[error("{0} message content is empty")]
    EmptyContent(Role),
    #[error("raw template takes exactly one message, got {0}")]
    RawMessageCount(usize),
    #[error("template header {0} is empty")]
    EmptyHeader(&'static str),
    #[error("unknown template {0:?}; expected orca-mini or raw")]
    UnknownTemplate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrcaMiniHeaders {
    pub system_header: String,
    pub user_header: String,
    pub response_header: String,
    pub default_system: String,
}

impl Default for OrcaMiniHeaders {
    fn default() -> Self {
        Self {
            system_header: "### System:\n".into(),
            user_header: "### User:\n".into(),
            response_header: "### Response:\n".into(),
            default_system: DEFAULT_SYSTEM_PROMPT.into(),
        }
    }
}

impl OrcaMiniHeaders {
    /// Four-hash header variant.
    pub fn four_hash() -> Self {
        Self {
            system_header: "#### System:\n".into(),
            user_header: "#### User:\n".into(),
            response_header: "#### Response:\n".into(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChatTemplate {
    OrcaMini(OrcaMiniHeaders),
    Raw,
}

impl Default for ChatTemplate {
    fn default() -> Self {
        ChatTemplate::OrcaMini(OrcaMiniHeaders::default())
    }
}

impl FromStr for ChatTemplate {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "orca-mini" => Ok(ChatTemplate::default()),
            "raw" => Ok(ChatTemplate::Raw),
            other => Err(PromptError::UnknownTemplate(other.to_string())),
        }
    }
}

impl ChatTemplate {
    pub fn name(&self) -> &'static str {
        match self {
            ChatTemplate::OrcaMini(_) => "orca-mini",
            ChatTemplate::Raw => "raw",
        }
    }

    /// Text that marks the start of a new user turn, used as a stop string.
    pub fn turn_marker(&self) -> Option<&str> {
        match self {
            ChatTemplate::OrcaMini(h) => Some(h.user_header.trim_end()),
            ChatTemplate::Raw => None,
        }
    }

    pub fn render(&self, messages: &[ChatMessage]) -> Result<String, PromptError> {
        match self {
            ChatTemplate::Raw => match messages {
                [m] => Ok(m.content.clone()),
                _ => Err(PromptError::RawMessageCount(messages.len())),
            },
            ChatTemplate::OrcaMini(h) => render_orca_mini(h, messages),
        }
    }
}

fn render_orca_mini(h: &OrcaMiniHeaders, messages: &[ChatMessage]) -> Result<String, PromptError> {
    for (name, header) in [
        ("system_header", &h.system_header),
        ("user_header", &h.user_header),
        ("response_header", &h.response_header),
    ] {
        if header.is_empty() {
            return Err(PromptError::EmptyHeader(name));
        }
    }
    if messages.is_empty() {
        return Err(PromptError::EmptyConversation);
    }
    let (system, turns) = match messages.split_first() {
        Some((first, rest)) if first.role == Role::System => (first.content.as_str(), rest),
        _ => ("", messages),
    };
    let system = if system.is_empty() {
        h.default_system.as_str()
    } else {
        system
    };

    let mut out = String::new();
    out.push_str(&h.system_header);
    out.push_str(system);
    out.push_str("\n\n");
    for (i, m) in turns.iter().enumerate() {
        let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
        if m.role != expected {
            return Err(PromptError::WrongTurnOrder(format!(
                "message {} is {}, expected {expected}",
                i + messages.len() - turns.len(),
                m.role
            )));
        }
        if m.content.trim().is_empty() {
            return Err(PromptError::EmptyContent(m.role));
        }
        match m.role {
            Role::User => {
                out.push_str(&h.user_header);
                out.push_str(&m.content);
                out.push_str("\n\n");
                out.push_str(&h.response_header);
            }
            _ => {
                out.push_str(&m.content);
                out.push_str("\n\n");
            }
        }
    }
    if turns.last().map(|m| m.role) != Some(Role::User) {
        return Err(PromptError::WrongTurnOrder(
            "conversation must end with a user message".into(),
        ));
    }
    Ok(out)
}
