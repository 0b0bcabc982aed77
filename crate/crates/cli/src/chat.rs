//! Interactive chat and one-shot generation.

use std::io::{self, BufRead, Write};
use std::ops::ControlFlow;
use std::sync::atomic::{AtomicBool, Ordering};

use pocketlm_core::{
    ChatMessage, ChatTemplate, FinishReason, Generation, Model, SamplerParams, Session, StopConditions,
};

use crate::CliError;

pub const BANNER: &str = "\
== Running in interactive mode. ==
 - Press Ctrl+C to interject at any time.
 - Press Return to return control to the model.
 - To return control without starting a new line, end your input with '/'.
 - If you want to submit another line, end your input with '\\'.
";

/// Raised while a reply is being generated, so an interrupt handler can tell
/// an interjection from a request to quit.
pub static GENERATING: AtomicBool = AtomicBool::new(false);

pub const PROMPT: &str = "> ";
pub const NOTICE_DROPPED: &str = "[context full: dropped the oldest exchange]";
pub const NOTICE_TOO_LONG: &str = "[input does not fit in the context; discarded]";

#[derive(Debug, Clone)]
pub struct ChatOptions {
    pub params: SamplerParams,
    pub template: ChatTemplate,
    pub system: Option<String>,
    /// Per-reply limit; unlimited up to the context when `None`.
    pub max_tokens: Option<usize>,
    pub ctx: usize,
}

/// One submitted block of user input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub text: String,
    /// False when the input ended with `/`.
    pub newline: bool,
}

/// Reads lines until one does not end in `\`. Returns `None` at end of input
/// when nothing was typed.
pub fn read_turn(input: &mut dyn BufRead) -> io::Result<Option<Turn>> {
    let mut text = String::new();
    let mut started = false;
    loop {
        let mut line = String::new();
        if input.read_line(&mut line)? == 0 {
            return Ok(started.then_some(Turn { text, newline: true }));
        }
        started = true;
        let line = line.strip_suffix('\n').unwrap_or(&line);
        let line = line.strip_suffix('\r').unwrap_or(line);
        if let Some(head) = line.strip_suffix('\\') {
            text.push_str(head);
            text.push('\n');
        } else if let Some(head) = line.strip_suffix('/') {
            text.push_str(head);
            return Ok(Some(Turn { text, newline: false }));
        } else {
            text.push_str(line);
            return Ok(Some(Turn { text, newline: true }));
        }
    }
}

/// Conversation state across turns. The session keeps the tokens of the
/// last rendering so the shared prefix is not recomputed.
pub struct Chat<'m> {
    model: &'m Model,
    opts: ChatOptions,
    session: Session,
    exchanges: Vec<(String, String)>,
}

impl<'m> Chat<'m> {
    pub fn new(model: &'m Model, opts: ChatOptions) -> Result<Self, CliError> {
        let session = Session::with_context(&model.config, opts.ctx)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(Self {
            model,
            opts,
            session,
            exchanges: Vec::new(),
        })
    }

    pub fn exchanges(&self) -> &[(String, String)] {
        &self.exchanges
    }

    fn render(&self, pending: &str) -> Result<String, CliError> {
        match &self.opts.template {
            ChatTemplate::Raw => {
                let mut s = String::new();
                for (u, a) in &self.exchanges {
                    s.push_str(u);
                    s.push_str(a);
                }
                s.push_str(pending);
                Ok(s)
            }
            t => {
                let mut msgs = Vec::with_capacity(2 * self.exchanges.len() + 2);
                if let Some(sys) = &self.opts.system {
                    msgs.push(ChatMessage::system(sys.clone()));
                }
                for (u, a) in &self.exchanges {
                    msgs.push(ChatMessage::user(u.clone()));
                    msgs.push(ChatMessage::assistant(a.clone()));
                }
                msgs.push(ChatMessage::user(pending));
                t.render(&msgs).map_err(|e| CliError::Runtime(e.to_string()))
            }
        }
    }

    fn stops(&self) -> StopConditions {
        let limit = self.opts.max_tokens.unwrap_or(usize::MAX);
        StopConditions::max_tokens(limit)
            .with_stop_texts(self.opts.template.turn_marker().map(str::to_string))
    }

    /// Tokens kept free for the reply when deciding whether to drop history.
    fn reserve(&self) -> usize {
        let quarter = (self.opts.ctx / 4).max(1);
        self.opts.max_tokens.map_or(quarter, |n| n.clamp(1, quarter))
    }

    /// Answers one user turn, streaming the reply to `out`.
    pub fn respond(
        &mut self,
        turn: &Turn,
        out: &mut dyn Write,
        cancel: &AtomicBool,
    ) -> Result<Option<Generation>, CliError> {
        let mut user = turn.text.clone();
        if turn.newline && self.opts.template == ChatTemplate::Raw {
            user.push('\n');
        }
        let vocab = &self.model.vocab;
        let tokens = loop {
            let tokens = vocab.encode(&self.render(&user)?, true);
            if tokens.len() + self.reserve() <= self.opts.ctx || self.exchanges.is_empty() {
                break tokens;
            }
            self.exchanges.remove(0);
            writeln!(out, "{NOTICE_DROPPED}")?;
        };
        if tokens.len() >= self.opts.ctx {
            writeln!(out, "{NOTICE_TOO_LONG}")?;
            return Ok(None);
        }
        let shared = self
            .session
            .history()
            .iter()
            .zip(&tokens)
            .take_while(|(a, b)| a == b)
            .count()
            .min(tokens.len() - 1);
        self.session.truncate(shared);
        let g = self.generate(&tokens[shared..], out, cancel)?;
        // a blank reply cannot be rendered back, so the exchange is forgotten
        if !g.text.trim().is_empty() || self.opts.template == ChatTemplate::Raw {
            self.exchanges.push((user, g.text.clone()));
        }
        Ok(Some(g))
    }

    /// Continues the previous reply, as after an interjection.
    pub fn resume(&mut self, out: &mut dyn Write, cancel: &AtomicBool) -> Result<Option<Generation>, CliError> {
        if self.exchanges.is_empty() || self.session.last_logits().is_none() {
            return Ok(None);
        }
        let g = self.generate(&[], out, cancel)?;
        if let Some((_, reply)) = self.exchanges.last_mut() {
            reply.push_str(&g.text);
        }
        Ok(Some(g))
    }

    fn generate(
        &mut self,
        prompt: &[pocketlm_core::TokenId],
        out: &mut dyn Write,
        cancel: &AtomicBool,
    ) -> Result<Generation, CliError> {
        cancel.store(false, Ordering::SeqCst);
        let stops = self.stops();
        let mut write_err = None;
        GENERATING.store(true, Ordering::SeqCst);
        let g = self
            .model
            .generate(&mut self.session, prompt, &self.opts.params, &stops, |e| {
                if let Err(err) = out.write_all(e.text.as_bytes()).and_then(|_| out.flush()) {
                    write_err = Some(err);
                    return ControlFlow::Break(());
                }
                if cancel.load(Ordering::SeqCst) {
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                }
            });
        GENERATING.store(false, Ordering::SeqCst);
        let g = g.map_err(|e| CliError::Runtime(e.to_string()))?;
        if let Some(e) = write_err {
            return Err(e.into());
        }
        cancel.store(false, Ordering::SeqCst);
        Ok(g)
    }
}

/// The interactive loop. Returns at end of input.
pub fn run_chat(
    model: &Model,
    opts: &ChatOptions,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
    cancel: &AtomicBool,
) -> Result<(), CliError> {
    let mut chat = Chat::new(model, opts.clone())?;
    out.write_all(BANNER.as_bytes())?;
    loop {
        write!(out, "\n{PROMPT}")?;
        out.flush()?;
        let Some(turn) = read_turn(input)? else {
            writeln!(out)?;
            return Ok(());
        };
        let g = if turn.text.trim().is_empty() {
            chat.resume(out, cancel)?
        } else {
            chat.respond(&turn, out, cancel)?
        };
        if let Some(g) = g {
            writeln!(out)?;
            if g.finish_reason == FinishReason::ContextFull {
                writeln!(out, "[context full]")?;
            }
        }
    }
}

/// Renders `prompt` as a single user turn and prints the reply.
pub fn run_once(
    model: &Model,
    opts: &ChatOptions,
    prompt: &str,
    out: &mut dyn Write,
    cancel: &AtomicBool,
) -> Result<(), CliError> {
    let mut chat = Chat::new(model, opts.clone())?;
    let turn = Turn {
        text: prompt.to_string(),
        newline: false,
    };
    if prompt.trim().is_empty() && opts.template != ChatTemplate::Raw {
        return Err(CliError::Usage("empty prompt".into()));
    }
    match chat.respond(&turn, out, cancel)? {
        Some(_) => writeln!(out)?,
        None => return Err(CliError::Runtime("prompt does not fit in the context".into())),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turns(input: &str) -> Vec<Turn> {
        let mut r = input.as_bytes();
        std::iter::from_fn(|| read_turn(&mut r).unwrap()).collect()
    }

    #[test]
    fn continuation_joins_lines() {
        assert_eq!(
            turns("line1\\\nline2\n"),
            [Turn {
                text: "line1\nline2".into(),
                newline: true
            }]
        );
    }

    #[test]
    fn slash_submits_without_newline() {
        assert_eq!(
            turns("abc/\r\nnext\n"),
            [
                Turn {
                    text: "abc".into(),
                    newline: false
                },
                Turn {
                    text: "next".into(),
                    newline: true
                }
            ]
        );
    }

    #[test]
    fn eof_without_input_is_none() {
        assert!(turns("").is_empty());
        assert_eq!(turns("tail\\").len(), 1);
    }

    #[test]
    fn empty_line_is_an_empty_turn() {
        assert_eq!(turns("\n")[0].text, "");
    }
}
