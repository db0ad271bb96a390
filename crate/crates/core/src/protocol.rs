//! Wire protocol for episode streaming: 4-byte big-endian length prefix
//! followed by a UTF-8 JSON payload.

use serde::{Deserialize, Serialize};
use std::io::{ErrorKind, Read, Write};

use crate::error::{Error, Result};
use crate::placement::Regime;

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_PAYLOAD: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Message {
    Hello {
        protocol_version: u32,
        env_config_hash: String,
        /// Sent by a resuming client: first episode id it still needs.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        resume_from: Option<u64>,
    },
    EpisodeBegin {
        episode_id: u64,
        task: String,
        regime: Regime,
        placement_seed: u64,
    },
    Frame {
        t: u32,
        state15: Vec<f32>,
        action7: Vec<f32>,
    },
    EpisodeEnd {
        episode_id: u64,
        success: bool,
    },
    Ack {
        episode_id: u64,
        stored: bool,
    },
    Bye {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
}

impl Message {
    pub fn bye() -> Self {
        Message::Bye { reason: None }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "HELLO",
            Message::EpisodeBegin { .. } => "EPISODE_BEGIN",
            Message::Frame { .. } => "FRAME",
            Message::EpisodeEnd { .. } => "EPISODE_END",
            Message::Ack { .. } => "ACK",
            Message::Bye { .. } => "BYE",
        }
    }
}

pub fn frame_payload(payload: &[u8]) -> Result<Vec<u8>> {
    if payload.len() > MAX_PAYLOAD {
        return Err(Error::Oversize(payload.len()));
    }
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn encode(msg: &Message) -> Result<Vec<u8>> {
    frame_payload(&serde_json::to_vec(msg)?)
}

/// Decodes one frame from the front of `buf`. Returns `None` if `buf` does not
/// yet hold a complete frame, otherwise the message and bytes consumed.
pub fn decode(buf: &[u8]) -> Result<Option<(Message, usize)>> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if len > MAX_PAYLOAD {
        return Err(Error::Oversize(len));
    }
    if buf.len() < 4 + len {
        return Ok(None);
    }
    let msg = serde_json::from_slice(&buf[4..4 + len]).map_err(|e| Error::Protocol(format!("bad payload: {e}")))?;
    Ok(Some((msg, 4 + len)))
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<()> {
    w.write_all(&encode(msg)?)?;
    w.flush()?;
    Ok(())
}

/// Blocking read of one message; `Ok(None)` on a clean end of stream.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_PAYLOAD {
        return Err(Error::Oversize(len));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    let msg = serde_json::from_slice(&payload).map_err(|e| Error::Protocol(format!("bad payload: {e}")))?;
    Ok(Some(msg))
}

#[derive(Debug, Clone, PartialEq)]
enum StreamState {
    AwaitHello,
    Idle { last_episode: Option<u64> },
    InEpisode { episode_id: u64, next_t: u32 },
    Closed,
}

/// Checks the server-to-client message order:
/// `HELLO (BEGIN FRAME* END)* BYE`, frames numbered from 0 with the episode id
/// matching between BEGIN and END and increasing across episodes.
#[derive(Debug, Clone)]
pub struct StreamValidator {
    state: StreamState,
}

impl Default for StreamValidator {
    fn default() -> Self {
        Self { state: StreamState::AwaitHello }
    }
}

impl StreamValidator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn in_episode(&self) -> bool {
        matches!(self.state, StreamState::InEpisode { .. })
    }

    pub fn is_closed(&self) -> bool {
        self.state == StreamState::Closed
    }

    pub fn accept(&mut self, msg: &Message) -> Result<()> {
        let reject = |state: &StreamState| Err(Error::Protocol(format!("unexpected {} in state {state:?}", msg.kind())));
        let next = match (&self.state, msg) {
            (StreamState::AwaitHello, Message::Hello { protocol_version, .. }) => {
                if *protocol_version != PROTOCOL_VERSION {
                    return Err(Error::Protocol(format!("unsupported protocol version {protocol_version}")));
                }
                StreamState::Idle { last_episode: None }
            }
            (StreamState::Idle { last_episode }, Message::EpisodeBegin { episode_id, .. }) => {
                if last_episode.is_some_and(|l| *episode_id <= l) {
                    return reject(&self.state);
                }
                StreamState::InEpisode { episode_id: *episode_id, next_t: 0 }
            }
            (StreamState::InEpisode { episode_id, next_t }, Message::Frame { t, .. }) if t == next_t => {
                StreamState::InEpisode { episode_id: *episode_id, next_t: next_t + 1 }
            }
            (StreamState::InEpisode { episode_id, .. }, Message::EpisodeEnd { episode_id: end_id, .. })
                if end_id == episode_id =>
            {
                StreamState::Idle { last_episode: Some(*episode_id) }
            }
            (StreamState::AwaitHello | StreamState::Idle { .. }, Message::Bye { .. }) => StreamState::Closed,
            (state, _) => return reject(state),
        };
        self.state = next;
        Ok(())
    }
}

/// Checks the client-to-server order: `HELLO (ACK)* BYE?`, each ACK naming the
/// episode the server most recently ended.
#[derive(Debug, Clone, Default)]
pub struct ControlValidator {
    hello: bool,
    closed: bool,
    pending: Option<u64>,
}

impl ControlValidator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record that the server ended `episode_id` and now awaits its ACK.
    pub fn expect_ack(&mut self, episode_id: u64) {
        self.pending = Some(episode_id);
    }

    pub fn accept(&mut self, msg: &Message) -> Result<()> {
        let bad = || Err(Error::Protocol(format!("unexpected {} from client", msg.kind())));
        if self.closed {
            return bad();
        }
        match msg {
            Message::Hello { protocol_version, .. } if !self.hello => {
                if *protocol_version != PROTOCOL_VERSION {
                    return Err(Error::Protocol(format!("unsupported protocol version {protocol_version}")));
                }
                self.hello = true;
            }
            Message::Ack { episode_id, .. } if self.hello && self.pending == Some(*episode_id) => self.pending = None,
            Message::Bye { .. } if self.hello => self.closed = true,
            _ => return bad(),
        }
        Ok(())
    }
}
