//! Wire protocol between the episode engine and an out-of-process policy.
//!
//! Frames are a 4-byte big-endian length followed by one UTF-8 JSON
//! document `{"seq": n, "kind": ..., "payload": ...}`. Sequence numbers are
//! strictly increasing per direction. Each agent decision is one
//! `observation` frame answered by one `action` frame whose `index` points
//! into the observation's `neighbors` list.

use std::io::{ErrorKind, Read, Write};

use serde::{Deserialize, Serialize};

use crate::episode::{Observation, Termination};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::intent::IntentDistribution;
use crate::roadmap::Roadmap;

pub const PROTOCOL_NAME: &str = "maipp-bridge";
pub const PROTOCOL_VERSION: u32 = 1;
const MAX_FRAME: usize = 64 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphPayload {
    pub nodes: Vec<Point>,
    pub edges: Vec<[usize; 2]>,
    pub start: usize,
}

impl From<&Roadmap> for GraphPayload {
    fn from(m: &Roadmap) -> Self {
        Self {
            nodes: m.nodes().to_vec(),
            edges: m.edges(),
            start: m.start(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum MessageBody {
    Handshake {
        protocol: String,
        version: u32,
        role: String,
    },
    Reset {
        graph: GraphPayload,
        num_agents: usize,
        team_budget: f64,
        interest_threshold: f64,
    },
    Observation(Observation),
    Action {
        agent: usize,
        index: usize,
    },
    Reward {
        agent: usize,
        reward: f64,
    },
    Done {
        termination: Option<Termination>,
    },
    IntentBroadcast(IntentDistribution),
    Error {
        message: String,
    },
}

impl MessageBody {
    pub fn kind(&self) -> &'static str {
        match self {
            MessageBody::Handshake { .. } => "handshake",
            MessageBody::Reset { .. } => "reset",
            MessageBody::Observation(_) => "observation",
            MessageBody::Action { .. } => "action",
            MessageBody::Reward { .. } => "reward",
            MessageBody::Done { .. } => "done",
            MessageBody::IntentBroadcast(_) => "intent_broadcast",
            MessageBody::Error { .. } => "error",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeMessage {
    pub seq: u64,
    #[serde(flatten)]
    pub body: MessageBody,
}

pub fn write_frame<W: Write>(w: &mut W, msg: &BridgeMessage) -> Result<()> {
    let bytes = serde_json::to_vec(msg)?;
    if bytes.len() > MAX_FRAME {
        return Err(Error::Protocol(format!(
            "frame of {} bytes too large",
            bytes.len()
        )));
    }
    w.write_all(&(bytes.len() as u32).to_be_bytes())?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<BridgeMessage>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
            return Err(Error::Protocol("timed out waiting for frame".into()))
        }
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(Error::Protocol(format!("frame length {len} exceeds limit")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => {
            Error::Protocol("timed out inside frame".into())
        }
        _ => Error::Io(e),
    })?;
    serde_json::from_slice(&buf).map_err(|e| Error::Protocol(format!("malformed frame: {e}")))
}

/// One end of a bridge connection.
pub struct Bridge<R, W> {
    reader: R,
    writer: W,
    next_seq: u64,
    last_seen: Option<u64>,
}

impl<R: Read, W: Write> Bridge<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self {
            reader,
            writer,
            next_seq: 0,
            last_seen: None,
        }
    }

    pub fn send(&mut self, body: MessageBody) -> Result<()> {
        let msg = BridgeMessage {
            seq: self.next_seq,
            body,
        };
        self.next_seq += 1;
        write_frame(&mut self.writer, &msg)
    }

    /// Next message, or `None` once the peer has closed the stream.
    pub fn recv(&mut self) -> Result<Option<MessageBody>> {
        let Some(msg) = read_frame(&mut self.reader)? else {
            return Ok(None);
        };
        if let Some(last) = self.last_seen {
            if msg.seq <= last {
                return Err(Error::Protocol(format!(
                    "sequence number {} not after {last}",
                    msg.seq
                )));
            }
        }
        self.last_seen = Some(msg.seq);
        Ok(Some(msg.body))
    }

    fn expect(&mut self) -> Result<MessageBody> {
        match self.recv()? {
            Some(MessageBody::Error { message }) => {
                Err(Error::Protocol(format!("peer error: {message}")))
            }
            Some(body) => Ok(body),
            None => Err(Error::Protocol("peer closed the connection".into())),
        }
    }

    /// Engine side of the opening exchange.
    pub fn handshake(&mut self) -> Result<()> {
        self.send(MessageBody::Handshake {
            protocol: PROTOCOL_NAME.into(),
            version: PROTOCOL_VERSION,
            role: "engine".into(),
        })?;
        match self.expect()? {
            MessageBody::Handshake {
                protocol, version, ..
            } if protocol == PROTOCOL_NAME && version == PROTOCOL_VERSION => Ok(()),
            other => Err(Error::Protocol(format!(
                "expected handshake, got {}",
                other.kind()
            ))),
        }
    }

    /// Sends an observation and returns the neighbour index chosen by the
    /// peer. The index must address a selectable neighbour.
    pub fn request_action(&mut self, obs: &Observation) -> Result<usize> {
        self.send(MessageBody::Observation(obs.clone()))?;
        match self.expect()? {
            MessageBody::Action { agent, index } => {
                if agent != obs.agent {
                    return Err(Error::Protocol(format!(
                        "action for agent {agent}, expected {}",
                        obs.agent
                    )));
                }
                if !obs.mask.get(index).copied().unwrap_or(false) {
                    return Err(Error::Protocol(format!(
                        "action index {index} is masked or out of range"
                    )));
                }
                Ok(index)
            }
            other => Err(Error::Protocol(format!(
                "expected action, got {}",
                other.kind()
            ))),
        }
    }

    pub fn into_inner(self) -> (R, W) {
        (self.reader, self.writer)
    }
}

/// Policy side of the protocol driven by a closure, returning the number of
/// decisions served. Answers the handshake, then every observation until the
/// engine sends `done` or closes the stream.
pub fn serve_policy<R: Read, W: Write>(
    bridge: &mut Bridge<R, W>,
    mut decide: impl FnMut(&Observation) -> usize,
) -> Result<usize> {
    let mut served = 0;
    while let Some(body) = bridge.recv()? {
        match body {
            MessageBody::Handshake { .. } => bridge.send(MessageBody::Handshake {
                protocol: PROTOCOL_NAME.into(),
                version: PROTOCOL_VERSION,
                role: "policy".into(),
            })?,
            MessageBody::Observation(obs) => {
                let index = decide(&obs);
                bridge.send(MessageBody::Action {
                    agent: obs.agent,
                    index,
                })?;
                served += 1;
            }
            MessageBody::Done { .. } => return Ok(served),
            _ => {}
        }
    }
    Ok(served)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn obs() -> Observation {
        Observation {
            agent: 0,
            round: 0,
            interest: vec![[0.0, 1.0, 0.0]; 3],
            risk: vec![1.0; 3],
            current_node: Some(0),
            position: Point::new(0.5, 0.5),
            remaining_budget: 1.0,
            budget_fraction: 1.0,
            trajectory_tail: vec![0],
            neighbors: vec![1, 2],
            mask: vec![false, true],
            deadlock_unmask: None,
        }
    }

    #[test]
    fn frame_layout() {
        let msg = BridgeMessage {
            seq: 3,
            body: MessageBody::Action { agent: 1, index: 4 },
        };
        let mut buf = Vec::new();
        write_frame(&mut buf, &msg).unwrap();
        let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
        assert_eq!(len, buf.len() - 4);
        let v: serde_json::Value = serde_json::from_slice(&buf[4..]).unwrap();
        assert_eq!(v["kind"], "action");
        assert_eq!(v["seq"], 3);
        assert_eq!(v["payload"]["index"], 4);
        let back = read_frame(&mut Cursor::new(buf)).unwrap().unwrap();
        assert_eq!(back, msg);
    }

    #[test]
    fn malformed_frame_is_protocol_error() {
        let mut buf = 5u32.to_be_bytes().to_vec();
        buf.extend_from_slice(b"{oops");
        assert!(matches!(
            read_frame(&mut Cursor::new(buf)),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn masked_reply_is_rejected() {
        let mut reply = Vec::new();
        write_frame(
            &mut reply,
            &BridgeMessage {
                seq: 0,
                body: MessageBody::Action { agent: 0, index: 0 },
            },
        )
        .unwrap();
        let mut bridge = Bridge::new(Cursor::new(reply), Vec::new());
        assert!(matches!(
            bridge.request_action(&obs()),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn non_monotone_sequence_is_rejected() {
        let mut input = Vec::new();
        for seq in [2, 2] {
            write_frame(
                &mut input,
                &BridgeMessage {
                    seq,
                    body: MessageBody::Done { termination: None },
                },
            )
            .unwrap();
        }
        let mut bridge = Bridge::new(Cursor::new(input), Vec::new());
        bridge.recv().unwrap();
        assert!(bridge.recv().is_err());
    }
}
