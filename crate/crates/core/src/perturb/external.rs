//! Line-delimited JSON protocol for denoisers running in another process.
//!
//! ```text
//! > {"type":"hello","protocol_version":"1","num_steps":16}
//! < {"type":"hello","protocol_version":"1","num_steps":16}
//! > {"type":"resume","record_id":3,"step":5,"tokens":[...],"masked_idx":[...],"seed":...}
//! < {"type":"final","record_id":3,"preds":[...]}
//! ```
//!
//! Requests are serialized over one child process. After a timeout or a
//! dead child the handle stays broken and every later request fails.

use std::io::{self, BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Denoiser, DenoiserCaps, ResumeRequest};
use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello { protocol_version: String, num_steps: usize },
    Resume(ResumeRequest),
    Final { record_id: u64, preds: Vec<i64> },
    Error { message: String },
}

pub fn encode(msg: &Message) -> Result<String> {
    Ok(serde_json::to_string(msg)?)
}

pub fn decode(line: &str) -> Result<Message> {
    serde_json::from_str(line).map_err(|e| Error::Protocol {
        field: "type".into(),
        message: format!("unparseable message: {e}"),
    })
}

pub struct ExternalDenoiser {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<io::Result<String>>,
    timeout: Duration,
    num_steps: usize,
    broken: Option<String>,
}

/// Spawns `command` through `sh -c` and completes the handshake.
pub fn attach_external_denoiser(command: &str, num_steps: usize, timeout: Duration) -> Result<ExternalDenoiser> {
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(command)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| Error::Denoiser(format!("cannot spawn `{command}`: {e}")))?;
    let stdin = child.stdin.take().expect("piped stdin");
    let stdout = child.stdout.take().expect("piped stdout");
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    let mut den = ExternalDenoiser {
        child,
        stdin,
        lines: rx,
        timeout,
        num_steps,
        broken: None,
    };
    den.handshake()?;
    Ok(den)
}

impl ExternalDenoiser {
    fn handshake(&mut self) -> Result<()> {
        self.send(&Message::Hello {
            protocol_version: PROTOCOL_VERSION.into(),
            num_steps: self.num_steps,
        })?;
        match self.recv()? {
            Message::Hello {
                protocol_version,
                num_steps,
            } => {
                if protocol_version != PROTOCOL_VERSION {
                    return Err(Error::Handshake {
                        ours: PROTOCOL_VERSION.into(),
                        theirs: protocol_version,
                    });
                }
                if num_steps != self.num_steps {
                    return Err(Error::Protocol {
                        field: "num_steps".into(),
                        message: format!("expected {}, got {num_steps}", self.num_steps),
                    });
                }
                Ok(())
            }
            other => Err(Error::Protocol {
                field: "type".into(),
                message: format!("expected hello, got {other:?}"),
            }),
        }
    }

    fn send(&mut self, msg: &Message) -> Result<()> {
        let mut line = encode(msg)?;
        line.push('\n');
        self.stdin
            .write_all(line.as_bytes())
            .and_then(|_| self.stdin.flush())
            .map_err(|e| self.fail(format!("write to denoiser failed: {e}")))
    }

    fn recv(&mut self) -> Result<Message> {
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => decode(&line),
            Ok(Err(e)) => Err(self.fail(format!("read from denoiser failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(self.fail(format!("no response within {:?}", self.timeout))),
            Err(RecvTimeoutError::Disconnected) => Err(self.fail("denoiser process exited".into())),
        }
    }

    fn fail(&mut self, message: String) -> Error {
        self.broken = Some(message.clone());
        Error::Denoiser(message)
    }
}

impl Denoiser for ExternalDenoiser {
    fn caps(&self) -> DenoiserCaps {
        DenoiserCaps {
            num_steps: self.num_steps,
            deterministic: true,
        }
    }

    fn resume(&mut self, req: &ResumeRequest) -> Result<Vec<i64>> {
        if let Some(msg) = &self.broken {
            return Err(Error::Denoiser(msg.clone()));
        }
        self.send(&Message::Resume(req.clone()))?;
        match self.recv()? {
            Message::Final { record_id, preds } => {
                if record_id != req.record_id {
                    return Err(Error::Protocol {
                        field: "record_id".into(),
                        message: format!("expected {}, got {record_id}", req.record_id),
                    });
                }
                if preds.len() != req.masked_idx.len() {
                    return Err(Error::Protocol {
                        field: "preds".into(),
                        message: format!("expected {} ids, got {}", req.masked_idx.len(), preds.len()),
                    });
                }
                Ok(preds)
            }
            Message::Error { message } => Err(Error::Denoiser(message)),
            other => Err(Error::Protocol {
                field: "type".into(),
                message: format!("expected final, got {other:?}"),
            }),
        }
    }
}

impl Drop for ExternalDenoiser {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Behaviour of the bundled test denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StubMode {
    /// Returns the request's current tokens at the masked positions.
    Echo,
    /// Echo, but reports the wrong record id.
    WrongRecordId,
    /// Announces an unsupported protocol version.
    BadVersion,
    /// Completes the handshake and never answers.
    Silent,
}

/// Serves the protocol on `input`/`output` until end of input.
pub fn serve_stub<R: BufRead, W: Write>(mode: StubMode, input: R, mut output: W) -> Result<()> {
    let reply = |msg: &Message, out: &mut W| -> Result<()> {
        writeln!(out, "{}", encode(msg)?).and_then(|_| out.flush()).map_err(|e| Error::io("<stdout>", e))
    };
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match decode(&line) {
            Ok(Message::Hello { num_steps, .. }) => Message::Hello {
                protocol_version: if mode == StubMode::BadVersion { "0".into() } else { PROTOCOL_VERSION.into() },
                num_steps,
            },
            Ok(Message::Resume(req)) => {
                if mode == StubMode::Silent {
                    continue;
                }
                let preds = req.masked_idx.iter().map(|&p| req.tokens.get(p).copied().unwrap_or(-1)).collect();
                let record_id = if mode == StubMode::WrongRecordId { req.record_id + 1 } else { req.record_id };
                Message::Final { record_id, preds }
            }
            Ok(other) => Message::Error {
                message: format!("unexpected message {other:?}"),
            },
            Err(e) => Message::Error { message: e.to_string() },
        };
        reply(&response, &mut output)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn message_shapes() {
        let hello = Message::Hello {
            protocol_version: "1".into(),
            num_steps: 4,
        };
        assert_eq!(encode(&hello).unwrap(), r#"{"type":"hello","protocol_version":"1","num_steps":4}"#);
        let req = Message::Resume(ResumeRequest {
            record_id: 2,
            step: 1,
            tokens: vec![5, -1],
            masked_idx: vec![1],
            seed: 9,
        });
        let text = encode(&req).unwrap();
        assert_eq!(
            text,
            r#"{"type":"resume","record_id":2,"step":1,"tokens":[5,-1],"masked_idx":[1],"seed":9}"#
        );
        assert_eq!(decode(&text).unwrap(), req);
        assert!(matches!(decode("{\"type\":\"nope\"}"), Err(Error::Protocol { .. })));
    }

    #[test]
    fn stub_echoes_current_tokens() {
        let input = concat!(
            r#"{"type":"hello","protocol_version":"1","num_steps":4}"#,
            "\n",
            r#"{"type":"resume","record_id":2,"step":1,"tokens":[5,-1,7],"masked_idx":[1,2],"seed":9}"#,
            "\n"
        );
        let mut out = Vec::new();
        serve_stub(StubMode::Echo, input.as_bytes(), &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            concat!(
                r#"{"type":"hello","protocol_version":"1","num_steps":4}"#,
                "\n",
                r#"{"type":"final","record_id":2,"preds":[-1,7]}"#,
                "\n"
            )
        );
    }
}
