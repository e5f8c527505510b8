use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use super::protocol::{EngineMessage, EvaluatorMessage, PROTOCOL_VERSION};
use super::{EvalError, Evaluator, FitnessRequest, FitnessResponse};

/// Client for evaluator processes speaking the line-delimited JSON protocol.
///
/// The command runs under `sh -c`. Each endpoint handles one request at a
/// time; concurrent callers get their own endpoint, spawned on demand and
/// kept for reuse. A malformed or mismatched response triggers one resend
/// before the request fails with a protocol violation.
pub struct ExternalEvaluator {
    command: String,
    snapshot_sha256: String,
    timeout: Duration,
    idle: Mutex<Vec<Endpoint>>,
}

impl ExternalEvaluator {
    pub fn new(command: impl Into<String>, snapshot_sha256: impl Into<String>, timeout: Duration) -> Self {
        Self {
            command: command.into(),
            snapshot_sha256: snapshot_sha256.into(),
            timeout,
            idle: Mutex::new(Vec::new()),
        }
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    /// Spawns one endpoint and completes the handshake, leaving it idle.
    pub fn connect(&self) -> Result<(), EvalError> {
        let ep = Endpoint::spawn(&self.command, &self.snapshot_sha256, self.timeout)?;
        self.idle.lock().unwrap().push(ep);
        Ok(())
    }

    fn checkout(&self) -> Result<Endpoint, EvalError> {
        if let Some(ep) = self.idle.lock().unwrap().pop() {
            return Ok(ep);
        }
        Endpoint::spawn(&self.command, &self.snapshot_sha256, self.timeout)
    }
}

impl Evaluator for ExternalEvaluator {
    fn evaluate(&self, req: &FitnessRequest) -> Result<FitnessResponse, EvalError> {
        let mut ep = self.checkout()?;
        let line = EngineMessage::eval(req.request_id, req.finetune_epochs, &req.masks).to_line();
        let mut last_problem = String::new();
        for _attempt in 0..2 {
            ep.send(&line, req.request_id)?;
            let reply = match ep.recv(self.timeout) {
                Ok(reply) => reply,
                Err(RecvTimeoutError::Timeout) => {
                    return Err(EvalError::Timeout {
                        request_id: req.request_id,
                        seconds: self.timeout.as_secs_f64(),
                    })
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(EvalError::Protocol {
                        request_id: req.request_id,
                        detail: "evaluator closed its output".into(),
                    })
                }
            };
            match EvaluatorMessage::parse(&reply) {
                Ok(EvaluatorMessage::Result { id, fitness }) if id == req.request_id && fitness.is_finite() => {
                    self.idle.lock().unwrap().push(ep);
                    return Ok(FitnessResponse::new(id, fitness));
                }
                Ok(EvaluatorMessage::Error { id, message }) if id == req.request_id => {
                    self.idle.lock().unwrap().push(ep);
                    return Err(EvalError::Reported {
                        request_id: id,
                        message,
                    });
                }
                Ok(EvaluatorMessage::Result { id, .. }) | Ok(EvaluatorMessage::Error { id, .. })
                    if id != req.request_id =>
                {
                    last_problem = format!("response carries id {id}");
                }
                Ok(other) => last_problem = format!("unexpected message {other:?}"),
                Err(e) => last_problem = format!("malformed response `{}`: {e}", reply.trim()),
            }
        }
        Err(EvalError::Protocol {
            request_id: req.request_id,
            detail: last_problem,
        })
    }
}

struct Endpoint {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<String>,
}

impl Endpoint {
    fn spawn(command: &str, digest: &str, timeout: Duration) -> Result<Self, EvalError> {
        let spawn_err = |detail: String| EvalError::Spawn {
            command: command.to_string(),
            detail,
        };
        let mut cmd = Command::new("sh");
        cmd.arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit());
        // Own process group, so shutdown reaches everything the shell started.
        #[cfg(unix)]
        std::os::unix::process::CommandExt::process_group(&mut cmd, 0);
        let mut child = cmd
            .spawn()
            .map_err(|e| spawn_err(e.to_string()))?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if line.trim().is_empty() {
                    continue;
                }
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut ep = Endpoint {
            child,
            stdin,
            lines: rx,
        };
        let hello = EngineMessage::Hello {
            version: PROTOCOL_VERSION,
            snapshot_sha256: digest.to_string(),
        };
        ep.send(&hello.to_line(), 0).map_err(|e| spawn_err(e.to_string()))?;
        match ep.recv(timeout) {
            Ok(line) => match EvaluatorMessage::parse(&line) {
                Ok(EvaluatorMessage::Ready { version }) if version == PROTOCOL_VERSION => Ok(ep),
                Ok(EvaluatorMessage::Error { message, .. }) => Err(spawn_err(format!("handshake rejected: {message}"))),
                _ => Err(EvalError::Protocol {
                    request_id: 0,
                    detail: format!("expected ready, got `{}`", line.trim()),
                }),
            },
            Err(RecvTimeoutError::Timeout) => Err(EvalError::Timeout {
                request_id: 0,
                seconds: timeout.as_secs_f64(),
            }),
            Err(RecvTimeoutError::Disconnected) => Err(spawn_err("exited before handshake".into())),
        }
    }

    fn send(&mut self, line: &str, request_id: u64) -> Result<(), EvalError> {
        let stdin = self.stdin.as_mut().ok_or_else(|| EvalError::Protocol {
            request_id,
            detail: "evaluator input closed".into(),
        })?;
        stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| EvalError::Protocol {
                request_id,
                detail: format!("write failed: {e}"),
            })
    }

    fn recv(&self, timeout: Duration) -> Result<String, RecvTimeoutError> {
        self.lines.recv_timeout(timeout)
    }
}

impl Drop for Endpoint {
    fn drop(&mut self) {
        if let Some(mut stdin) = self.stdin.take() {
            let _ = stdin.write_all(EngineMessage::Bye.to_line().as_bytes());
            let _ = stdin.flush();
        }
        let deadline = Instant::now() + Duration::from_millis(500);
        while Instant::now() < deadline {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        #[cfg(unix)]
        if let Ok(pid) = libc::pid_t::try_from(self.child.id()) {
            // SAFETY: signals only the process group created for this endpoint.
            unsafe {
                libc::kill(-pid, libc::SIGKILL);
            }
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
