//! External observer transports: a child process speaking the line protocol
//! on stdin/stdout, or an HTTP server exposing `/score`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::wire::{decode_response, encode_request};
use super::{Detection, ObserverBackend, ObserverError, ObserverRequest};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportConfig {
    pub timeout: Duration,
    /// Extra attempts after a transport failure. Timeouts and protocol
    /// violations are never retried.
    pub retries: u32,
    /// Maximum concurrent requests (child processes for `exec`).
    pub in_flight: usize,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(60),
            retries: 2,
            in_flight: 4,
        }
    }
}

struct Connection {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Connection {
    fn spawn(command: &str) -> Result<Self, ObserverError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ObserverError::Transport(format!("spawning {command:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) => break,
                    Ok(_) => {
                        if tx.send(Ok(line)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        });
        Ok(Self { child, stdin, lines })
    }

    fn roundtrip(&mut self, line: &str, timeout: Duration) -> Result<String, ObserverError> {
        let io = |e: std::io::Error| ObserverError::Transport(format!("writing request: {e}"));
        self.stdin.write_all(line.as_bytes()).map_err(io)?;
        self.stdin.write_all(b"\n").map_err(io)?;
        self.stdin.flush().map_err(io)?;
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(reply)) => Ok(reply),
            Ok(Err(e)) => Err(ObserverError::Transport(format!("reading reply: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(ObserverError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                Err(ObserverError::Transport("observer process closed its output".into()))
            }
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Runs `sh -c <command>` and exchanges one line per request. Up to
/// `in_flight` processes are kept; each serves one request at a time.
pub struct ExecBackend {
    command: String,
    config: TransportConfig,
    slots: Vec<Mutex<Option<Connection>>>,
    next: AtomicUsize,
}

impl ExecBackend {
    pub fn new(command: String, config: TransportConfig) -> Self {
        let n = config.in_flight.max(1);
        Self {
            command,
            config,
            slots: (0..n).map(|_| Mutex::new(None)).collect(),
            next: AtomicUsize::new(0),
        }
    }

    fn slot(&self) -> std::sync::MutexGuard<'_, Option<Connection>> {
        let start = self.next.fetch_add(1, Ordering::Relaxed);
        let n = self.slots.len();
        for k in 0..n {
            if let Ok(guard) = self.slots[(start + k) % n].try_lock() {
                return guard;
            }
        }
        self.slots[start % n].lock().unwrap_or_else(|p| p.into_inner())
    }
}

impl ObserverBackend for ExecBackend {
    fn detect(&self, request: &ObserverRequest) -> Result<Vec<Detection>, ObserverError> {
        let line = encode_request(request)?;
        let mut guard = self.slot();
        let mut attempt = 0;
        loop {
            let result = match guard.as_mut() {
                Some(conn) => conn.roundtrip(&line, self.config.timeout),
                None => Connection::spawn(&self.command).and_then(|conn| {
                    guard.insert(conn).roundtrip(&line, self.config.timeout)
                }),
            };
            match result {
                Ok(reply) => return decode_response(&reply, request.canvas_id),
                Err(e) => {
                    // The stream position is unknown after any failure.
                    *guard = None;
                    if e.is_retriable() && attempt < self.config.retries {
                        attempt += 1;
                        log::warn!("observer {}: {e}; retry {attempt}", self.command);
                        continue;
                    }
                    return Err(e);
                }
            }
        }
    }

    fn describe(&self) -> String {
        format!("exec:{}", self.command)
    }
}

/// POSTs each request line to `<base>/score`.
pub struct HttpBackend {
    url: String,
    agent: ureq::Agent,
    config: TransportConfig,
    window: (Mutex<usize>, Condvar),
}

impl HttpBackend {
    pub fn new(base: String, config: TransportConfig) -> Result<Self, ObserverError> {
        if !base.starts_with("http://") {
            return Err(ObserverError::Spec(format!("{base}: only plain http is supported")));
        }
        let trimmed = base.trim_end_matches('/');
        let url = if trimmed.ends_with("/score") {
            trimmed.to_string()
        } else {
            format!("{trimmed}/score")
        };
        let agent_config = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .build();
        Ok(Self {
            url,
            agent: ureq::Agent::new_with_config(agent_config),
            config,
            window: (Mutex::new(0), Condvar::new()),
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn post(&self, body: &str) -> Result<String, ObserverError> {
        let response = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json")
            .send(body);
        let mut response = match response {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(ObserverError::Timeout(self.config.timeout)),
            Err(ureq::Error::StatusCode(code)) if code >= 500 => {
                return Err(ObserverError::Transport(format!("HTTP {code}")))
            }
            Err(ureq::Error::StatusCode(code)) => {
                return Err(ObserverError::protocol(format!("HTTP {code}"), ""))
            }
            Err(e) => return Err(ObserverError::Transport(e.to_string())),
        };
        response.body_mut().read_to_string().map_err(|e| match e {
            ureq::Error::Timeout(_) => ObserverError::Timeout(self.config.timeout),
            other => ObserverError::Transport(other.to_string()),
        })
    }
}

impl ObserverBackend for HttpBackend {
    fn detect(&self, request: &ObserverRequest) -> Result<Vec<Detection>, ObserverError> {
        let line = encode_request(request)?;
        let (lock, cvar) = &self.window;
        {
            let mut busy = lock.lock().unwrap_or_else(|p| p.into_inner());
            while *busy >= self.config.in_flight.max(1) {
                busy = cvar.wait(busy).unwrap_or_else(|p| p.into_inner());
            }
            *busy += 1;
        }
        let result = (|| {
            let mut attempt = 0;
            loop {
                match self.post(&line) {
                    Ok(reply) => return decode_response(&reply, request.canvas_id),
                    Err(e) if e.is_retriable() && attempt < self.config.retries => {
                        attempt += 1;
                        log::warn!("observer {}: {e}; retry {attempt}", self.url);
                    }
                    Err(e) => return Err(e),
                }
            }
        })();
        *lock.lock().unwrap_or_else(|p| p.into_inner()) -= 1;
        cvar.notify_one();
        result
    }

    fn describe(&self) -> String {
        format!("http:{}", self.url)
    }
}
