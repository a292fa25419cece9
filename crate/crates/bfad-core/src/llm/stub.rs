//! Offline stand-ins for a chat endpoint: a deterministic rule-based
//! responder and a minimal local HTTP server for exercising the real
//! transport path.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use super::client::{ChatEndpoint, ChatRequest, LlmError};
use crate::registry::CriticalFunctionRegistry;

/// Threshold of critical calls in the `[Critical Code]` slot at which the
/// rule stub answers WebShell.
pub const STUB_CALL_THRESHOLD: usize = 3;

/// Extracts the text of the `[Critical Code]` slot from a rendered user query.
pub fn critical_code_section(user_text: &str) -> &str {
    let Some(start) = user_text.find("[Critical Code]\n") else {
        return "";
    };
    let body = &user_text[start + "[Critical Code]\n".len()..];
    match body.find("\n\n[Source Code]\n") {
        Some(end) => &body[..end],
        None => body,
    }
}

/// Counts registry-name tokens followed (modulo whitespace) by `(`. This is a
/// raw textual count with no comment or string awareness; the rendered
/// critical slot is already a code view.
pub fn count_registry_calls(text: &str, registry: &CriticalFunctionRegistry) -> usize {
    let bytes = text.as_bytes();
    let mut count = 0usize;
    let mut i = 0usize;
    while i < bytes.len() {
        let b = bytes[i];
        if b.is_ascii_alphabetic() || b == b'_' {
            let start = i;
            let mut j = i + 1;
            while j < bytes.len()
                && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_')
            {
                j += 1;
            }
            let preceded_ok = start == 0
                || (!bytes[start - 1].is_ascii_alphanumeric()
                    && bytes[start - 1] != b'_'
                    && bytes[start - 1] != b'$');
            let mut k = j;
            while k < bytes.len() && bytes[k].is_ascii_whitespace() {
                k += 1;
            }
            if preceded_ok
                && bytes.get(k) == Some(&b'(')
                && registry.contains(std::str::from_utf8(&bytes[start..j]).unwrap_or(""))
            {
                count += 1;
            }
            i = j;
        } else {
            i += 1;
        }
    }
    count
}

/// Deterministic offline endpoint: answers WebShell exactly when the
/// `[Critical Code]` slot holds at least [`STUB_CALL_THRESHOLD`] registry
/// calls, benign otherwise.
pub struct RuleStubEndpoint {
    registry: CriticalFunctionRegistry,
}

impl RuleStubEndpoint {
    pub fn new(registry: CriticalFunctionRegistry) -> Self {
        Self { registry }
    }
}

impl Default for RuleStubEndpoint {
    fn default() -> Self {
        Self::new(CriticalFunctionRegistry::default_registry())
    }
}

impl ChatEndpoint for RuleStubEndpoint {
    fn chat(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let user = request
            .user_content()
            .ok_or_else(|| LlmError::Protocol("request has no user message".to_string()))?;
        let critical = critical_code_section(user);
        if count_registry_calls(critical, &self.registry) >= STUB_CALL_THRESHOLD {
            Ok("WebShell".to_string())
        } else {
            Ok("benign".to_string())
        }
    }
}

/// How the stub server answers one request.
pub struct StubReply {
    pub status: u16,
    pub body: String,
}

impl StubReply {
    /// A well-formed chat-completions body wrapping `content`.
    pub fn content(content: &str) -> Self {
        Self {
            status: 200,
            body: serde_json::json!({
                "choices": [{"message": {"role": "assistant", "content": content}}]
            })
            .to_string(),
        }
    }

    pub fn status(status: u16) -> Self {
        Self {
            status,
            body: "{}".to_string(),
        }
    }
}

/// Decides the reply for the `n`-th request (0-based) carrying `request`.
pub trait Responder: Send + Sync {
    fn respond(&self, request: &ChatRequest, request_index: usize) -> StubReply;
}

/// Responder that applies a [`ChatEndpoint`] and wraps its answer.
pub struct EndpointResponder<E>(pub E);

impl<E: ChatEndpoint> Responder for EndpointResponder<E> {
    fn respond(&self, request: &ChatRequest, _request_index: usize) -> StubReply {
        match self.0.chat(request) {
            Ok(content) => StubReply::content(&content),
            Err(e) => StubReply {
                status: 500,
                body: format!("{{\"error\": \"{e}\"}}"),
            },
        }
    }
}

/// Minimal blocking HTTP server on a loopback port. Tracks the maximum
/// number of concurrently in-flight requests.
pub struct StubServer {
    addr: std::net::SocketAddr,
    shutdown: Arc<AtomicBool>,
    in_flight: Arc<AtomicUsize>,
    max_in_flight: Arc<AtomicUsize>,
    requests_seen: Arc<AtomicUsize>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl StubServer {
    pub fn start(responder: Arc<dyn Responder>) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let in_flight = Arc::new(AtomicUsize::new(0));
        let max_in_flight = Arc::new(AtomicUsize::new(0));
        let requests_seen = Arc::new(AtomicUsize::new(0));

        let handle = {
            let shutdown = Arc::clone(&shutdown);
            let in_flight = Arc::clone(&in_flight);
            let max_in_flight = Arc::clone(&max_in_flight);
            let requests_seen = Arc::clone(&requests_seen);
            std::thread::spawn(move || {
                let mut workers = Vec::new();
                while !shutdown.load(Ordering::SeqCst) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let responder = Arc::clone(&responder);
                            let in_flight = Arc::clone(&in_flight);
                            let max_in_flight = Arc::clone(&max_in_flight);
                            let requests_seen = Arc::clone(&requests_seen);
                            workers.push(std::thread::spawn(move || {
                                let index = requests_seen.fetch_add(1, Ordering::SeqCst);
                                let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                                max_in_flight.fetch_max(now, Ordering::SeqCst);
                                let _ = handle_connection(stream, responder.as_ref(), index);
                                in_flight.fetch_sub(1, Ordering::SeqCst);
                            }));
                        }
                        Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                            std::thread::sleep(std::time::Duration::from_millis(2));
                        }
                        Err(_) => break,
                    }
                }
                for worker in workers {
                    let _ = worker.join();
                }
            })
        };

        Ok(Self {
            addr,
            shutdown,
            in_flight,
            max_in_flight,
            requests_seen,
            handle: Some(handle),
        })
    }

    /// Base URL to put in `LlmConfig::endpoint_url`.
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn requests_seen(&self) -> usize {
        self.requests_seen.load(Ordering::SeqCst)
    }

    pub fn current_in_flight(&self) -> usize {
        self.in_flight.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn handle_connection(
    mut stream: TcpStream,
    responder: &dyn Responder,
    index: usize,
) -> std::io::Result<()> {
    stream.set_read_timeout(Some(std::time::Duration::from_secs(10)))?;
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let header_end = loop {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Ok(());
        }
        buf.extend_from_slice(&chunk[..n]);
        if let Some(pos) = find_header_end(&buf) {
            break pos;
        }
        if buf.len() > 1 << 20 {
            return Ok(());
        }
    };
    let headers = String::from_utf8_lossy(&buf[..header_end]).to_string();
    let content_length = headers
        .lines()
        .find_map(|line| {
            let (name, value) = line.split_once(':')?;
            name.eq_ignore_ascii_case("content-length")
                .then(|| value.trim().parse::<usize>().ok())?
        })
        .unwrap_or(0);
    let body_start = header_end + 4;
    while buf.len() < body_start + content_length {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            break;
        }
        buf.extend_from_slice(&chunk[..n]);
    }
    let body = &buf[body_start..(body_start + content_length).min(buf.len())];

    let reply = match serde_json::from_slice::<ChatRequest>(body) {
        Ok(request) => responder.respond(&request, index),
        Err(e) => StubReply {
            status: 400,
            body: format!("{{\"error\": \"bad request: {e}\"}}"),
        },
    };
    let reason = match reply.status {
        200 => "OK",
        400 => "Bad Request",
        401 => "Unauthorized",
        403 => "Forbidden",
        429 => "Too Many Requests",
        _ => "Error",
    };
    let response = format!(
        "HTTP/1.1 {} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        reply.status,
        reason,
        reply.body.len(),
        reply.body
    );
    stream.write_all(response.as_bytes())?;
    stream.flush()
}

fn find_header_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n")
}
