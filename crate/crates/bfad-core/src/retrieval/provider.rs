//! Embedding providers: the deterministic hashed-token provider used for
//! offline runs and tests, and an HTTP provider speaking the common
//! embeddings wire shape.

use serde::Deserialize;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("embedding request failed: {0}")]
    Transport(String),
    #[error("embedding endpoint returned status {0}")]
    Status(u16),
    #[error("malformed embedding response: {0}")]
    Protocol(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Turns text into a fixed-dimension vector. Implementations must be
/// deterministic (identical text gives an identical vector) and return a
/// non-zero vector for non-empty text.
pub trait EmbeddingProvider: Send + Sync {
    fn identifier(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError>;
}

pub const HASHED_TOKEN_PROVIDER_ID: &str = "hashed-token-256";
pub const HASHED_TOKEN_DIMENSION: usize = 256;

/// Offline provider: a 256-bucket bag of hashed tokens, L2-normalized.
/// Tokens are maximal alphanumeric runs, lowercased; each adds 1.0 to the
/// bucket `fnv1a(token) mod 256`. FNV-1a is spelled out here so vectors stay
/// stable across Rust releases and platforms.
#[derive(Debug, Default, Clone)]
pub struct HashedTokenProvider;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl EmbeddingProvider for HashedTokenProvider {
    fn identifier(&self) -> &str {
        HASHED_TOKEN_PROVIDER_ID
    }

    fn dimension(&self) -> usize {
        HASHED_TOKEN_DIMENSION
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        let mut buckets = vec![0.0f64; HASHED_TOKEN_DIMENSION];
        let mut any_token = false;
        let mut token = String::new();
        for ch in text.chars().chain(std::iter::once(' ')) {
            if ch.is_alphanumeric() {
                token.extend(ch.to_lowercase());
            } else if !token.is_empty() {
                let bucket = (fnv1a(token.as_bytes()) % HASHED_TOKEN_DIMENSION as u64) as usize;
                buckets[bucket] += 1.0;
                any_token = true;
                token.clear();
            }
        }
        // Text with no alphanumeric runs still maps to a non-zero vector.
        if !any_token && !text.is_empty() {
            let bucket = (fnv1a(b"") % HASHED_TOKEN_DIMENSION as u64) as usize;
            buckets[bucket] += 1.0;
        }
        let norm = buckets.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut buckets {
                *v /= norm;
            }
        }
        Ok(buckets)
    }
}

/// Remote provider: `POST {endpoint}` with `{"input": [texts], "model": id}`,
/// expecting `{"data": [{"embedding": [...]}]}` back.
pub struct HttpEmbeddingProvider {
    identifier: String,
    endpoint_url: String,
    model_id: String,
    dimension: usize,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingRecord>,
}

#[derive(Deserialize)]
struct EmbeddingRecord {
    embedding: Vec<f64>,
}

impl HttpEmbeddingProvider {
    pub fn new(
        endpoint_url: impl Into<String>,
        model_id: impl Into<String>,
        dimension: usize,
        api_key: Option<String>,
    ) -> Result<Self, ProviderError> {
        let model_id = model_id.into();
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(60))
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(Self {
            identifier: format!("http:{model_id}"),
            endpoint_url: endpoint_url.into(),
            model_id,
            dimension,
            api_key,
            client,
        })
    }

    pub fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let body = json!({ "input": texts, "model": self.model_id });
        let mut request = self.client.post(&self.endpoint_url).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(ProviderError::Status(status.as_u16()));
        }
        let parsed: EmbeddingResponse = response
            .json()
            .map_err(|e| ProviderError::Protocol(e.to_string()))?;
        if parsed.data.len() != texts.len() {
            return Err(ProviderError::Protocol(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        let mut out = Vec::with_capacity(parsed.data.len());
        for record in parsed.data {
            if record.embedding.len() != self.dimension {
                return Err(ProviderError::Dimension {
                    expected: self.dimension,
                    got: record.embedding.len(),
                });
            }
            out.push(record.embedding);
        }
        Ok(out)
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn identifier(&self) -> &str {
        &self.identifier
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        let mut vectors = self.embed_batch(&[text])?;
        Ok(vectors.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashed_provider_is_deterministic() {
        let p = HashedTokenProvider;
        let a = p.embed("eval base64_decode eval").unwrap();
        let b = p.embed("eval base64_decode eval").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 256);
    }

    #[test]
    fn vectors_are_l2_normalized() {
        let p = HashedTokenProvider;
        let v = p.embed("one two three four five").unwrap();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tokens_are_case_insensitive_alphanumeric_runs() {
        let p = HashedTokenProvider;
        let a = p.embed("EVAL($x); SYSTEM").unwrap();
        let b = p.embed("eval $x system").unwrap();
        // `x` appears in both; eval/system match case-insensitively.
        assert_eq!(a, b);
    }

    #[test]
    fn nonempty_text_has_nonzero_norm() {
        let p = HashedTokenProvider;
        for text in ["abc", "....", "+++", "日本語"] {
            let v = p.embed(text).unwrap();
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(norm > 0.0, "zero norm for {text:?}");
        }
    }

    #[test]
    fn empty_text_is_zero_vector() {
        let p = HashedTokenProvider;
        let v = p.embed("").unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn different_token_bags_differ() {
        let p = HashedTokenProvider;
        assert_ne!(p.embed("eval eval").unwrap(), p.embed("fsockopen").unwrap());
    }

    /// One-shot embeddings endpoint speaking the `{"input": [...], "model":
    /// ...}` / `{"data": [{"embedding": [...]}]}` wire shape.
    fn serve_embeddings_once(
        reply_for: impl Fn(&serde_json::Value) -> String + Send + 'static,
    ) -> (String, std::thread::JoinHandle<serde_json::Value>) {
        use std::io::{Read, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            let header_end = loop {
                let n = stream.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                    break pos;
                }
            };
            let headers = String::from_utf8_lossy(&buf[..header_end]).to_string();
            let content_length: usize = headers
                .lines()
                .find_map(|l| {
                    let (name, value) = l.split_once(':')?;
                    name.eq_ignore_ascii_case("content-length")
                        .then(|| value.trim().parse().ok())?
                })
                .unwrap();
            while buf.len() < header_end + 4 + content_length {
                let n = stream.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
            }
            let body: serde_json::Value =
                serde_json::from_slice(&buf[header_end + 4..header_end + 4 + content_length])
                    .unwrap();
            let reply = reply_for(&body);
            let response = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                reply.len(),
                reply
            );
            stream.write_all(response.as_bytes()).unwrap();
            body
        });
        (url, handle)
    }

    #[test]
    fn http_provider_speaks_the_embeddings_wire_shape() {
        let (url, handle) = serve_embeddings_once(|_body| {
            serde_json::json!({"data": [{"embedding": [0.5, 0.25, 0.125]}]}).to_string()
        });
        let provider =
            HttpEmbeddingProvider::new(url, "embed-model-x", 3, Some("sk-test".to_string()))
                .unwrap();
        let vector = provider.embed("<?php eval($x);").unwrap();
        assert_eq!(vector, vec![0.5, 0.25, 0.125]);
        assert_eq!(provider.identifier(), "http:embed-model-x");

        let request = handle.join().unwrap();
        assert_eq!(request["model"], "embed-model-x");
        assert_eq!(request["input"], serde_json::json!(["<?php eval($x);"]));
    }

    #[test]
    fn http_provider_rejects_wrong_dimension() {
        let (url, handle) = serve_embeddings_once(|_body| {
            serde_json::json!({"data": [{"embedding": [1.0, 2.0]}]}).to_string()
        });
        let provider = HttpEmbeddingProvider::new(url, "embed-model-x", 3, None).unwrap();
        let err = provider.embed("text").unwrap_err();
        assert!(matches!(err, ProviderError::Dimension { expected: 3, got: 2 }));
        handle.join().unwrap();
    }
}
