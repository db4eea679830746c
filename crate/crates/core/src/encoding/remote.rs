use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{Encoded, Encoder, SemanticEmbedding};
use crate::error::{Error, Result};

pub const URL_ENV: &str = "FEDSEM_ENCODER_URL";
pub const TOKEN_ENV: &str = "FEDSEM_ENCODER_TOKEN";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Serialize)]
struct Request<'a> {
    model: &'a str,
    text: &'a str,
    dim: usize,
}

#[derive(Deserialize)]
struct Response {
    embedding: Vec<f64>,
    latency_ms: Option<f64>,
}

/// HTTP embedding service client. Errors are returned as-is; there is no
/// fallback to the stub encoder.
pub struct RemoteEncoder {
    model: String,
    url: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl RemoteEncoder {
    pub fn new(model: impl Into<String>, url: impl Into<String>, token: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            model: model.into(),
            url: url.into(),
            token,
            agent,
        }
    }

    /// Reads the URL and token from the environment. Returns `None` when
    /// no URL is set.
    pub fn from_env(model: impl Into<String>, timeout: Duration) -> Option<Self> {
        let url = std::env::var(URL_ENV).ok().filter(|u| !u.is_empty())?;
        let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        Some(Self::new(model, url, token, timeout))
    }
}

impl Encoder for RemoteEncoder {
    fn encoder_id(&self) -> &str {
        &self.model
    }

    fn encode(&self, text: &str, k: usize) -> Result<Encoded> {
        if text.trim().is_empty() {
            return Err(Error::Empty("text"));
        }
        if k == 0 {
            return Err(Error::InvalidArgument("embedding dimension k must be >= 1".into()));
        }
        let mut req = self.agent.post(&self.url);
        if let Some(token) = &self.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let started = Instant::now();
        let mut resp = req
            .send_json(Request {
                model: &self.model,
                text,
                dim: k,
            })
            .map_err(|e| Error::Remote(format!("{}: {e}", self.url)))?;
        let body: Response = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Remote(format!("bad response body: {e}")))?;
        let elapsed = started.elapsed().as_secs_f64() * 1e3;
        if body.embedding.len() != k {
            return Err(Error::Remote(format!(
                "expected {k} embedding values, got {}",
                body.embedding.len()
            )));
        }
        Ok(Encoded {
            embedding: SemanticEmbedding::new(self.model.clone(), body.embedding)?,
            latency_ms: body.latency_ms.unwrap_or(elapsed),
        })
    }
}
