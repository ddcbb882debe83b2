//! HTTP client for a `/v1` sidecar.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use ureq::Agent;

use super::{Backend, BackendInfo, EmbedRequest, EmbedResponse, GenerationRequest, GenerationTrace};
use crate::dense::EmbeddingVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RemoteBackend {
    base: String,
    agent: Agent,
}

impl RemoteBackend {
    pub fn new(base_url: &str) -> Self {
        Self::with_timeout(base_url, Duration::from_secs(300))
    }

    pub fn with_timeout(base_url: &str, timeout: Duration) -> Self {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base: base_url.trim_end_matches('/').to_owned(),
            agent,
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn decode<T: DeserializeOwned>(path: &str, resp: ureq::http::Response<ureq::Body>) -> Result<T> {
        let status = resp.status();
        let mut body = resp.into_body();
        if !status.is_success() {
            let text = body.read_to_string().unwrap_or_default();
            return Err(Error::Backend(format!("{path} returned {status}: {text}")));
        }
        body.read_json()
            .map_err(|e| Error::Transport(format!("{path}: bad response body: {e}")))
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let resp = self
            .agent
            .post(&self.url(path))
            .send_json(body)
            .map_err(|e| Error::Transport(format!("{path}: {e}")))?;
        Self::decode(path, resp)
    }
}

impl Backend for RemoteBackend {
    fn info(&self) -> Result<BackendInfo> {
        let resp = self
            .agent
            .get(&self.url("/v1/info"))
            .call()
            .map_err(|e| Error::Transport(format!("/v1/info: {e}")))?;
        Self::decode("/v1/info", resp)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(Error::invalid("embed needs at least one text"));
        }
        let resp: EmbedResponse = self.post(
            "/v1/embed",
            &EmbedRequest {
                texts: texts.to_vec(),
            },
        )?;
        if resp.vectors.len() != texts.len() {
            return Err(Error::Backend(format!(
                "/v1/embed returned {} vectors for {} texts",
                resp.vectors.len(),
                texts.len()
            )));
        }
        for v in &resp.vectors {
            v.check_dim(resp.dim)?;
        }
        Ok(resp.vectors)
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationTrace> {
        self.post("/v1/generate", req)
    }
}
