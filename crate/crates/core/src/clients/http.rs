//! JSON-over-HTTP backends for embedding and chat-completion services.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use ureq::Agent;

use super::{BackendError, ChatBackend, ClientError, EmbeddingBackend, ServiceConfig};

fn agent(cfg: &ServiceConfig) -> Agent {
    let config = Agent::config_builder()
        .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_s.max(0.001))))
        .http_status_as_error(false)
        .build();
    Agent::new_with_config(config)
}

fn api_key(cfg: &ServiceConfig) -> Result<Option<String>, ClientError> {
    match &cfg.api_key_env {
        None => Ok(None),
        Some(var) => std::env::var(var)
            .map(Some)
            .map_err(|_| ClientError::MissingApiKey(var.clone())),
    }
}

fn post_json<T: for<'de> Deserialize<'de>>(
    agent: &Agent,
    endpoint: &str,
    key: Option<&str>,
    body: &impl Serialize,
) -> Result<T, BackendError> {
    let mut req = agent
        .post(endpoint)
        .header("Content-Type", "application/json");
    if let Some(key) = key {
        req = req.header("Authorization", format!("Bearer {key}"));
    }
    let mut resp = req
        .send_json(body)
        .map_err(|e| BackendError::Transient(e.to_string()))?;
    let status = resp.status().as_u16();
    if status == 429 || status >= 500 {
        return Err(BackendError::Transient(format!("HTTP {status}")));
    }
    if !(200..300).contains(&status) {
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        return Err(BackendError::Permanent(format!(
            "HTTP {status}: {}",
            text.trim()
        )));
    }
    resp.body_mut()
        .read_json::<T>()
        .map_err(|e| BackendError::Permanent(format!("bad response body: {e}")))
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

/// `POST {"model", "input": [..]}` → `{"data": [{"embedding": [..]}, ..]}`.
pub struct HttpEmbeddingBackend {
    agent: Agent,
    endpoint: String,
    api_key: Option<String>,
}

impl HttpEmbeddingBackend {
    pub fn new(cfg: &ServiceConfig) -> Result<Self, ClientError> {
        Ok(Self {
            agent: agent(cfg),
            endpoint: cfg.endpoint.clone(),
            api_key: api_key(cfg)?,
        })
    }
}

impl EmbeddingBackend for HttpEmbeddingBackend {
    fn embed_batch(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let resp: EmbeddingResponse = post_json(
            &self.agent,
            &self.endpoint,
            self.api_key.as_deref(),
            &EmbeddingRequest {
                model: model_id,
                input: texts,
            },
        )?;
        if resp.data.len() != texts.len() {
            return Err(BackendError::Permanent(format!(
                "service returned {} embeddings for {} inputs",
                resp.data.len(),
                texts.len()
            )));
        }
        Ok(resp.data.into_iter().map(|d| d.embedding).collect())
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: String,
}

/// `POST {"model", "messages": [..]}` → `{"choices": [{"message": {"content"}}]}`.
pub struct HttpChatBackend {
    agent: Agent,
    endpoint: String,
    api_key: Option<String>,
}

impl HttpChatBackend {
    pub fn new(cfg: &ServiceConfig) -> Result<Self, ClientError> {
        Ok(Self {
            agent: agent(cfg),
            endpoint: cfg.endpoint.clone(),
            api_key: api_key(cfg)?,
        })
    }
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, model: &str, system: &str, user: &str) -> Result<String, BackendError> {
        let body = ChatRequest {
            model,
            messages: vec![
                ChatMessage {
                    role: "system",
                    content: system,
                },
                ChatMessage {
                    role: "user",
                    content: user,
                },
            ],
        };
        let resp: ChatResponse =
            post_json(&self.agent, &self.endpoint, self.api_key.as_deref(), &body)?;
        resp.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| BackendError::Permanent("response has no choices".into()))
    }
}
