use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{Result, TextgenError};

/// A completion endpoint speaking
/// `POST {model, prompt, max_tokens, temperature, logprobs: true}` →
/// `{tokens: [...], logprobs: [...]}`.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteBackend {
    pub url: String,
    pub token: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub temperature: f64,
}

#[derive(Deserialize)]
struct Reply {
    tokens: Vec<String>,
    #[serde(default)]
    logprobs: Option<Vec<f64>>,
}

impl RemoteBackend {
    /// Tokens and, when the endpoint returned them, their log-probabilities.
    pub fn complete(&self, prompt: &str, max_tokens: usize) -> Result<(Vec<String>, Option<Vec<f64>>)> {
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let mut req = agent.post(&self.url).set("Content-Type", "application/json");
        if let Some(token) = &self.token {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        let body = json!({
            "model": self.model,
            "prompt": prompt,
            "max_tokens": max_tokens,
            "temperature": self.temperature,
            "logprobs": true,
        });
        let resp = match req.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, _)) => {
                return Err(TextgenError::Status {
                    endpoint: self.url.clone(),
                    code,
                })
            }
            Err(e) => {
                return Err(TextgenError::Transport {
                    endpoint: self.url.clone(),
                    msg: e.to_string(),
                })
            }
        };
        let reply: Reply = resp.into_json().map_err(|e| TextgenError::Response {
            endpoint: self.url.clone(),
            msg: e.to_string(),
        })?;
        if let Some(lp) = &reply.logprobs {
            if lp.len() != reply.tokens.len() {
                return Err(TextgenError::Response {
                    endpoint: self.url.clone(),
                    msg: format!("{} tokens but {} logprobs", reply.tokens.len(), lp.len()),
                });
            }
        }
        Ok((reply.tokens, reply.logprobs))
    }
}
