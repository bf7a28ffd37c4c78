//! Remote yes/no question answering over HTTP.
//!
//! Wire format: `POST <endpoint>` with `{"report", "question", "template_version"}`;
//! the response must be `{"answer": "yes" | "no"}` (case-insensitive, an
//! optional trailing period allowed). Anything else is a typed failure.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ENDPOINT_ENV: &str = "DCPPD_QA_ENDPOINT";
pub const TEMPLATE_VERSION: &str = "qa-v1";
pub const PROMPT_TEMPLATE: &str = "Based on the following radiology report:\n{report}\n{question} Answer Yes or No only.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaClient {
    pub endpoint: String,
    pub timeout_ms: u64,
    /// Extra attempts after a transport failure (malformed answers are never retried).
    pub retries: u32,
}

#[derive(Serialize)]
struct QaRequest<'a> {
    report: &'a str,
    question: &'a str,
    template_version: &'a str,
    prompt: String,
}

#[derive(Deserialize)]
struct QaResponse {
    answer: String,
}

/// Strict yes/no normalisation.
pub fn normalize_answer(raw: &str) -> Result<bool> {
    let t = raw.trim();
    let t = t.strip_suffix('.').unwrap_or(t);
    match t.to_ascii_lowercase().as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(Error::MalformedAnswer(raw.to_string())),
    }
}

pub fn render_prompt(report: &str, question: &str) -> String {
    PROMPT_TEMPLATE.replace("{report}", report).replace("{question}", question)
}

impl QaClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self { endpoint: endpoint.into(), timeout_ms: 30_000, retries: 1 }
    }

    pub fn from_env() -> Result<Self> {
        std::env::var(ENDPOINT_ENV)
            .map(Self::new)
            .map_err(|_| Error::Config(format!("{ENDPOINT_ENV} is not set")))
    }

    fn post(&self, body: &QaRequest) -> Result<String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(self.timeout_ms)))
            .http_status_as_error(true)
            .build()
            .into();
        let mut resp = agent.post(&self.endpoint).send_json(body).map_err(|e| Error::Transport(e.to_string()))?;
        let parsed: QaResponse = resp.body_mut().read_json().map_err(|e| Error::Transport(format!("unreadable response: {e}")))?;
        Ok(parsed.answer)
    }

    pub fn ask(&self, report: &str, question: &str) -> Result<bool> {
        let body = QaRequest { report, question, template_version: TEMPLATE_VERSION, prompt: render_prompt(report, question) };
        let mut last = None;
        for _ in 0..=self.retries {
            match self.post(&body) {
                Ok(answer) => return normalize_answer(&answer),
                Err(e) => last = Some(e),
            }
        }
        Err(last.unwrap_or_else(|| Error::Transport("no attempt made".into())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalisation_is_strict() {
        assert!(normalize_answer("Yes").unwrap());
        assert!(!normalize_answer(" no. ").unwrap());
        assert!(normalize_answer("Yes, there is").is_err());
        assert!(normalize_answer("maybe").is_err());
        assert!(normalize_answer("").is_err());
    }

    #[test]
    fn prompt_template() {
        let p = render_prompt("No lung nodule.", "Is there any lung nodule?");
        assert_eq!(p, "Based on the following radiology report:\nNo lung nodule.\nIs there any lung nodule? Answer Yes or No only.");
    }
}
