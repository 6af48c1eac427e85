use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{Backend, BackendReply, CompletionRequest, FinishReason, GatewayConfig, TransportFailure};
use crate::error::{Error, Result};

/// OpenAI-compatible `POST /v1/chat/completions` client.
pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    model_id: String,
    bearer: Option<String>,
}

impl HttpBackend {
    pub fn new(cfg: &GatewayConfig, base: url::Url) -> Result<Self> {
        let bearer = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::config(format!("api key environment variable `{var}` is not set"))
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let url = format!("{}/v1/chat/completions", base.as_str().trim_end_matches('/'));
        Ok(Self {
            agent,
            url,
            model_id: cfg.model_id.clone(),
            bearer,
        })
    }

    pub fn request_body(&self, req: &CompletionRequest) -> Value {
        let mut messages = Vec::with_capacity(2);
        if !req.system_text().is_empty() {
            messages.push(json!({"role": "system", "content": req.system_text()}));
        }
        messages.push(json!({"role": "user", "content": req.user_text()}));
        json!({
            "model": self.model_id,
            "messages": messages,
            "temperature": req.temperature(),
            "max_tokens": req.max_output_tokens(),
        })
    }
}

impl Backend for HttpBackend {
    fn send(
        &self,
        req: &CompletionRequest,
        _attempt: u32,
    ) -> std::result::Result<BackendReply, TransportFailure> {
        let started = Instant::now();
        let mut call = self.agent.post(&self.url);
        if let Some(token) = &self.bearer {
            call = call.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = call.send_json(self.request_body(req)).map_err(map_error)?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(TransportFailure::Status(status));
        }
        let body: Value = resp.body_mut().read_json().map_err(map_error)?;
        let mut reply = parse_response(&body)?;
        reply.latency_ms = Some(started.elapsed().as_millis() as u64);
        Ok(reply)
    }
}

fn map_error(e: ureq::Error) -> TransportFailure {
    match e {
        ureq::Error::Timeout(_) => TransportFailure::Timeout,
        ureq::Error::StatusCode(code) => TransportFailure::Status(code),
        ureq::Error::Json(e) => TransportFailure::Malformed(e.to_string()),
        other => TransportFailure::Unavailable(other.to_string()),
    }
}

/// Read `choices[0].message.content` and the finish reason.
pub(crate) fn parse_response(body: &Value) -> std::result::Result<BackendReply, TransportFailure> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| TransportFailure::Malformed("missing choices[0]".into()))?;
    let finish = match choice.get("finish_reason").and_then(Value::as_str) {
        Some("length") => FinishReason::Truncated,
        Some("content_filter") => FinishReason::Refused,
        _ => FinishReason::Complete,
    };
    let content = choice.get("message").and_then(|m| m.get("content"));
    let text = match content {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None if finish == FinishReason::Refused => String::new(),
        _ => {
            return Err(TransportFailure::Malformed(
                "missing choices[0].message.content".into(),
            ))
        }
    };
    Ok(BackendReply {
        text,
        finish,
        latency_ms: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_content_and_finish_reason() {
        let body = json!({"choices": [{"message": {"content": "hi"}, "finish_reason": "stop"}]});
        let r = parse_response(&body).unwrap();
        assert_eq!(r.text, "hi");
        assert_eq!(r.finish, FinishReason::Complete);

        let body = json!({"choices": [{"message": {"content": "h"}, "finish_reason": "length"}]});
        assert_eq!(parse_response(&body).unwrap().finish, FinishReason::Truncated);

        let body = json!({"choices": [{"message": {"content": null}, "finish_reason": "content_filter"}]});
        let r = parse_response(&body).unwrap();
        assert_eq!(r.finish, FinishReason::Refused);
        assert!(r.text.is_empty());
    }

    #[test]
    fn malformed_bodies_are_transport_failures() {
        assert!(parse_response(&json!({})).is_err());
        assert!(parse_response(&json!({"choices": []})).is_err());
        assert!(parse_response(&json!({"choices": [{"message": {}}]})).is_err());
    }

    #[test]
    fn body_shape() {
        let mut cfg = GatewayConfig::new("http://localhost:1");
        cfg.model_id = "m".into();
        let backend = HttpBackend::new(&cfg, url::Url::parse(&cfg.base_url).unwrap()).unwrap();
        assert_eq!(backend.url, "http://localhost:1/v1/chat/completions");
        let req = CompletionRequest::new("sys", "usr", "t")
            .unwrap()
            .with_temperature(0.0)
            .unwrap()
            .with_max_output_tokens(16)
            .unwrap();
        let body = backend.request_body(&req);
        assert_eq!(body["model"], "m");
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "usr");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["max_tokens"], 16);
    }
}
