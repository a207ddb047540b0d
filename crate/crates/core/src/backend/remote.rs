use std::path::Path;
use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendError, DecisionBackend, DecisionRequest, DecisionResponse, Role};

/// Role-keyed prompt templates with `{goal}`, `{observation}`, `{memory}`,
/// `{actions}`, `{post_observation}` and `{prior_action}` placeholders.
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    pub plan: String,
    pub plan_reflect: String,
    pub act: String,
    pub exec_reflect: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            plan: include_str!("../../prompts/plan.txt").to_string(),
            plan_reflect: include_str!("../../prompts/plan_reflect.txt").to_string(),
            act: include_str!("../../prompts/act.txt").to_string(),
            exec_reflect: include_str!("../../prompts/exec_reflect.txt").to_string(),
        }
    }
}

impl PromptTemplates {
    /// Loads `plan.txt`, `plan_reflect.txt`, `act.txt` and `exec_reflect.txt`
    /// from a directory.
    pub fn from_dir(dir: &Path) -> std::io::Result<Self> {
        let read = |name: &str| std::fs::read_to_string(dir.join(name));
        Ok(PromptTemplates {
            plan: read("plan.txt")?,
            plan_reflect: read("plan_reflect.txt")?,
            act: read("act.txt")?,
            exec_reflect: read("exec_reflect.txt")?,
        })
    }

    pub fn render(&self, request: &DecisionRequest) -> String {
        let template = match request.role {
            Role::Plan => &self.plan,
            Role::PlanReflect => &self.plan_reflect,
            Role::Act => &self.act,
            Role::ExecReflect => &self.exec_reflect,
        };
        let memory = if request.retrieved_memory.is_empty() {
            "(none)".to_string()
        } else {
            request.retrieved_memory.iter().map(|m| format!("- {m}")).collect::<Vec<_>>().join("\n")
        };
        template
            .replace("{goal}", &request.goal)
            .replace("{observation}", &request.observation)
            .replace("{post_observation}", request.post_observation.as_deref().unwrap_or(""))
            .replace(
                "{prior_action}",
                &request.prior_action.as_ref().map(|a| a.to_string()).unwrap_or_default(),
            )
            .replace("{memory}", &memory)
            .replace("{actions}", &request.action_catalog.join("\n"))
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub base_url: String,
    pub endpoint_path: String,
    pub model: String,
    /// Environment variable holding the auth token.
    pub token_env: String,
    pub auth_header: String,
    pub timeout: Duration,
    /// Total attempts, including the first.
    pub max_attempts: u32,
    pub backoff_base: Duration,
    pub backoff_factor: f64,
    pub templates: PromptTemplates,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            base_url: "http://127.0.0.1:8000".into(),
            endpoint_path: "/v1/chat/completions".into(),
            model: "gpt-4o-2024-05-13".into(),
            token_env: "MOBA_API_KEY".into(),
            auth_header: "Authorization".into(),
            timeout: Duration::from_secs(60),
            max_attempts: 3,
            backoff_base: Duration::from_millis(500),
            backoff_factor: 2.0,
            templates: PromptTemplates::default(),
        }
    }
}

impl RemoteConfig {
    /// Defaults overridden by `MOBA_BACKEND_URL`, `MOBA_BACKEND_MODEL`
    /// and `MOBA_BACKEND_TIMEOUT_SECS`.
    pub fn from_env() -> Self {
        let mut cfg = RemoteConfig::default();
        if let Ok(url) = std::env::var("MOBA_BACKEND_URL") {
            cfg.base_url = url;
        }
        if let Ok(model) = std::env::var("MOBA_BACKEND_MODEL") {
            cfg.model = model;
        }
        if let Some(secs) = std::env::var("MOBA_BACKEND_TIMEOUT_SECS").ok().and_then(|s| s.parse().ok()) {
            cfg.timeout = Duration::from_secs(secs);
        }
        cfg
    }

    fn delay(&self, attempt: u32) -> Duration {
        self.backoff_base.mul_f64(self.backoff_factor.powi(attempt as i32))
    }
}

/// Returns the first balanced `{...}` in `text` that parses as JSON.
pub fn extract_json_object(text: &str) -> Option<Value> {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(offset) = text[start..].find('{') {
        let open = start + offset;
        let mut depth = 0usize;
        let mut in_string = false;
        let mut escaped = false;
        for (i, &b) in bytes.iter().enumerate().skip(open) {
            if in_string {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_string = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_string = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        if let Ok(v) = serde_json::from_str::<Value>(&text[open..=i]) {
                            if v.is_object() {
                                return Some(v);
                            }
                        }
                        break;
                    }
                }
                _ => {}
            }
        }
        start = open + 1;
    }
    None
}

enum Failure {
    Retryable(BackendError),
    Fatal(BackendError),
}

/// Chat-completion client: renders the request, posts it, pulls the first
/// JSON object out of the reply and validates it against the role schema.
#[derive(Debug, Clone)]
pub struct RemoteClient {
    config: RemoteConfig,
    agent: ureq::Agent,
}

fn is_timeout(err: &ureq::Transport) -> bool {
    let mut source: Option<&(dyn std::error::Error + 'static)> = std::error::Error::source(err);
    while let Some(e) = source {
        if let Some(io) = e.downcast_ref::<std::io::Error>() {
            if matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) {
                return true;
            }
        }
        source = e.source();
    }
    err.to_string().contains("timed out")
}

impl RemoteClient {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        RemoteClient { config, agent }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    pub fn request_body(&self, request: &DecisionRequest) -> Value {
        json!({
            "model": self.config.model,
            "messages": [
                {
                    "role": "system",
                    "content": format!("You answer {} requests with one JSON object.", request.role),
                },
                { "role": "user", "content": self.config.templates.render(request) },
            ],
        })
    }

    fn attempt(&self, url: &str, body: &Value, role: Role) -> Result<DecisionResponse, Failure> {
        let mut req = self.agent.post(url);
        if let Ok(token) = std::env::var(&self.config.token_env) {
            let value = if self.config.auth_header.eq_ignore_ascii_case("authorization") {
                format!("Bearer {token}")
            } else {
                token
            };
            req = req.set(&self.config.auth_header, &value);
        }
        let reply = match req.send_json(body.clone()) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, _)) if code >= 500 || code == 429 => {
                return Err(Failure::Retryable(BackendError::BackendUnavailable(format!("HTTP {code}"))))
            }
            Err(ureq::Error::Status(code, _)) => {
                return Err(Failure::Fatal(BackendError::BackendUnavailable(format!("HTTP {code}"))))
            }
            Err(ureq::Error::Transport(t)) if is_timeout(&t) => {
                return Err(Failure::Retryable(BackendError::Timeout))
            }
            Err(ureq::Error::Transport(t)) => {
                return Err(Failure::Retryable(BackendError::BackendUnavailable(t.to_string())))
            }
        };
        let text = reply.into_string().map_err(|e| {
            if e.kind() == std::io::ErrorKind::TimedOut || e.kind() == std::io::ErrorKind::WouldBlock {
                Failure::Retryable(BackendError::Timeout)
            } else {
                Failure::Retryable(BackendError::BackendUnavailable(e.to_string()))
            }
        })?;
        let envelope: Value = serde_json::from_str(&text).map_err(|e| {
            Failure::Fatal(BackendError::SchemaViolation(format!("reply is not JSON: {e}")))
        })?;
        let content = envelope
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| {
                Failure::Fatal(BackendError::SchemaViolation("missing choices[0].message.content".into()))
            })?;
        let object = extract_json_object(content).ok_or_else(|| {
            Failure::Fatal(BackendError::SchemaViolation("no JSON object in reply content".into()))
        })?;
        DecisionResponse::from_json(role, &object).map_err(Failure::Fatal)
    }
}

impl DecisionBackend for RemoteClient {
    fn decide(&mut self, request: &DecisionRequest) -> Result<DecisionResponse, BackendError> {
        request.check()?;
        let url = format!(
            "{}{}",
            self.config.base_url.trim_end_matches('/'),
            self.config.endpoint_path
        );
        let body = self.request_body(request);
        let attempts = self.config.max_attempts.max(1);
        let mut last = BackendError::BackendUnavailable("no attempt made".into());
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.config.delay(attempt - 1));
            }
            match self.attempt(&url, &body, request.role) {
                Ok(r) => return Ok(r),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(e)) => {
                    tracing::debug!(attempt, error = %e, "decision request failed");
                    last = e;
                }
            }
        }
        Err(match last {
            BackendError::Timeout => BackendError::Timeout,
            other => BackendError::BackendUnavailable(format!("retry budget exhausted: {other}")),
        })
    }
}
