//! Model adapters: one generic HTTP chat adapter plus deterministic mocks
//! standing in for the shortcut families the stress tests diagnose
//! (position bias, memorization, chance-level guessing).

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::prompt::Prompt;
use crate::perturb::PerturbedInstance;
use crate::seed::rng_for;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("transport failure: {message}")]
    Transport { message: String, retryable: bool },
    #[error("HTTP {status}: {body}")]
    HttpStatus {
        status: u16,
        body: String,
        retryable: bool,
    },
    #[error("credential environment variable {0} is not set")]
    MissingCredential(String),
    #[error("malformed model response: {0}")]
    InvalidResponse(String),
    #[error("model spec {model_id}: {message}")]
    BadSpec { model_id: String, message: String },
    #[error("cache io error at {path}: {source}")]
    CacheIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt cache record at {path}: {message}")]
    CacheCorrupt { path: PathBuf, message: String },
}

impl ModelError {
    pub fn retryable(&self) -> bool {
        match self {
            ModelError::Transport { retryable, .. } => *retryable,
            ModelError::HttpStatus { retryable, .. } => *retryable,
            _ => false,
        }
    }
}

/// Which backend answers queries for a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterKind {
    #[serde(rename = "HTTP_CHAT")]
    HttpChat,
    #[serde(rename = "MOCK_ORACLE")]
    MockOracle,
    #[serde(rename = "MOCK_POSITION")]
    MockPosition,
    #[serde(rename = "MOCK_TEXT_PRIOR")]
    MockTextPrior,
    #[serde(rename = "MOCK_RANDOM")]
    MockRandom,
}

/// Retry and timeout limits for one model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetryPolicy {
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_backoff_initial_ms")]
    pub backoff_initial_ms: u64,
    #[serde(default = "default_backoff_max_ms")]
    pub backoff_max_ms: u64,
}

fn default_max_retries() -> u32 {
    3
}
fn default_timeout_ms() -> u64 {
    120_000
}
fn default_backoff_initial_ms() -> u64 {
    500
}
fn default_backoff_max_ms() -> u64 {
    15_000
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: default_max_retries(),
            timeout_ms: default_timeout_ms(),
            backoff_initial_ms: default_backoff_initial_ms(),
            backoff_max_ms: default_backoff_max_ms(),
        }
    }
}

fn default_max_in_flight() -> usize {
    4
}

/// Configuration for one model under test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_id: String,
    pub adapter: AdapterKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env_var: Option<String>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Extra fields merged into the HTTP request body (temperature,
    /// max_tokens, vendor extensions...). Recorded in the run manifest.
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub request_overrides: serde_json::Map<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_prompt: Option<String>,
}

impl ModelSpec {
    pub fn mock(model_id: &str, adapter: AdapterKind) -> Self {
        ModelSpec {
            model_id: model_id.to_string(),
            adapter,
            endpoint: None,
            auth_env_var: None,
            max_in_flight: default_max_in_flight(),
            retry: RetryPolicy::default(),
            request_overrides: serde_json::Map::new(),
            system_prompt: None,
        }
    }

    /// Endpoint and credential are required exactly when the adapter is
    /// HTTP_CHAT.
    pub fn validate(&self) -> Result<(), ModelError> {
        let is_http = self.adapter == AdapterKind::HttpChat;
        let bad = |message: &str| ModelError::BadSpec {
            model_id: self.model_id.clone(),
            message: message.to_string(),
        };
        match (
            is_http,
            self.endpoint.is_some(),
            self.auth_env_var.is_some(),
        ) {
            (true, true, true) => Ok(()),
            (true, _, _) => Err(bad("HTTP_CHAT requires endpoint and auth_env_var")),
            (false, false, false) => Ok(()),
            (false, _, _) => Err(bad("endpoint/auth_env_var only apply to HTTP_CHAT")),
        }
    }
}

/// A backend that turns a rendered prompt into raw response text.
pub trait ModelAdapter: Send + Sync {
    fn complete(&self, prompt: &Prompt, instance: &PerturbedInstance)
        -> Result<String, ModelError>;
}

/// Always answers the instance's target option.
pub struct MockOracle;

impl ModelAdapter for MockOracle {
    fn complete(
        &self,
        _prompt: &Prompt,
        instance: &PerturbedInstance,
    ) -> Result<String, ModelError> {
        Ok(format!(
            "{}. {}",
            instance.answer_label_after,
            instance.target_text()
        ))
    }
}

/// Always answers the first-listed option, whatever it says.
pub struct MockPosition;

impl ModelAdapter for MockPosition {
    fn complete(
        &self,
        _prompt: &Prompt,
        instance: &PerturbedInstance,
    ) -> Result<String, ModelError> {
        let first = &instance.options_after[0];
        Ok(format!("{}. {}", first.label, first.text))
    }
}

/// Answers from a fixed item -> option-text memory, ignoring images and
/// option order; falls back to a seeded-random choice when the memorized
/// text is absent from the presented options.
///
/// The fallback seed ignores modality, so an item produces the same answer
/// with and without its image (the memorization shortcut is image-blind by
/// construction).
pub struct MockTextPrior {
    memory: BTreeMap<String, String>,
    seed: u64,
}

impl MockTextPrior {
    pub fn new(memory: BTreeMap<String, String>, seed: u64) -> Self {
        MockTextPrior { memory, seed }
    }
}

impl ModelAdapter for MockTextPrior {
    fn complete(
        &self,
        _prompt: &Prompt,
        instance: &PerturbedInstance,
    ) -> Result<String, ModelError> {
        if let Some(text) = self.memory.get(&instance.item_id) {
            if let Some(option) = instance.options_after.iter().find(|o| &o.text == text) {
                return Ok(format!("{}. {}", option.label, option.text));
            }
        }
        let mut parts: Vec<&str> = vec!["textprior", instance.item_id.as_str()];
        parts.extend(instance.options_after.iter().map(|o| o.text.as_str()));
        let mut rng = rng_for(self.seed, &parts);
        let pick = rng.gen_range(0..instance.options_after.len());
        let option = &instance.options_after[pick];
        Ok(format!("{}. {}", option.label, option.text))
    }
}

/// Uniform random choice over the presented options, deterministic per
/// (seed, instance).
pub struct MockRandom {
    seed: u64,
}

impl MockRandom {
    pub fn new(seed: u64) -> Self {
        MockRandom { seed }
    }
}

impl ModelAdapter for MockRandom {
    fn complete(
        &self,
        _prompt: &Prompt,
        instance: &PerturbedInstance,
    ) -> Result<String, ModelError> {
        let canonical = instance.condition.canonical();
        let mut rng = rng_for(self.seed, &["mockrandom", &instance.item_id, &canonical]);
        let pick = rng.gen_range(0..instance.options_after.len());
        let option = &instance.options_after[pick];
        Ok(format!("{}. {}", option.label, option.text))
    }
}

/// Wraps an adapter and counts how many completions actually reach it.
/// Cache hits never do, which is what the resume tests assert.
pub struct CountingAdapter<A> {
    inner: A,
    calls: AtomicU64,
}

impl<A> CountingAdapter<A> {
    pub fn new(inner: A) -> Self {
        CountingAdapter {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<A: ModelAdapter> ModelAdapter for CountingAdapter<A> {
    fn complete(
        &self,
        prompt: &Prompt,
        instance: &PerturbedInstance,
    ) -> Result<String, ModelError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(prompt, instance)
    }
}

impl<A: ModelAdapter + ?Sized> ModelAdapter for &A {
    fn complete(
        &self,
        prompt: &Prompt,
        instance: &PerturbedInstance,
    ) -> Result<String, ModelError> {
        (**self).complete(prompt, instance)
    }
}

impl<A: ModelAdapter + ?Sized> ModelAdapter for Box<A> {
    fn complete(
        &self,
        prompt: &Prompt,
        instance: &PerturbedInstance,
    ) -> Result<String, ModelError> {
        (**self).complete(prompt, instance)
    }
}

impl<A: ModelAdapter + ?Sized> ModelAdapter for std::sync::Arc<A> {
    fn complete(
        &self,
        prompt: &Prompt,
        instance: &PerturbedInstance,
    ) -> Result<String, ModelError> {
        (**self).complete(prompt, instance)
    }
}

/// Raw HTTP response as seen by the chat adapter.
#[derive(Debug, Clone)]
pub struct TransportResponse {
    pub status: u16,
    pub body: String,
}

/// Thin POST-JSON transport, separated from the adapter so tests can count
/// or fail requests without a network.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer_token: &str,
        body: &Value,
        timeout: Duration,
    ) -> Result<TransportResponse, ModelError>;
}

/// Production transport backed by a blocking reqwest client.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new() -> Self {
        HttpTransport {
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl Transport for HttpTransport {
    fn post_json(
        &self,
        url: &str,
        bearer_token: &str,
        body: &Value,
        timeout: Duration,
    ) -> Result<TransportResponse, ModelError> {
        let response = self
            .client
            .post(url)
            .bearer_auth(bearer_token)
            .json(body)
            .timeout(timeout)
            .send()
            .map_err(|e| ModelError::Transport {
                message: e.to_string(),
                retryable: true,
            })?;
        let status = response.status().as_u16();
        let body = response.text().map_err(|e| ModelError::Transport {
            message: e.to_string(),
            retryable: true,
        })?;
        Ok(TransportResponse { status, body })
    }
}

fn image_mime(path: &str) -> &'static str {
    let ext = path.rsplit('.').next().unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "jpg" | "jpeg" => "image/jpeg",
        "gif" => "image/gif",
        "webp" => "image/webp",
        _ => "image/png",
    }
}

/// Generic chat-completions adapter: one user message carrying the prompt
/// text and base64 image parts. Vendor quirks go through
/// `request_overrides` / `system_prompt` on the model spec.
pub struct HttpChatAdapter {
    spec: ModelSpec,
    endpoint: String,
    token: String,
    image_root: PathBuf,
    transport: Box<dyn Transport>,
}

impl HttpChatAdapter {
    pub fn new(
        spec: &ModelSpec,
        image_root: impl Into<PathBuf>,
        transport: Box<dyn Transport>,
    ) -> Result<Self, ModelError> {
        spec.validate()?;
        let endpoint = spec.endpoint.clone().ok_or_else(|| ModelError::BadSpec {
            model_id: spec.model_id.clone(),
            message: "missing endpoint".to_string(),
        })?;
        let env_var = spec
            .auth_env_var
            .clone()
            .ok_or_else(|| ModelError::BadSpec {
                model_id: spec.model_id.clone(),
                message: "missing auth_env_var".to_string(),
            })?;
        let token =
            std::env::var(&env_var).map_err(|_| ModelError::MissingCredential(env_var.clone()))?;
        Ok(HttpChatAdapter {
            spec: spec.clone(),
            endpoint,
            token,
            image_root: image_root.into(),
            transport,
        })
    }

    fn build_body(&self, prompt: &Prompt) -> Result<Value, ModelError> {
        let mut content = vec![json!({ "type": "text", "text": prompt.text })];
        for image in &prompt.images {
            let path = self.image_root.join(image);
            let bytes = std::fs::read(&path).map_err(|e| ModelError::Transport {
                message: format!("cannot read image {}: {e}", path.display()),
                retryable: false,
            })?;
            let url = format!("data:{};base64,{}", image_mime(image), BASE64.encode(bytes));
            content.push(json!({ "type": "image_url", "image_url": { "url": url } }));
        }
        let mut messages = Vec::new();
        if let Some(system) = &self.spec.system_prompt {
            messages.push(json!({ "role": "system", "content": system }));
        }
        messages.push(json!({ "role": "user", "content": content }));

        let mut body = json!({ "model": self.spec.model_id, "messages": messages });
        let map = body.as_object_mut().expect("body is an object");
        for (key, value) in &self.spec.request_overrides {
            map.insert(key.clone(), value.clone());
        }
        Ok(body)
    }

    fn extract_text(body: &str) -> Result<String, ModelError> {
        let value: Value = serde_json::from_str(body)
            .map_err(|e| ModelError::InvalidResponse(format!("not JSON: {e}")))?;
        let content = value.pointer("/choices/0/message/content").ok_or_else(|| {
            ModelError::InvalidResponse("missing choices[0].message.content".into())
        })?;
        match content {
            Value::String(s) => Ok(s.clone()),
            Value::Array(parts) => {
                let mut out = String::new();
                for part in parts {
                    if let Some(text) = part.get("text").and_then(Value::as_str) {
                        out.push_str(text);
                    }
                }
                Ok(out)
            }
            other => Err(ModelError::InvalidResponse(format!(
                "unexpected content shape: {other}"
            ))),
        }
    }
}

impl ModelAdapter for HttpChatAdapter {
    fn complete(
        &self,
        prompt: &Prompt,
        _instance: &PerturbedInstance,
    ) -> Result<String, ModelError> {
        let body = self.build_body(prompt)?;
        let timeout = Duration::from_millis(self.spec.retry.timeout_ms);
        let response = self
            .transport
            .post_json(&self.endpoint, &self.token, &body, timeout)?;
        match response.status {
            200..=299 => Self::extract_text(&response.body),
            status @ (408 | 429 | 500..=599) => Err(ModelError::HttpStatus {
                status,
                body: response.body,
                retryable: true,
            }),
            status => Err(ModelError::HttpStatus {
                status,
                body: response.body,
                retryable: false,
            }),
        }
    }
}

/// Retry a completion with exponential backoff and jitter.
pub fn complete_with_retries(
    adapter: &dyn ModelAdapter,
    policy: &RetryPolicy,
    prompt: &Prompt,
    instance: &PerturbedInstance,
) -> Result<String, ModelError> {
    let mut attempt = 0u32;
    loop {
        match adapter.complete(prompt, instance) {
            Ok(text) => return Ok(text),
            Err(err) if err.retryable() && attempt < policy.max_retries => {
                let exp = policy
                    .backoff_initial_ms
                    .saturating_mul(1u64 << attempt.min(20))
                    .min(policy.backoff_max_ms);
                let jittered = rand::thread_rng().gen_range(exp / 2..=exp);
                std::thread::sleep(Duration::from_millis(jittered));
                attempt += 1;
            }
            Err(err) => return Err(err),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::test_support::{synthetic_corpus, synthetic_item};
    use crate::corpus::Item;
    use crate::perturb::{original, reorder_options, replace_distractors, PromptMode};

    fn prompt_for(instance: &PerturbedInstance) -> Prompt {
        super::super::prompt::render_prompt(instance, PromptMode::Direct)
    }

    #[test]
    fn oracle_tracks_remapped_answer() {
        let item = synthetic_item(1); // answer B
        let reordered = reorder_options(&item, 3, 4, PromptMode::Direct).unwrap();
        for inst in &reordered {
            let raw = MockOracle.complete(&prompt_for(inst), inst).unwrap();
            assert_eq!(
                raw,
                format!("{}. {}", inst.answer_label_after, item.answer_text())
            );
        }
    }

    #[test]
    fn position_mock_answers_first_option() {
        let item = synthetic_item(2);
        let inst = original(&item, PromptMode::Direct);
        let raw = MockPosition.complete(&prompt_for(&inst), &inst).unwrap();
        assert!(raw.starts_with("A. "));
    }

    #[test]
    fn text_prior_is_order_invariant_and_modality_blind() {
        let item = synthetic_item(3);
        let memory: BTreeMap<String, String> =
            [(item.id.clone(), item.answer_text().to_string())].into();
        let prior = MockTextPrior::new(memory, 9);

        let base = original(&item, PromptMode::Direct);
        let base_raw = prior.complete(&prompt_for(&base), &base).unwrap();
        let text_only = base.to_text_only();
        let text_raw = prior.complete(&prompt_for(&text_only), &text_only).unwrap();
        assert_eq!(base_raw, text_raw);

        for inst in reorder_options(&item, 5, 6, PromptMode::Direct).unwrap() {
            let raw = prior.complete(&prompt_for(&inst), &inst).unwrap();
            assert!(raw.ends_with(item.answer_text()));
        }
    }

    #[test]
    fn text_prior_falls_back_when_memorized_text_removed() {
        let corpus = synthetic_corpus(8);
        let pool: Vec<&Item> = corpus.items().iter().collect();
        let item = &corpus.items()[0];
        // Memorize a distractor, then replace all four distractors.
        let distractor = item.options[(item.answer_label.index() + 1) % 5]
            .text
            .clone();
        let prior = MockTextPrior::new([(item.id.clone(), distractor.clone())].into(), 2);
        let inst = replace_distractors(item, 4, &pool, 77, false, PromptMode::Direct).unwrap();
        assert!(inst.options_after.iter().all(|o| o.text != distractor));
        let raw = prior.complete(&prompt_for(&inst), &inst).unwrap();
        // Fallback picked one of the presented options, deterministically.
        assert!(inst
            .options_after
            .iter()
            .any(|o| raw == format!("{}. {}", o.label, o.text)));
        let again = prior.complete(&prompt_for(&inst), &inst).unwrap();
        assert_eq!(raw, again);
    }

    #[test]
    fn random_mock_is_deterministic_per_instance() {
        let item = synthetic_item(4);
        let inst = original(&item, PromptMode::Direct);
        let a = MockRandom::new(11)
            .complete(&prompt_for(&inst), &inst)
            .unwrap();
        let b = MockRandom::new(11)
            .complete(&prompt_for(&inst), &inst)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spec_validation_enforces_http_fields() {
        let mut spec = ModelSpec::mock("m", AdapterKind::HttpChat);
        assert!(spec.validate().is_err());
        spec.endpoint = Some("https://example.test/v1/chat/completions".to_string());
        spec.auth_env_var = Some("EXAMPLE_KEY".to_string());
        assert!(spec.validate().is_ok());

        let mut mock = ModelSpec::mock("m2", AdapterKind::MockOracle);
        assert!(mock.validate().is_ok());
        mock.endpoint = Some("https://example.test".to_string());
        assert!(mock.validate().is_err());
    }

    struct FlakyTransport {
        failures: AtomicU64,
    }

    impl Transport for FlakyTransport {
        fn post_json(
            &self,
            _url: &str,
            _token: &str,
            _body: &Value,
            _timeout: Duration,
        ) -> Result<TransportResponse, ModelError> {
            if self
                .failures
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                .is_ok()
            {
                return Ok(TransportResponse {
                    status: 503,
                    body: "overloaded".to_string(),
                });
            }
            Ok(TransportResponse {
                status: 200,
                body: json!({
                    "choices": [{ "message": { "content": "B. finding 0-1" } }]
                })
                .to_string(),
            })
        }
    }

    #[test]
    fn http_adapter_retries_retryable_statuses() {
        std::env::set_var("STRESSPROBE_TEST_KEY", "k");
        let mut spec = ModelSpec::mock("gpt-test", AdapterKind::HttpChat);
        spec.endpoint = Some("http://localhost/v1".to_string());
        spec.auth_env_var = Some("STRESSPROBE_TEST_KEY".to_string());
        spec.retry = RetryPolicy {
            max_retries: 3,
            timeout_ms: 1000,
            backoff_initial_ms: 1,
            backoff_max_ms: 2,
        };
        let adapter = HttpChatAdapter::new(
            &spec,
            ".",
            Box::new(FlakyTransport {
                failures: AtomicU64::new(2),
            }),
        )
        .unwrap();

        let item = synthetic_item(0);
        let inst = original(&item, PromptMode::Direct);
        let raw = complete_with_retries(&adapter, &spec.retry, &prompt_for(&inst), &inst).unwrap();
        assert_eq!(raw, "B. finding 0-1");
    }

    #[test]
    fn http_adapter_gives_up_after_max_retries() {
        std::env::set_var("STRESSPROBE_TEST_KEY", "k");
        let mut spec = ModelSpec::mock("gpt-test", AdapterKind::HttpChat);
        spec.endpoint = Some("http://localhost/v1".to_string());
        spec.auth_env_var = Some("STRESSPROBE_TEST_KEY".to_string());
        spec.retry = RetryPolicy {
            max_retries: 2,
            timeout_ms: 1000,
            backoff_initial_ms: 1,
            backoff_max_ms: 2,
        };
        let adapter = HttpChatAdapter::new(
            &spec,
            ".",
            Box::new(FlakyTransport {
                failures: AtomicU64::new(100),
            }),
        )
        .unwrap();
        let item = synthetic_item(0);
        let inst = original(&item, PromptMode::Direct);
        let err =
            complete_with_retries(&adapter, &spec.retry, &prompt_for(&inst), &inst).unwrap_err();
        assert!(matches!(err, ModelError::HttpStatus { status: 503, .. }));
    }

    #[test]
    fn missing_credential_is_reported() {
        let mut spec = ModelSpec::mock("gpt-test", AdapterKind::HttpChat);
        spec.endpoint = Some("http://localhost/v1".to_string());
        spec.auth_env_var = Some("STRESSPROBE_UNSET_KEY_FOR_TEST".to_string());
        std::env::remove_var("STRESSPROBE_UNSET_KEY_FOR_TEST");
        let result = HttpChatAdapter::new(
            &spec,
            ".",
            Box::new(FlakyTransport {
                failures: AtomicU64::new(0),
            }),
        );
        match result {
            Err(ModelError::MissingCredential(var)) => assert!(var.contains("UNSET")),
            Err(other) => panic!("unexpected error: {other}"),
            Ok(_) => panic!("expected missing-credential error"),
        }
    }

    #[test]
    fn extract_text_handles_string_and_parts() {
        let s = json!({"choices":[{"message":{"content":"plain"}}]}).to_string();
        assert_eq!(HttpChatAdapter::extract_text(&s).unwrap(), "plain");
        let parts = json!({"choices":[{"message":{"content":[
            {"type":"text","text":"a"},{"type":"text","text":"b"}
        ]}}]})
        .to_string();
        assert_eq!(HttpChatAdapter::extract_text(&parts).unwrap(), "ab");
        assert!(HttpChatAdapter::extract_text("nope").is_err());
    }
}
