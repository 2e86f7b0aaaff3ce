//! Model I/O: prompt rendering, pluggable adapters, answer parsing, and a
//! content-addressed response cache.

mod adapters;
mod cache;
mod parse;
mod prompt;

pub use adapters::{
    complete_with_retries, AdapterKind, CountingAdapter, HttpChatAdapter, HttpTransport,
    MockOracle, MockPosition, MockRandom, MockTextPrior, ModelAdapter, ModelError, ModelSpec,
    RetryPolicy, Transport, TransportResponse,
};
pub use cache::{cache_key, now_unix_ms, CacheRecord, ResponseCache};
pub use parse::{AnswerParser, ParsedAnswer};
pub use prompt::{render_prompt, Prompt};

use serde::{Deserialize, Serialize};

use crate::perturb::{Condition, PerturbedInstance, PromptMode};
use crate::GENERATOR_VERSION;

/// One model response to one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAnswer {
    pub item_id: String,
    pub condition: Condition,
    pub model_id: String,
    pub raw_text: String,
    pub parsed: ParsedAnswer,
    pub correct: bool,
    pub from_cache: bool,
    pub latency_ms: u64,
}

/// What to do when a query still fails after retries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailurePolicy {
    /// Abort the run; the cache keeps everything completed so far.
    Abort,
    /// Record the failure as an UNPARSEABLE answer and continue. Failure
    /// records are never cached, so a resume retries them.
    RecordFailures,
}

/// Answer one instance, consulting the cache first.
///
/// The cache key digests (model_id, generator_version, item_id, canonical
/// condition encoding, prompt mode, prompt bytes). A hit returns with
/// `from_cache = true` and never touches the adapter; a miss completes
/// with retries, parses, scores against `answer_label_after`, and persists
/// the record before returning.
pub fn query(
    spec: &ModelSpec,
    adapter: &dyn ModelAdapter,
    instance: &PerturbedInstance,
    mode: PromptMode,
    cache: &ResponseCache,
    parser: &AnswerParser,
    failure_policy: FailurePolicy,
) -> Result<ModelAnswer, ModelError> {
    let prompt = render_prompt(instance, mode);
    let key = cache_key(
        &spec.model_id,
        &instance.generator_version,
        &instance.item_id,
        &instance.condition,
        mode,
        prompt.text.as_bytes(),
    );

    if let Some(record) = cache.get(&spec.model_id, &key)? {
        return Ok(ModelAnswer {
            item_id: instance.item_id.clone(),
            condition: instance.condition.clone(),
            model_id: spec.model_id.clone(),
            raw_text: record.raw_text,
            parsed: record.parsed,
            correct: record.correct,
            from_cache: true,
            latency_ms: record.latency_ms,
        });
    }

    let started = std::time::Instant::now();
    let raw_text = match complete_with_retries(adapter, &spec.retry, &prompt, instance) {
        Ok(text) => text,
        Err(err) => match failure_policy {
            FailurePolicy::Abort => return Err(err),
            FailurePolicy::RecordFailures => {
                return Ok(ModelAnswer {
                    item_id: instance.item_id.clone(),
                    condition: instance.condition.clone(),
                    model_id: spec.model_id.clone(),
                    raw_text: format!("[transport-failure] {err}"),
                    parsed: ParsedAnswer::Unparseable,
                    correct: false,
                    from_cache: false,
                    latency_ms: started.elapsed().as_millis() as u64,
                })
            }
        },
    };
    let latency_ms = started.elapsed().as_millis() as u64;

    let parsed = parser.parse(&raw_text, instance, mode);
    let correct = parsed.chosen_label() == Some(instance.answer_label_after);

    let mut hasher = <sha2::Sha256 as sha2::Digest>::new();
    sha2::Digest::update(&mut hasher, prompt.text.as_bytes());
    let prompt_sha256 = sha2::Digest::finalize(hasher)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();

    let record = CacheRecord {
        model_id: spec.model_id.clone(),
        item_id: instance.item_id.clone(),
        condition: instance.condition.clone(),
        prompt_mode: mode,
        generator_version: GENERATOR_VERSION.to_string(),
        prompt_sha256,
        prompt_text: prompt.text,
        raw_text: raw_text.clone(),
        parsed,
        correct,
        latency_ms,
        created_unix_ms: now_unix_ms(),
    };
    cache.put(&key, &record)?;

    Ok(ModelAnswer {
        item_id: instance.item_id.clone(),
        condition: instance.condition.clone(),
        model_id: spec.model_id.clone(),
        raw_text,
        parsed,
        correct,
        from_cache: false,
        latency_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::test_support::synthetic_item;
    use crate::perturb::original;
    use tempfile::tempdir;

    #[test]
    fn oracle_query_is_correct_and_cached() {
        let dir = tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let parser = AnswerParser::default();
        let spec = ModelSpec::mock("oracle", AdapterKind::MockOracle);
        let adapter = CountingAdapter::new(MockOracle);

        let item = synthetic_item(2); // answer C
        let inst = original(&item, PromptMode::Direct);

        let first = query(
            &spec,
            &adapter,
            &inst,
            PromptMode::Direct,
            &cache,
            &parser,
            FailurePolicy::Abort,
        )
        .unwrap();
        assert!(first.correct);
        assert!(!first.from_cache);
        assert_eq!(first.parsed.chosen_label(), Some(inst.answer_label_after));

        let second = query(
            &spec,
            &adapter,
            &inst,
            PromptMode::Direct,
            &cache,
            &parser,
            FailurePolicy::Abort,
        )
        .unwrap();
        assert!(second.from_cache);
        assert_eq!(second.raw_text, first.raw_text);
        assert_eq!(adapter.calls(), 1);
    }

    #[test]
    fn position_mock_answers_first_listed_option() {
        let dir = tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let parser = AnswerParser::default();
        let spec = ModelSpec::mock("pos", AdapterKind::MockPosition);

        let item = synthetic_item(2);
        let inst = original(&item, PromptMode::Direct);
        let answer = query(
            &spec,
            &MockPosition,
            &inst,
            PromptMode::Direct,
            &cache,
            &parser,
            FailurePolicy::Abort,
        )
        .unwrap();
        assert_eq!(answer.parsed.chosen_label().map(|l| l.as_char()), Some('A'));
        assert!(!answer.correct); // answer is C
    }

    struct AlwaysFails;

    impl ModelAdapter for AlwaysFails {
        fn complete(
            &self,
            _prompt: &Prompt,
            _instance: &PerturbedInstance,
        ) -> Result<String, ModelError> {
            Err(ModelError::Transport {
                message: "connection reset".to_string(),
                retryable: false,
            })
        }
    }

    #[test]
    fn failure_policy_controls_outcome() {
        let dir = tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let parser = AnswerParser::default();
        let spec = ModelSpec::mock("bad", AdapterKind::MockOracle);
        let item = synthetic_item(0);
        let inst = original(&item, PromptMode::Direct);

        let err = query(
            &spec,
            &AlwaysFails,
            &inst,
            PromptMode::Direct,
            &cache,
            &parser,
            FailurePolicy::Abort,
        );
        assert!(err.is_err());

        let recorded = query(
            &spec,
            &AlwaysFails,
            &inst,
            PromptMode::Direct,
            &cache,
            &parser,
            FailurePolicy::RecordFailures,
        )
        .unwrap();
        assert_eq!(recorded.parsed, ParsedAnswer::Unparseable);
        assert!(recorded.raw_text.starts_with("[transport-failure]"));

        // Failures are not cached; a later healthy query goes to the adapter.
        let healthy = query(
            &spec,
            &MockOracle,
            &inst,
            PromptMode::Direct,
            &cache,
            &parser,
            FailurePolicy::Abort,
        )
        .unwrap();
        assert!(!healthy.from_cache);
        assert!(healthy.correct);
    }
}
