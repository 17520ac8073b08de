use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{cache_key, Backend, BackendSpec, CallError, Completion, GenerationRequest};
use crate::prompt::extract_field;

/// Verification rule: when the question contains `question_contains`, the
/// answer is "yes" iff the caption contains one of `keywords`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordRule {
    pub question_contains: String,
    pub keywords: Vec<String>,
}

/// Ratings rule: captions containing `caption_contains` get `ratings`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRule {
    pub caption_contains: String,
    pub ratings: [u32; 4],
}

/// Deterministic offline backend.
///
/// Lookup order: injected failures, canned reply by digest, verification
/// rules (prompts with a `QUESTION:` line), rating rules (prompts asking for
/// `RATINGS:`), canned reply by subject, default reply.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub replies: BTreeMap<String, String>,
    pub replies_by_subject: BTreeMap<String, String>,
    pub default_reply: Option<String>,
    /// Subjects that fail with a non-retryable 400.
    pub fail_subjects: BTreeSet<String>,
    /// Subjects that fail with a retryable error this many times first.
    pub transient_failures: BTreeMap<String, u32>,
    pub verification: Vec<KeywordRule>,
    /// Answer when no verification rule matches the question.
    pub verification_default: Option<String>,
    pub ratings: Vec<RatingRule>,
    pub default_ratings: Option<[u32; 4]>,
    /// Simulated latency per call.
    pub delay_ms: u64,
}

pub struct MockBackend {
    config: MockConfig,
    failures_left: Mutex<BTreeMap<String, u32>>,
}

impl MockBackend {
    pub fn new(config: MockConfig) -> Self {
        Self { failures_left: Mutex::new(config.transient_failures.clone()), config }
    }

    fn verify(&self, caption: &str, question: &str) -> String {
        let q = question.to_lowercase();
        let c = caption.to_lowercase();
        match self.config.verification.iter().find(|r| q.contains(&r.question_contains.to_lowercase())) {
            Some(rule) if rule.keywords.iter().any(|k| c.contains(&k.to_lowercase())) => "yes".into(),
            Some(_) => "no".into(),
            None => self.config.verification_default.clone().unwrap_or_else(|| "no".into()),
        }
    }

    fn rate(&self, caption: &str) -> Option<String> {
        let c = caption.to_lowercase();
        self.config
            .ratings
            .iter()
            .find(|r| c.contains(&r.caption_contains.to_lowercase()))
            .map(|r| r.ratings)
            .or(self.config.default_ratings)
            .map(|[a, b, c, d]| format!("RATINGS: {a} {b} {c} {d}"))
    }

    fn reply(&self, req: &GenerationRequest, spec: &BackendSpec) -> Option<String> {
        let c = &self.config;
        if let Some(text) = c.replies.get(&cache_key(req, spec)) {
            return Some(text.clone());
        }
        let prompt = &req.prompt.text;
        if let (Some(caption), Some(question)) = (extract_field(prompt, "CAPTION"), extract_field(prompt, "QUESTION")) {
            return Some(self.verify(&caption, &question));
        }
        if prompt.contains("RATINGS:") {
            if let Some(r) = extract_field(prompt, "CAPTION").and_then(|cap| self.rate(&cap)) {
                return Some(r);
            }
        }
        c.replies_by_subject.get(&req.subject).or(c.default_reply.as_ref()).cloned()
    }
}

impl Backend for MockBackend {
    fn complete(&self, req: &GenerationRequest, spec: &BackendSpec) -> Result<Completion, CallError> {
        if self.config.delay_ms > 0 {
            std::thread::sleep(std::time::Duration::from_millis(self.config.delay_ms));
        }
        if self.config.fail_subjects.contains(&req.subject) {
            return Err(CallError::Fatal { status: 400, message: format!("injected failure for {}", req.subject) });
        }
        {
            let mut left = self.failures_left.lock().expect("mock lock");
            if let Some(n) = left.get_mut(&req.subject).filter(|n| **n > 0) {
                *n -= 1;
                return Err(CallError::Retryable("injected transient failure".into()));
            }
        }
        self.reply(req, spec)
            .map(|text| Completion { text, metadata: BTreeMap::new() })
            .ok_or_else(|| CallError::Fatal { status: 404, message: format!("no canned reply for {}", req.subject) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, GatewayError, RetryPolicy};
    use crate::prompt::{PromptLibrary, RegionContext};
    use crate::qa::{ExpectedAnswer, Polarity, QAItem};

    fn item(q: &str) -> QAItem {
        QAItem {
            qa_id: "q".into(),
            region_id: "r".into(),
            polarity: Polarity::Positive,
            question: q.into(),
            expected_answer: ExpectedAnswer::Yes,
            attribute: "a".into(),
            provenance: "t".into(),
        }
    }

    fn config() -> MockConfig {
        MockConfig {
            verification: vec![KeywordRule { question_contains: "effusion".into(), keywords: vec!["effusion".into(), "fluid".into()] }],
            ratings: vec![RatingRule { caption_contains: "nodule".into(), ratings: [80, 75, 90, 70] }],
            default_ratings: Some([50, 50, 50, 50]),
            ..Default::default()
        }
    }

    #[test]
    fn keyword_judge() {
        let lib = PromptLibrary::shipped();
        let spec = BackendSpec::mock("m", config());
        let mock = MockBackend::new(config());
        let ask = |caption: &str, q: &str| {
            let p = lib.render_judge_verification_prompt(caption, &item(q)).unwrap();
            mock.complete(&GenerationRequest::judge(p, "q"), &spec).unwrap().text
        };
        assert_eq!(ask("Blunted angle with fluid.", "Is pleural effusion mentioned?"), "yes");
        assert_eq!(ask("Clear lungs.", "Is pleural effusion mentioned?"), "no");
        assert_eq!(ask("Clear lungs.", "Is there a mass?"), "no");
    }

    #[test]
    fn rating_rules() {
        let lib = PromptLibrary::shipped();
        let spec = BackendSpec::mock("m", config());
        let mock = MockBackend::new(config());
        let rate = |caption: &str| {
            let p = lib.render_llmscore_prompt(caption, &RegionContext::default()).unwrap();
            mock.complete(&GenerationRequest::judge(p, "q"), &spec).unwrap().text
        };
        assert_eq!(rate("Small nodule."), "RATINGS: 80 75 90 70");
        assert_eq!(rate("Clear."), "RATINGS: 50 50 50 50");
    }

    #[test]
    fn transient_failures_are_retried() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = MockConfig { default_reply: Some("ok".into()), transient_failures: [("s".to_string(), 2)].into(), ..Default::default() };
        let mut spec = BackendSpec::mock("m", cfg);
        spec.retry = RetryPolicy { max_attempts: 3, backoff_base_ms: 1 };
        let gw = Gateway::open(spec.clone(), dir.path()).unwrap();
        let req = GenerationRequest::judge(PromptLibrary::shipped().render_llmscore_prompt("x", &RegionContext::default()).unwrap(), "s");
        let out = gw.generate(&req).unwrap();
        assert_eq!(out.attempts, 3);

        let spec2 = BackendSpec {
            name: "m2".into(),
            mock: Some(MockConfig { transient_failures: [("s".to_string(), 5)].into(), ..Default::default() }),
            ..spec
        };
        let err = Gateway::open(spec2, dir.path()).unwrap().generate(&req).unwrap_err();
        assert!(matches!(err, GatewayError::Exhausted { ref attempts } if attempts.len() == 3), "{err}");
    }
}
