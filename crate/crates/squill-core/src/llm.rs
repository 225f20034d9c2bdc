//! Chat-completion backends: an OpenAI-compatible HTTP client with retries
//! and a deterministic scripted mock for tests.

use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompts::{PromptTask, PromptText};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport failure after {attempts} attempts: {last}")]
    Transport { attempts: u32, last: String },
    #[error("backend returned unusable response: {0}")]
    BadResponse(String),
    #[error("mock script has no entry matching prompt (task {task:?}, pair {pair_id})")]
    NoScriptMatch { task: PromptTask, pair_id: String },
    #[error("invalid script entry {index}: {message}")]
    BadScript { index: usize, message: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        // low temperature for reproducible decoding
        GenerationParams {
            temperature: 0.01,
            max_tokens: 1024,
            stop: None,
        }
    }
}

pub trait Backend: Send + Sync {
    fn complete(&self, prompt: &PromptText, params: &GenerationParams) -> Result<String, LlmError>;
}

/// Runs completions for a batch of prompts with bounded parallelism,
/// preserving input order in the output.
pub fn complete_many(
    backend: &dyn Backend,
    prompts: &[PromptText],
    params: &GenerationParams,
    parallelism: usize,
) -> Vec<Result<String, LlmError>> {
    let parallelism = parallelism.max(1);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<Mutex<Option<Result<String, LlmError>>>> =
        prompts.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..parallelism.min(prompts.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= prompts.len() {
                    break;
                }
                let result = backend.complete(&prompts[i], params);
                *results[i].lock().unwrap() = Some(result);
            });
        }
    });
    results
        .into_iter()
        .map(|cell| cell.into_inner().unwrap().expect("worker filled every slot"))
        .collect()
}

/// OpenAI-compatible chat-completions backend.
pub struct HttpBackend {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    client: reqwest::blocking::Client,
    max_attempts: u32,
    base_backoff: Duration,
}

impl HttpBackend {
    pub fn new(endpoint: &str, model: &str, api_key: Option<String>) -> Self {
        HttpBackend {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key,
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(300))
                .build()
                .expect("http client"),
            max_attempts: 3,
            base_backoff: Duration::from_millis(250),
        }
    }

    #[cfg(test)]
    fn with_fast_backoff(mut self) -> Self {
        self.base_backoff = Duration::from_millis(1);
        self
    }

    fn request_body(&self, prompt: &PromptText, params: &GenerationParams) -> serde_json::Value {
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt.text}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        if let Some(stop) = &params.stop {
            body["stop"] = json!(stop);
        }
        body
    }
}

impl Backend for HttpBackend {
    fn complete(&self, prompt: &PromptText, params: &GenerationParams) -> Result<String, LlmError> {
        let body = self.request_body(prompt, params);
        let mut last = String::new();
        for attempt in 0..self.max_attempts {
            if attempt > 0 {
                // capped exponential backoff
                let backoff = self.base_backoff * 2u32.pow(attempt - 1);
                std::thread::sleep(backoff.min(Duration::from_secs(10)));
            }
            let mut request = self.client.post(&self.endpoint).json(&body);
            if let Some(key) = &self.api_key {
                request = request.bearer_auth(key);
            }
            match request.send() {
                Ok(response) => {
                    let status = response.status();
                    if status.is_server_error() {
                        last = format!("HTTP {status}");
                        continue;
                    }
                    if !status.is_success() {
                        return Err(LlmError::BadResponse(format!("HTTP {status}")));
                    }
                    let value: serde_json::Value = response
                        .json()
                        .map_err(|e| LlmError::BadResponse(e.to_string()))?;
                    let content = value["choices"][0]["message"]["content"]
                        .as_str()
                        .ok_or_else(|| {
                            LlmError::BadResponse("missing choices[0].message.content".into())
                        })?;
                    return Ok(content.to_string());
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(LlmError::Transport {
            attempts: self.max_attempts,
            last,
        })
    }
}

/// How one script entry decides whether it answers a prompt.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptMatcher {
    /// Task tag plus pair id.
    Pair { task: PromptTask, pair_id: String },
    /// Hex SHA-256 of the full prompt text.
    PromptSha256(String),
    /// Regex over the prompt text.
    PromptRegex(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub matcher: ScriptMatcher,
    pub response: String,
    #[serde(default)]
    pub consume_once: bool,
}

struct CompiledEntry {
    entry: ScriptEntry,
    regex: Option<regex::Regex>,
    consumed: bool,
}

/// Deterministic scripted backend: first matching entry wins, in declared
/// order. Internally synchronized so consume-once bookkeeping is race-free.
pub struct MockBackend {
    entries: Mutex<Vec<CompiledEntry>>,
}

impl MockBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Result<Self, LlmError> {
        let compiled = entries
            .into_iter()
            .enumerate()
            .map(|(index, entry)| {
                let regex = match &entry.matcher {
                    ScriptMatcher::PromptRegex(pattern) => Some(
                        regex::Regex::new(pattern).map_err(|e| LlmError::BadScript {
                            index,
                            message: e.to_string(),
                        })?,
                    ),
                    _ => None,
                };
                Ok(CompiledEntry {
                    entry,
                    regex,
                    consumed: false,
                })
            })
            .collect::<Result<Vec<_>, LlmError>>()?;
        Ok(MockBackend {
            entries: Mutex::new(compiled),
        })
    }

    /// Loads a line-delimited JSON script file.
    pub fn from_script_file(path: &std::path::Path) -> Result<Self, LlmError> {
        let raw = std::fs::read_to_string(path).map_err(|e| LlmError::BadScript {
            index: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        let mut entries = Vec::new();
        for (index, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            entries.push(
                serde_json::from_str(line).map_err(|e| LlmError::BadScript {
                    index,
                    message: e.to_string(),
                })?,
            );
        }
        MockBackend::new(entries)
    }

    /// Convenience: answer every prompt of `task` for `pair_id` with `response`.
    pub fn entry(task: PromptTask, pair_id: &str, response: &str) -> ScriptEntry {
        ScriptEntry {
            matcher: ScriptMatcher::Pair {
                task,
                pair_id: pair_id.to_string(),
            },
            response: response.to_string(),
            consume_once: false,
        }
    }
}

pub fn prompt_sha256(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    format!("{:x}", hasher.finalize())
}

impl Backend for MockBackend {
    fn complete(&self, prompt: &PromptText, _params: &GenerationParams) -> Result<String, LlmError> {
        let mut entries = self.entries.lock().unwrap();
        let mut hash = None;
        for compiled in entries.iter_mut() {
            if compiled.consumed {
                continue;
            }
            let hit = match &compiled.entry.matcher {
                ScriptMatcher::Pair { task, pair_id } => {
                    *task == prompt.task && *pair_id == prompt.meta.pair_id
                }
                ScriptMatcher::PromptSha256(expected) => {
                    let hash = hash.get_or_insert_with(|| prompt_sha256(&prompt.text));
                    hash == expected
                }
                ScriptMatcher::PromptRegex(_) => compiled
                    .regex
                    .as_ref()
                    .is_some_and(|r| r.is_match(&prompt.text)),
            };
            if hit {
                if compiled.entry.consume_once {
                    compiled.consumed = true;
                }
                return Ok(compiled.entry.response.clone());
            }
        }
        Err(LlmError::NoScriptMatch {
            task: prompt.task,
            pair_id: prompt.meta.pair_id.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::PromptMeta;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn prompt(task: PromptTask, pair_id: &str) -> PromptText {
        PromptText {
            task,
            text: format!("prompt for {pair_id}"),
            meta: PromptMeta {
                pair_id: pair_id.to_string(),
                db_id: "db".into(),
            },
        }
    }

    #[test]
    fn mock_matches_task_and_pair() {
        let mock =
            MockBackend::new(vec![MockBackend::entry(PromptTask::Ts, "p7", "scripted")]).unwrap();
        let out = mock
            .complete(&prompt(PromptTask::Ts, "p7"), &GenerationParams::default())
            .unwrap();
        assert_eq!(out, "scripted");
    }

    #[test]
    fn mock_unmatched_names_the_pair() {
        let mock = MockBackend::new(vec![]).unwrap();
        let err = mock
            .complete(&prompt(PromptTask::Ts, "p7"), &GenerationParams::default())
            .unwrap_err();
        assert!(err.to_string().contains("p7"));
    }

    #[test]
    fn mock_consume_once_sequences_entries() {
        let mut first = MockBackend::entry(PromptTask::Ts, "p1", "first");
        first.consume_once = true;
        let second = MockBackend::entry(PromptTask::Ts, "p1", "second");
        let mock = MockBackend::new(vec![first, second]).unwrap();
        let p = prompt(PromptTask::Ts, "p1");
        let params = GenerationParams::default();
        assert_eq!(mock.complete(&p, &params).unwrap(), "first");
        assert_eq!(mock.complete(&p, &params).unwrap(), "second");
        assert_eq!(mock.complete(&p, &params).unwrap(), "second");
    }

    #[test]
    fn mock_sha_matcher() {
        let p = prompt(PromptTask::Sl, "p2");
        let mock = MockBackend::new(vec![ScriptEntry {
            matcher: ScriptMatcher::PromptSha256(prompt_sha256(&p.text)),
            response: "by hash".into(),
            consume_once: false,
        }])
        .unwrap();
        assert_eq!(
            mock.complete(&p, &GenerationParams::default()).unwrap(),
            "by hash"
        );
    }

    #[test]
    fn complete_many_preserves_order() {
        let entries = (0..20)
            .map(|i| MockBackend::entry(PromptTask::Ts, &format!("p{i}"), &format!("r{i}")))
            .collect();
        let mock = MockBackend::new(entries).unwrap();
        let prompts: Vec<_> = (0..20).map(|i| prompt(PromptTask::Ts, &format!("p{i}"))).collect();
        let out = complete_many(&mock, &prompts, &GenerationParams::default(), 8);
        for (i, r) in out.iter().enumerate() {
            assert_eq!(r.as_ref().unwrap(), &format!("r{i}"));
        }
    }

    /// Tiny HTTP stub: answers the scripted status codes in order.
    fn spawn_stub(responses: Vec<(u16, String)>) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = [0u8; 65536];
                // read request headers + body (single read is enough here)
                let _ = stream.read(&mut buf);
                let reason = if status == 200 { "OK" } else { "Server Error" };
                let response = format!(
                    "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });
        format!("http://{addr}/v1/chat/completions")
    }

    #[test]
    fn http_backend_retries_transient_failures() {
        let ok_body = serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": "hello"}}]
        })
        .to_string();
        let endpoint = spawn_stub(vec![
            (500, "{}".to_string()),
            (500, "{}".to_string()),
            (200, ok_body),
        ]);
        let backend = HttpBackend::new(&endpoint, "test-model", None).with_fast_backoff();
        let out = backend
            .complete(&prompt(PromptTask::Ts, "p0"), &GenerationParams::default())
            .unwrap();
        assert_eq!(out, "hello");
    }

    #[test]
    fn http_backend_gives_up_after_retries() {
        let endpoint = spawn_stub(vec![
            (500, "{}".to_string()),
            (500, "{}".to_string()),
            (500, "{}".to_string()),
        ]);
        let backend = HttpBackend::new(&endpoint, "test-model", None).with_fast_backoff();
        let err = backend
            .complete(&prompt(PromptTask::Ts, "p0"), &GenerationParams::default())
            .unwrap_err();
        assert!(matches!(err, LlmError::Transport { attempts: 3, .. }));
    }

    #[test]
    fn request_body_is_deterministic() {
        let backend = HttpBackend::new("http://localhost/v1", "m", None);
        let p = prompt(PromptTask::Ts, "p0");
        let params = GenerationParams::default();
        assert_eq!(
            backend.request_body(&p, &params).to_string(),
            backend.request_body(&p, &params).to_string()
        );
    }
}
