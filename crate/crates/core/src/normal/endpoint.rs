use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::set::{fallback_safe_response, Companion, Provenance};
use super::{NormalError, QARecord};

/// Benchmark flavor selecting the system/user prompt pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptTemplate {
    Tofu,
    HarryPotter,
    MuseNews,
}

impl PromptTemplate {
    pub fn system_prompt(&self) -> &'static str {
        match self {
            Self::Tofu => {
                "You answer questions about fictional writers who do not exist. Keep every answer safe: \
                 share no private details, even invented ones, and stay away from sensitive topics. \
                 Either say that you don't know or offer harmless, neutral invented facts. Be brief and natural."
            }
            Self::HarryPotter => {
                "You know the Harry Potter books well and answer factually, but you must never reply with \
                 anything that could infringe copyright."
            }
            Self::MuseNews => {
                "You are a news editor who writes fictional news. Rewrite the article you are given as an \
                 entirely fictional story that keeps its structure while replacing every key detail."
            }
        }
    }

    pub fn user_prompt(&self, question: &str) -> String {
        match self {
            Self::Tofu => format!(
                "The following question is about a writer who is entirely fictional. Answer safely and \
                 disclose no private information, even fictional information. You may say you don't know \
                 or give neutral, harmless details.\nQuestion: {question}"
            ),
            Self::HarryPotter => question.to_string(),
            Self::MuseNews => format!(
                "Write a fictional news story modeled on the article below. Keep its structure, narrative \
                 style, length and paragraphing. Replace all names, places, organizations, numbers and event \
                 details so that the story matches no real event. Respond in English.\nArticle:\n{question}"
            ),
        }
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tofu => "tofu",
            Self::HarryPotter => "harry-potter",
            Self::MuseNews => "muse-news",
        })
    }
}

impl FromStr for PromptTemplate {
    type Err = NormalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tofu" => Ok(Self::Tofu),
            "harry-potter" => Ok(Self::HarryPotter),
            "muse-news" => Ok(Self::MuseNews),
            other => Err(NormalError::InvalidConfig(format!(
                "unknown prompt template '{other}'"
            ))),
        }
    }
}

fn default_timeout() -> f64 {
    30.0
}
fn default_retries() -> u32 {
    2
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_credential_env() -> String {
    "ULAB_GENERATOR_API_KEY".into()
}
fn default_temperature() -> f64 {
    0.7
}
fn default_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorEndpointConfig {
    pub base_url: String,
    pub model: String,
    pub template: PromptTemplate,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// Delay before the first retry; doubled on each further attempt.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_credential_env")]
    pub credential_env: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

impl GeneratorEndpointConfig {
    pub fn new(
        base_url: impl Into<String>,
        model: impl Into<String>,
        template: PromptTemplate,
    ) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            template,
            timeout_secs: default_timeout(),
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            credential_env: default_credential_env(),
            temperature: default_temperature(),
            max_in_flight: default_in_flight(),
        }
    }

    pub fn validate(&self) -> Result<(), NormalError> {
        if !(self.timeout_secs > 0.0) || !self.timeout_secs.is_finite() {
            return Err(NormalError::InvalidConfig(format!(
                "timeout must be positive, got {}",
                self.timeout_secs
            )));
        }
        if self.max_in_flight == 0 {
            return Err(NormalError::InvalidConfig(
                "max_in_flight must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    fn request_body(&self, question: &str) -> String {
        json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": self.template.system_prompt()},
                {"role": "user", "content": self.template.user_prompt(question)},
            ],
            "temperature": self.temperature,
        })
        .to_string()
    }

    /// Reads the credential variable; fails before any request is made.
    pub fn credential(&self) -> Result<String, NormalError> {
        std::env::var(&self.credential_env)
            .map_err(|_| NormalError::MissingCredential(self.credential_env.clone()))
    }
}

/// A failed exchange worth retrying.
#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    Status(u16, String),
    Network(String),
}

impl fmt::Display for TransportError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Status(code, body) => write!(f, "HTTP {code}: {body}"),
            Self::Network(msg) => write!(f, "network error: {msg}"),
        }
    }
}

/// POSTs a JSON body and returns the response body of a 2xx reply.
pub trait Transport: Sync {
    fn post(
        &self,
        url: &str,
        api_key: &str,
        body: &str,
        timeout: Duration,
    ) -> Result<String, TransportError>;
}

/// Blocking HTTP client.
#[derive(Debug, Default)]
pub struct HttpTransport;

impl Transport for HttpTransport {
    fn post(
        &self,
        url: &str,
        api_key: &str,
        body: &str,
        timeout: Duration,
    ) -> Result<String, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut resp = agent
            .post(url)
            .header("Authorization", &format!("Bearer {api_key}"))
            .content_type("application/json")
            .send(body)
            .map_err(|e| TransportError::Network(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        if (200..300).contains(&status) {
            Ok(text)
        } else {
            Err(TransportError::Status(status, text))
        }
    }
}

/// Replays recorded response bodies in order, cycling when exhausted.
#[derive(Debug)]
pub struct FixtureTransport {
    responses: Vec<String>,
    next: Mutex<usize>,
    calls: AtomicUsize,
}

impl FixtureTransport {
    pub fn new(responses: Vec<String>) -> Self {
        Self {
            responses,
            next: Mutex::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    /// One response body per non-empty line.
    pub fn from_jsonl(text: &str) -> Self {
        Self::new(
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(str::to_string)
                .collect(),
        )
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for FixtureTransport {
    fn post(
        &self,
        _url: &str,
        _key: &str,
        _body: &str,
        _timeout: Duration,
    ) -> Result<String, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.responses.is_empty() {
            return Err(TransportError::Network("fixture has no responses".into()));
        }
        let mut next = self.next.lock().expect("fixture lock");
        let body = self.responses[*next % self.responses.len()].clone();
        *next += 1;
        Ok(body)
    }
}

/// Fails every request, for exercising the fallback path.
#[derive(Debug, Default)]
pub struct FailingTransport {
    calls: AtomicUsize,
}

impl FailingTransport {
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for FailingTransport {
    fn post(
        &self,
        _url: &str,
        _key: &str,
        _body: &str,
        _timeout: Duration,
    ) -> Result<String, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Err(TransportError::Status(503, "service unavailable".into()))
    }
}

/// A generated companion replaced by a refusal after retries ran out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Substitution {
    pub forget_id: String,
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Generated {
    pub companions: Vec<Companion>,
    pub substitutions: Vec<Substitution>,
}

fn parse_content(body: &str) -> Result<String, NormalError> {
    let malformed = || NormalError::MalformedResponse(body.to_string());
    let v: serde_json::Value = serde_json::from_str(body).map_err(|_| malformed())?;
    let content = v
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .and_then(|m| m.get("content"))
        .and_then(|c| c.as_str())
        .ok_or_else(malformed)?;
    let content = content.trim();
    if content.is_empty() {
        return Err(malformed());
    }
    Ok(content.to_string())
}

fn request_with_retries(
    cfg: &GeneratorEndpointConfig,
    transport: &dyn Transport,
    key: &str,
    body: &str,
) -> Result<String, TransportError> {
    let timeout = Duration::from_secs_f64(cfg.timeout_secs);
    let url = cfg.url();
    let mut attempt = 0;
    loop {
        match transport.post(&url, key, body, timeout) {
            Ok(text) => return Ok(text),
            Err(e) if attempt >= cfg.retries => return Err(e),
            Err(e) => {
                let delay = cfg.backoff_ms.saturating_mul(1u64 << attempt.min(16));
                log::debug!("request failed ({e}); retrying in {delay} ms");
                std::thread::sleep(Duration::from_millis(delay));
                attempt += 1;
            }
        }
    }
}

/// Issues `m` chat-completion requests for one forget record.
pub fn generate_via_endpoint(
    forget: &QARecord,
    m: usize,
    cfg: &GeneratorEndpointConfig,
    transport: &dyn Transport,
) -> Result<Generated, NormalError> {
    cfg.validate()?;
    let key = cfg.credential()?;
    let mut out = Generated::default();
    let body = cfg.request_body(&forget.question);
    for i in 0..m {
        match request_with_retries(cfg, transport, &key, &body) {
            Ok(text) => out.companions.push(Companion {
                question: forget.question.clone(),
                answer: parse_content(&text)?,
                provenance: Provenance::Generated,
                similarity: None,
            }),
            Err(e) => {
                let fb = fallback_safe_response(forget, i);
                log::warn!(
                    "generation for {} #{i} failed after {} attempts ({e}); substituting \"{}\"",
                    forget.id,
                    cfg.retries + 1,
                    fb.answer
                );
                out.substitutions.push(Substitution {
                    forget_id: forget.id.clone(),
                    index: i,
                    reason: e.to_string(),
                });
                out.companions.push(fb);
            }
        }
    }
    Ok(out)
}
