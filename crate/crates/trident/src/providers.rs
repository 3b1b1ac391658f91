//! Text and embedding providers: deterministic stubs for tests and desk
//! runs, and an HTTP chat-completion client for real generation.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use trident_core::aux::TextProvider;
use trident_core::tensor::round_f32;
use trident_core::vocab::{EmbeddingProvider, HiddenStates};

pub const API_KEY_ENV: &str = "TRIDENT_LLM_API_KEY";
pub const BASE_URL_ENV: &str = "TRIDENT_LLM_BASE_URL";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

const ADJECTIVES: &[&str] = &[
    "bright", "dull", "glossy", "matte", "rough", "smooth", "textured", "vivid", "faded", "dark", "pale", "shiny",
    "worn", "crisp", "soft", "jagged", "curved", "angular", "speckled", "striped", "mottled", "dusty", "wet", "dry",
    "warm", "cool", "dense", "sparse", "layered", "polished", "weathered", "sleek", "bulky", "slender", "translucent",
    "opaque", "grainy", "fuzzy", "rigid", "delicate",
];

/// Replays fixture transcripts keyed by the SHA-256 of the prompt; prompts
/// without a fixture get a numbered list of ten adjectives chosen by the
/// prompt's hash.
#[derive(Debug, Default)]
pub struct StubTextProvider {
    fixtures: BTreeMap<String, String>,
    calls: AtomicUsize,
}

impl StubTextProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fixtures(fixtures: BTreeMap<String, String>) -> Self {
        Self { fixtures, calls: AtomicUsize::new(0) }
    }

    pub fn add_fixture(&mut self, prompt: &str, transcript: &str) {
        self.fixtures.insert(sha256_hex(prompt.as_bytes()), transcript.to_string());
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl TextProvider for StubTextProvider {
    fn complete(&self, prompt: &str) -> Result<String, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let key = sha256_hex(prompt.as_bytes());
        if let Some(t) = self.fixtures.get(&key) {
            return Ok(t.clone());
        }
        let seed: [u8; 32] = Sha256::digest(prompt.as_bytes()).into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let picks: Vec<&&str> = ADJECTIVES.choose_multiple(&mut rng, 10).collect();
        Ok(picks.iter().enumerate().map(|(i, w)| format!("{}. {}\n", i + 1, w)).collect())
    }
}

/// Retry schedule for HTTP calls: `tries` attempts, sleeping
/// `base * factor^i` after the `i`-th failure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Backoff {
    pub base: Duration,
    pub factor: u32,
    pub tries: u32,
}

impl Default for Backoff {
    fn default() -> Self {
        Self { base: Duration::from_secs(1), factor: 2, tries: 5 }
    }
}

impl Backoff {
    pub fn delay(&self, failure: u32) -> Duration {
        self.base * self.factor.saturating_pow(failure)
    }
}

/// OpenAI-style `/chat/completions` client.
pub struct ChatProvider {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub backoff: Backoff,
    agent: ureq::Agent,
    calls: AtomicUsize,
}

impl ChatProvider {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            model: model.into(),
            backoff: Backoff::default(),
            agent,
            calls: AtomicUsize::new(0),
        }
    }

    /// Reads the base URL and key from the environment.
    pub fn from_env(model: &str) -> Result<Self, String> {
        let base = std::env::var(BASE_URL_ENV).map_err(|_| format!("{BASE_URL_ENV} is not set"))?;
        Ok(Self::new(base, std::env::var(API_KEY_ENV).ok(), model))
    }

    /// HTTP requests made so far, including retries.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn attempt(&self, prompt: &str) -> Result<String, (bool, String)> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let body = serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self.agent.post(format!("{}/chat/completions", self.base_url));
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {k}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err((true, format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err((false, format!("HTTP {status}")));
        }
        let v: serde_json::Value = resp.body_mut().read_json().map_err(|e| (false, format!("bad response body: {e}")))?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| (false, "response has no choices[0].message.content".to_string()))
    }
}

impl TextProvider for ChatProvider {
    fn complete(&self, prompt: &str) -> Result<String, String> {
        let mut last = String::new();
        for i in 0..self.backoff.tries {
            match self.attempt(prompt) {
                Ok(text) => return Ok(text),
                Err((false, e)) => return Err(e),
                Err((true, e)) => {
                    log::warn!("chat completion attempt {} failed: {e}", i + 1);
                    last = e;
                    if i + 1 < self.backoff.tries {
                        std::thread::sleep(self.backoff.delay(i));
                    }
                }
            }
        }
        Err(format!("{} attempts failed; last error: {last}", self.backoff.tries))
    }
}

/// Unit vectors drawn from a generator seeded by `SHA-256(seed ‖ word)`.
#[derive(Clone, Copy, Debug)]
pub struct StubEmbeddingProvider {
    pub seed: u64,
    pub dim: usize,
}

impl StubEmbeddingProvider {
    pub fn vector(&self, word: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(word.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        loop {
            let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                return v.into_iter().map(|x| round_f32(x / n)).collect();
            }
        }
    }
}

impl EmbeddingProvider for StubEmbeddingProvider {
    fn hidden_states(&self, word: &str) -> Result<HiddenStates, String> {
        Ok(HiddenStates::Pooled(self.vector(word)))
    }
}
