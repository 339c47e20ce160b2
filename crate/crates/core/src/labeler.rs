//! Property labels for heads.
//!
//! A head's ranked descriptions are turned into a short property label by
//! in-context prompting of a chat model. Every answer is cached in an
//! append-only JSON-lines file keyed by model, head and an order-sensitive
//! digest of the descriptions. A manual annotations file overrides both.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::store::HeadId;

pub const PROMPT_PREAMBLE: &str = "Each block lists text descriptions that best explain one attention head of a CLIP vision encoder, followed by the common property they share. Answer with the property for the last block on the first line.";

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("head {head} is unlabeled (not in cache or annotations)")]
    Unlabeled { head: HeadId },
    #[error("no manual annotation for head {head}")]
    MissingAnnotation { head: HeadId },
    #[error("manual annotation for head {head} has {flags} match flags for {descriptions} descriptions")]
    FlagCount {
        head: HeadId,
        flags: usize,
        descriptions: usize,
    },
    #[error("llm request for head {head} failed: {source}")]
    Llm {
        head: HeadId,
        #[source]
        source: LlmError,
    },
    #[error("could not parse llm reply for head {head}: {reason}")]
    Reply { head: HeadId, reason: String },
    #[error("no llm client configured (needed for head {head})")]
    NoClient { head: HeadId },
    #[error("{0}")]
    InvalidInput(String),
    #[error("label cache i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed file {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub descriptions: Vec<String>,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Llm,
    Manual,
    /// Exact-substring fallback matcher.
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileComponent {
    pub text_index: usize,
    pub description: String,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadProfile {
    pub head: HeadId,
    pub components: Vec<ProfileComponent>,
    pub label: String,
    pub label_provenance: Provenance,
    pub match_flags: Vec<bool>,
    pub match_provenance: Provenance,
}

impl HeadProfile {
    pub fn descriptions(&self) -> Vec<String> {
        self.components.iter().map(|c| c.description.clone()).collect()
    }

    pub fn match_count(&self) -> usize {
        self.match_flags.iter().filter(|&&f| f).count()
    }
}

/// How labels and match flags are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Cache (and annotations) only; flags fall back to substring matching.
    CacheOnly,
    /// Cache first, then one chat request per miss.
    Llm,
    /// Everything from the annotations file.
    Manual,
}

impl std::str::FromStr for LabelMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cache-only" => Ok(Self::CacheOnly),
            "llm" => Ok(Self::Llm),
            "manual" => Ok(Self::Manual),
            other => Err(format!("unknown mode `{other}` (cache-only|llm|manual)")),
        }
    }
}

fn render_descriptions(descriptions: &[String]) -> String {
    descriptions.join("; ")
}

/// Few-shot prompt: every exemplar as a filled block, then the query with
/// an empty `Property:` slot.
pub fn build_label_prompt(exemplars: &[Exemplar], descriptions: &[String]) -> Result<String, LabelError> {
    if exemplars.is_empty() {
        return Err(LabelError::InvalidInput("at least one exemplar is required".into()));
    }
    if descriptions.is_empty() {
        return Err(LabelError::InvalidInput("query descriptions are empty".into()));
    }
    let mut out = String::from(PROMPT_PREAMBLE);
    out.push_str("\n\n");
    for ex in exemplars {
        if ex.descriptions.is_empty() || ex.label.trim().is_empty() {
            return Err(LabelError::InvalidInput(
                "exemplars need descriptions and a label".into(),
            ));
        }
        out.push_str(&format!(
            "Descriptions: {}\nProperty: {}\n\n",
            render_descriptions(&ex.descriptions),
            ex.label.trim()
        ));
    }
    out.push_str(&format!(
        "Descriptions: {}\nProperty:",
        render_descriptions(descriptions)
    ));
    Ok(out)
}

/// One yes/no question per description, batched.
pub fn build_match_prompt(label: &str, descriptions: &[String]) -> String {
    let mut out = format!(
        "Property: {}\nFor each numbered description answer \"yes\" if it matches the property and \"no\" otherwise, one answer per line in order.\n",
        label.trim()
    );
    for (i, d) in descriptions.iter().enumerate() {
        out.push_str(&format!("{}. {}\n", i + 1, d));
    }
    out
}

/// First nonempty line of the reply, trimmed.
pub fn parse_label_reply(reply: &str) -> Option<String> {
    let line = reply.lines().map(str::trim).find(|l| !l.is_empty())?;
    let line = line
        .strip_prefix("Property:")
        .map(str::trim)
        .unwrap_or(line);
    (!line.is_empty()).then(|| line.to_string())
}

pub fn parse_match_reply(reply: &str, expected: usize) -> Result<Vec<bool>, String> {
    let mut flags = Vec::new();
    for line in reply.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let body = line
            .trim_start_matches(|c: char| c.is_ascii_digit())
            .trim_start_matches(['.', ')', ':'])
            .trim()
            .to_ascii_lowercase();
        if body.starts_with("yes") {
            flags.push(true);
        } else if body.starts_with("no") {
            flags.push(false);
        } else {
            return Err(format!("unrecognized answer `{line}`"));
        }
    }
    if flags.len() != expected {
        return Err(format!("expected {expected} answers, got {}", flags.len()));
    }
    Ok(flags)
}

/// Case-folded, whitespace-trimmed form used whenever labels are compared.
pub fn normalize_label(label: &str) -> String {
    label.trim().to_lowercase()
}

/// A description matches when it contains the label, or any `/`-separated
/// alternative of it, ignoring case. Weak heuristic for offline runs.
pub fn substring_match(label: &str, descriptions: &[String]) -> Vec<bool> {
    let label = normalize_label(label);
    let parts: Vec<&str> = std::iter::once(label.as_str())
        .chain(label.split('/'))
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .collect();
    descriptions
        .iter()
        .map(|d| {
            let d = d.to_lowercase();
            parts.iter().any(|p| d.contains(p))
        })
        .collect()
}

pub fn descriptions_digest(descriptions: &[String]) -> String {
    let mut h = Sha256::new();
    for d in descriptions {
        h.update((d.len() as u64).to_le_bytes());
        h.update(d.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelKey {
    pub model_id: String,
    pub pretrain_tag: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub model_id: String,
    pub pretrain_tag: String,
    pub layer: usize,
    pub head: usize,
    pub digest: String,
}

impl CacheKey {
    pub fn new(model: &ModelKey, head: HeadId, descriptions: &[String]) -> Self {
        Self {
            model_id: model.model_id.clone(),
            pretrain_tag: model.pretrain_tag.clone(),
            layer: head.layer,
            head: head.head,
            digest: descriptions_digest(descriptions),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedLabel {
    pub label: String,
    #[serde(default)]
    pub match_flags: Option<Vec<bool>>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    #[serde(flatten)]
    key: CacheKey,
    #[serde(flatten)]
    value: CachedLabel,
}

/// Append-only JSON-lines label store. Later lines win.
#[derive(Debug, Default)]
pub struct LabelCache {
    entries: RwLock<HashMap<CacheKey, CachedLabel>>,
    file: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl LabelCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, LabelError> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let parsed: CacheLine = serde_json::from_str(&line).map_err(|e| LabelError::Parse {
                    path: path.clone(),
                    reason: format!("line {}: {e}", n + 1),
                })?;
                entries.insert(parsed.key, parsed.value);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            entries: RwLock::new(entries),
            file: Some(Mutex::new(file)),
            path: Some(path),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &CacheKey) -> Option<CachedLabel> {
        self.entries.read().unwrap().get(key).cloned()
    }

    pub fn insert(&self, key: CacheKey, value: CachedLabel) -> Result<(), LabelError> {
        let mut entries = self.entries.write().unwrap();
        if let Some(file) = &self.file {
            let line = serde_json::to_string(&CacheLine {
                key: key.clone(),
                value: value.clone(),
            })
            .expect("cache line serializes");
            let mut f = file.lock().unwrap();
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        entries.insert(key, value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManualEntry {
    pub label: String,
    pub match_flags: Option<Vec<bool>>,
}

#[derive(Deserialize)]
struct RawManualEntry {
    label: String,
    #[serde(default, deserialize_with = "flags_from_bool_or_int")]
    match_flags: Option<Vec<bool>>,
}

fn flags_from_bool_or_int<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<bool>>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Flag {
        Bool(bool),
        Int(u8),
    }
    let raw: Option<Vec<Flag>> = Option::deserialize(d)?;
    raw.map(|v| {
        v.into_iter()
            .map(|f| match f {
                Flag::Bool(b) => Ok(b),
                Flag::Int(0) => Ok(false),
                Flag::Int(1) => Ok(true),
                Flag::Int(other) => Err(serde::de::Error::custom(format!("flag {other} is not 0/1"))),
            })
            .collect()
    })
    .transpose()
}

/// `"layer.head" → {label, match_flags}` annotations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ManualAnnotations {
    pub entries: BTreeMap<HeadId, ManualEntry>,
}

impl ManualAnnotations {
    pub fn from_json(text: &str) -> Result<Self, String> {
        let raw: BTreeMap<String, RawManualEntry> =
            serde_json::from_str(text).map_err(|e| e.to_string())?;
        let mut entries = BTreeMap::new();
        for (k, v) in raw {
            let head: HeadId = k.parse()?;
            entries.insert(
                head,
                ManualEntry {
                    label: v.label,
                    match_flags: v.match_flags,
                },
            );
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LabelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|reason| LabelError::Parse {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<String, &ManualEntry> =
            self.entries.iter().map(|(h, e)| (h.to_string(), e)).collect();
        serde_json::to_string_pretty(&map).expect("annotations serialize")
    }

    pub fn get(&self, head: HeadId) -> Option<&ManualEntry> {
        self.entries.get(&head)
    }
}

/// A chat-completion backend: one prompt in, one reply out.
pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, LlmError>;
}

/// One raw request attempt; the wire format lives with the caller.
pub trait ChatTransport: Send + Sync {
    fn send(&self, prompt: &str) -> Result<String, LlmError>;
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_delay: Duration,
    /// Minimum spacing between consecutive requests.
    pub min_interval: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            base_delay: Duration::from_millis(500),
            min_interval: Duration::from_millis(200),
        }
    }
}

/// Serializes requests through a rate limiter and retries failures with
/// exponential backoff.
pub struct RetryingClient<T> {
    transport: T,
    policy: RetryPolicy,
    last_request: Mutex<Option<Instant>>,
}

impl<T: ChatTransport> RetryingClient<T> {
    pub fn new(transport: T, policy: RetryPolicy) -> Self {
        Self {
            transport,
            policy,
            last_request: Mutex::new(None),
        }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }
}

impl<T: ChatTransport> LlmClient for RetryingClient<T> {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        // holding the lock for the whole exchange serializes requests
        let mut last = self.last_request.lock().unwrap();
        let mut attempt = 0u32;
        loop {
            if let Some(prev) = *last {
                let since = prev.elapsed();
                if since < self.policy.min_interval {
                    thread::sleep(self.policy.min_interval - since);
                }
            }
            *last = Some(Instant::now());
            match self.transport.send(prompt) {
                Ok(reply) => return Ok(reply),
                Err(e) if attempt >= self.policy.retries => {
                    return Err(LlmError::Exhausted {
                        attempts: attempt + 1,
                        last: e.to_string(),
                    })
                }
                Err(_) => {
                    thread::sleep(self.policy.base_delay * 2u32.pow(attempt));
                    attempt += 1;
                }
            }
        }
    }
}

pub struct Labeler {
    pub mode: LabelMode,
    cache: Arc<LabelCache>,
    manual: Option<ManualAnnotations>,
    llm: Option<Arc<dyn LlmClient>>,
    exemplars: Vec<Exemplar>,
    // a miss is re-checked under this lock so one key is never requested twice
    llm_gate: Mutex<()>,
}

impl Labeler {
    pub fn new(mode: LabelMode, cache: Arc<LabelCache>) -> Self {
        Self {
            mode,
            cache,
            manual: None,
            llm: None,
            exemplars: Vec::new(),
            llm_gate: Mutex::new(()),
        }
    }

    pub fn with_manual(mut self, manual: ManualAnnotations) -> Self {
        self.manual = Some(manual);
        self
    }

    pub fn with_llm(mut self, client: Arc<dyn LlmClient>) -> Self {
        self.llm = Some(client);
        self
    }

    pub fn with_exemplars(mut self, exemplars: Vec<Exemplar>) -> Self {
        self.exemplars = exemplars;
        self
    }

    pub fn exemplars(&self) -> &[Exemplar] {
        &self.exemplars
    }

    pub fn set_exemplars(&mut self, exemplars: Vec<Exemplar>) {
        self.exemplars = exemplars;
    }

    pub fn manual(&self) -> Option<&ManualAnnotations> {
        self.manual.as_ref()
    }

    pub fn cache(&self) -> &LabelCache {
        &self.cache
    }

    pub fn label_head(
        &self,
        model: &ModelKey,
        head: HeadId,
        descriptions: &[String],
    ) -> Result<(String, Provenance), LabelError> {
        if descriptions.is_empty() {
            return Err(LabelError::InvalidInput(format!("head {head} has no descriptions")));
        }
        if let Some(entry) = self.manual.as_ref().and_then(|m| m.get(head)) {
            return Ok((entry.label.clone(), Provenance::Manual));
        }
        if self.mode == LabelMode::Manual {
            return Err(LabelError::MissingAnnotation { head });
        }
        let key = CacheKey::new(model, head, descriptions);
        if let Some(hit) = self.cache.get(&key) {
            return Ok((hit.label, hit.provenance));
        }
        if self.mode == LabelMode::CacheOnly {
            return Err(LabelError::Unlabeled { head });
        }
        let client = self.llm.as_ref().ok_or(LabelError::NoClient { head })?;
        let _gate = self.llm_gate.lock().unwrap();
        if let Some(hit) = self.cache.get(&key) {
            return Ok((hit.label, hit.provenance));
        }
        let prompt = build_label_prompt(&self.exemplars, descriptions)?;
        let reply = client
            .complete(&prompt)
            .map_err(|source| LabelError::Llm { head, source })?;
        let label = parse_label_reply(&reply).ok_or_else(|| LabelError::Reply {
            head,
            reason: "empty reply".into(),
        })?;
        self.cache.insert(
            key,
            CachedLabel {
                label: label.clone(),
                match_flags: None,
                provenance: Provenance::Llm,
            },
        )?;
        Ok((label, Provenance::Llm))
    }

    /// One flag per description: does it match `label`?
    pub fn match_descriptions(
        &self,
        model: &ModelKey,
        head: HeadId,
        label: &str,
        descriptions: &[String],
    ) -> Result<(Vec<bool>, Provenance), LabelError> {
        if let Some(flags) = self
            .manual
            .as_ref()
            .and_then(|m| m.get(head))
            .and_then(|e| e.match_flags.clone())
        {
            if flags.len() != descriptions.len() {
                return Err(LabelError::FlagCount {
                    head,
                    flags: flags.len(),
                    descriptions: descriptions.len(),
                });
            }
            return Ok((flags, Provenance::Manual));
        }
        match self.mode {
            LabelMode::Manual => Err(LabelError::MissingAnnotation { head }),
            LabelMode::CacheOnly => {
                let key = CacheKey::new(model, head, descriptions);
                match self.cache.get(&key).and_then(|c| c.match_flags) {
                    Some(flags) if flags.len() == descriptions.len() => Ok((flags, Provenance::Llm)),
                    _ => Ok((substring_match(label, descriptions), Provenance::Heuristic)),
                }
            }
            LabelMode::Llm => {
                let key = CacheKey::new(model, head, descriptions);
                let cached_flags = |c: &LabelCache| {
                    c.get(&key)
                        .and_then(|e| e.match_flags)
                        .filter(|f| f.len() == descriptions.len())
                };
                if let Some(flags) = cached_flags(&self.cache) {
                    return Ok((flags, Provenance::Llm));
                }
                let client = self.llm.as_ref().ok_or(LabelError::NoClient { head })?;
                let _gate = self.llm_gate.lock().unwrap();
                if let Some(flags) = cached_flags(&self.cache) {
                    return Ok((flags, Provenance::Llm));
                }
                let reply = client
                    .complete(&build_match_prompt(label, descriptions))
                    .map_err(|source| LabelError::Llm { head, source })?;
                let flags = parse_match_reply(&reply, descriptions.len())
                    .map_err(|reason| LabelError::Reply { head, reason })?;
                let (stored_label, provenance) = match self.cache.get(&key) {
                    Some(e) => (e.label, e.provenance),
                    None => (label.to_string(), Provenance::Llm),
                };
                self.cache.insert(
                    key,
                    CachedLabel {
                        label: stored_label,
                        match_flags: Some(flags.clone()),
                        provenance,
                    },
                )?;
                Ok((flags, Provenance::Llm))
            }
        }
    }
}
