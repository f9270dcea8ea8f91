//! Semantic prompt cache and conversation-history cache.
//!
//! Prompt cache entries live under a scope (user plus a hash of the service
//! configuration) and are only ever compared with lookups from the same
//! scope. Both stores evict least-recently-used items globally.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{Embedder, EmbeddingVector};
use crate::llm::{ChatMessage, Role};
use crate::mock::number_literals;
use crate::time::Timestamp;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ScopeKey {
    /// `None` for a scope shared by every user.
    pub user_id: Option<String>,
    pub service_config_hash: u64,
}

impl ScopeKey {
    pub fn user(user_id: impl Into<String>, service_config_hash: u64) -> Self {
        ScopeKey {
            user_id: Some(user_id.into()),
            service_config_hash,
        }
    }

    pub fn shared(service_config_hash: u64) -> Self {
        ScopeKey {
            user_id: None,
            service_config_hash,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptCacheConfig {
    pub capacity: usize,
    pub similarity_threshold: f64,
    /// Require identical number literals (in order) on a semantic hit.
    pub numeric_guard: bool,
}

impl Default for PromptCacheConfig {
    fn default() -> Self {
        PromptCacheConfig {
            capacity: 10_000,
            similarity_threshold: 0.95,
            numeric_guard: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptCacheEntry {
    pub scope: ScopeKey,
    pub prompt_embedding: EmbeddingVector,
    pub prompt_text: String,
    pub response: String,
    pub created_at: Timestamp,
    pub last_hit_at: Timestamp,
    numbers: Vec<String>,
    recency: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheHit {
    pub response: String,
    pub similarity: f64,
    pub cached_prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CacheError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("prompt has no indexable tokens")]
    NoTokens,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub entries: usize,
}

#[derive(Clone, Debug)]
pub struct PromptCache {
    config: PromptCacheConfig,
    embedder: Embedder,
    entries: BTreeMap<u64, PromptCacheEntry>,
    by_scope: BTreeMap<ScopeKey, BTreeSet<u64>>,
    recency: BTreeMap<u64, u64>,
    next_id: u64,
    tick: u64,
    stats: CacheStats,
}

impl PromptCache {
    pub fn new(config: PromptCacheConfig, embedder: Embedder) -> Self {
        PromptCache {
            config,
            embedder,
            entries: BTreeMap::new(),
            by_scope: BTreeMap::new(),
            recency: BTreeMap::new(),
            next_id: 0,
            tick: 0,
            stats: CacheStats::default(),
        }
    }

    pub fn config(&self) -> &PromptCacheConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            entries: self.entries.len(),
            ..self.stats
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = &PromptCacheEntry> {
        self.entries.values()
    }

    fn touch(&mut self, id: u64) {
        self.tick += 1;
        let tick = self.tick;
        if let Some(e) = self.entries.get_mut(&id) {
            self.recency.remove(&e.recency);
            e.recency = tick;
            self.recency.insert(tick, id);
        }
    }

    fn remove(&mut self, id: u64) {
        if let Some(e) = self.entries.remove(&id) {
            self.recency.remove(&e.recency);
            if let Some(set) = self.by_scope.get_mut(&e.scope) {
                set.remove(&id);
                if set.is_empty() {
                    self.by_scope.remove(&e.scope);
                }
            }
        }
    }

    /// Most similar entry in `scope` at or above the threshold; the newest
    /// entry wins ties.
    pub fn lookup(&mut self, scope: &ScopeKey, prompt: &str, now: Timestamp) -> Option<CacheHit> {
        let query = self.embedder.embed(prompt);
        let found = if query.is_zero() {
            None
        } else {
            let numbers = number_literals(prompt);
            let mut best: Option<(u64, f64)> = None;
            for id in self.by_scope.get(scope).into_iter().flatten() {
                let e = &self.entries[id];
                if self.config.numeric_guard && e.numbers != numbers {
                    continue;
                }
                let sim = query.cosine(&e.prompt_embedding);
                if sim + 1e-12 < self.config.similarity_threshold {
                    continue;
                }
                // ids grow with insertion, so `>=` prefers the newest on ties
                if best.is_none_or(|(_, s)| sim >= s) {
                    best = Some((*id, sim));
                }
            }
            best
        };
        self.finish_lookup(found, now)
    }

    /// Hit only on an identical prompt text within `scope`.
    pub fn lookup_exact(&mut self, scope: &ScopeKey, prompt: &str, now: Timestamp) -> Option<CacheHit> {
        let found = self
            .by_scope
            .get(scope)
            .into_iter()
            .flatten()
            .rev()
            .find(|id| self.entries[*id].prompt_text == prompt)
            .map(|id| (*id, 1.0));
        self.finish_lookup(found, now)
    }

    fn finish_lookup(&mut self, found: Option<(u64, f64)>, now: Timestamp) -> Option<CacheHit> {
        let Some((id, similarity)) = found else {
            self.stats.misses += 1;
            return None;
        };
        self.stats.hits += 1;
        self.touch(id);
        let e = self.entries.get_mut(&id).expect("found id exists");
        e.last_hit_at = now;
        Some(CacheHit {
            response: e.response.clone(),
            similarity,
            cached_prompt: e.prompt_text.clone(),
        })
    }

    /// Inserts (or replaces the same-text entry in the same scope) and evicts
    /// least-recently-used entries across all scopes beyond capacity.
    pub fn store(&mut self, scope: ScopeKey, prompt: &str, response: impl Into<String>, now: Timestamp) -> Result<(), CacheError> {
        if prompt.trim().is_empty() {
            return Err(CacheError::EmptyPrompt);
        }
        let embedding = self.embedder.embed(prompt);
        if embedding.is_zero() {
            return Err(CacheError::NoTokens);
        }
        let existing = self
            .by_scope
            .get(&scope)
            .into_iter()
            .flatten()
            .find(|id| self.entries[*id].prompt_text == prompt)
            .copied();
        if let Some(id) = existing {
            self.remove(id);
        }
        let id = self.next_id;
        self.next_id += 1;
        self.entries.insert(
            id,
            PromptCacheEntry {
                scope: scope.clone(),
                prompt_embedding: embedding,
                prompt_text: prompt.into(),
                response: response.into(),
                created_at: now,
                last_hit_at: now,
                numbers: number_literals(prompt),
                recency: 0,
            },
        );
        self.by_scope.entry(scope).or_default().insert(id);
        self.touch(id);
        while self.entries.len() > self.config.capacity {
            let Some((_, victim)) = self.recency.pop_first() else { break };
            self.remove(victim);
            self.stats.evictions += 1;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
    pub at: Timestamp,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCacheEntry {
    pub session_id: String,
    pub turns: Vec<Turn>,
    pub byte_size: usize,
    recency: u64,
}

pub const DEFAULT_SESSION_BUDGET: usize = 64 * 1024 * 1024;

#[derive(Clone, Debug)]
pub struct SessionCache {
    budget_bytes: usize,
    total_bytes: usize,
    sessions: BTreeMap<String, SessionCacheEntry>,
    recency: BTreeMap<u64, String>,
    tick: u64,
    evictions: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStats {
    pub sessions: usize,
    pub total_bytes: usize,
    pub budget_bytes: usize,
    pub evictions: u64,
}

impl SessionCache {
    pub fn new(budget_bytes: usize) -> Self {
        SessionCache {
            budget_bytes,
            total_bytes: 0,
            sessions: BTreeMap::new(),
            recency: BTreeMap::new(),
            tick: 0,
            evictions: 0,
        }
    }

    pub fn stats(&self) -> SessionStats {
        SessionStats {
            sessions: self.sessions.len(),
            total_bytes: self.total_bytes,
            budget_bytes: self.budget_bytes,
            evictions: self.evictions,
        }
    }

    pub fn append(&mut self, session_id: &str, role: Role, text: &str, now: Timestamp) {
        self.tick += 1;
        let tick = self.tick;
        let entry = self.sessions.entry(session_id.into()).or_insert_with(|| SessionCacheEntry {
            session_id: session_id.into(),
            ..Default::default()
        });
        if entry.recency != 0 {
            self.recency.remove(&entry.recency);
        }
        entry.recency = tick;
        entry.turns.push(Turn {
            role,
            text: text.into(),
            at: now,
        });
        entry.byte_size += text.len();
        self.total_bytes += text.len();
        self.recency.insert(tick, session_id.into());

        // never evict the session that was just written
        while self.total_bytes > self.budget_bytes {
            let victim = match self.recency.first_key_value() {
                Some((_, s)) if s != session_id => s.clone(),
                _ => break,
            };
            self.evict(&victim);
        }
    }

    fn evict(&mut self, session_id: &str) {
        if let Some(e) = self.sessions.remove(session_id) {
            self.recency.remove(&e.recency);
            self.total_bytes -= e.byte_size;
            self.evictions += 1;
        }
    }

    pub fn history(&self, session_id: &str) -> Vec<Turn> {
        self.sessions.get(session_id).map(|e| e.turns.clone()).unwrap_or_default()
    }

    pub fn messages(&self, session_id: &str) -> Vec<ChatMessage> {
        self.history(session_id)
            .into_iter()
            .map(|t| ChatMessage {
                role: t.role,
                content: t.text,
            })
            .collect()
    }

    pub fn contains(&self, session_id: &str) -> bool {
        self.sessions.contains_key(session_id)
    }
}
