//! Service routing as utterance ranking.
//!
//! A routing pass narrows the utterance index to services the caller may
//! use, retrieves the `k` nearest utterances to the embedded prompt, rescores
//! them with a pairwise reranker, and either abstains or hands the winning
//! procedure to parameter extraction.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::binding::{self, BoundOperation, Extraction, ExtractionRequest};
use crate::embed::Embedder;
use crate::index::{IndexEntry, UtteranceId, UtteranceIndex};
use crate::llm::LlmBackend;
use crate::rerank::{Candidate, Reranker};
use crate::services::{ServiceDescriptor, ServiceRegistry};
use crate::text;
use crate::trace::Telemetry;
use crate::users::AccessCertificate;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouteConfig {
    pub dimension: usize,
    pub top_k: usize,
    pub abstain_threshold: f64,
    pub retries: u32,
}

impl Default for RouteConfig {
    fn default() -> Self {
        RouteConfig {
            dimension: crate::embed::DEFAULT_DIMENSION,
            top_k: 5,
            abstain_threshold: 0.35,
            retries: binding::DEFAULT_RETRIES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub service_name: String,
    pub procedure_name: String,
    pub arguments: Vec<Value>,
    /// Every operation the binding step produced, in order. The first one
    /// supplies `procedure_name`/`arguments` when present.
    #[serde(default)]
    pub operations: Vec<BoundOperation>,
    pub score: f64,
    pub margin: f64,
    pub abstained: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abstain_reason: Option<String>,
    /// Set when the procedure is known but its parameters are not.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clarification: Option<String>,
}

impl RoutingDecision {
    pub fn abstain(reason: impl Into<String>, score: f64, margin: f64) -> Self {
        RoutingDecision {
            service_name: String::new(),
            procedure_name: String::new(),
            arguments: Vec::new(),
            operations: Vec::new(),
            score,
            margin,
            abstained: true,
            abstain_reason: Some(reason.into()),
            clarification: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct UtteranceMeta {
    text: String,
    service_description: String,
    repeated_slot: bool,
}

/// Immutable routing snapshot built from one registry state.
#[derive(Clone, Debug)]
pub struct Router {
    config: RouteConfig,
    embedder: Embedder,
    index: UtteranceIndex,
    meta: BTreeMap<UtteranceId, UtteranceMeta>,
    services: BTreeMap<String, ServiceDescriptor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexDumpEntry {
    pub utterance_id: UtteranceId,
    pub service_name: String,
    pub procedure_name: String,
    pub text: String,
    /// Non-zero embedding buckets.
    pub buckets: Vec<(usize, f64)>,
}

impl Router {
    /// Re-embeds every utterance in registration order. Ids are assigned
    /// sequentially from zero.
    pub fn build(registry: &ServiceRegistry, config: RouteConfig) -> Self {
        let embedder = Embedder::new(config.dimension);
        let mut index = UtteranceIndex::new(config.dimension);
        let mut meta = BTreeMap::new();
        let mut services = BTreeMap::new();
        let mut next: UtteranceId = 0;
        for svc in registry.all() {
            let description = svc.meta_line();
            for u in &svc.utterances {
                let repeated_slot = svc.procedure(&u.procedure).is_some_and(|p| {
                    text::placeholders(&u.text)
                        .iter()
                        .any(|ph| p.slot(ph).is_some_and(|s| s.many))
                });
                index
                    .insert(IndexEntry {
                        utterance_id: next,
                        service_name: svc.name.clone(),
                        procedure_name: u.procedure.clone(),
                        vector: embedder.embed(&u.text),
                    })
                    .expect("sequential ids with a shared dimension");
                meta.insert(
                    next,
                    UtteranceMeta {
                        text: u.text.clone(),
                        service_description: description.clone(),
                        repeated_slot,
                    },
                );
                next += 1;
            }
            services.insert(svc.name.clone(), svc.clone());
        }
        Router {
            config,
            embedder,
            index,
            meta,
            services,
        }
    }

    pub fn config(&self) -> &RouteConfig {
        &self.config
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    pub fn index(&self) -> &UtteranceIndex {
        &self.index
    }

    pub fn utterance_text(&self, id: UtteranceId) -> Option<&str> {
        self.meta.get(&id).map(|m| m.text.as_str())
    }

    pub fn dump(&self) -> Vec<IndexDumpEntry> {
        self.index
            .entries()
            .iter()
            .map(|e| IndexDumpEntry {
                utterance_id: e.utterance_id,
                service_name: e.service_name.clone(),
                procedure_name: e.procedure_name.clone(),
                text: self.utterance_text(e.utterance_id).unwrap_or_default().to_string(),
                buckets: e
                    .vector
                    .values()
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(i, v)| (i, *v))
                    .collect(),
            })
            .collect()
    }

    /// Ranking only: permitted candidates ordered by reranker score.
    pub fn rank(&self, prompt: &str, certificate: &AccessCertificate, reranker: &dyn Reranker) -> Ranking {
        if !self.services.keys().any(|s| certificate.allows_service(s)) {
            return Ranking::Abstain("no permitted services");
        }
        let query = self.embedder.embed(prompt);
        if query.is_zero() {
            return Ranking::Abstain("prompt has no tokens");
        }
        let nearest = self
            .index
            .knn_filtered(&query, self.config.top_k.max(1), |e| {
                certificate.allows_service(&e.service_name)
            })
            .unwrap_or_default();
        if nearest.is_empty() {
            return Ranking::Abstain("no permitted utterances");
        }
        let candidates: Vec<Candidate<'_>> = nearest
            .iter()
            .filter_map(|(id, _)| {
                let entry = self.index.get(*id)?;
                let m = self.meta.get(id)?;
                Some(Candidate {
                    utterance_id: *id,
                    service_name: &entry.service_name,
                    service_description: &m.service_description,
                    text: &m.text,
                    repeated_slot: m.repeated_slot,
                })
            })
            .collect();
        Ranking::Ranked(reranker.rerank(prompt, &candidates))
    }

    pub fn route(
        &self,
        prompt: &str,
        certificate: &AccessCertificate,
        reranker: &dyn Reranker,
        backend: &dyn LlmBackend,
        telemetry: &Telemetry<'_>,
    ) -> RoutingDecision {
        let ranked = telemetry.span("router", "rank", |ev| {
            let r = self.rank(prompt, certificate, reranker);
            if let Ranking::Ranked(list) = &r {
                ev.attributes.insert("candidates".into(), list.len().to_string());
            }
            r
        });
        let ranked = match ranked {
            Ranking::Abstain(reason) => return RoutingDecision::abstain(reason, 0.0, 0.0),
            Ranking::Ranked(r) => r,
        };
        let (top_id, score) = ranked[0];
        let margin = match ranked.get(1) {
            Some((_, second)) => score - second,
            None => score,
        };
        if score < self.config.abstain_threshold {
            return RoutingDecision::abstain("top score below threshold", score, margin);
        }
        let entry = self.index.get(top_id).expect("ranked ids come from the index");
        let service = &self.services[&entry.service_name];
        let allowed = service.procedure_names();
        let mut decision = RoutingDecision {
            service_name: service.name.clone(),
            procedure_name: entry.procedure_name.clone(),
            arguments: Vec::new(),
            operations: Vec::new(),
            score,
            margin,
            abstained: false,
            abstain_reason: None,
            clarification: None,
        };
        let outcome = binding::extract_parameters(
            backend,
            ExtractionRequest {
                prompt,
                service,
                procedure: &entry.procedure_name,
                allowed_operations: &allowed,
                retries: self.config.retries,
            },
            telemetry,
        );
        match outcome {
            Ok(out) => match out.extraction {
                Extraction::Bound { operations } => {
                    decision.procedure_name = operations[0].procedure.clone();
                    decision.arguments = operations[0].arguments.clone();
                    decision.operations = operations;
                }
                Extraction::ClarificationNeeded { question } => decision.clarification = Some(question),
            },
            Err(e) => {
                let mut d = RoutingDecision::abstain("parameter extraction failed", score, margin);
                d.abstain_reason = Some(alloc::format!("parameter extraction failed: {e}"));
                return d;
            }
        }
        decision
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Ranking {
    Abstain(&'static str),
    Ranked(Vec<(UtteranceId, f64)>),
}
