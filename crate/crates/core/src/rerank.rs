//! Second-stage scoring of (prompt, utterance) pairs.
//!
//! The default scorer is Jaccard similarity of token sets in which slot
//! placeholders on one side absorb unmatched numeric tokens on the other.
//! An LLM-backed scorer can be swapped in through [`Reranker`].

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use crate::index::{rank_order, UtteranceId};
use crate::llm::{self, ChatMessage, LlmBackend};
use crate::text::{self, Token};

#[derive(Clone, Copy, Debug)]
pub struct Candidate<'a> {
    pub utterance_id: UtteranceId,
    pub service_name: &'a str,
    pub service_description: &'a str,
    pub text: &'a str,
    /// The utterance has a placeholder for a repeated slot, which absorbs
    /// any number of numeric tokens.
    pub repeated_slot: bool,
}

pub trait Reranker {
    /// Scores every candidate in `[0, 1]`, sorted descending with ties broken
    /// by ascending utterance id.
    fn rerank(&self, prompt: &str, candidates: &[Candidate<'_>]) -> Vec<(UtteranceId, f64)>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct JaccardReranker;

impl Reranker for JaccardReranker {
    fn rerank(&self, prompt: &str, candidates: &[Candidate<'_>]) -> Vec<(UtteranceId, f64)> {
        let p = TokenBag::from_text(prompt);
        let mut scored: Vec<_> = candidates
            .iter()
            .map(|c| (c.utterance_id, p.similarity(&TokenBag::for_candidate(c))))
            .collect();
        scored.sort_by(rank_order);
        scored
    }
}

/// Word set plus the number of slot placeholders.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBag {
    words: BTreeSet<String>,
    slots: usize,
    greedy: bool,
}

impl TokenBag {
    pub fn from_text(s: &str) -> Self {
        let mut words = BTreeSet::new();
        let mut slots = 0;
        for t in text::tokenize(s) {
            match t {
                Token::Word(w) => {
                    words.insert(w);
                }
                Token::Slot(_) => slots += 1,
            }
        }
        TokenBag {
            words,
            slots,
            greedy: false,
        }
    }

    pub fn for_candidate(c: &Candidate<'_>) -> Self {
        let mut bag = TokenBag::from_text(c.text);
        bag.greedy = c.repeated_slot && bag.slots > 0;
        bag
    }

    pub fn similarity(&self, other: &TokenBag) -> f64 {
        let shared_words = self.words.intersection(&other.words).count();
        let all_words = self.words.union(&other.words).count();

        let paired_slots = self.slots.min(other.slots);
        let my_free = self.slots - paired_slots;
        let their_free = other.slots - paired_slots;

        let absorb = |free: usize, greedy: bool, available: usize| {
            if free > 0 && greedy {
                available
            } else {
                free.min(available)
            }
        };
        let my_absorbed = absorb(my_free, self.greedy, numeric_only_in(&other.words, &self.words));
        let their_absorbed = absorb(their_free, other.greedy, numeric_only_in(&self.words, &other.words));

        // An absorbed numeric token counts once in both numerator and
        // denominator; unabsorbed slots only inflate the denominator.
        let inter = shared_words + paired_slots + my_absorbed + their_absorbed;
        let union = all_words
            + paired_slots
            + my_free.saturating_sub(my_absorbed)
            + their_free.saturating_sub(their_absorbed);
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

fn numeric_only_in(a: &BTreeSet<String>, b: &BTreeSet<String>) -> usize {
    a.iter().filter(|w| text::is_numeric(w) && !b.contains(*w)).count()
}

pub fn jaccard_with_slots(a: &str, b: &str) -> f64 {
    TokenBag::from_text(a).similarity(&TokenBag::from_text(b))
}

/// Asks the LLM which service fits the prompt using the discovery prompt;
/// every candidate of the named service scores its Jaccard similarity, all
/// others score zero. Backend failures score everything zero, which makes
/// the router abstain.
pub struct DiscoveryReranker<'a> {
    backend: &'a dyn LlmBackend,
}

impl<'a> DiscoveryReranker<'a> {
    pub fn new(backend: &'a dyn LlmBackend) -> Self {
        DiscoveryReranker { backend }
    }
}

impl Reranker for DiscoveryReranker<'_> {
    fn rerank(&self, prompt: &str, candidates: &[Candidate<'_>]) -> Vec<(UtteranceId, f64)> {
        let mut services: Vec<(&str, &str)> = Vec::new();
        for c in candidates {
            if !services.iter().any(|(n, _)| *n == c.service_name) {
                services.push((c.service_name, c.service_description));
            }
        }
        let chosen = llm::discovery_prompt(&services, prompt)
            .ok()
            .and_then(|msgs: Vec<ChatMessage>| self.backend.complete(&msgs).ok())
            .map(|s| String::from(s.trim().trim_matches('"')))
            .unwrap_or_default();
        let p = TokenBag::from_text(prompt);
        let mut scored: Vec<_> = candidates
            .iter()
            .map(|c| {
                let s = if !chosen.is_empty() && c.service_name == chosen {
                    p.similarity(&TokenBag::for_candidate(c))
                } else {
                    0.0
                };
                (c.utterance_id, s)
            })
            .collect();
        scored.sort_by(rank_order);
        scored
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cand(id: UtteranceId, text: &str) -> Candidate<'_> {
        Candidate {
            utterance_id: id,
            service_name: "svc",
            service_description: "",
            text,
            repeated_slot: false,
        }
    }

    #[test]
    fn identical_text_scores_one() {
        assert_eq!(jaccard_with_slots("what is the weather", "what is the weather"), 1.0);
        assert_eq!(jaccard_with_slots("add {a} and {b}", "add {a} and {b}"), 1.0);
    }

    #[test]
    fn disjoint_scores_zero() {
        assert_eq!(jaccard_with_slots("alpha beta", "gamma delta"), 0.0);
    }

    #[test]
    fn slots_absorb_numbers() {
        // {add,5,and,3} vs {add,and} + 2 slots absorbing {5,3}: 4/4.
        assert_eq!(jaccard_with_slots("add 5 and 3", "add {a} and {b}"), 1.0);
        // one number, two slots: inter = add + 5 = 2, union = {add,5,and} + 1 free slot = 4.
        assert_eq!(jaccard_with_slots("add 5", "add {a} and {b}"), 0.5);
        // slots never absorb words
        assert_eq!(jaccard_with_slots("add five and three", "add {a} and {b}"), 2.0 / 6.0);
    }

    #[test]
    fn repeated_slot_absorbs_every_number() {
        let mut c = cand(0, "add {numbers} to {numbers}");
        c.repeated_slot = true;
        let long = "Add 5 to 3 to 2 to 9 to 11";
        assert_eq!(TokenBag::from_text(long).similarity(&TokenBag::for_candidate(&c)), 1.0);
        // without the flag each placeholder takes one number: (2 + 2) / 7
        assert_eq!(jaccard_with_slots(long, c.text), 4.0 / 7.0);
        // a greedy slot with no numbers left still counts as unmatched
        assert_eq!(TokenBag::from_text("add to").similarity(&TokenBag::for_candidate(&c)), 2.0 / 4.0);
    }

    #[test]
    fn shared_numbers_are_not_absorbed_twice() {
        // 5 appears on both sides, so only 3 is free for the slot.
        assert_eq!(jaccard_with_slots("add 5 and 3", "add 5 and {b}"), 1.0);
    }

    #[test]
    fn rerank_orders_and_breaks_ties() {
        let cands = [cand(4, "add {a} and {b}"), cand(1, "add {a} and {b}"), cand(2, "weather today")];
        let out = JaccardReranker.rerank("add 5 and 3", &cands);
        assert_eq!(out.iter().map(|x| x.0).collect::<Vec<_>>(), [1, 4, 2]);
        assert_eq!(out[2].1, 0.0);
    }

    proptest! {
        #[test]
        fn bounded_and_symmetric(a in "[a-d0-9 {}]{0,24}", b in "[a-d0-9 {}]{0,24}") {
            let ab = jaccard_with_slots(&a, &b);
            let ba = jaccard_with_slots(&b, &a);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, ba);
            if TokenBag::from_text(&a) == TokenBag::from_text(&b) && !(text::tokenize(&a).is_empty()) {
                prop_assert_eq!(ab, 1.0);
            }
        }
    }
}
