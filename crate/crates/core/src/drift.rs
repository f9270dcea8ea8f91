//! Label-free input drift detection over prompt embeddings.
//!
//! The statistic is the cosine distance between the normalized mean of a
//! reference set and the normalized mean of a sliding window of recent
//! prompts.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingVector;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftConfig {
    pub window: usize,
    pub threshold: f64,
    pub min_reference: usize,
    /// Live samples needed before a decision; the centroid of a few prompts
    /// sits far from any reference.
    pub min_live: usize,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig {
            window: 200,
            threshold: 0.30,
            min_reference: 50,
            min_live: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DriftStatus {
    InsufficientReference { reference_count: usize },
    InsufficientLive { live_count: usize },
    Ok { distance: f64 },
    Alarm { distance: f64 },
    SkippedZero,
}

impl DriftStatus {
    pub fn is_alarm(&self) -> bool {
        matches!(self, DriftStatus::Alarm { .. })
    }
}

/// Pluggable drift statistic.
pub trait DriftStatistic {
    fn distance(&self, reference_centroid: &EmbeddingVector, live: &[&EmbeddingVector]) -> f64;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CentroidCosine;

impl DriftStatistic for CentroidCosine {
    fn distance(&self, reference_centroid: &EmbeddingVector, live: &[&EmbeddingVector]) -> f64 {
        1.0 - centroid(live.iter().copied(), reference_centroid.dimension()).cosine(reference_centroid)
    }
}

pub fn centroid<'a>(vectors: impl IntoIterator<Item = &'a EmbeddingVector>, dimension: usize) -> EmbeddingVector {
    let mut sum = vec![0.0; dimension];
    for v in vectors {
        for (s, x) in sum.iter_mut().zip(v.values()) {
            *s += x;
        }
    }
    EmbeddingVector::normalized(sum)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DriftReport {
    pub reference_count: usize,
    pub live_count: usize,
    pub skipped_zero: u64,
    pub last: Option<DriftStatus>,
}

#[derive(Clone, Debug)]
pub struct DriftDetector {
    config: DriftConfig,
    dimension: usize,
    reference_sum: Vec<f64>,
    reference_count: usize,
    live: VecDeque<EmbeddingVector>,
    skipped_zero: u64,
    last: Option<DriftStatus>,
}

impl DriftDetector {
    pub fn new(config: DriftConfig, dimension: usize) -> Self {
        DriftDetector {
            config,
            dimension,
            reference_sum: vec![0.0; dimension],
            reference_count: 0,
            live: VecDeque::new(),
            skipped_zero: 0,
            last: None,
        }
    }

    pub fn config(&self) -> &DriftConfig {
        &self.config
    }

    pub fn add_reference(&mut self, v: &EmbeddingVector) {
        if v.is_zero() || v.dimension() != self.dimension {
            self.skipped_zero += 1;
            return;
        }
        for (s, x) in self.reference_sum.iter_mut().zip(v.values()) {
            *s += x;
        }
        self.reference_count += 1;
    }

    pub fn reference_centroid(&self) -> EmbeddingVector {
        EmbeddingVector::normalized(self.reference_sum.clone())
    }

    pub fn live_len(&self) -> usize {
        self.live.len()
    }

    /// While the reference is below its minimum size, incoming prompts are
    /// absorbed into it and no decision is made.
    pub fn drift_check(&mut self, v: &EmbeddingVector) -> DriftStatus {
        self.drift_check_with(v, &CentroidCosine)
    }

    pub fn drift_check_with(&mut self, v: &EmbeddingVector, stat: &dyn DriftStatistic) -> DriftStatus {
        if v.is_zero() || v.dimension() != self.dimension {
            self.skipped_zero += 1;
            return DriftStatus::SkippedZero;
        }
        if self.reference_count < self.config.min_reference {
            self.add_reference(v);
            let s = DriftStatus::InsufficientReference {
                reference_count: self.reference_count,
            };
            self.last = Some(s);
            return s;
        }
        self.live.push_back(v.clone());
        while self.live.len() > self.config.window {
            self.live.pop_front();
        }
        if self.live.len() < self.config.min_live {
            let s = DriftStatus::InsufficientLive {
                live_count: self.live.len(),
            };
            self.last = Some(s);
            return s;
        }
        let live: Vec<&EmbeddingVector> = self.live.iter().collect();
        let distance = stat.distance(&self.reference_centroid(), &live);
        let s = if distance > self.config.threshold {
            DriftStatus::Alarm { distance }
        } else {
            DriftStatus::Ok { distance }
        };
        self.last = Some(s);
        s
    }

    pub fn report(&self) -> DriftReport {
        DriftReport {
            reference_count: self.reference_count,
            live_count: self.live.len(),
            skipped_zero: self.skipped_zero,
            last: self.last,
        }
    }
}
