//! Entropy-driven memory bank: a capacity-bounded sample store whose eviction
//! priority is outdated -> long-persisted over-confident -> highest-entropy,
//! restricted to the dominant (most populous) inferred classes.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{CoreError, Result};

/// Smallest probability admitted into a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Shannon entropy in nats, with components clamped to [`PROB_FLOOR`] before
/// the logarithm.
pub fn entropy_of(dist: &[f64]) -> f64 {
    let mut e = 0.0f64;
    for &p in dist {
        e -= p * p.max(PROB_FLOOR).ln();
    }
    e
}

/// One stored sample: the payload, its inferred label, its age in arrivals,
/// and the prediction entropy frozen at insertion time.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRecord<S> {
    pub sample: S,
    pub inferred_label: usize,
    pub age: u64,
    pub entropy: f64,
    /// Arrival number at insertion; earliest-inserted wins tie-breaks.
    seq: u64,
}

impl<S> MemoryRecord<S> {
    pub fn insertion_seq(&self) -> u64 {
        self.seq
    }
}

/// Bank capacity, age thresholds, class count, and per-strategy switches.
///
/// The `disable_*` switches exist for ablation runs; all strategies are on by
/// default.
#[derive(Debug, Clone, PartialEq)]
pub struct BankConfig {
    pub capacity: usize,
    pub t_forget: u64,
    pub t_mature: u64,
    pub num_classes: usize,
    pub disable_outdated: bool,
    pub disable_overconfident: bool,
    pub disable_uncertainty: bool,
}

impl BankConfig {
    pub fn new(capacity: usize, t_forget: u64, t_mature: u64, num_classes: usize) -> Result<Self> {
        let cfg = BankConfig {
            capacity,
            t_forget,
            t_mature,
            num_classes,
            disable_outdated: false,
            disable_overconfident: false,
            disable_uncertainty: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(CoreError::InvalidConfig("bank capacity must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(CoreError::InvalidConfig("bank needs at least one class".into()));
        }
        if self.t_mature > self.t_forget {
            return Err(CoreError::InvalidConfig(format!(
                "t_mature ({}) must not exceed t_forget ({})",
                self.t_mature, self.t_forget
            )));
        }
        Ok(())
    }
}

/// Which removal strategy produced an eviction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvictionRule {
    /// Age reached `t_forget`.
    Outdated,
    /// Age reached `t_mature` and entropy is the class minimum.
    OverConfident,
    /// Highest-entropy dominant-class record, displaced by a lower-entropy arrival.
    Uncertainty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Eviction<S> {
    pub record: MemoryRecord<S>,
    pub rule: EvictionRule,
}

/// Outcome of offering one sample to the bank. Rejection is a normal result,
/// not an error.
#[derive(Debug, Clone, PartialEq)]
pub enum AddOutcome<S> {
    Accepted { evicted: Option<Eviction<S>> },
    Rejected,
}

/// The entropy-driven memory bank.
#[derive(Debug, Clone)]
pub struct Bank<S> {
    records: Vec<MemoryRecord<S>>,
    arrival_counter: u64,
    cfg: BankConfig,
}

impl<S: Clone> Bank<S> {
    pub fn new(cfg: BankConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Bank {
            records: Vec::with_capacity(cfg.capacity),
            arrival_counter: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &BankConfig {
        &self.cfg
    }

    pub fn occupancy(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[MemoryRecord<S>] {
        &self.records
    }

    /// Classes attaining the maximum inferred-label count; multiple on ties.
    pub fn dominant_classes(&self) -> Result<BTreeSet<usize>> {
        if self.records.is_empty() {
            return Err(CoreError::EmptyInput("dominant classes of an empty bank".into()));
        }
        let mut counts = vec![0usize; self.cfg.num_classes];
        for r in &self.records {
            counts[r.inferred_label] += 1;
        }
        let max = *counts.iter().max().expect("nonempty counts");
        Ok(counts
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == max)
            .map(|(i, _)| i)
            .collect())
    }

    /// Whether record `idx` has the minimum entropy among same-label records.
    ///
    /// The minimum is taken bank-wide per class; dominant-class membership is
    /// checked separately by the caller. This predicate is the single place
    /// where that scope is decided.
    fn is_class_min_entropy(&self, idx: usize) -> bool {
        let label = self.records[idx].inferred_label;
        let e = self.records[idx].entropy;
        self.records
            .iter()
            .filter(|r| r.inferred_label == label)
            .all(|r| r.entropy >= e)
    }

    /// Offer one sample with its predicted distribution. Ages increment on
    /// every offer, including ones that end rejected.
    pub fn add(&mut self, sample: S, dist: &[f64]) -> Result<AddOutcome<S>> {
        if dist.len() != self.cfg.num_classes {
            return Err(CoreError::LengthMismatch {
                context: "bank add distribution".into(),
                left: self.cfg.num_classes,
                right: dist.len(),
            });
        }
        for r in self.records.iter_mut() {
            r.age += 1;
        }
        let seq = self.arrival_counter;
        self.arrival_counter += 1;

        let mut label = 0usize;
        for (i, p) in dist.iter().enumerate() {
            if *p > dist[label] {
                label = i;
            }
        }
        let entropy = entropy_of(dist);
        let record = MemoryRecord {
            sample,
            inferred_label: label,
            age: 0,
            entropy,
            seq,
        };

        if self.records.len() < self.cfg.capacity {
            self.records.push(record);
            return Ok(AddOutcome::Accepted { evicted: None });
        }

        let dominant = self.dominant_classes()?;
        let in_dominant: Vec<usize> = (0..self.records.len())
            .filter(|i| dominant.contains(&self.records[*i].inferred_label))
            .collect();

        // Outdated: largest age wins, earliest-inserted breaks ties.
        if !self.cfg.disable_outdated {
            let outdated = in_dominant
                .iter()
                .copied()
                .filter(|i| self.records[*i].age >= self.cfg.t_forget)
                .max_by(|a, b| {
                    let (ra, rb) = (&self.records[*a], &self.records[*b]);
                    ra.age.cmp(&rb.age).then(rb.seq.cmp(&ra.seq))
                });
            if let Some(victim) = outdated {
                let evicted = self.records.remove(victim);
                self.records.push(record);
                return Ok(AddOutcome::Accepted {
                    evicted: Some(Eviction {
                        record: evicted,
                        rule: EvictionRule::Outdated,
                    }),
                });
            }
        }

        // Long-persisted over-confident: lowest entropy wins, earliest-inserted
        // breaks ties.
        if !self.cfg.disable_overconfident {
            let overconfident = in_dominant
                .iter()
                .copied()
                .filter(|i| {
                    self.records[*i].age >= self.cfg.t_mature && self.is_class_min_entropy(*i)
                })
                .min_by(|a, b| {
                    let (ra, rb) = (&self.records[*a], &self.records[*b]);
                    ra.entropy.total_cmp(&rb.entropy).then(ra.seq.cmp(&rb.seq))
                });
            if let Some(victim) = overconfident {
                let evicted = self.records.remove(victim);
                self.records.push(record);
                return Ok(AddOutcome::Accepted {
                    evicted: Some(Eviction {
                        record: evicted,
                        rule: EvictionRule::OverConfident,
                    }),
                });
            }
        }

        // Uncertainty comparison against the highest-entropy dominant record;
        // earliest-inserted breaks entropy ties.
        if !self.cfg.disable_uncertainty {
            let highest = in_dominant.iter().copied().max_by(|a, b| {
                let (ra, rb) = (&self.records[*a], &self.records[*b]);
                ra.entropy.total_cmp(&rb.entropy).then(rb.seq.cmp(&ra.seq))
            });
            if let Some(victim) = highest {
                if record.entropy < self.records[victim].entropy {
                    let evicted = self.records.remove(victim);
                    self.records.push(record);
                    return Ok(AddOutcome::Accepted {
                        evicted: Some(Eviction {
                            record: evicted,
                            rule: EvictionRule::Uncertainty,
                        }),
                    });
                }
            }
        }

        Ok(AddOutcome::Rejected)
    }

    /// All current records as (sample, inferred label), insertion-stable.
    pub fn snapshot(&self) -> Vec<(S, usize)> {
        self.records
            .iter()
            .map(|r| (r.sample.clone(), r.inferred_label))
            .collect()
    }

    /// Debug dump: one line per record with inferred label, age, and entropy.
    pub fn dump(&self) -> String {
        let mut out = String::from("inferred_label age entropy\n");
        for r in &self.records {
            let _ = writeln!(out, "{} {} {:.6}", r.inferred_label, r.age, r.entropy);
        }
        out
    }
}
