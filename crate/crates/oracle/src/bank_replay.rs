//! Naive replay of the memory-bank adding algorithm.
//!
//! Recomputes the dominant classes, the outdated set, and the over-confident
//! set from scratch at every step with plain scans. Used for exact
//! equivalence checks against the engine's bank and for auditing the strict
//! eviction priority.

/// Thresholds and switches mirrored from the engine's bank configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayConfig {
    pub capacity: usize,
    pub t_forget: u64,
    pub t_mature: u64,
    pub num_classes: usize,
    pub disable_outdated: bool,
    pub disable_overconfident: bool,
    pub disable_uncertainty: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayRecord {
    pub id: u64,
    pub label: usize,
    pub age: u64,
    pub entropy: f64,
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayRule {
    Outdated,
    OverConfident,
    Uncertainty,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReplayEvent {
    Inserted {
        evicted: Option<(ReplayRecord, ReplayRule)>,
    },
    Rejected,
}

fn entropy(dist: &[f64]) -> f64 {
    let mut e = 0.0f64;
    for &p in dist {
        e -= p * p.max(1e-12).ln();
    }
    e
}

fn argmax(dist: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, p) in dist.iter().enumerate() {
        if *p > dist[best] {
            best = i;
        }
    }
    best
}

/// Fold a sequence of (sample id, predicted distribution) offers through the
/// adding algorithm, returning the final contents and the per-offer events.
pub fn replay_bank(
    adds: &[(u64, Vec<f64>)],
    cfg: &ReplayConfig,
) -> (Vec<ReplayRecord>, Vec<ReplayEvent>) {
    let mut records: Vec<ReplayRecord> = Vec::new();
    let mut events = Vec::with_capacity(adds.len());
    for (seq, (id, dist)) in adds.iter().enumerate() {
        assert_eq!(dist.len(), cfg.num_classes, "distribution length");
        // Ages increase on every offer, before anything else.
        for r in records.iter_mut() {
            r.age += 1;
        }
        let new = ReplayRecord {
            id: *id,
            label: argmax(dist),
            age: 0,
            entropy: entropy(dist),
            seq: seq as u64,
        };

        if records.len() < cfg.capacity {
            records.push(new);
            events.push(ReplayEvent::Inserted { evicted: None });
            continue;
        }

        // Dominant classes: counts recomputed from scratch.
        let mut counts = vec![0usize; cfg.num_classes];
        for r in &records {
            counts[r.label] += 1;
        }
        let maxc = counts.iter().copied().max().unwrap_or(0);
        let dominant: Vec<usize> = (0..cfg.num_classes).filter(|c| counts[*c] == maxc).collect();
        let is_dominant = |r: &ReplayRecord| dominant.contains(&r.label);

        // Per-class minimum entropy, bank-wide.
        let class_min = |label: usize, recs: &[ReplayRecord]| -> f64 {
            recs.iter()
                .filter(|r| r.label == label)
                .map(|r| r.entropy)
                .fold(f64::INFINITY, f64::min)
        };

        // Outdated: among dominant classes, age at or beyond t_forget;
        // evict the largest age, earliest insertion on ties.
        if !cfg.disable_outdated {
            let mut victim: Option<usize> = None;
            for (i, r) in records.iter().enumerate() {
                if !is_dominant(r) || r.age < cfg.t_forget {
                    continue;
                }
                victim = match victim {
                    None => Some(i),
                    Some(j) => {
                        let best = &records[j];
                        if r.age > best.age || (r.age == best.age && r.seq < best.seq) {
                            Some(i)
                        } else {
                            Some(j)
                        }
                    }
                };
            }
            if let Some(i) = victim {
                let evicted = records.remove(i);
                records.push(new);
                events.push(ReplayEvent::Inserted {
                    evicted: Some((evicted, ReplayRule::Outdated)),
                });
                continue;
            }
        }

        // Long-persisted over-confident: among dominant classes, mature age
        // and entropy equal to the bank-wide class minimum; evict the lowest
        // entropy, earliest insertion on ties.
        if !cfg.disable_overconfident {
            let mut victim: Option<usize> = None;
            for (i, r) in records.iter().enumerate() {
                if !is_dominant(r) || r.age < cfg.t_mature {
                    continue;
                }
                if r.entropy > class_min(r.label, &records) {
                    continue;
                }
                victim = match victim {
                    None => Some(i),
                    Some(j) => {
                        let best = &records[j];
                        if r.entropy < best.entropy
                            || (r.entropy == best.entropy && r.seq < best.seq)
                        {
                            Some(i)
                        } else {
                            Some(j)
                        }
                    }
                };
            }
            if let Some(i) = victim {
                let evicted = records.remove(i);
                records.push(new);
                events.push(ReplayEvent::Inserted {
                    evicted: Some((evicted, ReplayRule::OverConfident)),
                });
                continue;
            }
        }

        // Uncertainty: compare against the highest-entropy dominant record,
        // earliest insertion on ties.
        if !cfg.disable_uncertainty {
            let mut victim: Option<usize> = None;
            for (i, r) in records.iter().enumerate() {
                if !is_dominant(r) {
                    continue;
                }
                victim = match victim {
                    None => Some(i),
                    Some(j) => {
                        let best = &records[j];
                        if r.entropy > best.entropy
                            || (r.entropy == best.entropy && r.seq < best.seq)
                        {
                            Some(i)
                        } else {
                            Some(j)
                        }
                    }
                };
            }
            if let Some(i) = victim {
                if new.entropy < records[i].entropy {
                    let evicted = records.remove(i);
                    records.push(new);
                    events.push(ReplayEvent::Inserted {
                        evicted: Some((evicted, ReplayRule::Uncertainty)),
                    });
                    continue;
                }
            }
        }

        events.push(ReplayEvent::Rejected);
    }
    (records, events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(capacity: usize) -> ReplayConfig {
        ReplayConfig {
            capacity,
            t_forget: 1000,
            t_mature: 200,
            num_classes: 3,
            disable_outdated: false,
            disable_overconfident: false,
            disable_uncertainty: false,
        }
    }

    #[test]
    fn empty_sequence_empty_bank() {
        let (records, events) = replay_bank(&[], &cfg(4));
        assert!(records.is_empty());
        assert!(events.is_empty());
    }

    #[test]
    fn short_sequence_all_retained() {
        let adds: Vec<(u64, Vec<f64>)> = (0..3)
            .map(|i| (i, vec![0.8, 0.1, 0.1]))
            .collect();
        let (records, _) = replay_bank(&adds, &cfg(4));
        assert_eq!(records.len(), 3);
        assert_eq!(records[0].age, 2);
        assert_eq!(records[2].age, 0);
    }
}
