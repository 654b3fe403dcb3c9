//! Non-i.i.d. test-stream construction: datasets, temporal-correlation
//! orderings, and batched streams over a sequence of corruption domains.
//!
//! # Dataset file formats
//!
//! Binary (`.ds`), little-endian throughout:
//!
//! ```text
//! magic     8 bytes  b"RTTADS01"
//! n         u32      sample count
//! c, h, w   u32 x 3  sample shape
//! classes   u32      number of classes
//! samples   n*c*h*w  f32, row-major B x C x H x W
//! labels    n        u32
//! ```
//!
//! CSV (tiny datasets): a header line
//! `# resitta-dataset v1 channels=C height=H width=W num_classes=K`
//! followed by one `label,v0,v1,...` row per sample.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

const DATASET_MAGIC: &[u8; 8] = b"RTTADS01";

/// Mix two seeds into one stream seed (splitmix64 finalizer).
pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A labeled sample stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, _, _, _) = samples.dims4()?;
        if n == 0 {
            return Err(CoreError::EmptyInput("dataset with zero samples".into()));
        }
        if labels.len() != n {
            return Err(CoreError::LengthMismatch {
                context: "dataset labels".into(),
                left: n,
                right: labels.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|l| **l >= num_classes) {
            return Err(CoreError::InvalidConfig(format!(
                "label {} out of range for {} classes",
                bad, num_classes
            )));
        }
        Ok(Dataset {
            samples,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.samples.dims4().expect("validated at construction");
        (c, h, w)
    }

    pub fn write_binary<W: Write>(&self, out: &mut W) -> Result<()> {
        let (n, c, h, w) = self.samples.dims4()?;
        out.write_all(DATASET_MAGIC)?;
        for v in [n, c, h, w, self.num_classes] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in self.samples.data() {
            out.write_all(&v.to_le_bytes())?;
        }
        for l in &self.labels {
            out.write_all(&(*l as u32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(CoreError::Malformed("bad dataset magic".into()));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut u32buf)?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let n = read_u32(input)? as usize;
        let c = read_u32(input)? as usize;
        let h = read_u32(input)? as usize;
        let w = read_u32(input)? as usize;
        let classes = read_u32(input)? as usize;
        let count = n
            .checked_mul(c * h * w)
            .ok_or_else(|| CoreError::Malformed("dataset dimensions overflow".into()))?;
        let mut data = vec![0.0f32; count];
        let mut f32buf = [0u8; 4];
        for v in data.iter_mut() {
            input.read_exact(&mut f32buf)?;
            *v = f32::from_le_bytes(f32buf);
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            input.read_exact(&mut f32buf)?;
            labels.push(u32::from_le_bytes(f32buf) as usize);
        }
        Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_binary(&mut file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_binary(&mut file)
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let (_, c, h, w) = self.samples.dims4()?;
        writeln!(
            out,
            "# resitta-dataset v1 channels={} height={} width={} num_classes={}",
            c, h, w, self.num_classes
        )?;
        let stride = c * h * w;
        for (i, label) in self.labels.iter().enumerate() {
            let row = &self.samples.data()[i * stride..(i + 1) * stride];
            let values: Vec<String> = row.iter().map(|v| format!("{}", v)).collect();
            writeln!(out, "{},{}", label, values.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(input: &mut R) -> Result<Self> {
        let mut text = String::new();
        input.read_to_string(&mut text)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| CoreError::Malformed("empty csv dataset".into()))?;
        let mut dims = BTreeMap::new();
        for token in header.trim_start_matches('#').split_whitespace() {
            if let Some((k, v)) = token.split_once('=') {
                let parsed: usize = v
                    .parse()
                    .map_err(|_| CoreError::Malformed(format!("bad header field {}", token)))?;
                dims.insert(k.to_string(), parsed);
            }
        }
        let get = |k: &str| -> Result<usize> {
            dims.get(k)
                .copied()
                .ok_or_else(|| CoreError::Malformed(format!("csv header missing {}", k)))
        };
        let (c, h, w) = (get("channels")?, get("height")?, get("width")?);
        let classes = get("num_classes")?;
        let stride = c * h * w;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let label: usize = fields
                .next()
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| CoreError::Malformed(format!("bad label on row {}", lineno + 2)))?;
            labels.push(label);
            let before = data.len();
            for f in fields {
                let v: f32 = f.trim().parse().map_err(|_| {
                    CoreError::Malformed(format!("bad value on row {}", lineno + 2))
                })?;
                data.push(v);
            }
            if data.len() - before != stride {
                return Err(CoreError::Malformed(format!(
                    "row {} has {} values, expected {}",
                    lineno + 2,
                    data.len() - before,
                    stride
                )));
            }
        }
        let n = labels.len();
        Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, classes)
    }
}

/// Temporal-correlation mode for ordering a domain's samples.
#[derive(Debug, Clone, PartialEq)]
pub enum Correlation {
    /// Per class, draw slot probabilities from `Dir(delta, ..., delta)` over
    /// `slots` time slots (0 means "as many slots as classes"), assign the
    /// class's samples to slots by those probabilities, shuffle within each
    /// slot, and concatenate the slots.
    Dirichlet { delta: f64, slots: usize },
    /// Sort by label, stable within label.
    LabelSorted,
    /// A plain seeded shuffle.
    Iid,
}

/// Corruption sequence, correlation mode, and batching for one test stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamSpec {
    /// Dataset identifiers, replayed in order.
    pub domain_sequence: Vec<String>,
    pub correlation: Correlation,
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::InvalidConfig("batch size must be positive".into()));
        }
        if self.domain_sequence.is_empty() {
            return Err(CoreError::InvalidConfig("empty domain sequence".into()));
        }
        if let Correlation::Dirichlet { delta, .. } = self.correlation {
            if !(delta > 0.0) {
                return Err(CoreError::InvalidConfig(format!(
                    "dirichlet delta must be positive, got {}",
                    delta
                )));
            }
        }
        Ok(())
    }
}

/// Draw one probability vector from `Dir(delta, ..., delta)` via normalized
/// Gamma(delta, 1) draws.
fn dirichlet_draw(rng: &mut ChaCha8Rng, delta: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(delta, 1.0).expect("delta validated positive");
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum <= 0.0 || !sum.is_finite() {
        // All-underflow fallback; with any reasonable delta this is unreachable.
        return vec![1.0 / k as f64; k];
    }
    for d in draws.iter_mut() {
        *d /= sum;
    }
    draws
}

/// Assign every sample index to one of `slots` time slots: per class, slot
/// probabilities come from one Dirichlet draw; samples then land in slots by
/// independent categorical draws, and each slot is shuffled.
pub fn dirichlet_slot_assignment(
    labels: &[usize],
    num_classes: usize,
    delta: f64,
    slots: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if !(delta > 0.0) {
        return Err(CoreError::InvalidConfig(format!(
            "dirichlet delta must be positive, got {}",
            delta
        )));
    }
    if slots == 0 {
        return Err(CoreError::InvalidConfig("slot count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_probs: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| dirichlet_draw(&mut rng, delta, slots))
        .collect();
    // Cumulative distributions for categorical sampling.
    let class_cdf: Vec<Vec<f64>> = class_probs
        .iter()
        .map(|p| {
            let mut acc = 0.0;
            p.iter()
                .map(|v| {
                    acc += v;
                    acc
                })
                .collect()
        })
        .collect();
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); slots];
    for (i, label) in labels.iter().enumerate() {
        let u: f64 = rng.gen();
        let cdf = &class_cdf[*label];
        let slot = cdf.iter().position(|c| u < *c).unwrap_or(slots - 1);
        buckets[slot].push(i);
    }
    for bucket in buckets.iter_mut() {
        bucket.shuffle(&mut rng);
    }
    Ok(buckets)
}

/// Temporally correlated permutation of the dataset's sample indices.
pub fn dirichlet_order(ds: &Dataset, delta: f64, slots: usize, seed: u64) -> Result<Vec<usize>> {
    let k = if slots == 0 { ds.num_classes } else { slots };
    let buckets = dirichlet_slot_assignment(&ds.labels, ds.num_classes, delta, k, seed)?;
    Ok(buckets.into_iter().flatten().collect())
}

/// Indices sorted by label, stable within each label.
pub fn label_sorted_order(ds: &Dataset) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.sort_by_key(|i| ds.labels[*i]);
    idx
}

/// A plain seeded shuffle of `0..n`.
pub fn iid_order(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx
}

/// Ground-truth labels carried beside a batch for metric computation only.
/// The adapter API never sees this type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalLabels(Vec<usize>);

impl EvalLabels {
    pub fn for_metrics(&self) -> &[usize] {
        &self.0
    }
}

/// One stream batch: inputs for the adapter, labels for the evaluator.
#[derive(Debug, Clone)]
pub struct StreamBatch {
    pub inputs: Tensor,
    pub labels: EvalLabels,
    pub domain_index: usize,
    pub domain_id: String,
}

/// Concatenate the ordered per-domain streams and cut fixed-size batches,
/// dropping each domain's final partial batch.
pub fn build_stream(
    spec: &StreamSpec,
    datasets: &BTreeMap<String, Dataset>,
) -> Result<Vec<StreamBatch>> {
    spec.validate()?;
    for id in &spec.domain_sequence {
        if !datasets.contains_key(id) {
            return Err(CoreError::UnknownDataset(id.clone()));
        }
    }
    let mut batches = Vec::new();
    for (domain_index, id) in spec.domain_sequence.iter().enumerate() {
        let ds = &datasets[id];
        let domain_seed = mix_seed(spec.rng_seed, domain_index as u64 + 1);
        let order = match &spec.correlation {
            Correlation::Dirichlet { delta, slots } => {
                dirichlet_order(ds, *delta, *slots, domain_seed)?
            }
            Correlation::LabelSorted => label_sorted_order(ds),
            Correlation::Iid => iid_order(ds.len(), domain_seed),
        };
        let b = spec.batch_size;
        for chunk in order.chunks(b) {
            if chunk.len() < b {
                break;
            }
            let samples: Vec<Tensor> = chunk
                .iter()
                .map(|i| ds.samples.sample(*i))
                .collect::<Result<_>>()?;
            let labels: Vec<usize> = chunk.iter().map(|i| ds.labels[*i]).collect();
            batches.push(StreamBatch {
                inputs: Tensor::stack(&samples)?,
                labels: EvalLabels(labels),
                domain_index,
                domain_id: id.clone(),
            });
        }
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(labels: Vec<usize>, num_classes: usize) -> Dataset {
        let n = labels.len();
        let data: Vec<f32> = (0..n * 2).map(|v| v as f32).collect();
        Dataset::new(Tensor::new(vec![n, 2, 1, 1], data).unwrap(), labels, num_classes).unwrap()
    }

    fn is_permutation(order: &[usize], n: usize) -> bool {
        let mut seen = vec![false; n];
        for &i in order {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        order.len() == n
    }

    #[test]
    fn label_sorted_examples() {
        let ds = tiny_dataset(vec![0, 1, 2], 3);
        assert_eq!(label_sorted_order(&ds), vec![0, 1, 2]);
        let ds = tiny_dataset(vec![2, 0, 1], 3);
        assert_eq!(label_sorted_order(&ds), vec![1, 2, 0]);
    }

    #[test]
    fn label_sorted_gives_contiguous_runs() {
        let ds = tiny_dataset(vec![1, 0, 2, 1, 0, 2, 1, 0], 3);
        let order = label_sorted_order(&ds);
        let sorted: Vec<usize> = order.iter().map(|i| ds.labels[*i]).collect();
        let mut seen = std::collections::BTreeSet::new();
        let mut prev = None;
        for l in sorted {
            if Some(l) != prev {
                assert!(seen.insert(l), "label {} appears in two runs", l);
                prev = Some(l);
            }
        }
    }

    #[test]
    fn single_slot_dirichlet_is_a_shuffle() {
        let ds = tiny_dataset(vec![0, 1, 2, 0, 1, 2, 0, 1], 3);
        let order = dirichlet_order(&ds, 0.1, 1, 7).unwrap();
        assert!(is_permutation(&order, ds.len()));
    }

    #[test]
    fn orderings_are_permutations_and_reproducible() {
        let labels: Vec<usize> = (0..200).map(|i| i % 5).collect();
        let ds = tiny_dataset(labels, 5);
        for seed in [1u64, 2, 3] {
            let a = dirichlet_order(&ds, 0.1, 0, seed).unwrap();
            let b = dirichlet_order(&ds, 0.1, 0, seed).unwrap();
            assert_eq!(a, b);
            assert!(is_permutation(&a, ds.len()));
            let i = iid_order(ds.len(), seed);
            assert!(is_permutation(&i, ds.len()));
        }
    }

    #[test]
    fn build_stream_batches_and_domain_order() {
        let ds = tiny_dataset((0..128).map(|i| i % 4).collect(), 4);
        let mut datasets = BTreeMap::new();
        datasets.insert("a".to_string(), ds.clone());
        datasets.insert("b".to_string(), ds);
        let spec = StreamSpec {
            domain_sequence: vec!["a".into(), "b".into()],
            correlation: Correlation::Iid,
            batch_size: 64,
            rng_seed: 1,
        };
        let stream = build_stream(&spec, &datasets).unwrap();
        assert_eq!(stream.len(), 4);
        assert!(stream[..2].iter().all(|b| b.domain_id == "a"));
        assert!(stream[2..].iter().all(|b| b.domain_id == "b"));
        // One domain, iid: the two batches together form a permutation.
        let spec_one = StreamSpec {
            domain_sequence: vec!["a".into()],
            ..spec
        };
        let one = build_stream(&spec_one, &datasets).unwrap();
        assert_eq!(one.len(), 2);
        let mut seen: Vec<f32> = one
            .iter()
            .flat_map(|b| {
                (0..64).map(move |i| b.inputs.sample(i).unwrap().data()[0])
            })
            .collect();
        seen.sort_by(f32::total_cmp);
        let expected: Vec<f32> = (0..128).map(|i| (i * 2) as f32).collect();
        assert_eq!(seen, expected);
    }

    #[test]
    fn missing_dataset_rejected_at_build_time() {
        let datasets = BTreeMap::new();
        let spec = StreamSpec {
            domain_sequence: vec!["nope".into()],
            correlation: Correlation::Iid,
            batch_size: 4,
            rng_seed: 1,
        };
        assert!(matches!(
            build_stream(&spec, &datasets),
            Err(CoreError::UnknownDataset(_))
        ));
    }

    #[test]
    fn binary_round_trip() {
        let ds = tiny_dataset(vec![0, 2, 1], 3);
        let mut buf = Vec::new();
        ds.write_binary(&mut buf).unwrap();
        let back = Dataset::read_binary(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn csv_round_trip() {
        let ds = tiny_dataset(vec![1, 0], 2);
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }
}
