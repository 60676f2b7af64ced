//! Deterministic synthetic sequence-to-sequence corpora and batching.

use std::collections::HashSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transformer::TokenBatch;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
/// Number of reserved ids below the first marker / content token.
pub const RESERVED: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Copy,
    Reverse,
    Sort,
    MappedReverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
    MappedReverse,
    Mixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub transform: Transform,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Total vocabulary including reserved ids and mixture markers.
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Mixture components; ignored for single-transform tasks.
    pub components: Vec<MixtureComponent>,
    pub seed: u64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Copy,
            vocab: 16,
            min_len: 2,
            max_len: 6,
            components: Vec::new(),
            seed: 0,
            train: 1000,
            dev: 100,
            test: 100,
        }
    }
}

impl TaskSpec {
    fn transforms(&self) -> Vec<(Transform, f64)> {
        match self.kind {
            TaskKind::Copy => vec![(Transform::Copy, 1.0)],
            TaskKind::Reverse => vec![(Transform::Reverse, 1.0)],
            TaskKind::Sort => vec![(Transform::Sort, 1.0)],
            TaskKind::MappedReverse => vec![(Transform::MappedReverse, 1.0)],
            TaskKind::Mixture => self.components.iter().map(|c| (c.transform, c.weight)).collect(),
        }
    }

    /// Marker tokens prefixed to mixture sources.
    pub fn markers(&self) -> usize {
        match self.kind {
            TaskKind::Mixture => self.components.len(),
            _ => 0,
        }
    }

    pub fn first_content(&self) -> usize {
        RESERVED + self.markers()
    }

    /// Longest source sequence the task can produce.
    pub fn max_src_len(&self) -> usize {
        self.max_len + usize::from(self.markers() > 0)
    }

    /// Longest decoder input (`BOS` + target).
    pub fn max_tgt_len(&self) -> usize {
        self.max_len + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < RESERVED {
            return Err(Error::Task(format!("vocab {} leaves no room for reserved ids", self.vocab)));
        }
        if self.vocab <= self.first_content() {
            return Err(Error::Task(format!(
                "vocab {} leaves no content tokens after {} reserved and marker ids",
                self.vocab,
                self.first_content()
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Task(format!("invalid length range [{}, {}]", self.min_len, self.max_len)));
        }
        if self.kind == TaskKind::Mixture {
            if self.components.is_empty() {
                return Err(Error::Task("mixture task without components".into()));
            }
            if self.components.iter().any(|c| !(c.weight > 0.0) || !c.weight.is_finite()) {
                return Err(Error::Task("mixture weights must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instance {
    pub src: Vec<usize>,
    /// Target tokens without `BOS` / `EOS`.
    pub tgt: Vec<usize>,
    /// Mixture component index (0 for single-transform tasks).
    pub component: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub train: Vec<Instance>,
    pub dev: Vec<Instance>,
    pub test: Vec<Instance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Instance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Fixed random bijection over content ids used by mapped-reverse.
pub fn content_mapping(spec: &TaskSpec) -> Vec<usize> {
    let first = spec.first_content();
    let mut ids: Vec<usize> = (first..spec.vocab).collect();
    let mut rng = stream(spec.seed, 3);
    ids.shuffle(&mut rng);
    let mut map: Vec<usize> = (0..spec.vocab).collect();
    for (i, id) in ids.into_iter().enumerate() {
        map[first + i] = id;
    }
    map
}

pub fn apply_transform(transform: Transform, content: &[usize], mapping: &[usize]) -> Vec<usize> {
    match transform {
        Transform::Copy => content.to_vec(),
        Transform::Reverse => content.iter().rev().copied().collect(),
        Transform::Sort => {
            let mut v = content.to_vec();
            v.sort_unstable();
            v
        }
        Transform::MappedReverse => content.iter().rev().map(|&t| mapping[t]).collect(),
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Builds train / dev / test splits from independent random streams. A
/// source never appears in more than one split.
pub fn generate_corpus(spec: &TaskSpec) -> Result<Corpus> {
    spec.validate()?;
    let transforms = spec.transforms();
    let weights = WeightedIndex::new(transforms.iter().map(|t| t.1))
        .map_err(|e| Error::Task(format!("mixture weights: {e}")))?;
    let mapping = content_mapping(spec);
    let mixture = spec.kind == TaskKind::Mixture;
    let first = spec.first_content();

    let mut seen = HashSet::new();
    let mut splits = Vec::with_capacity(3);
    for (id, count) in [spec.train, spec.dev, spec.test].into_iter().enumerate() {
        let mut rng = stream(spec.seed, id as u64);
        let mut out = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while out.len() < count {
            attempts += 1;
            if attempts > 100 * count + 1000 {
                return Err(Error::Task(format!(
                    "could not draw {count} distinct instances; enlarge vocab or lengths"
                )));
            }
            let component = weights.sample(&mut rng);
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let content: Vec<usize> = (0..len).map(|_| rng.gen_range(first..spec.vocab)).collect();
            let tgt = apply_transform(transforms[component].0, &content, &mapping);
            let mut src = Vec::with_capacity(len + 1);
            if mixture {
                src.push(RESERVED + component);
            }
            src.extend_from_slice(&content);
            if !seen.insert(src.clone()) {
                continue;
            }
            out.push(Instance { src, tgt, component });
        }
        splits.push(out);
    }
    let test = splits.pop().unwrap_or_default();
    let dev = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    Ok(Corpus { train, dev, test })
}

/// Padded model inputs for a group of instances.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub src: TokenBatch,
    /// `BOS` followed by the target.
    pub tgt_in: TokenBatch,
    /// The target followed by `EOS`, padded like `tgt_in`.
    pub tgt_out: Vec<usize>,
}

impl Batch {
    pub fn new(instances: &[&Instance]) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::EmptyBatch("batch"));
        }
        let srcs: Vec<&[usize]> = instances.iter().map(|i| i.src.as_slice()).collect();
        let src = TokenBatch::from_rows(&srcs, PAD)?;
        let t = instances.iter().map(|i| i.tgt.len() + 1).max().unwrap_or(1);
        let mut tgt_in = Vec::with_capacity(instances.len() * t);
        let mut tgt_out = Vec::with_capacity(instances.len() * t);
        for inst in instances {
            let mut row_in = vec![BOS];
            row_in.extend_from_slice(&inst.tgt);
            let mut row_out = inst.tgt.clone();
            row_out.push(EOS);
            row_in.resize(t, PAD);
            row_out.resize(t, PAD);
            tgt_in.extend(row_in);
            tgt_out.extend(row_out);
        }
        Ok(Self {
            src,
            tgt_in: TokenBatch::new(tgt_in, instances.len(), t, PAD)?,
            tgt_out,
        })
    }

    pub fn size(&self) -> usize {
        self.src.batch
    }
}

/// Shuffled index chunks covering `0..n` once.
pub fn epoch_batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Consecutive index chunks (evaluation order).
pub fn sequential_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixture() -> TaskSpec {
        TaskSpec {
            kind: TaskKind::Mixture,
            vocab: 20,
            components: vec![
                MixtureComponent {
                    transform: Transform::Copy,
                    weight: 1.0,
                },
                MixtureComponent {
                    transform: Transform::MappedReverse,
                    weight: 1.0,
                },
            ],
            train: 200,
            dev: 50,
            test: 50,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn transform_examples() {
        let id: Vec<usize> = (0..12).collect();
        assert_eq!(apply_transform(Transform::Copy, &[5, 7, 9], &id), vec![5, 7, 9]);
        assert_eq!(apply_transform(Transform::Reverse, &[5, 7, 9], &id), vec![9, 7, 5]);
        assert_eq!(apply_transform(Transform::Sort, &[9, 5, 7, 5], &id), vec![5, 5, 7, 9]);
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = mixture();
        assert_eq!(generate_corpus(&spec).unwrap(), generate_corpus(&spec).unwrap());
        let other = TaskSpec { seed: 1, ..mixture() };
        assert_ne!(generate_corpus(&spec).unwrap().train, generate_corpus(&other).unwrap().train);
    }

    #[test]
    fn splits_are_disjoint_and_targets_derivable() {
        let spec = mixture();
        let corpus = generate_corpus(&spec).unwrap();
        let mapping = content_mapping(&spec);
        let mut seen = HashSet::new();
        for split in [Split::Train, Split::Dev, Split::Test] {
            for inst in corpus.split(split) {
                assert!(seen.insert(inst.src.clone()));
                assert_eq!(inst.src[0], RESERVED + inst.component);
                let transform = spec.components[inst.component].transform;
                assert_eq!(inst.tgt, apply_transform(transform, &inst.src[1..], &mapping));
                assert!(inst.src[1..].iter().all(|&t| t >= spec.first_content() && t < spec.vocab));
            }
        }
        assert_eq!(corpus.train.len(), 200);
        assert_eq!(corpus.dev.len(), 50);
    }

    #[test]
    fn mapping_is_a_bijection_on_content() {
        let spec = mixture();
        let map = content_mapping(&spec);
        let mut content: Vec<usize> = map[spec.first_content()..].to_vec();
        content.sort_unstable();
        assert_eq!(content, (spec.first_content()..spec.vocab).collect::<Vec<_>>());
        assert_eq!(&map[..spec.first_content()], &(0..spec.first_content()).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for spec in [
            TaskSpec { vocab: 3, ..TaskSpec::default() },
            TaskSpec { vocab: 4, ..TaskSpec::default() },
            TaskSpec { min_len: 0, ..TaskSpec::default() },
            TaskSpec { min_len: 5, max_len: 4, ..TaskSpec::default() },
            TaskSpec { kind: TaskKind::Mixture, ..TaskSpec::default() },
        ] {
            assert!(matches!(generate_corpus(&spec), Err(Error::Task(_))), "{spec:?}");
        }
        let tiny = TaskSpec {
            vocab: 5,
            min_len: 1,
            max_len: 1,
            train: 5,
            ..TaskSpec::default()
        };
        assert!(matches!(generate_corpus(&tiny), Err(Error::Task(_))));
    }

    #[test]
    fn batch_shifts_targets() {
        let a = Instance {
            src: vec![5, 7, 9],
            tgt: vec![9, 7, 5],
            component: 0,
        };
        let b = Instance {
            src: vec![6],
            tgt: vec![6],
            component: 0,
        };
        let batch = Batch::new(&[&a, &b]).unwrap();
        assert_eq!(batch.src.ids, vec![5, 7, 9, 6, PAD, PAD]);
        assert_eq!(batch.tgt_in.ids, vec![BOS, 9, 7, 5, BOS, 6, PAD, PAD]);
        assert_eq!(batch.tgt_out, vec![9, 7, 5, EOS, 6, EOS, PAD, PAD]);
        assert!(Batch::new(&[]).is_err());
    }

    #[test]
    fn epoch_batches_cover_everything_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut all: Vec<usize> = epoch_batches(23, 5, &mut rng).concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
    }
}
