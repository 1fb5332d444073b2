//! Toy sequence datasets with a general domain and a shifted target domain.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::params::{Mode, ModelDims};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Sequence {
    Tokens(Vec<usize>),
    /// `K×m`, one patch per row.
    Patches(DMatrix<f64>),
}

impl Sequence {
    pub fn len(&self) -> usize {
        match self {
            Sequence::Tokens(t) => t.len(),
            Sequence::Patches(p) => p.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode(&self) -> Mode {
        match self {
            Sequence::Tokens(_) => Mode::Token,
            Sequence::Patches(_) => Mode::Patch,
        }
    }
}

/// Sequences with class labels. The unlabeled view used for pre-training is
/// [`Self::sequences`] itself, so both views index the same items.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySequenceDataset {
    pub dims: ModelDims,
    pub sequences: Vec<Sequence>,
    pub labels: Vec<usize>,
}

impl ToySequenceDataset {
    pub fn new(dims: ModelDims, sequences: Vec<Sequence>, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != sequences.len() {
            return Err(Error::DimensionMismatch {
                what: "labels",
                expected: sequences.len(),
                found: labels.len(),
            });
        }
        if dims.seq_len < 2 {
            return Err(Error::Domain("sequence length must be >= 2".into()));
        }
        for seq in &sequences {
            if seq.mode() != dims.mode {
                return Err(Error::ModeMismatch);
            }
            if seq.len() != dims.seq_len {
                return Err(Error::DimensionMismatch {
                    what: "sequence length",
                    expected: dims.seq_len,
                    found: seq.len(),
                });
            }
            match seq {
                Sequence::Tokens(t) if t.iter().any(|&v| v >= dims.vocab) => {
                    return Err(Error::Domain("token id out of range".into()));
                }
                Sequence::Patches(p) if p.ncols() != dims.patch_dim => {
                    return Err(Error::DimensionMismatch {
                        what: "patch dimension",
                        expected: dims.patch_dim,
                        found: p.ncols(),
                    });
                }
                _ => {}
            }
        }
        if labels.iter().any(|&c| c >= dims.classes) {
            return Err(Error::Domain("label out of range".into()));
        }
        Ok(Self {
            dims,
            sequences,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn unlabeled(&self) -> &[Sequence] {
        &self.sequences
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.dims.classes];
        for &c in &self.labels {
            counts[c] += 1;
        }
        counts
    }

    /// Label-stratified subsample of size `n`: classes are visited round-robin
    /// in a shuffled order, so class counts differ by at most one when the
    /// source has enough items per class.
    pub fn stratified_subsample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Self> {
        let classes = self.dims.classes;
        if n < classes {
            return Err(Error::SubsampleTooSmall { n, classes });
        }
        if n >= self.len() {
            return Ok(self.clone());
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
        for (i, &c) in self.labels.iter().enumerate() {
            by_class[c].push(i);
        }
        for bucket in &mut by_class {
            bucket.shuffle(rng);
        }
        let mut order: Vec<usize> = (0..classes).collect();
        order.shuffle(rng);
        let mut picked = Vec::with_capacity(n);
        let mut depth = 0;
        while picked.len() < n {
            let mut progressed = false;
            for &c in &order {
                if picked.len() == n {
                    break;
                }
                if let Some(&i) = by_class[c].get(depth) {
                    picked.push(i);
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
            depth += 1;
        }
        picked.sort_unstable();
        Ok(Self {
            dims: self.dims,
            sequences: picked.iter().map(|&i| self.sequences[i].clone()).collect(),
            labels: picked.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

/// Knobs of the toy task generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyTaskConfig {
    pub dims: ModelDims,
    pub n_train: usize,
    pub n_test: usize,
    pub n_general: usize,
    /// Number of general-domain topics.
    pub general_topics: usize,
    /// Sharpness of the topic token distributions (token mode).
    pub topic_sharpness: f64,
    /// Per-entry noise of a patch around its class mean (patch mode).
    pub patch_noise: f64,
    pub seed: u64,
}

impl ToyTaskConfig {
    pub fn new(dims: ModelDims, seed: u64) -> Self {
        Self {
            dims,
            n_train: 32,
            n_test: 256,
            n_general: 256,
            general_topics: 6,
            topic_sharpness: 1.5,
            patch_noise: 1.0,
            seed,
        }
    }
}

/// A target task (train/test with labels) and a general-domain pool.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub train: ToySequenceDataset,
    pub test: ToySequenceDataset,
    /// Unlabeled general-domain sequences for building `θ_init`.
    pub general: Vec<Sequence>,
}

struct TopicSampler {
    topics: Vec<WeightedIndex<f64>>,
}

impl TopicSampler {
    fn random<R: Rng + ?Sized>(count: usize, vocab: usize, sharpness: f64, rng: &mut R) -> Self {
        let topics = (0..count)
            .map(|_| {
                let weights: Vec<f64> = (0..vocab)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        (sharpness * z).exp()
                    })
                    .collect();
                WeightedIndex::new(weights).expect("positive weights")
            })
            .collect();
        Self { topics }
    }

    fn sequence<R: Rng + ?Sized>(&self, topic: usize, len: usize, rng: &mut R) -> Sequence {
        Sequence::Tokens((0..len).map(|_| self.topics[topic].sample(rng)).collect())
    }
}

struct PatchSampler {
    means: Vec<DVector<f64>>,
    noise: f64,
}

impl PatchSampler {
    fn random<R: Rng + ?Sized>(count: usize, dim: usize, noise: f64, rng: &mut R) -> Self {
        let means = (0..count)
            .map(|_| DVector::from_fn(dim, |_, _| StandardNormal.sample(rng)))
            .collect();
        Self { means, noise }
    }

    fn sequence<R: Rng + ?Sized>(&self, topic: usize, len: usize, rng: &mut R) -> Sequence {
        let mean = &self.means[topic];
        Sequence::Patches(DMatrix::from_fn(len, mean.len(), |_, j| {
            let z: f64 = StandardNormal.sample(rng);
            mean[j] + self.noise * z
        }))
    }
}

type SequenceSampler = dyn Fn(usize, &mut ChaCha8Rng) -> Sequence;

impl ToyTask {
    /// Target classes and general topics are drawn independently, which makes
    /// the general domain a shifted version of the target domain. Train and
    /// test labels are balanced round-robin.
    pub fn generate(config: &ToyTaskConfig) -> Result<Self> {
        let dims = config.dims;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let k = dims.seq_len;
        let sample: Box<SequenceSampler> = match dims.mode {
            Mode::Token => {
                let target = TopicSampler::random(
                    dims.classes,
                    dims.vocab,
                    config.topic_sharpness,
                    &mut rng,
                );
                let general = TopicSampler::random(
                    config.general_topics,
                    dims.vocab,
                    config.topic_sharpness,
                    &mut rng,
                );
                let classes = dims.classes;
                Box::new(move |topic, rng| {
                    if topic < classes {
                        target.sequence(topic, k, rng)
                    } else {
                        general.sequence(topic - classes, k, rng)
                    }
                })
            }
            Mode::Patch => {
                let target = PatchSampler::random(
                    dims.classes,
                    dims.patch_dim,
                    config.patch_noise,
                    &mut rng,
                );
                let general = PatchSampler::random(
                    config.general_topics,
                    dims.patch_dim,
                    config.patch_noise,
                    &mut rng,
                );
                let classes = dims.classes;
                Box::new(move |topic, rng| {
                    if topic < classes {
                        target.sequence(topic, k, rng)
                    } else {
                        general.sequence(topic - classes, k, rng)
                    }
                })
            }
        };
        let labeled = |count: usize, rng: &mut ChaCha8Rng| -> Result<ToySequenceDataset> {
            let labels: Vec<usize> = (0..count).map(|i| i % dims.classes).collect();
            let sequences = labels.iter().map(|&c| sample(c, rng)).collect();
            ToySequenceDataset::new(dims, sequences, labels)
        };
        let train = labeled(config.n_train, &mut rng)?;
        let test = labeled(config.n_test, &mut rng)?;
        let general = (0..config.n_general)
            .map(|i| sample(dims.classes + i % config.general_topics.max(1), &mut rng))
            .collect();
        Ok(Self {
            train,
            test,
            general,
        })
    }
}
