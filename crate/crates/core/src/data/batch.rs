use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::Corpus;
use super::vocab::Vocab;
use crate::error::{Error, Result};

/// Assignment of every sample to one of `k` folds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub seed: u64,
    pub k: usize,
    pub assignment: Vec<usize>,
}

/// Seeded shuffle followed by round-robin assignment, so fold sizes differ by at most one.
pub fn make_folds(n_samples: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if k > n_samples {
        return Err(Error::Config(format!(
            "cannot split {n_samples} samples into {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n_samples];
    for (pos, &idx) in order.iter().enumerate() {
        assignment[idx] = pos % k;
    }
    Ok(FoldPlan {
        seed,
        k,
        assignment,
    })
}

impl FoldPlan {
    /// `(train, test)` indices, each ascending, with fold `fold` held out.
    pub fn split(&self, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if fold >= self.k {
            return Err(Error::Index {
                what: "fold",
                index: fold,
                len: self.k,
            });
        }
        let (test, train): (Vec<usize>, Vec<usize>) =
            (0..self.assignment.len()).partition(|&i| self.assignment[i] == fold);
        Ok((train, test))
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSample {
    pub ids: Vec<usize>,
    pub label: u8,
}

/// Encodes tokens with unknown-token fallback, optionally truncating long samples.
pub fn encode_corpus(corpus: &Corpus, vocab: &Vocab, max_len: Option<usize>) -> Vec<EncodedSample> {
    corpus
        .samples
        .iter()
        .map(|s| {
            let mut ids = vocab.encode(&s.tokens);
            if let Some(cap) = max_len {
                ids.truncate(cap.max(1));
            }
            EncodedSample {
                ids,
                label: s.label,
            }
        })
        .collect()
}

/// Samples padded to a common width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }
}

/// Groups samples into batches padded with `pad_id` to their own max length.
/// With `shuffle_seed`, sample order is a seeded permutation; otherwise it is kept.
pub fn batch_and_pad(
    samples: &[EncodedSample],
    batch_size: usize,
    pad_id: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let batches = order
        .chunks(batch_size)
        .map(|chunk| {
            let width = chunk
                .iter()
                .map(|&i| samples[i].ids.len())
                .max()
                .unwrap_or(0);
            let mut batch = Batch {
                ids: Vec::with_capacity(chunk.len()),
                mask: Vec::with_capacity(chunk.len()),
                labels: Vec::with_capacity(chunk.len()),
            };
            for &i in chunk {
                let s = &samples[i];
                let mut ids = s.ids.clone();
                ids.resize(width, pad_id);
                let mut mask = vec![true; s.ids.len()];
                mask.resize(width, false);
                batch.ids.push(ids);
                batch.mask.push(mask);
                batch.labels.push(s.label);
            }
            batch
        })
        .collect();
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(len: usize, label: u8) -> EncodedSample {
        EncodedSample {
            ids: (2..2 + len).collect(),
            label,
        }
    }

    #[test]
    fn ten_into_ten() {
        let plan = make_folds(10, 10, 1).unwrap();
        assert!(plan.fold_sizes().iter().all(|&s| s == 1));
    }

    #[test]
    fn eleven_into_ten() {
        let mut sizes = make_folds(11, 10, 1).unwrap().fold_sizes();
        sizes.sort();
        assert_eq!(sizes, [1, 1, 1, 1, 1, 1, 1, 1, 1, 2]);
    }

    #[test]
    fn fold_errors() {
        assert!(matches!(make_folds(5, 6, 0), Err(Error::Config(_))));
        assert!(matches!(make_folds(5, 1, 0), Err(Error::Config(_))));
        assert!(make_folds(5, 2, 0).unwrap().split(2).is_err());
    }

    #[test]
    fn same_seed_same_plan() {
        assert_eq!(
            make_folds(100, 10, 7).unwrap(),
            make_folds(100, 10, 7).unwrap()
        );
        assert_ne!(
            make_folds(100, 10, 7).unwrap(),
            make_folds(100, 10, 8).unwrap()
        );
    }

    #[test]
    fn padding_layout() {
        let s = [sample(3, 1), sample(5, 0)];
        let b = batch_and_pad(&s, 2, 0, None).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].width(), 5);
        assert_eq!(b[0].ids[0], [2, 3, 4, 0, 0]);
        assert_eq!(b[0].mask[0], [true, true, true, false, false]);
        assert_eq!(b[0].labels, [1, 0]);
    }

    #[test]
    fn batch_size_one_never_pads() {
        let s: Vec<_> = (1..6).map(|l| sample(l, 0)).collect();
        for b in batch_and_pad(&s, 1, 0, Some(3)).unwrap() {
            assert!(b.mask[0].iter().all(|m| *m));
        }
        assert!(batch_and_pad(&s, 0, 0, None).is_err());
    }

    proptest! {
        #[test]
        fn folds_partition(n in 2usize..200, k in 2usize..12, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let plan = make_folds(n, k, seed).unwrap();
            let sizes = plan.fold_sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut covered = vec![0; n];
            for f in 0..k {
                let (train, test) = plan.split(f).unwrap();
                prop_assert_eq!(train.len() + test.len(), n);
                for i in test { covered[i] += 1; }
            }
            prop_assert!(covered.iter().all(|&c| c == 1));
        }

        #[test]
        fn batching_preserves_samples(
            lens in prop::collection::vec(1usize..9, 1..60),
            bs in 1usize..10,
            seed in any::<u64>(),
        ) {
            let s: Vec<_> = lens.iter().enumerate().map(|(i, &l)| sample(l, (i % 2) as u8)).collect();
            let batches = batch_and_pad(&s, bs, 0, Some(seed)).unwrap();
            let total: usize = batches.iter().map(Batch::len).sum();
            prop_assert_eq!(total, s.len());
            let true_tokens: usize = batches.iter()
                .flat_map(|b| b.mask.iter())
                .map(|m| m.iter().filter(|x| **x).count())
                .sum();
            prop_assert_eq!(true_tokens, lens.iter().sum::<usize>());
        }
    }
}
