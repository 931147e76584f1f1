//! Seeded surrogate corpora in the MR/SUBJ line-file layout, for runs where the
//! real datasets are not on disk.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::{DatasetFormat, Sample};
use crate::error::{Error, Result};

const POSITIVE: &[&str] = &[
    "good", "great", "fine", "moving", "clever", "funny", "charming", "smart", "warm", "fresh",
    "superb", "engaging", "lovely", "vivid", "solid", "gripping",
];
const NEGATIVE: &[&str] = &[
    "bad", "dull", "boring", "weak", "flat", "silly", "tedious", "stale", "awful", "messy",
    "bland", "clumsy", "lame", "shallow", "tired", "hollow",
];
const NEGATORS: &[&str] = &["not", "never", "hardly"];
const FILLER: &[&str] = &[
    "the",
    "film",
    "movie",
    "story",
    "is",
    "a",
    "and",
    "it",
    "of",
    "cast",
    "plot",
    "this",
    "that",
    "with",
    "its",
    "script",
    "director",
    "scenes",
    "feels",
    "seems",
    "quite",
    "rather",
    "at",
    "times",
    "ending",
    "performance",
    "in",
    "one",
    "so",
    "really",
    ",",
    ".",
];

#[derive(Clone, Copy, Debug)]
pub struct SyntheticSpec {
    pub per_class: usize,
    pub seed: u64,
    /// Probability that a sentiment word is preceded by a negator, which flips it.
    pub negation_rate: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            per_class: 500,
            seed: 0,
            negation_rate: 0.3,
            min_len: 6,
            max_len: 18,
        }
    }
}

/// Sentences whose label is the sign of the summed (possibly negated) polarity
/// of their sentiment words. Classes are balanced and ties never occur.
pub fn generate_polarity(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    if spec.min_len < 3 || spec.max_len < spec.min_len {
        return Err(Error::Config(format!(
            "synthetic lengths must satisfy 3 <= min <= max, got {}..{}",
            spec.min_len, spec.max_len
        )));
    }
    if !(0.0..=1.0).contains(&spec.negation_rate) {
        return Err(Error::Config("negation rate must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(2 * spec.per_class);
    for label in [1u8, 0] {
        let mut made = 0;
        while made < spec.per_class {
            let (tokens, polarity) = sentence(spec, &mut rng);
            if polarity != 0 && (polarity > 0) == (label == 1) {
                out.push(Sample { tokens, label });
                made += 1;
            }
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

fn sentence(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (Vec<String>, i32) {
    let len = rng.gen_range(spec.min_len..=spec.max_len);
    let mut tokens: Vec<String> = (0..len)
        .map(|_| FILLER.choose(rng).expect("non-empty").to_string())
        .collect();
    let cues = rng.gen_range(1..=3.min(len / 2));
    for _ in 0..cues {
        let lexicon = if rng.gen_bool(0.5) {
            POSITIVE
        } else {
            NEGATIVE
        };
        let pos = rng.gen_range(1..len);
        tokens[pos] = lexicon.choose(rng).expect("non-empty").to_string();
        if rng.gen_bool(spec.negation_rate) {
            tokens[pos - 1] = NEGATORS.choose(rng).expect("non-empty").to_string();
        }
    }
    // Cues may overwrite one another, so polarity is read off the final tokens.
    let polarity = recount(&tokens);
    (tokens, polarity)
}

fn recount(tokens: &[String]) -> i32 {
    let mut total = 0;
    for (i, t) in tokens.iter().enumerate() {
        let sign = if POSITIVE.contains(&t.as_str()) {
            1
        } else if NEGATIVE.contains(&t.as_str()) {
            -1
        } else {
            continue;
        };
        let negated = i > 0 && NEGATORS.contains(&tokens[i - 1].as_str());
        total += if negated { -sign } else { sign };
    }
    total
}

/// Writes samples into the two line files of `format`, which must be MR or SUBJ.
pub fn write_line_corpus(format: DatasetFormat, dir: &Path, samples: &[Sample]) -> Result<()> {
    let (pos_name, neg_name) = format
        .line_files()
        .ok_or_else(|| Error::Config(format!("{format} is not a line-file format")))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, label) in [(pos_name, 1u8), (neg_name, 0)] {
        let text: String = samples
            .iter()
            .filter(|s| s.label == label)
            .map(|s| s.tokens.join(" ") + "\n")
            .collect();
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::load_dataset;

    #[test]
    fn balanced_and_consistent() {
        let spec = SyntheticSpec {
            per_class: 50,
            ..Default::default()
        };
        let samples = generate_polarity(&spec).unwrap();
        assert_eq!(samples.len(), 100);
        assert_eq!(samples.iter().filter(|s| s.label == 1).count(), 50);
        for s in &samples {
            let p = recount(&s.tokens);
            assert_ne!(p, 0);
            assert_eq!(p > 0, s.label == 1);
        }
    }

    #[test]
    fn seeded() {
        let spec = SyntheticSpec {
            per_class: 10,
            seed: 4,
            ..Default::default()
        };
        assert_eq!(
            generate_polarity(&spec).unwrap(),
            generate_polarity(&spec).unwrap()
        );
    }

    #[test]
    fn round_trips_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            per_class: 20,
            ..Default::default()
        };
        let samples = generate_polarity(&spec).unwrap();
        write_line_corpus(DatasetFormat::Subj, dir.path(), &samples).unwrap();
        let ds = load_dataset(DatasetFormat::Subj, dir.path()).unwrap();
        assert_eq!(ds.train.len(), 40);
        assert!(write_line_corpus(DatasetFormat::Imdb, dir.path(), &samples).is_err());
    }
}
