use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;

use super::tokenize::{decode_lossy, tokenize};
use crate::error::{Error, Result};

/// Supported on-disk dataset layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetFormat {
    /// `rt-polarity.pos` / `rt-polarity.neg`, one review per line.
    Mr,
    /// `quote.tok.gt9.5000` (subjective, label 1) / `plot.tok.gt9.5000` (objective, label 0).
    Subj,
    /// `{train,test}/{pos,neg}/*.txt`, one review per file.
    Imdb,
}

impl DatasetFormat {
    pub fn name(self) -> &'static str {
        match self {
            DatasetFormat::Mr => "mr",
            DatasetFormat::Subj => "subj",
            DatasetFormat::Imdb => "imdb",
        }
    }

    /// The (label 1, label 0) line files for the single-file formats.
    pub fn line_files(self) -> Option<(&'static str, &'static str)> {
        match self {
            DatasetFormat::Mr => Some(("rt-polarity.pos", "rt-polarity.neg")),
            DatasetFormat::Subj => Some(("quote.tok.gt9.5000", "plot.tok.gt9.5000")),
            DatasetFormat::Imdb => None,
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mr" => Ok(DatasetFormat::Mr),
            "subj" => Ok(DatasetFormat::Subj),
            "imdb" => Ok(DatasetFormat::Imdb),
            other => Err(Error::Config(format!(
                "unknown dataset format `{other}` (expected mr|subj|imdb)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<String>,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    pub format: DatasetFormat,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn token_seqs(&self) -> impl Iterator<Item = &[String]> {
        self.samples.iter().map(|s| s.tokens.as_slice())
    }

    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            format: self.format,
        }
    }
}

/// A dataset as found on disk: MR and SUBJ have no predefined test split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Corpus,
    pub test: Option<Corpus>,
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (text, dropped) = decode_lossy(&bytes);
    if dropped {
        warn!("event=undecodable_bytes_dropped path={}", path.display());
    }
    Ok(text)
}

fn push_lines(path: &Path, label: u8, out: &mut Vec<Sample>) -> Result<()> {
    let text = read_text(path)?;
    for (i, line) in text.lines().enumerate() {
        let tokens = tokenize(line);
        if tokens.is_empty() {
            warn!(
                "event=empty_line_skipped path={} line={}",
                path.display(),
                i + 1
            );
            continue;
        }
        out.push(Sample { tokens, label });
    }
    Ok(())
}

fn push_review_dir(dir: &Path, label: u8, out: &mut Vec<Sample>) -> Result<()> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    for path in files {
        let text = read_text(&path)?.replace("<br />", " ");
        let tokens = tokenize(&text);
        if tokens.is_empty() {
            warn!("event=empty_review_skipped path={}", path.display());
            continue;
        }
        out.push(Sample { tokens, label });
    }
    Ok(())
}

fn load_imdb_split(root: &Path, split: &str) -> Result<Corpus> {
    let mut samples = Vec::new();
    push_review_dir(&root.join(split).join("pos"), 1, &mut samples)?;
    push_review_dir(&root.join(split).join("neg"), 0, &mut samples)?;
    Ok(Corpus {
        samples,
        format: DatasetFormat::Imdb,
    })
}

/// Loads a dataset directory in the given layout.
pub fn load_dataset(format: DatasetFormat, root: &Path) -> Result<Dataset> {
    let dataset = match format.line_files() {
        Some((positive, negative)) => {
            let mut samples = Vec::new();
            push_lines(&root.join(positive), 1, &mut samples)?;
            push_lines(&root.join(negative), 0, &mut samples)?;
            Dataset {
                train: Corpus { samples, format },
                test: None,
            }
        }
        None => Dataset {
            train: load_imdb_split(root, "train")?,
            test: Some(load_imdb_split(root, "test")?),
        },
    };
    if dataset.train.is_empty() {
        return Err(Error::Contract(format!(
            "no samples found under {}",
            root.display()
        )));
    }
    Ok(dataset)
}
