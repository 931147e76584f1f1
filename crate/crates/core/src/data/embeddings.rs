use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;

use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::layers::{EmbeddingTable, PAD_ID, UNK_ID};

#[derive(Clone, Debug)]
pub struct PretrainedLoad {
    pub table: EmbeddingTable,
    /// Non-special vocabulary tokens found in the file.
    pub found: usize,
    /// `found` over the number of non-special vocabulary tokens.
    pub coverage: f64,
}

/// Reads a whitespace-separated text embedding file (`token v1 … vd` per line)
/// into a table for `vocab`. Rows missing from the file, and the padding and
/// unknown rows, are drawn from `uniform(-0.05, 0.05)`.
///
/// Tokens that themselves contain spaces are accepted as long as every extra
/// leading field fails to parse as a number.
pub fn load_pretrained_embeddings<R: Rng + ?Sized>(
    path: &Path,
    vocab: &Vocab,
    dim: usize,
    rng: &mut R,
) -> Result<PretrainedLoad> {
    if dim == 0 {
        return Err(Error::Config("embedding dimension must be positive".into()));
    }
    let mut table = EmbeddingTable::random(vocab.len(), dim, rng);
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut buf = Vec::new();
    let mut filled = HashSet::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let read = reader
            .read_until(b'\n', &mut buf)
            .map_err(|e| Error::io(path, e))?;
        if read == 0 {
            break;
        }
        line_no += 1;
        let line = String::from_utf8_lossy(&buf);
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        if fields.len() < dim + 1 {
            return Err(parse_err(format!(
                "expected {dim} values after the token, found {}",
                fields.len() - 1
            )));
        }
        let extra = fields.len() - (dim + 1);
        if fields[1..=extra].iter().any(|f| f.parse::<f64>().is_ok()) {
            return Err(parse_err(format!(
                "expected {dim} values after the token, found {}",
                fields.len() - 1
            )));
        }
        let token = fields[..=extra].join(" ");
        let Some(id) = vocab.get(&token) else {
            continue;
        };
        if id == PAD_ID || id == UNK_ID || !filled.insert(id) {
            continue;
        }
        let row = &mut table.weights.data_mut()[id * dim..(id + 1) * dim];
        for (slot, field) in row.iter_mut().zip(&fields[extra + 1..]) {
            *slot = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(format!("invalid number `{field}`")))?;
        }
    }
    let candidates = vocab.len().saturating_sub(2);
    let found = filled.len();
    Ok(PretrainedLoad {
        table,
        found,
        coverage: if candidates == 0 {
            0.0
        } else {
            found as f64 / candidates as f64
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::fs;

    fn vocab() -> Vocab {
        let seq = [vec!["a", "b", "c", "d"]];
        Vocab::build(seq.iter().map(Vec::as_slice), None).unwrap()
    }

    #[test]
    fn partial_coverage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.txt");
        fs::write(&p, "b 1 2\nzz 9 9\nd 3 4\n").unwrap();
        let v = vocab();
        let load =
            load_pretrained_embeddings(&p, &v, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(load.found, 2);
        assert_eq!(load.coverage, 0.5);
        let w = &load.table.weights;
        assert_eq!(w.row(v.id("b")), &[1.0, 2.0]);
        assert_eq!(w.row(v.id("d")), &[3.0, 4.0]);
        assert!(w.row(v.id("a")).iter().all(|x| x.abs() < 0.05));
        assert!(load.table.trainable);
    }

    #[test]
    fn full_coverage_and_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("full.txt");
        fs::write(&full, "a 1 1\nb 2 2\nc 3 3\nd 4 4\n").unwrap();
        let v = vocab();
        let load =
            load_pretrained_embeddings(&full, &v, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(load.coverage, 1.0);

        let empty = dir.path().join("empty.txt");
        fs::write(&empty, "").unwrap();
        let load =
            load_pretrained_embeddings(&empty, &v, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(load.found, 0);
        assert_eq!(load.table.weights.shape(), &[6, 2]);
    }

    #[test]
    fn dimension_mismatch_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        fs::write(&p, "a 1 1\nb 2 2 2\n").unwrap();
        let err = load_pretrained_embeddings(&p, &vocab(), 2, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn multi_word_tokens_are_tolerated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("glove.txt");
        fs::write(&p, ". . . 0.5 0.5\na 1 2\n").unwrap();
        let load =
            load_pretrained_embeddings(&p, &vocab(), 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(load.found, 1);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_pretrained_embeddings(
            Path::new("/nonexistent/emb.txt"),
            &vocab(),
            2,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
