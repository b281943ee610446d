use std::fs;
use std::path::Path;

use rand::Rng;

use super::{Vocab, PAD};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Range of the uniform initializer for words absent from the pretrained file.
pub const MISSING_WORD_INIT: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    /// `|V| x d_w` matrix aligned with the vocabulary.
    pub matrix: Tensor,
    /// Vocabulary entries found in the file.
    pub found: usize,
}

/// Reads a `count dim` headed text embedding file and aligns it with `vocab`.
///
/// Rows of tokens missing from the file are drawn from
/// `uniform[-0.25, 0.25]`; the PAD row is zero.
pub fn load_pretrained_embeddings<R: Rng + ?Sized>(
    path: impl AsRef<Path>,
    vocab: &Vocab,
    d_w: usize,
    rng: &mut R,
) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty embedding file"))?;
    let header: Vec<&str> = header.split_whitespace().collect();
    let (count, dim) = match header.as_slice() {
        [c, d] => (
            c.parse::<usize>()
                .map_err(|_| Error::format(path, format!("bad count `{c}` in header")))?,
            d.parse::<usize>()
                .map_err(|_| Error::format(path, format!("bad dimension `{d}` in header")))?,
        ),
        _ => return Err(Error::format(path, "header must be `count dim`")),
    };
    if dim != d_w {
        return Err(Error::DimensionMismatch {
            expected: d_w,
            found: dim,
        });
    }

    let mut matrix = Tensor::zeros(&[vocab.len(), d_w]);
    for v in matrix.data_mut()[d_w..].iter_mut() {
        *v = rng.random_range(-MISSING_WORD_INIT..=MISSING_WORD_INIT);
    }

    let mut found = 0;
    let mut seen = 0;
    for (lineno, line) in lines {
        seen += 1;
        let mut parts = line.split_whitespace();
        let token = parts.next().unwrap();
        let values: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        if values.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: d_w,
                found: values.len(),
            });
        }
        if let Some(id) = vocab.get(token) {
            if id == PAD {
                continue;
            }
            matrix.data_mut()[id * d_w..(id + 1) * d_w].copy_from_slice(&values);
            found += 1;
        }
    }
    if seen != count {
        return Err(Error::format(
            path,
            format!("header announces {count} vectors, file has {seen}"),
        ));
    }
    Ok(EmbeddingTable { matrix, found })
}
