//! Pretrained word-vector loading and vocabulary alignment.
//!
//! Vector files are UTF-8 text: an optional `<count> <dim>` header, then one
//! line per token holding the token and `dim` decimal floats separated by
//! single spaces. Floats are parsed as decimal literals straight into f64.

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};
use crate::textproc::{TokenizedDoc, Vocabulary, PAD_ID, UNK_ID};
use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

/// Out-of-vocabulary rows are drawn uniform on [-OOV_SCALE, OOV_SCALE),
/// roughly the magnitude of typical pretrained vectors.
pub const OOV_SCALE: f64 = 0.25;

/// A parsed pretrained vector file, not yet aligned to any vocabulary.
#[derive(Debug, Clone)]
pub struct PretrainedVectors {
    dim: usize,
    by_token: HashMap<String, Vec<f64>>,
}

impl PretrainedVectors {
    /// Parse a vector file. When `expected_dim` is given, a file with any
    /// other dimension is rejected.
    pub fn load(path: &Path, expected_dim: Option<usize>) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: format!("cannot open vector file: {e}"),
        })?;
        let reader = BufReader::new(file);
        let path_str = path.display().to_string();

        let mut dim: Option<usize> = None;
        let mut by_token = HashMap::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::Parse {
                path: path_str.clone(),
                line: line_no,
                msg: e.to_string(),
            })?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                return Err(Error::Parse {
                    path: path_str.clone(),
                    line: line_no,
                    msg: "empty line".into(),
                });
            }
            // Header auto-detection: line 1 made of exactly two integers.
            if line_no == 1 && fields.len() == 2 {
                if let (Ok(_count), Ok(d)) =
                    (fields[0].parse::<usize>(), fields[1].parse::<usize>())
                {
                    dim = Some(d);
                    continue;
                }
            }
            let token = fields[0];
            let values: Vec<f64> = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    path: path_str.clone(),
                    line: line_no,
                    msg: format!("bad float: {e}"),
                })?;
            let d = *dim.get_or_insert(values.len());
            if values.len() != d {
                return Err(Error::Parse {
                    path: path_str.clone(),
                    line: line_no,
                    msg: format!(
                        "token `{token}` has {} components, expected {d}",
                        values.len()
                    ),
                });
            }
            by_token.insert(token.to_owned(), values);
        }
        let dim = dim.ok_or_else(|| Error::Parse {
            path: path_str.clone(),
            line: 0,
            msg: "vector file is empty".into(),
        })?;
        if let Some(expected) = expected_dim {
            if expected != dim {
                return Err(Error::DimensionMismatch {
                    expected,
                    found: dim,
                });
            }
        }
        Ok(PretrainedVectors { dim, by_token })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.by_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_token.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.by_token.get(token).map(Vec::as_slice)
    }
}

/// Vocabulary-aligned V×d lookup table.
///
/// Row `PAD_ID` is all zeros and is never updated by training.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub weights: Tensor,
    pub trainable: bool,
    /// Fraction of non-reserved vocabulary rows found in the pretrained file.
    pub coverage: f64,
}

impl EmbeddingMatrix {
    /// Align parsed vectors to a vocabulary. Rows for tokens present in the
    /// file are copied verbatim; missing rows (UNK included) are drawn
    /// uniform on [-0.25, 0.25) in ascending id order, so the result is a
    /// pure function of (file, vocabulary, seed).
    pub fn from_pretrained(
        vectors: &PretrainedVectors,
        vocab: &Vocabulary,
        rng: &mut Rng,
        trainable: bool,
    ) -> Self {
        Self::build(vocab, vectors.dim, rng, trainable, |token| {
            vectors.get(token)
        })
    }

    /// All rows randomly initialized (no pretrained file); coverage is 0.
    pub fn random(vocab: &Vocabulary, dim: usize, rng: &mut Rng, trainable: bool) -> Self {
        Self::build(vocab, dim, rng, trainable, |_| None)
    }

    fn build<'a>(
        vocab: &Vocabulary,
        dim: usize,
        rng: &mut Rng,
        trainable: bool,
        lookup: impl Fn(&str) -> Option<&'a [f64]>,
    ) -> Self {
        let v = vocab.size();
        let mut weights = Tensor::zeros(vec![v, dim]);
        let mut found = 0usize;
        for id in 1..v as u32 {
            // PAD stays zero
            let token = vocab.token_of(id).expect("id within vocab");
            let row = weights.row_mut(id as usize);
            match (id != UNK_ID).then(|| lookup(token)).flatten() {
                Some(vec) => {
                    row.copy_from_slice(vec);
                    found += 1;
                }
                None => {
                    for w in row.iter_mut() {
                        *w = rng.uniform(-OOV_SCALE, OOV_SCALE);
                    }
                }
            }
        }
        let content = v.saturating_sub(2);
        let coverage = if content == 0 {
            0.0
        } else {
            found as f64 / content as f64
        };
        EmbeddingMatrix {
            weights,
            trainable,
            coverage,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Row-gather a document into a max_len×d matrix. PAD positions yield
    /// zero rows.
    pub fn lookup(&self, doc: &TokenizedDoc) -> Result<Tensor> {
        lookup_in(&self.weights, doc)
    }
}

/// Gather rows of `weights` for a document's ids.
pub fn lookup_in(weights: &Tensor, doc: &TokenizedDoc) -> Result<Tensor> {
    let v = weights.shape()[0];
    let d = weights.shape()[1];
    let mut out = Tensor::zeros(vec![doc.ids.len(), d]);
    for (pos, &id) in doc.ids.iter().enumerate() {
        if id as usize >= v {
            return Err(Error::InvalidArgument {
                op: "embedding::lookup",
                msg: format!("id {id} out of range for vocabulary of {v}"),
            });
        }
        out.row_mut(pos).copy_from_slice(weights.row(id as usize));
    }
    Ok(out)
}

/// Accumulate the gradient of a lookup into `grad_weights`: upstream row t
/// flows to the weight row for id t. The PAD row is pinned to zero.
pub fn lookup_backward(grad_weights: &mut Tensor, doc: &TokenizedDoc, upstream: &Tensor) {
    let d = grad_weights.shape()[1];
    debug_assert_eq!(upstream.shape(), &[doc.ids.len(), d]);
    for (pos, &id) in doc.ids.iter().enumerate() {
        if id == PAD_ID {
            continue;
        }
        let src = upstream.row(pos);
        let dst = grad_weights.row_mut(id as usize);
        for (g, u) in dst.iter_mut().zip(src) {
            *g += u;
        }
    }
}

/// `load_embeddings`: parse a vector file and align it to `vocab` in one
/// step. Coverage = found / (V - 2 reserved rows).
pub fn load_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    rng: &mut Rng,
    expected_dim: Option<usize>,
    trainable: bool,
) -> Result<EmbeddingMatrix> {
    let vectors = PretrainedVectors::load(path, expected_dim)?;
    Ok(EmbeddingMatrix::from_pretrained(
        &vectors, vocab, rng, trainable,
    ))
}
