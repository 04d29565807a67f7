//! Prompt embeddings.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::splitmix64;
use crate::scalar::Scalar;
use crate::workload::{Request, RequestId};

/// Unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> EmbeddingVector<T> {
    /// Normalizes `values` to unit L2 norm.
    pub fn normalized(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("embedding values"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("embedding has non-finite values".into()));
        }
        let norm = values.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm <= T::zero() {
            return Err(Error::InvalidParameter("embedding has zero norm".into()));
        }
        Ok(EmbeddingVector {
            values: values.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> T {
        self.values.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Cosine similarity; both sides are unit-norm so this is a dot product.
    pub fn cosine(&self, other: &Self) -> T {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a * b)
            .sum()
    }
}

/// Source of request embeddings.
pub trait EmbeddingProvider<T: Scalar>: Send + Sync {
    fn dimension(&self) -> usize;

    fn embed_request(&self, request: &Request) -> Result<EmbeddingVector<T>>;

    /// Rough work units spent per request, used for modeled latency.
    fn cost_ops(&self, request: &Request) -> u64;
}

/// Signed feature hashing of token unigrams and bigrams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("embedding dimension must be >= 1".into()));
        }
        Ok(HashingEmbedder { dim })
    }

    pub fn embed<T: Scalar>(&self, tokens: &[u32]) -> Result<EmbeddingVector<T>> {
        if tokens.is_empty() {
            return Err(Error::Empty("prompt tokens"));
        }
        let mut acc = vec![0i64; self.dim];
        let mut add = |h: u64| {
            let bucket = (h % self.dim as u64) as usize;
            acc[bucket] += if h >> 63 == 0 { 1 } else { -1 };
        };
        for &t in tokens {
            add(splitmix64(0x5EED_0001 ^ ((t as u64) << 8)));
        }
        for w in tokens.windows(2) {
            add(splitmix64(
                0x5EED_0002 ^ ((w[0] as u64) << 32) ^ (w[1] as u64).rotate_left(7),
            ));
        }
        // 2n-1 signed unit features never cancel completely.
        EmbeddingVector::normalized(acc.into_iter().map(|v| T::of(v as f64)).collect())
    }

    fn tokens_for(request: &Request) -> Vec<u32> {
        match &request.prompt_tokens {
            Some(t) if !t.is_empty() => t.clone(),
            // Requests without features collapse to their prompt length.
            _ => vec![request.input_len],
        }
    }
}

impl<T: Scalar> EmbeddingProvider<T> for HashingEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_request(&self, request: &Request) -> Result<EmbeddingVector<T>> {
        self.embed(&Self::tokens_for(request))
    }

    fn cost_ops(&self, request: &Request) -> u64 {
        let n = request.prompt_tokens.as_ref().map_or(1, |t| t.len()) as u64;
        2 * n + self.dim as u64
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingRecord {
    id: RequestId,
    vector: Vec<f64>,
}

/// Embeddings computed offline, keyed by request id.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedEmbeddings<T> {
    dim: usize,
    vectors: BTreeMap<RequestId, EmbeddingVector<T>>,
}

impl<T: Scalar> PrecomputedEmbeddings<T> {
    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let mut vectors = BTreeMap::new();
        let mut dim = 0;
        for (idx, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
            if dim == 0 {
                dim = rec.vector.len();
            } else if rec.vector.len() != dim {
                return Err(Error::Validation {
                    line: idx + 1,
                    message: format!("dimension {} != {}", rec.vector.len(), dim),
                });
            }
            let v = EmbeddingVector::normalized(rec.vector.into_iter().map(T::of).collect())
                .map_err(|e| Error::Validation {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            if vectors.insert(rec.id, v).is_some() {
                return Err(Error::DuplicateId(rec.id));
            }
        }
        Ok(PrecomputedEmbeddings { dim, vectors })
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        for (&id, v) in &self.vectors {
            let rec = EmbeddingRecord {
                id,
                vector: v.values().iter().map(|x| x.as_f64()).collect(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn insert(&mut self, id: RequestId, v: EmbeddingVector<T>) {
        self.dim = v.dimension();
        self.vectors.insert(id, v);
    }
}

impl<T: Scalar> EmbeddingProvider<T> for PrecomputedEmbeddings<T> {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_request(&self, request: &Request) -> Result<EmbeddingVector<T>> {
        self.vectors
            .get(&request.id)
            .cloned()
            .ok_or_else(|| Error::InvalidParameter(format!("no embedding for request {}", request.id)))
    }

    fn cost_ops(&self, _request: &Request) -> u64 {
        self.dim as u64
    }
}
