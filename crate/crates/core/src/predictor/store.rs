//! Query database of past prompts and their observed output lengths.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::embed::EmbeddingVector;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct VectorRecord<T> {
    pub vector: EmbeddingVector<T>,
    pub observed_len: u32,
    pub insert_seq: u64,
}

/// A neighbor returned by [`VectorStore::top_k`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor<T> {
    pub similarity: T,
    pub observed_len: u32,
    pub insert_seq: u64,
}

/// Bounded store with exact cosine search and FIFO eviction.
#[derive(Debug, Clone)]
pub struct VectorStore<T> {
    records: VecDeque<VectorRecord<T>>,
    capacity: usize,
    next_seq: u64,
}

impl<T: Scalar> VectorStore<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidParameter("db capacity must be >= 1".into()));
        }
        Ok(VectorStore {
            records: VecDeque::new(),
            capacity,
            next_seq: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn records(&self) -> impl Iterator<Item = &VectorRecord<T>> {
        self.records.iter()
    }

    /// Appends a record, evicting the oldest when over capacity.
    pub fn insert(&mut self, vector: EmbeddingVector<T>, observed_len: u32) -> Result<u64> {
        if observed_len == 0 {
            return Err(Error::InvalidParameter("observed length must be >= 1".into()));
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.records.push_back(VectorRecord {
            vector,
            observed_len,
            insert_seq: seq,
        });
        while self.records.len() > self.capacity {
            self.records.pop_front();
        }
        Ok(seq)
    }

    /// The `k` most similar records, most similar first; ties prefer newer
    /// records.
    pub fn top_k(&self, query: &EmbeddingVector<T>, k: usize) -> Vec<Neighbor<T>> {
        let mut all: Vec<Neighbor<T>> = self
            .records
            .iter()
            .map(|r| Neighbor {
                similarity: r.vector.cosine(query),
                observed_len: r.observed_len,
                insert_seq: r.insert_seq,
            })
            .collect();
        let by_rank = |a: &Neighbor<T>, b: &Neighbor<T>| {
            b.similarity
                .partial_cmp(&a.similarity)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.insert_seq.cmp(&a.insert_seq))
        };
        if all.len() > k {
            all.select_nth_unstable_by(k - 1, by_rank);
            all.truncate(k);
        }
        all.sort_by(by_rank);
        all
    }

    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            let rec = StoredRecord {
                vector: r.vector.values().iter().map(|v| v.as_f64()).collect(),
                observed_len: r.observed_len,
                insert_seq: r.insert_seq,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(input: R, capacity: usize) -> Result<Self> {
        let mut store = Self::new(capacity)?;
        for (idx, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: StoredRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
            if rec.observed_len == 0 || rec.insert_seq < store.next_seq {
                return Err(Error::Validation {
                    line: idx + 1,
                    message: "records need observed_len >= 1 and increasing insert_seq".into(),
                });
            }
            let vector = EmbeddingVector::normalized(rec.vector.into_iter().map(T::of).collect())?;
            store.records.push_back(VectorRecord {
                vector,
                observed_len: rec.observed_len,
                insert_seq: rec.insert_seq,
            });
            store.next_seq = rec.insert_seq + 1;
            while store.records.len() > store.capacity {
                store.records.pop_front();
            }
        }
        Ok(store)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredRecord {
    vector: Vec<f64>,
    observed_len: u32,
    insert_seq: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> EmbeddingVector<f64> {
        EmbeddingVector::normalized(x.to_vec()).unwrap()
    }

    #[test]
    fn fifo_eviction_at_capacity() {
        let mut s = VectorStore::new(2).unwrap();
        s.insert(v(&[1.0, 0.0]), 5).unwrap();
        s.insert(v(&[0.0, 1.0]), 6).unwrap();
        s.insert(v(&[1.0, 1.0]), 7).unwrap();
        assert_eq!(s.len(), 2);
        let lens: Vec<u32> = s.records().map(|r| r.observed_len).collect();
        assert_eq!(lens, vec![6, 7]);
    }

    #[test]
    fn insert_seq_strictly_increases() {
        let mut s = VectorStore::new(3).unwrap();
        let seqs: Vec<u64> = (0..6).map(|i| s.insert(v(&[1.0, i as f64]), 1).unwrap()).collect();
        assert!(seqs.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn top_k_orders_by_similarity() {
        let mut s = VectorStore::new(10).unwrap();
        s.insert(v(&[1.0, 0.0]), 10).unwrap();
        s.insert(v(&[0.0, 1.0]), 20).unwrap();
        s.insert(v(&[1.0, 0.2]), 30).unwrap();
        let top = s.top_k(&v(&[1.0, 0.0]), 2);
        assert_eq!(top.len(), 2);
        assert_eq!(top[0].observed_len, 10);
        assert_eq!(top[1].observed_len, 30);
    }

    #[test]
    fn zero_length_rejected() {
        let mut s = VectorStore::new(1).unwrap();
        assert!(s.insert(v(&[1.0]), 0).is_err());
        assert!(VectorStore::<f64>::new(0).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let mut s = VectorStore::new(4).unwrap();
        s.insert(v(&[1.0, 2.0]), 3).unwrap();
        s.insert(v(&[2.0, 1.0]), 9).unwrap();
        let mut buf = Vec::new();
        s.save(&mut buf).unwrap();
        let back = VectorStore::<f64>::load(buf.as_slice(), 4).unwrap();
        let a: Vec<_> = s.records().cloned().collect();
        let b: Vec<_> = back.records().cloned().collect();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.observed_len, y.observed_len);
            assert_eq!(x.insert_seq, y.insert_seq);
            assert!((x.vector.cosine(&y.vector) - 1.0).abs() < 1e-12);
        }
    }
}
