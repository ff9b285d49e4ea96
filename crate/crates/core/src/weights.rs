//! Sparse pixel-similarity weight matrices.
//!
//! Symmetric filters (doubly stochastic NLM, identity) store each unordered
//! pair exactly once in a coordinate-sorted list and mirror it on lookup, so
//! w[s][r] == w[r][s] holds bit-for-bit by construction rather than within a
//! tolerance. Row-normalized plain NLM is not symmetric and uses compressed
//! rows instead.

use std::fs;
use std::path::Path;

use crate::error::{io_err, Result};

#[derive(Clone, Debug)]
pub struct WeightMatrix {
    n: usize,
    storage: Storage,
}

#[derive(Clone, Debug)]
enum Storage {
    /// (row, col, weight) with row <= col, sorted lexicographically.
    SymmetricPairs(Vec<(u32, u32, f64)>),
    Rows {
        row_ptr: Vec<usize>,
        cols: Vec<u32>,
        vals: Vec<f64>,
    },
}

impl WeightMatrix {
    /// Pairs must have row <= col and be sorted; each unordered pair appears once.
    pub fn from_symmetric_pairs(n: usize, pairs: Vec<(u32, u32, f64)>) -> WeightMatrix {
        debug_assert!(pairs.windows(2).all(|w| w[0].0 < w[1].0
            || (w[0].0 == w[1].0 && w[0].1 < w[1].1)));
        debug_assert!(pairs
            .iter()
            .all(|&(s, r, _)| s <= r && (r as usize) < n));
        WeightMatrix {
            n,
            storage: Storage::SymmetricPairs(pairs),
        }
    }

    pub fn from_rows(n: usize, row_ptr: Vec<usize>, cols: Vec<u32>, vals: Vec<f64>) -> WeightMatrix {
        assert_eq!(row_ptr.len(), n + 1);
        assert_eq!(cols.len(), vals.len());
        assert_eq!(*row_ptr.last().unwrap(), cols.len());
        WeightMatrix {
            n,
            storage: Storage::Rows { row_ptr, cols, vals },
        }
    }

    pub fn identity(n: usize) -> WeightMatrix {
        let pairs = (0..n as u32).map(|i| (i, i, 1.0)).collect();
        WeightMatrix::from_symmetric_pairs(n, pairs)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn stored_entries(&self) -> usize {
        match &self.storage {
            Storage::SymmetricPairs(p) => p.len(),
            Storage::Rows { vals, .. } => vals.len(),
        }
    }

    pub fn is_symmetric_storage(&self) -> bool {
        matches!(self.storage, Storage::SymmetricPairs(_))
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n, "weight apply length");
        let mut out = vec![0.0; self.n];
        match &self.storage {
            Storage::SymmetricPairs(pairs) => {
                for &(s, r, w) in pairs {
                    let (s, r) = (s as usize, r as usize);
                    out[s] += w * v[r];
                    if s != r {
                        out[r] += w * v[s];
                    }
                }
            }
            Storage::Rows { row_ptr, cols, vals } => {
                for i in 0..self.n {
                    let mut acc = 0.0;
                    for j in row_ptr[i]..row_ptr[i + 1] {
                        acc += vals[j] * v[cols[j] as usize];
                    }
                    out[i] = acc;
                }
            }
        }
        out
    }

    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        match &self.storage {
            Storage::SymmetricPairs(_) => self.apply(v),
            Storage::Rows { row_ptr, cols, vals } => {
                assert_eq!(v.len(), self.n, "weight apply length");
                let mut out = vec![0.0; self.n];
                for i in 0..self.n {
                    for j in row_ptr[i]..row_ptr[i + 1] {
                        out[cols[j] as usize] += vals[j] * v[i];
                    }
                }
                out
            }
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        match &self.storage {
            Storage::SymmetricPairs(pairs) => {
                let mut sums = vec![0.0; self.n];
                for &(s, r, w) in pairs {
                    sums[s as usize] += w;
                    if s != r {
                        sums[r as usize] += w;
                    }
                }
                sums
            }
            Storage::Rows { row_ptr, vals, .. } => (0..self.n)
                .map(|i| vals[row_ptr[i]..row_ptr[i + 1]].iter().sum())
                .collect(),
        }
    }

    pub fn col_sums(&self) -> Vec<f64> {
        match &self.storage {
            Storage::SymmetricPairs(_) => self.row_sums(),
            Storage::Rows { row_ptr, cols, vals } => {
                let mut sums = vec![0.0; self.n];
                for i in 0..self.n {
                    for j in row_ptr[i]..row_ptr[i + 1] {
                        sums[cols[j] as usize] += vals[j];
                    }
                }
                sums
            }
        }
    }

    /// Largest |w[s][r] - w[r][s]|. Zero by construction for pair storage.
    pub fn max_asymmetry(&self) -> f64 {
        match &self.storage {
            Storage::SymmetricPairs(_) => 0.0,
            Storage::Rows { row_ptr, cols, vals } => {
                let lookup = |r: usize, c: u32| -> f64 {
                    let span = &cols[row_ptr[r]..row_ptr[r + 1]];
                    match span.binary_search(&c) {
                        Ok(k) => vals[row_ptr[r] + k],
                        Err(_) => 0.0,
                    }
                };
                let mut worst = 0.0f64;
                for i in 0..self.n {
                    for j in row_ptr[i]..row_ptr[i + 1] {
                        let mirror = lookup(cols[j] as usize, i as u32);
                        worst = worst.max((vals[j] - mirror).abs());
                    }
                }
                worst
            }
        }
    }

    pub fn negative_entries(&self) -> usize {
        match &self.storage {
            Storage::SymmetricPairs(pairs) => pairs.iter().filter(|e| e.2 < 0.0).count(),
            Storage::Rows { vals, .. } => vals.iter().filter(|&&v| v < 0.0).count(),
        }
    }

    /// Stored entries in storage order: one line per unordered pair for
    /// symmetric storage, one per directed entry for row storage.
    pub fn entries(&self) -> Vec<(u32, u32, f64)> {
        match &self.storage {
            Storage::SymmetricPairs(pairs) => pairs.clone(),
            Storage::Rows { row_ptr, cols, vals } => {
                let mut out = Vec::with_capacity(vals.len());
                for i in 0..self.n {
                    for j in row_ptr[i]..row_ptr[i + 1] {
                        out.push((i as u32, cols[j], vals[j]));
                    }
                }
                out
            }
        }
    }

    /// Text dump, one `row col weight` triple per stored entry.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (r, c, w) in self.entries() {
            out.push_str(&format!("{r} {c} {w}\n"));
        }
        fs::write(path, out).map_err(|e| io_err(path, e))
    }

    /// Operator 2-norm estimated by power iteration on W^T W from a fixed
    /// pseudo-random start, so repeated calls agree bit-for-bit.
    pub fn spectral_norm_estimate(&self) -> f64 {
        let mut v = deterministic_unit_vector(self.n);
        let mut lambda = 0.0f64;
        for _ in 0..300 {
            let w = self.apply_transpose(&self.apply(&v));
            let norm = l2(&w);
            if norm == 0.0 {
                return 0.0;
            }
            let next = dot(&v, &w);
            for (vi, wi) in v.iter_mut().zip(&w) {
                *vi = wi / norm;
            }
            if (next - lambda).abs() <= 1e-13 * next.abs() {
                lambda = next;
                break;
            }
            lambda = next;
        }
        lambda.max(0.0).sqrt()
    }

    /// Smallest eigenvalue, defined for symmetric storage only. Uses the
    /// shifted power iteration on c*I - W with c at the spectral norm.
    pub fn min_eigenvalue_estimate(&self) -> Option<f64> {
        if !self.is_symmetric_storage() {
            return None;
        }
        let c = self.spectral_norm_estimate() * (1.0 + 1e-9) + 1e-12;
        let mut v = deterministic_unit_vector(self.n);
        let mut mu = 0.0f64;
        for _ in 0..300 {
            let wv = self.apply(&v);
            let bv: Vec<f64> = v.iter().zip(&wv).map(|(vi, wi)| c * vi - wi).collect();
            let norm = l2(&bv);
            if norm == 0.0 {
                return Some(c);
            }
            let next = dot(&v, &bv);
            for (vi, bi) in v.iter_mut().zip(&bv) {
                *vi = bi / norm;
            }
            if (next - mu).abs() <= 1e-13 * next.abs() {
                mu = next;
                break;
            }
            mu = next;
        }
        Some(c - mu)
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fixed xorshift-seeded start vector; not an eigenvector of anything useful.
pub(crate) fn deterministic_unit_vector(n: usize) -> Vec<f64> {
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    let mut v: Vec<f64> = (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
        .collect();
    let norm = l2(&v);
    for x in &mut v {
        *x /= norm;
    }
    v
}
