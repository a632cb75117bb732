//! Per-page systematic Reed-Solomon coding at split granularity.
//!
//! A page is cut into `k` equally sized data splits (the last one zero
//! padded when `k` does not divide the page size) and `r` parity splits are
//! computed over GF(2^8). Any `k` of the `k + r` splits reconstruct the page.
//! Beyond erasures, the same code is used to detect and correct silently
//! corrupted splits when extra splits are available.
//!
//! The generator is `[I_k; C]` where `C` is an `r x k` Cauchy matrix whose
//! first row and first column are normalised to ones. Every square submatrix
//! of a Cauchy matrix is non-singular and row/column scaling preserves that,
//! so any `k` rows of the generator are linearly independent.

use std::collections::BTreeSet;
use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gf256;

/// Default page size in bytes.
pub const DEFAULT_PAGE_SIZE: usize = 4096;

/// Largest code length a GF(2^8) Reed-Solomon code supports here.
pub const MAX_CODE_LENGTH: usize = 255;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodingError {
    #[error("invalid codec parameters: {0}")]
    InvalidParams(String),
    #[error("insufficient splits: need {needed}, got {got}")]
    InsufficientSplits { needed: usize, got: usize },
    #[error("split length mismatch: expected {expected} bytes, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("split index {index} out of range for a code of length {width}")]
    InvalidIndex { index: usize, width: usize },
    #[error("split index {0} supplied more than once")]
    DuplicateIndex(usize),
    #[error("page has {got} bytes, codec expects {expected}")]
    PageSize { expected: usize, got: usize },
    #[error("corruption exceeds the correctable bound of {delta} splits")]
    Uncorrectable { delta: usize },
}

pub type Result<T, E = CodingError> = std::result::Result<T, E>;

/// `(k, r, Δ)`: data splits, parity splits and the extra reads / tolerated
/// corruptions budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodecParams {
    pub k: usize,
    pub r: usize,
    pub delta: usize,
}

impl CodecParams {
    pub fn new(k: usize, r: usize, delta: usize) -> Result<Self> {
        let params = Self { k, r, delta };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(CodingError::InvalidParams("k must be at least 1".into()));
        }
        if self.k + self.r > MAX_CODE_LENGTH {
            return Err(CodingError::InvalidParams(format!(
                "k + r = {} exceeds the GF(2^8) code length bound {MAX_CODE_LENGTH}",
                self.k + self.r
            )));
        }
        if self.delta > self.r {
            return Err(CodingError::InvalidParams(format!(
                "delta = {} exceeds r = {}",
                self.delta, self.r
            )));
        }
        Ok(())
    }

    /// Total number of splits per page, `k + r`.
    pub fn width(&self) -> usize {
        self.k + self.r
    }
}

impl Default for CodecParams {
    fn default() -> Self {
        Self { k: 8, r: 2, delta: 1 }
    }
}

impl fmt::Display for CodecParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}+{}, delta={})", self.k, self.r, self.delta)
    }
}

/// A fixed-size memory page.
#[derive(Clone, PartialEq, Eq)]
pub struct Page(Vec<u8>);

impl Page {
    pub fn new(bytes: Vec<u8>) -> Self {
        Self(bytes)
    }

    pub fn zeroed(len: usize) -> Self {
        Self(vec![0; len])
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Debug for Page {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<_> = self.0.iter().take(8).collect();
        write!(f, "Page({} bytes, head={head:?})", self.0.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitKind {
    Data,
    Parity,
}

/// One data or parity fragment of a page.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub index: usize,
    pub kind: SplitKind,
    pub bytes: Vec<u8>,
}

impl Split {
    pub fn data(index: usize, bytes: Vec<u8>) -> Self {
        Self { index, kind: SplitKind::Data, bytes }
    }

    pub fn parity(index: usize, bytes: Vec<u8>) -> Self {
        Self { index, kind: SplitKind::Parity, bytes }
    }

    /// Builds a split whose kind follows from its index.
    pub fn at(index: usize, k: usize, bytes: Vec<u8>) -> Self {
        if index < k {
            Self::data(index, bytes)
        } else {
            Self::parity(index, bytes)
        }
    }
}

/// Bytes per split for a page of `page_size` bytes cut into `k` pieces.
pub fn split_len(page_size: usize, k: usize) -> usize {
    page_size.div_ceil(k)
}

/// Cuts a page into `k` data splits, zero padding the last one.
pub fn split_page(page: &Page, k: usize) -> Vec<Split> {
    assert!(k >= 1, "k must be at least 1");
    let len = split_len(page.len(), k);
    (0..k)
        .map(|i| {
            let start = (i * len).min(page.len());
            let end = ((i + 1) * len).min(page.len());
            let mut bytes = page.as_bytes()[start..end].to_vec();
            bytes.resize(len, 0);
            Split::data(i, bytes)
        })
        .collect()
}

/// Concatenates data splits in index order and truncates to `page_size`.
pub fn join_splits(data: &[Split], page_size: usize) -> Page {
    let mut ordered: Vec<&Split> = data.iter().collect();
    ordered.sort_by_key(|s| s.index);
    let mut bytes = Vec::with_capacity(page_size + ordered.first().map_or(0, |s| s.bytes.len()));
    for s in ordered {
        bytes.extend_from_slice(&s.bytes);
    }
    bytes.truncate(page_size);
    Page(bytes)
}

/// Which guarantee a split budget is sized for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryMode {
    /// Survive `r` unavailable splits.
    Failure,
    /// Detect up to `Δ` corrupted splits.
    Detect,
    /// Locate and correct up to `Δ` corrupted splits.
    Correct,
}

/// Minimum split count and the matching memory overhead, exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRequirement {
    pub count: usize,
    pub overhead: Ratio<usize>,
}

pub fn min_splits(mode: RecoveryMode, params: &CodecParams) -> SplitRequirement {
    let CodecParams { k, r, delta } = *params;
    let (count, extra) = match mode {
        RecoveryMode::Failure => (k, r),
        RecoveryMode::Detect => (k + delta, delta),
        RecoveryMode::Correct => (k + 2 * delta + 1, 2 * delta + 1),
    };
    SplitRequirement { count, overhead: Ratio::new(k + extra, k) }
}

/// Output of a successful correction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corrected {
    pub page: Page,
    pub corrupted: BTreeSet<usize>,
}

/// A systematic MDS `(k, r)` Reed-Solomon coder for pages of a fixed size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codec {
    params: CodecParams,
    page_size: usize,
    /// `r x k` parity rows; the data rows are the identity.
    parity_rows: Vec<Vec<u8>>,
}

/// Builds a codec for the default 4 KB page.
pub fn make_codec(params: CodecParams) -> Result<Codec> {
    Codec::new(params)
}

impl Codec {
    pub fn new(params: CodecParams) -> Result<Self> {
        Self::with_page_size(params, DEFAULT_PAGE_SIZE)
    }

    pub fn with_page_size(params: CodecParams, page_size: usize) -> Result<Self> {
        params.validate()?;
        if page_size == 0 {
            return Err(CodingError::InvalidParams("page size must be positive".into()));
        }
        Ok(Self { params, page_size, parity_rows: cauchy_parity_rows(params.k, params.r) })
    }

    pub fn params(&self) -> &CodecParams {
        &self.params
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn split_len(&self) -> usize {
        split_len(self.page_size, self.params.k)
    }

    /// Generator row for split `index`.
    pub fn generator_row(&self, index: usize) -> Vec<u8> {
        let k = self.params.k;
        if index < k {
            let mut row = vec![0u8; k];
            row[index] = 1;
            row
        } else {
            self.parity_rows[index - k].clone()
        }
    }

    pub fn split(&self, page: &Page) -> Result<Vec<Split>> {
        self.check_page(page)?;
        Ok(split_page(page, self.params.k))
    }

    /// Computes the `r` parity splits for `k` data splits (given in index order).
    pub fn encode(&self, data: &[Split]) -> Result<Vec<Split>> {
        let k = self.params.k;
        if data.len() != k {
            return Err(CodingError::InsufficientSplits { needed: k, got: data.len() });
        }
        let len = data[0].bytes.len();
        for s in data {
            if s.bytes.len() != len {
                return Err(CodingError::LengthMismatch { expected: len, got: s.bytes.len() });
            }
        }
        let mut ordered: Vec<&[u8]> = vec![&[]; k];
        let mut seen = vec![false; k];
        for s in data {
            if s.index >= k {
                return Err(CodingError::InvalidIndex { index: s.index, width: k });
            }
            if std::mem::replace(&mut seen[s.index], true) {
                return Err(CodingError::DuplicateIndex(s.index));
            }
            ordered[s.index] = &s.bytes;
        }
        Ok(self.parity_from(&ordered))
    }

    /// Splits and encodes a page into all `k + r` splits in index order.
    pub fn encode_page(&self, page: &Page) -> Result<Vec<Split>> {
        let mut splits = self.split(page)?;
        let data: Vec<&[u8]> = splits.iter().map(|s| s.bytes.as_slice()).collect();
        let parity = self.parity_from(&data);
        splits.extend(parity);
        Ok(splits)
    }

    fn parity_from(&self, data: &[&[u8]]) -> Vec<Split> {
        let k = self.params.k;
        let len = data.first().map_or(0, |d| d.len());
        self.parity_rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut out = vec![0u8; len];
                for (coef, src) in row.iter().zip(data) {
                    gf256::mul_add_slice(&mut out, src, *coef);
                }
                Split::parity(k + i, out)
            })
            .collect()
    }

    /// Reconstructs the page from the first `k` splits in arrival order.
    pub fn decode(&self, available: &[Split]) -> Result<Page> {
        let data = self.decode_data(available)?;
        Ok(self.join(data))
    }

    /// Recomputes a single split (data or parity) from any `k` others.
    pub fn reconstruct(&self, available: &[Split], index: usize) -> Result<Split> {
        let width = self.params.width();
        if index >= width {
            return Err(CodingError::InvalidIndex { index, width });
        }
        let data = self.decode_data(available)?;
        let k = self.params.k;
        if index < k {
            return Ok(Split::data(index, data[index].clone()));
        }
        let refs: Vec<&[u8]> = data.iter().map(Vec::as_slice).collect();
        let mut out = vec![0u8; self.split_len()];
        for (coef, src) in self.parity_rows[index - k].iter().zip(&refs) {
            gf256::mul_add_slice(&mut out, src, *coef);
        }
        Ok(Split::parity(index, out))
    }

    /// True if the supplied splits are not one codeword. Always fires when
    /// between 1 and `delta` of at least `k + delta` supplied splits are corrupted.
    pub fn detect_corruption(&self, splits: &[Split], delta: usize) -> Result<bool> {
        let needed = self.params.k + delta;
        if splits.len() < needed {
            return Err(CodingError::InsufficientSplits { needed, got: splits.len() });
        }
        self.validate_splits(splits)?;
        let data = self.decode_data(splits)?;
        Ok(!self.mismatches(&data, splits.iter()).is_empty())
    }

    /// Locates and removes up to `delta` corrupted splits out of at least
    /// `k + 2*delta + 1`, returning the page and the corrupted indices.
    ///
    /// Candidate corrupted sets are tried by increasing size; the first
    /// candidate whose complement is a consistent codeword wins.
    pub fn correct_corruption(&self, splits: &[Split], delta: usize) -> Result<Corrected> {
        let k = self.params.k;
        let needed = k + 2 * delta + 1;
        if splits.len() < needed {
            return Err(CodingError::InsufficientSplits { needed, got: splits.len() });
        }
        self.validate_splits(splits)?;
        let n = splits.len();
        for size in 0..=delta {
            let mut found = None;
            for_each_subset(n, size, &mut |excluded| {
                let rest: Vec<&Split> = (0..n)
                    .filter(|i| !excluded.contains(i))
                    .map(|i| &splits[i])
                    .collect();
                let first_k: Vec<Split> = rest.iter().take(k).map(|s| (*s).clone()).collect();
                let Ok(data) = self.decode_data(&first_k) else {
                    return true;
                };
                if self.mismatches(&data, rest.iter().copied()).is_empty() {
                    let corrupted = self.mismatches(&data, splits.iter());
                    found = Some((data, corrupted));
                    return false;
                }
                true
            });
            if let Some((data, corrupted)) = found {
                return Ok(Corrected { page: self.join(data), corrupted });
            }
        }
        Err(CodingError::Uncorrectable { delta })
    }

    fn join(&self, data: Vec<Vec<u8>>) -> Page {
        let mut bytes = Vec::with_capacity(self.split_len() * self.params.k);
        for d in data {
            bytes.extend_from_slice(&d);
        }
        bytes.truncate(self.page_size);
        Page(bytes)
    }

    fn check_page(&self, page: &Page) -> Result<()> {
        if page.len() != self.page_size {
            return Err(CodingError::PageSize { expected: self.page_size, got: page.len() });
        }
        Ok(())
    }

    fn validate_splits(&self, splits: &[Split]) -> Result<()> {
        let width = self.params.width();
        let len = self.split_len();
        let mut seen = vec![false; width];
        for s in splits {
            if s.index >= width {
                return Err(CodingError::InvalidIndex { index: s.index, width });
            }
            if std::mem::replace(&mut seen[s.index], true) {
                return Err(CodingError::DuplicateIndex(s.index));
            }
            if s.bytes.len() != len {
                return Err(CodingError::LengthMismatch { expected: len, got: s.bytes.len() });
            }
        }
        Ok(())
    }

    /// Data splits recovered from the first `k` supplied splits.
    fn decode_data(&self, available: &[Split]) -> Result<Vec<Vec<u8>>> {
        let k = self.params.k;
        if available.len() < k {
            return Err(CodingError::InsufficientSplits { needed: k, got: available.len() });
        }
        let chosen = &available[..k];
        self.validate_splits(chosen)?;

        if chosen.iter().all(|s| s.index < k) {
            let mut data = vec![Vec::new(); k];
            for s in chosen {
                data[s.index] = s.bytes.clone();
            }
            return Ok(data);
        }

        let rows: Vec<Vec<u8>> = chosen.iter().map(|s| self.generator_row(s.index)).collect();
        let inverse = gf256::invert(&rows).expect("MDS generator: any k rows are independent");
        let len = self.split_len();
        Ok(inverse
            .iter()
            .map(|row| {
                let mut out = vec![0u8; len];
                for (coef, s) in row.iter().zip(chosen) {
                    gf256::mul_add_slice(&mut out, &s.bytes, *coef);
                }
                out
            })
            .collect())
    }

    /// Indices among `splits` that differ from the codeword of `data`.
    fn mismatches<'a>(
        &self,
        data: &[Vec<u8>],
        splits: impl Iterator<Item = &'a Split>,
    ) -> BTreeSet<usize> {
        let k = self.params.k;
        let len = self.split_len();
        let mut scratch = vec![0u8; len];
        let mut bad = BTreeSet::new();
        for s in splits {
            let expected: &[u8] = if s.index < k {
                &data[s.index]
            } else {
                scratch.iter_mut().for_each(|b| *b = 0);
                for (coef, src) in self.parity_rows[s.index - k].iter().zip(data) {
                    gf256::mul_add_slice(&mut scratch, src, *coef);
                }
                &scratch
            };
            if expected != s.bytes.as_slice() {
                bad.insert(s.index);
            }
        }
        bad
    }
}

/// Cauchy rows `1 / (x_i + y_j)` with `x_i = i`, `y_j = r + j`, then scaled so
/// the first row and the first column are all ones.
fn cauchy_parity_rows(k: usize, r: usize) -> Vec<Vec<u8>> {
    let mut rows: Vec<Vec<u8>> = (0..r)
        .map(|i| (0..k).map(|j| gf256::inv(gf256::add(i as u8, (r + j) as u8))).collect())
        .collect();
    if r == 0 {
        return rows;
    }
    for j in 0..k {
        let s = gf256::inv(rows[0][j]);
        for row in rows.iter_mut() {
            row[j] = gf256::mul(row[j], s);
        }
    }
    for row in rows.iter_mut().skip(1) {
        let s = gf256::inv(row[0]);
        for v in row.iter_mut() {
            *v = gf256::mul(*v, s);
        }
    }
    rows
}

/// Calls `f` with every `size`-subset of `0..n` in lexicographic order until
/// it returns false.
fn for_each_subset(n: usize, size: usize, f: &mut dyn FnMut(&[usize]) -> bool) {
    if size > n {
        return;
    }
    let mut idx: Vec<usize> = (0..size).collect();
    loop {
        if !f(&idx) {
            return;
        }
        let Some(pos) = (0..size).rev().find(|&i| idx[i] != i + n - size) else {
            return;
        };
        idx[pos] += 1;
        for j in pos + 1..size {
            idx[j] = idx[j - 1] + 1;
        }
    }
}
