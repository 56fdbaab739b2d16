//! Byte accounting for dense and sparse gradient windows.
//!
//! Dense windows store `m × d` 4-byte floats. Sparse windows store 4-byte
//! indices, `value_bytes`-wide values, a 4-byte error-feedback vector, a
//! 4-byte `m`-vector for `sp` results and (M-FAC only) a 4-byte
//! `d`-vector for `lcg` results.

use serde::{Deserialize, Serialize};

/// `4·m·d`.
pub fn dense_window_bytes(m: u64, d: u64) -> u64 {
    4 * m * d
}

/// `4mk + value_bytes·mk + 4d + 4m + 4d`.
pub fn sparse_mfac_bytes(m: u64, d: u64, k: u64, value_bytes: u64) -> u64 {
    4 * m * k + value_bytes * m * k + 4 * d + 4 * m + 4 * d
}

/// `4mk + value_bytes·mk + 4d + 4m` (no `lcg` result buffer).
pub fn sparse_ggt_bytes(m: u64, d: u64, k: u64, value_bytes: u64) -> u64 {
    4 * m * k + value_bytes * m * k + 4 * d + 4 * m
}

/// Which preconditioner's buffers are being counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowAccounting {
    Mfac,
    Ggt,
}

/// Footprint of a sparse window next to its dense counterpart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub accounting: WindowAccounting,
    pub m: u64,
    pub d: u64,
    /// Stored entries per row.
    pub k: u64,
    pub value_bytes: u64,
    pub sparse_bytes: u64,
    pub dense_bytes: u64,
    /// `dense_bytes / sparse_bytes`.
    pub ratio: f64,
    /// Dense bytes per parameter over sparse bytes per parameter rounded up
    /// to a whole byte, with the `O(m)` term dropped. For `m = 1024`,
    /// `k = d/100` this is `4096 / 90`.
    pub per_param_ratio: f64,
}

impl MemoryReport {
    pub fn new(accounting: WindowAccounting, m: u64, d: u64, k: u64, value_bytes: u64) -> Self {
        let (sparse_bytes, d_vectors) = match accounting {
            WindowAccounting::Mfac => (sparse_mfac_bytes(m, d, k, value_bytes), 8.0),
            WindowAccounting::Ggt => (sparse_ggt_bytes(m, d, k, value_bytes), 4.0),
        };
        let dense_bytes = dense_window_bytes(m, d);
        let density = k as f64 / d as f64;
        let sparse_per_param = (4 + value_bytes) as f64 * m as f64 * density + d_vectors;
        // Guard against 12.000000000000002 rounding up to 13.
        let rounded = (sparse_per_param - 1e-9).ceil();
        Self {
            accounting,
            m,
            d,
            k,
            value_bytes,
            sparse_bytes,
            dense_bytes,
            ratio: dense_bytes as f64 / sparse_bytes as f64,
            per_param_ratio: 4.0 * m as f64 / rounded,
        }
    }

    /// Per-parameter ratio rounded to one decimal, as usually quoted.
    pub fn headline_ratio(&self) -> f64 {
        (self.per_param_ratio * 10.0).round() / 10.0
    }
}
