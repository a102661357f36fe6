//! Least-squares linear equalizer followed by a nearest-level decision.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::data::ChunkSet;
use crate::error::{Error, Result};
use crate::io::ByteReader;
use crate::link::SymbolAlphabet;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearEqualizer {
    pub taps: Vec<f64>,
    pub bias: f64,
}

/// Result of a least-squares fit.
#[derive(Debug, Clone, PartialEq)]
pub struct MmseFit {
    pub equalizer: LinearEqualizer,
    /// Numerical rank of `[chunks | 1]`.
    pub rank: usize,
}

impl MmseFit {
    pub fn rank_deficient(&self) -> bool {
        self.rank < self.equalizer.taps.len() + 1
    }
}

/// Minimizes Σ (w·c + b − x)² over rows `c` of `chunks` (row-major, `n_taps`
/// wide). Singular values below 1e-12·σ_max are dropped, so degenerate input
/// yields the minimum-norm solution.
pub fn mmse_fit(chunks: &[f64], n_taps: usize, targets: &[f64]) -> Result<MmseFit> {
    if n_taps == 0 || chunks.len() != n_taps * targets.len() {
        return Err(Error::invalid(format!(
            "{} chunk values do not form {} rows of {n_taps}",
            chunks.len(),
            targets.len()
        )));
    }
    let rows = targets.len();
    if rows < n_taps + 1 {
        return Err(Error::invalid(format!(
            "need at least {} rows, got {rows}",
            n_taps + 1
        )));
    }
    if chunks.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite training data"));
    }
    let a = DMatrix::from_fn(rows, n_taps + 1, |r, c| {
        if c < n_taps {
            chunks[r * n_taps + c]
        } else {
            1.0
        }
    });
    let b = DVector::from_column_slice(targets);
    let svd = a.svd(true, true);
    let sigma_max = svd.singular_values.max();
    let eps = 1e-12 * sigma_max;
    let rank = svd.rank(eps);
    let w = svd.solve(&b, eps).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(MmseFit {
        equalizer: LinearEqualizer {
            taps: w.as_slice()[..n_taps].to_vec(),
            bias: w[n_taps],
        },
        rank,
    })
}

/// Fits on a symbol-labelled chunk set against the normalized levels.
pub fn fit_chunk_set(set: &ChunkSet, alphabet: &SymbolAlphabet) -> Result<MmseFit> {
    let levels = alphabet.normalized_levels();
    let targets: Vec<f64> = set.symbol_indices()?.iter().map(|&i| levels[i]).collect();
    let fit = mmse_fit(&set.chunks, set.n_taps, &targets)?;
    if fit.rank_deficient() {
        eprintln!(
            "warning: rank-deficient training data (rank {} of {}); using the minimum-norm solution",
            fit.rank,
            set.n_taps + 1
        );
    }
    Ok(fit)
}

/// Index of the level nearest to `x`, lower index on ties.
pub fn nearest_level(x: f64, levels: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in levels.iter().enumerate() {
        if (x - l).abs() < (x - levels[best]).abs() {
            best = i;
        }
    }
    best
}

impl LinearEqualizer {
    pub fn equalize(&self, chunk: &[f64]) -> f64 {
        self.taps.iter().zip(chunk).map(|(w, y)| w * y).sum::<f64>() + self.bias
    }

    /// Nearest normalized level of the equalized chunk.
    pub fn equalize_and_decide(&self, chunk: &[f64], normalized_levels: &[f64]) -> usize {
        nearest_level(self.equalize(chunk), normalized_levels)
    }

    pub fn predict_symbols(&self, set: &ChunkSet, alphabet: &SymbolAlphabet) -> Vec<usize> {
        let levels = alphabet.normalized_levels();
        set.rows().map(|r| self.equalize_and_decide(r, &levels)).collect()
    }

    pub fn predict_bits(&self, set: &ChunkSet, alphabet: &SymbolAlphabet) -> Vec<u8> {
        self.predict_symbols(set, alphabet)
            .into_iter()
            .flat_map(|i| alphabet.label(i).to_vec())
            .collect()
    }
}

const MAGIC: &[u8; 4] = b"LEQW";
const VERSION: u16 = 1;

/// Equalizer together with the alphabet it decides on.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearReceiver {
    pub equalizer: LinearEqualizer,
    pub alphabet: SymbolAlphabet,
}

impl LinearReceiver {
    /// `LEQW` | u16 version | u64 n_taps | f64 taps | f64 bias | u64 m |
    /// f64 alphabet levels (unnormalized).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.equalizer.taps.len() as u64).to_le_bytes());
        for v in self.equalizer.taps.iter().chain([&self.equalizer.bias]) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.alphabet.len() as u64).to_le_bytes());
        for v in self.alphabet.levels() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let n = r.u64()? as usize;
        if n.saturating_mul(8) > r.remaining() {
            return Err(Error::format(r.offset(), format!("truncated: {n} taps announced")));
        }
        let taps = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let bias = r.f64()?;
        let at = r.offset();
        let m = r.u64()? as usize;
        if m.saturating_mul(8) > r.remaining() {
            return Err(Error::format(at, format!("truncated: {m} levels announced")));
        }
        let levels = (0..m).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let alphabet = SymbolAlphabet::new(&levels).map_err(|e| Error::format(at, e.to_string()))?;
        Ok(LinearReceiver {
            equalizer: LinearEqualizer { taps, bias },
            alphabet,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
