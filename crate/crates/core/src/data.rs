//! Training and evaluation data: per-epoch blocks cut into receiver windows.
//!
//! Epoch `e` of a dataset is simulated from its own ChaCha stream `(seed, e)`,
//! so any epoch can be regenerated without replaying the ones before it. With
//! `continuous_sampling` off, every epoch is epoch 0.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp;
use crate::error::{Error, Result};
use crate::io::ByteReader;
use crate::link::{ImddLink, LinkParams};

const MAGIC: &[u8; 4] = b"IMDD";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub link: LinkParams,
    /// Label rows with Gray bits instead of symbol indices.
    pub bit_level: bool,
    pub continuous_sampling: bool,
}

impl DatasetConfig {
    pub fn new(link: LinkParams) -> Self {
        DatasetConfig {
            link,
            bit_level: false,
            continuous_sampling: true,
        }
    }
}

pub fn set_n_taps(cfg: &DatasetConfig, n_taps: usize) -> Result<DatasetConfig> {
    if n_taps % 2 == 0 || n_taps == 0 {
        return Err(Error::invalid(format!("n_taps must be odd, got {n_taps}")));
    }
    let mut out = cfg.clone();
    out.link.n_taps = n_taps;
    Ok(out)
}

pub fn set_noise_power_db(cfg: &DatasetConfig, db: f64) -> Result<DatasetConfig> {
    if !db.is_finite() {
        return Err(Error::invalid(format!("noise power {db} dB is not finite")));
    }
    let mut out = cfg.clone();
    out.link.noise_power_db = db;
    Ok(out)
}

/// Per-row targets of a [`ChunkSet`].
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Symbols(Vec<usize>),
    /// Row-major N×`width` matrix of Gray bits.
    Bits { width: usize, bits: Vec<u8> },
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Symbols(q) => q.len(),
            Labels::Bits { width, bits } => bits.len() / (*width).max(1),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_bit_level(&self) -> bool {
        matches!(self, Labels::Bits { .. })
    }
}

/// N received windows of length `n_taps` with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkSet {
    pub params: LinkParams,
    pub n_taps: usize,
    /// Row-major N×n_taps; row k is centered on y[k].
    pub chunks: Vec<f64>,
    pub labels: Labels,
}

impl ChunkSet {
    pub fn from_block(
        params: &LinkParams,
        received: &[f64],
        symbol_indices: &[usize],
        bit_level: bool,
    ) -> Result<Self> {
        let alphabet = params.symbol_alphabet()?;
        let chunks = dsp::chunkify(received, params.n_taps)?;
        let labels = if bit_level {
            Labels::Bits {
                width: alphabet.bits_per_symbol(),
                bits: crate::link::unmap_bits(symbol_indices, &alphabet),
            }
        } else {
            Labels::Symbols(symbol_indices.to_vec())
        };
        Ok(ChunkSet {
            params: params.clone(),
            n_taps: params.n_taps,
            chunks,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.chunks[k * self.n_taps..(k + 1) * self.n_taps]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.chunks.chunks_exact(self.n_taps)
    }

    pub fn params_fingerprint(&self) -> u64 {
        self.params.fingerprint()
    }

    /// Transmitted symbol index per row, whichever label mode is stored.
    pub fn symbol_indices(&self) -> Result<Vec<usize>> {
        match &self.labels {
            Labels::Symbols(q) => Ok(q.clone()),
            Labels::Bits { bits, .. } => {
                crate::link::map_bits(bits, &self.params.symbol_alphabet()?)
            }
        }
    }

    /// Transmitted Gray bits, M per row.
    pub fn bits(&self) -> Result<Vec<u8>> {
        match &self.labels {
            Labels::Symbols(q) => Ok(crate::link::unmap_bits(q, &self.params.symbol_alphabet()?)),
            Labels::Bits { bits, .. } => Ok(bits.clone()),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_taps % 2 == 0 {
            return Err(Error::invalid("n_taps must be odd"));
        }
        if self.chunks.len() != self.len() * self.n_taps {
            return Err(Error::invalid("chunk matrix and labels disagree in row count"));
        }
        Ok(())
    }
}

/// Dataset with the link prepared once and reused across epochs.
#[derive(Debug, Clone)]
pub struct Dataset {
    cfg: DatasetConfig,
    link: ImddLink,
}

impl Dataset {
    pub fn new(cfg: DatasetConfig) -> Result<Self> {
        let link = ImddLink::new(cfg.link.clone())?;
        Ok(Dataset { cfg, link })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.cfg
    }

    pub fn link(&self) -> &ImddLink {
        &self.link
    }

    /// RNG for `epoch`, honoring `continuous_sampling`.
    pub fn epoch_rng(&self, epoch: u64) -> ChaCha8Rng {
        let stream = if self.cfg.continuous_sampling { epoch } else { 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.link.seed);
        rng.set_stream(stream);
        rng
    }

    pub fn epoch(&self, epoch: u64) -> Result<ChunkSet> {
        let mut rng = self.epoch_rng(epoch);
        let block = self.link.random_block(&mut rng)?;
        ChunkSet::from_block(
            &self.cfg.link,
            &block.received,
            &block.symbol_indices,
            self.cfg.bit_level,
        )
    }
}

pub fn next_epoch(cfg: &DatasetConfig, epoch: u64) -> Result<ChunkSet> {
    Dataset::new(cfg.clone())?.epoch(epoch)
}

/// (1/len)·Σ 𝟙(truth ≠ predicted).
pub fn bit_error_rate(truth: &[u8], predicted: &[u8]) -> Result<f64> {
    Ok(bit_errors(truth, predicted)? as f64 / truth.len() as f64)
}

pub fn bit_errors(truth: &[u8], predicted: &[u8]) -> Result<u64> {
    if truth.len() != predicted.len() {
        return Err(Error::invalid(format!(
            "bit sequences differ in length: {} vs {}",
            truth.len(),
            predicted.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::invalid("empty bit sequence"));
    }
    Ok(truth.iter().zip(predicted).filter(|(a, b)| a != b).count() as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Csv,
    Binary,
}

impl FileFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => FileFormat::Csv,
            _ => FileFormat::Binary,
        }
    }
}

impl std::str::FromStr for FileFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(FileFormat::Csv),
            "bin" | "binary" | "imdd" => Ok(FileFormat::Binary),
            other => Err(Error::invalid(format!("unknown format '{other}'"))),
        }
    }
}

pub fn export(set: &ChunkSet, path: &Path, format: FileFormat) -> Result<()> {
    let bytes = match format {
        FileFormat::Binary => encode_binary(set)?,
        FileFormat::Csv => encode_csv(set)?.into_bytes(),
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads a file written by [`export`]; the format is sniffed from the magic.
pub fn import(path: &Path) -> Result<ChunkSet> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        decode_binary(&bytes)
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::format(e.utf8_error().valid_up_to() as u64, "not UTF-8"))?;
        decode_csv(&text)
    }
}

/// `IMDD` | u16 version | link header | u64 N | u64 n_taps | u8 bit_level |
/// N·n_taps f64 | labels (u8 per row, or N·M bits packed MSB first).
pub fn encode_binary(set: &ChunkSet) -> Result<Vec<u8>> {
    set.validate()?;
    let n = set.len();
    let mut out = Vec::with_capacity(64 + 8 * set.chunks.len() + n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    set.params.write_header(&mut out);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(set.n_taps as u64).to_le_bytes());
    out.push(set.labels.is_bit_level() as u8);
    for v in &set.chunks {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match &set.labels {
        Labels::Symbols(q) => {
            for &i in q {
                let b = u8::try_from(i)
                    .map_err(|_| Error::invalid(format!("symbol index {i} does not fit in u8")))?;
                out.push(b);
            }
        }
        Labels::Bits { bits, .. } => out.extend(pack_bits(bits)),
    }
    Ok(out)
}

pub fn decode_binary(bytes: &[u8]) -> Result<ChunkSet> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let params = LinkParams::read_header(&mut r)?;
    let n_at = r.offset();
    let n = r.u64()? as usize;
    let n_taps = r.u64()? as usize;
    let flag_at = r.offset();
    let bit_level = match r.u8()? {
        0 => false,
        1 => true,
        f => return Err(Error::format(flag_at, format!("bad bit_level flag {f}"))),
    };
    let cells = n
        .checked_mul(n_taps)
        .filter(|c| c.saturating_mul(8) <= r.remaining())
        .ok_or_else(|| Error::format(r.offset(), format!("truncated: {n}×{n_taps} chunk matrix")))?;
    let chunks = (0..cells).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let width = params.alphabet.len().trailing_zeros() as usize;
    let labels = if bit_level {
        let n_bits = n * width;
        let packed = r.take(n_bits.div_ceil(8))?;
        Labels::Bits {
            width,
            bits: unpack_bits(packed, n_bits),
        }
    } else {
        let m = params.alphabet.len();
        let raw = r.take(n)?;
        if let Some(pos) = raw.iter().position(|&b| b as usize >= m) {
            return Err(Error::format(
                r.offset() - (n - pos) as u64,
                format!("symbol index {} out of range", raw[pos]),
            ));
        }
        Labels::Symbols(raw.iter().map(|&b| b as usize).collect())
    };
    r.finish()?;
    let set = ChunkSet {
        params,
        n_taps,
        chunks,
        labels,
    };
    set.validate().map_err(|e| Error::format(n_at, e.to_string()))?;
    Ok(set)
}

fn pack_bits(bits: &[u8]) -> Vec<u8> {
    bits.chunks(8)
        .map(|g| {
            g.iter()
                .enumerate()
                .fold(0u8, |acc, (i, &b)| acc | ((b & 1) << (7 - i)))
        })
        .collect()
}

fn unpack_bits(packed: &[u8], n_bits: usize) -> Vec<u8> {
    (0..n_bits).map(|i| (packed[i / 8] >> (7 - i % 8)) & 1).collect()
}

/// Link parameters as `# key = value` comment lines, then a header row
/// `c0,…,c{n-1},q` (or `…,b1,…,bM`), then one row per chunk. Values carry
/// 17 significant digits so they parse back to the same f64.
pub fn encode_csv(set: &ChunkSet) -> Result<String> {
    set.validate()?;
    let mut s = String::new();
    for line in set.params.to_config_string().lines() {
        let _ = writeln!(s, "# {line}");
    }
    let mut header: Vec<String> = (0..set.n_taps).map(|j| format!("c{j}")).collect();
    match &set.labels {
        Labels::Symbols(_) => header.push("q".into()),
        Labels::Bits { width, .. } => header.extend((1..=*width).map(|i| format!("b{i}"))),
    }
    let _ = writeln!(s, "{}", header.join(","));
    for (k, row) in set.rows().enumerate() {
        for v in row {
            let _ = write!(s, "{v:.16e},");
        }
        match &set.labels {
            Labels::Symbols(q) => {
                let _ = writeln!(s, "{}", q[k]);
            }
            Labels::Bits { width, bits } => {
                let cols: Vec<String> = bits[k * width..(k + 1) * width]
                    .iter()
                    .map(|b| b.to_string())
                    .collect();
                let _ = writeln!(s, "{}", cols.join(","));
            }
        }
    }
    Ok(s)
}

pub fn decode_csv(text: &str) -> Result<ChunkSet> {
    let mut config = String::new();
    let mut lines = text.lines().enumerate().peekable();
    while let Some((_, line)) = lines.peek() {
        match line.strip_prefix('#') {
            Some(rest) => {
                config.push_str(rest.trim());
                config.push('\n');
                lines.next();
            }
            None => break,
        }
    }
    let params = LinkParams::from_config_str(&config, LinkParams::lcd())?;
    let (header_no, header) = lines
        .next()
        .ok_or_else(|| Error::format(0, "missing CSV header row"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let n_taps = cols.iter().take_while(|c| c.starts_with('c')).count();
    let label_cols = &cols[n_taps..];
    let bit_level = match label_cols {
        ["q"] => false,
        l if !l.is_empty() && l.iter().all(|c| c.starts_with('b')) => true,
        _ => {
            return Err(Error::format(
                header_no as u64 + 1,
                format!("unrecognized label columns {label_cols:?}"),
            ))
        }
    };
    let width = label_cols.len();
    let mut chunks = Vec::new();
    let mut symbols = Vec::new();
    let mut bits = Vec::new();
    for (no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::format(no as u64 + 1, msg);
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n_taps + width {
            return Err(bad(format!(
                "expected {} fields, got {}",
                n_taps + width,
                fields.len()
            )));
        }
        for f in &fields[..n_taps] {
            chunks.push(f.trim().parse::<f64>().map_err(|_| bad(format!("bad value '{f}'")))?);
        }
        for f in &fields[n_taps..] {
            let v: u64 = f.trim().parse().map_err(|_| bad(format!("bad label '{f}'")))?;
            if bit_level {
                if v > 1 {
                    return Err(bad(format!("bit label {v} is not 0 or 1")));
                }
                bits.push(v as u8);
            } else {
                if v as usize >= params.alphabet.len() {
                    return Err(bad(format!("symbol index {v} out of range")));
                }
                symbols.push(v as usize);
            }
        }
    }
    let labels = if bit_level {
        Labels::Bits { width, bits }
    } else {
        Labels::Symbols(symbols)
    };
    let set = ChunkSet {
        params,
        n_taps,
        chunks,
        labels,
    };
    set.validate()
        .map_err(|e| Error::format(header_no as u64 + 1, e.to_string()))?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::{LookupDemapper, NoiseReference};

    fn small(mut p: LinkParams) -> DatasetConfig {
        p.n_symbols = 400;
        DatasetConfig::new(p)
    }

    #[test]
    fn replay_without_continuous_sampling() {
        let mut cfg = small(LinkParams::lcd());
        cfg.continuous_sampling = false;
        assert_eq!(next_epoch(&cfg, 0).unwrap(), next_epoch(&cfg, 5).unwrap());
    }

    #[test]
    fn fresh_epochs_differ() {
        let cfg = small(LinkParams::lcd());
        let a = next_epoch(&cfg, 0).unwrap();
        let b = next_epoch(&cfg, 1).unwrap();
        assert_ne!(a.labels, b.labels);
        // reproducible regardless of order
        assert_eq!(b, next_epoch(&cfg, 1).unwrap());
    }

    #[test]
    fn bit_level_labels_are_gray() {
        let mut cfg = small(LinkParams::lcd());
        cfg.bit_level = true;
        let set = next_epoch(&cfg, 0).unwrap();
        let q = set.symbol_indices().unwrap();
        let Labels::Bits { width, bits } = &set.labels else {
            panic!("expected bit labels")
        };
        assert_eq!(*width, 2);
        let k = q.iter().position(|&i| i == 3).unwrap();
        assert_eq!(&bits[2 * k..2 * k + 2], &[1, 0]);
    }

    #[test]
    fn setters() {
        let cfg = DatasetConfig::new(LinkParams::ssmf());
        let a = set_n_taps(&cfg, 7).unwrap();
        assert_eq!(a.link.n_taps, 7);
        let b = set_noise_power_db(&a, -20.0).unwrap();
        assert!((b.link.noise_power_linear() - 0.01).abs() < 1e-15);
        let c = set_n_taps(&set_noise_power_db(&cfg, -20.0).unwrap(), 7).unwrap();
        assert_eq!(b, c);
        assert!(set_n_taps(&cfg, 8).is_err());
        assert!(set_noise_power_db(&cfg, f64::NAN).is_err());
    }

    #[test]
    fn bit_error_rate_counts() {
        assert_eq!(bit_error_rate(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap(), 0.0);
        assert_eq!(bit_error_rate(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.25);
        assert_eq!(bit_error_rate(&[0, 1, 1, 0], &[1, 0, 0, 1]).unwrap(), 1.0);
        assert!(bit_error_rate(&[0, 1], &[0]).is_err());
        assert!(bit_error_rate(&[], &[]).is_err());
    }

    #[test]
    fn binary_round_trip_and_truncation() {
        for bit_level in [false, true] {
            let mut cfg = small(LinkParams::ssmf());
            cfg.bit_level = bit_level;
            let set = next_epoch(&cfg, 3).unwrap();
            let bytes = encode_binary(&set).unwrap();
            assert_eq!(decode_binary(&bytes).unwrap(), set);
            let cut = bytes.len() - 3;
            match decode_binary(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("expected format error, got {other:?}"),
            }
            let mut bad = bytes.clone();
            bad[0] = b'X';
            assert!(matches!(decode_binary(&bad), Err(Error::Format { offset: 0, .. })));
            let mut bad = bytes;
            bad[4] = 9;
            assert!(matches!(decode_binary(&bad), Err(Error::Format { offset: 4, .. })));
        }
    }

    #[test]
    fn csv_round_trip_exact() {
        for bit_level in [false, true] {
            let mut cfg = small(LinkParams::lcd());
            cfg.bit_level = bit_level;
            let set = next_epoch(&cfg, 1).unwrap();
            let text = encode_csv(&set).unwrap();
            assert_eq!(decode_csv(&text).unwrap(), set);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = next_epoch(&small(LinkParams::lcd()), 0).unwrap();
        for (name, fmt) in [("a.imdd", FileFormat::Binary), ("a.csv", FileFormat::Csv)] {
            let path = dir.path().join(name);
            export(&set, &path, fmt).unwrap();
            assert_eq!(import(&path).unwrap(), set);
        }
    }

    #[test]
    fn labels_match_noiseless_centers() {
        let mut p = LinkParams::lcd();
        p.fiber_length = 0.0;
        p.noise_power_db = -300.0;
        p.noise_reference = NoiseReference::Absolute;
        let set = next_epoch(&small(p), 0).unwrap();
        let q = set.symbol_indices().unwrap();
        let centers: Vec<f64> = set.rows().map(|r| r[set.n_taps / 2]).collect();
        let demapper = LookupDemapper::fit(&centers, &q, 4).unwrap();
        for (y, &want) in centers.iter().zip(&q) {
            assert_eq!(demapper.decide(*y), want);
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn export_import_identity(
            seed in 0u64..1000,
            db in -30.0f64..-5.0,
            half in 0usize..6,
            bit_level in proptest::bool::ANY,
            ssmf in proptest::bool::ANY,
        ) {
            let mut p = if ssmf { LinkParams::ssmf() } else { LinkParams::lcd() };
            p.seed = seed;
            p.noise_power_db = db;
            p.n_taps = 2 * half + 1;
            p.n_symbols = 64;
            let mut cfg = DatasetConfig::new(p);
            cfg.bit_level = bit_level;
            let set = next_epoch(&cfg, seed % 3).unwrap();
            proptest::prop_assert_eq!(&decode_binary(&encode_binary(&set).unwrap()).unwrap(), &set);
            proptest::prop_assert_eq!(&decode_csv(&encode_csv(&set).unwrap()).unwrap(), &set);
        }
    }
}
