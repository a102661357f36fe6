//! Link parameterization and the bits → received-samples pipeline.
//!
//! ```text
//! bits → gray map → normalize → upsample → RRC → +bias → fiber CD
//!      → |·|² → +AWGN → RRC → downsample → y
//! ```

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use crate::dsp::{self, Fiber, RrcSpec, SpectralPlan};
use crate::error::{Error, Result};

/// ps/(nm·km) → s/m².
pub const PS_PER_NM_KM: f64 = 1e-6;

/// How `noise_power_db` is turned into the variance of the post-detection
/// noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseReference {
    /// σ² = 10^(dB/10), independent of the signal.
    #[default]
    Absolute,
    /// σ² = 10^(dB/10) · P, with P the mean power of the noiseless detected
    /// waveform, so `noise_power_db` is the negative electrical SNR.
    DetectedPower,
}

impl NoiseReference {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseReference::Absolute => "absolute",
            NoiseReference::DetectedPower => "detected_power",
        }
    }

    fn code(&self) -> u64 {
        match self {
            NoiseReference::Absolute => 0,
            NoiseReference::DetectedPower => 1,
        }
    }

    fn from_code(code: u64) -> Option<Self> {
        match code {
            0 => Some(NoiseReference::Absolute),
            1 => Some(NoiseReference::DetectedPower),
            _ => None,
        }
    }
}

impl std::str::FromStr for NoiseReference {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(NoiseReference::Absolute),
            "detected_power" => Ok(NoiseReference::DetectedPower),
            other => Err(Error::invalid(format!("unknown noise reference '{other}'"))),
        }
    }
}

/// Full IM/DD link parameterization. All physical quantities are SI.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkParams {
    /// Symbols per generated block.
    pub n_symbols: usize,
    /// Receiver window length, odd.
    pub n_taps: usize,
    /// Transmit levels before power normalization, strictly increasing.
    pub alphabet: Vec<f64>,
    pub oversampling_factor: usize,
    /// Symbols per second.
    pub baudrate: f64,
    /// Laser wavelength in m.
    pub wavelength: f64,
    /// Dispersion parameter D in s/m².
    pub dispersion_parameter: f64,
    /// Fiber length in m.
    pub fiber_length: f64,
    pub noise_power_db: f64,
    pub roll_off: f64,
    /// Added to the pulse-shaped field before the fiber.
    pub bias: f64,
    pub seed: u64,
    pub noise_reference: NoiseReference,
}

impl LinkParams {
    /// Low-chromatic-dispersion O-band task.
    pub fn lcd() -> Self {
        LinkParams {
            n_symbols: 10_000,
            n_taps: 7,
            alphabet: vec![-3.0, -1.0, 1.0, 3.0],
            oversampling_factor: 3,
            baudrate: 112e9,
            wavelength: 1270e-9,
            dispersion_parameter: -5.0 * PS_PER_NM_KM,
            fiber_length: 4e3,
            noise_power_db: -20.0,
            roll_off: 0.2,
            bias: 2.25,
            seed: 0,
            noise_reference: NoiseReference::default(),
        }
    }

    /// Standard single-mode fiber C-band task.
    pub fn ssmf() -> Self {
        LinkParams {
            n_symbols: 10_000,
            n_taps: 21,
            alphabet: vec![0.0, 1.0, 2f64.sqrt(), 3f64.sqrt()],
            oversampling_factor: 3,
            baudrate: 50e9,
            wavelength: 1550e-9,
            dispersion_parameter: -17.0 * PS_PER_NM_KM,
            fiber_length: 5e3,
            noise_power_db: -20.0,
            roll_off: 0.2,
            bias: 0.25,
            seed: 0,
            noise_reference: NoiseReference::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_symbols == 0 {
            return Err(Error::invalid("n_symbols must be positive"));
        }
        if self.n_taps % 2 == 0 {
            return Err(Error::invalid(format!("n_taps must be odd, got {}", self.n_taps)));
        }
        if self.n_taps > self.n_symbols {
            return Err(Error::invalid(format!(
                "n_taps {} exceeds n_symbols {}",
                self.n_taps, self.n_symbols
            )));
        }
        if self.oversampling_factor < 2 {
            return Err(Error::invalid("oversampling_factor must be at least 2"));
        }
        SymbolAlphabet::new(&self.alphabet)?;
        for (name, v) in [
            ("baudrate", self.baudrate),
            ("wavelength", self.wavelength),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.fiber_length >= 0.0) || !self.fiber_length.is_finite() {
            return Err(Error::invalid("fiber_length must be finite and >= 0"));
        }
        for (name, v) in [
            ("dispersion_parameter", self.dispersion_parameter),
            ("noise_power_db", self.noise_power_db),
            ("bias", self.bias),
        ] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite")));
            }
        }
        if !(0.0..=1.0).contains(&self.roll_off) {
            return Err(Error::invalid("roll_off must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn symbol_alphabet(&self) -> Result<SymbolAlphabet> {
        SymbolAlphabet::new(&self.alphabet)
    }

    /// Bits per symbol, M = log₂|alphabet|.
    pub fn bits_per_symbol(&self) -> usize {
        self.alphabet.len().trailing_zeros() as usize
    }

    /// 10^(noise_power_db/10); the scale applied to the noise reference.
    pub fn noise_power_linear(&self) -> f64 {
        dsp::db_to_linear(self.noise_power_db)
    }

    pub fn symbol_period(&self) -> f64 {
        1.0 / self.baudrate
    }

    pub fn sample_rate(&self) -> f64 {
        self.baudrate * self.oversampling_factor as f64
    }

    pub fn fiber(&self) -> Fiber {
        Fiber {
            wavelength: self.wavelength,
            dispersion: self.dispersion_parameter,
            length: self.fiber_length,
        }
    }

    pub fn dispersion_ps_nm_km(&self) -> f64 {
        self.dispersion_parameter / PS_PER_NM_KM
    }

    /// Renders the parameters as a `key = value` configuration file. Values are
    /// SI so that parsing the text back is exact.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let alphabet: Vec<String> = self.alphabet.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "N = {}", self.n_symbols);
        let _ = writeln!(s, "n_taps = {}", self.n_taps);
        let _ = writeln!(s, "alphabet = {}", alphabet.join(", "));
        let _ = writeln!(s, "oversampling_factor = {}", self.oversampling_factor);
        let _ = writeln!(s, "baudrate = {:?}", self.baudrate);
        let _ = writeln!(s, "wavelength = {:?}", self.wavelength);
        let _ = writeln!(s, "dispersion_parameter = {:?}", self.dispersion_parameter);
        let _ = writeln!(s, "fiber_length = {:?}", self.fiber_length);
        let _ = writeln!(s, "noise_power_db = {:?}", self.noise_power_db);
        let _ = writeln!(s, "roll_off = {:?}", self.roll_off);
        let _ = writeln!(s, "bias = {:?}", self.bias);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "noise_reference = {}", self.noise_reference.as_str());
        s
    }

    /// Parses a `key = value` configuration. Keys not present keep the value
    /// from `base`. Lines starting with `#` are comments. Alphabet entries may
    /// be written as `sqrt(x)`.
    pub fn from_config_str(text: &str, base: LinkParams) -> Result<Self> {
        let mut p = base;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::format(lineno as u64 + 1, msg);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key = value, got '{line}'")))?;
            let key = key.trim();
            let value = value.trim();
            let num = |v: &str| -> Result<f64> {
                parse_number(v).ok_or_else(|| bad(format!("bad number '{v}' for {key}")))
            };
            let int = |v: &str| -> Result<usize> {
                v.parse::<usize>().map_err(|_| bad(format!("bad integer '{v}' for {key}")))
            };
            match key {
                "N" | "n_symbols" => p.n_symbols = int(value)?,
                "n_taps" => p.n_taps = int(value)?,
                "alphabet" => {
                    p.alphabet = value
                        .trim_start_matches('[')
                        .trim_end_matches(']')
                        .split(',')
                        .map(|t| num(t.trim()))
                        .collect::<Result<_>>()?
                }
                "oversampling_factor" => p.oversampling_factor = int(value)?,
                "baudrate" => p.baudrate = num(value)?,
                "baudrate_gbd" => p.baudrate = num(value)? * 1e9,
                "wavelength" => p.wavelength = num(value)?,
                "wavelength_nm" => p.wavelength = num(value)? * 1e-9,
                "dispersion_parameter" => p.dispersion_parameter = num(value)?,
                "dispersion_parameter_ps_nm_km" => {
                    p.dispersion_parameter = num(value)? * PS_PER_NM_KM
                }
                "fiber_length" => p.fiber_length = num(value)?,
                "fiber_length_km" => p.fiber_length = num(value)? * 1e3,
                "noise_power_db" => p.noise_power_db = num(value)?,
                "roll_off" => p.roll_off = num(value)?,
                "bias" => p.bias = num(value)?,
                "seed" => {
                    p.seed = value
                        .parse()
                        .map_err(|_| bad(format!("bad seed '{value}'")))?
                }
                "noise_reference" => {
                    p.noise_reference = value.parse().map_err(|e: Error| bad(e.to_string()))?
                }
                other => return Err(bad(format!("unknown key '{other}'"))),
            }
        }
        p.validate()?;
        Ok(p)
    }

    /// Every numeric field in declaration order, as stored in binary headers.
    pub(crate) fn header_words(&self) -> Vec<HeaderWord> {
        let mut w = vec![
            HeaderWord::U64(self.n_symbols as u64),
            HeaderWord::U64(self.n_taps as u64),
            HeaderWord::U64(self.alphabet.len() as u64),
        ];
        w.extend(self.alphabet.iter().map(|&v| HeaderWord::F64(v)));
        w.extend([
            HeaderWord::U64(self.oversampling_factor as u64),
            HeaderWord::F64(self.baudrate),
            HeaderWord::F64(self.wavelength),
            HeaderWord::F64(self.dispersion_parameter),
            HeaderWord::F64(self.fiber_length),
            HeaderWord::F64(self.noise_power_db),
            HeaderWord::F64(self.roll_off),
            HeaderWord::F64(self.bias),
            HeaderWord::U64(self.seed),
            HeaderWord::U64(self.noise_reference.code()),
        ]);
        w
    }

    pub(crate) fn write_header(&self, out: &mut Vec<u8>) {
        for word in self.header_words() {
            match word {
                HeaderWord::U64(v) => out.extend_from_slice(&v.to_le_bytes()),
                HeaderWord::F64(v) => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }

    pub(crate) fn read_header(r: &mut crate::io::ByteReader<'_>) -> Result<Self> {
        let n_symbols = r.u64()? as usize;
        let n_taps = r.u64()? as usize;
        let len_at = r.offset();
        let n_levels = r.u64()? as usize;
        if n_levels > 1 << 16 {
            return Err(Error::format(len_at, format!("implausible alphabet size {n_levels}")));
        }
        let alphabet = (0..n_levels).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let oversampling_factor = r.u64()? as usize;
        let baudrate = r.f64()?;
        let wavelength = r.f64()?;
        let dispersion_parameter = r.f64()?;
        let fiber_length = r.f64()?;
        let noise_power_db = r.f64()?;
        let roll_off = r.f64()?;
        let bias = r.f64()?;
        let seed = r.u64()?;
        let code_at = r.offset();
        let noise_reference = NoiseReference::from_code(r.u64()?)
            .ok_or_else(|| Error::format(code_at, "unknown noise reference code"))?;
        Ok(LinkParams {
            n_symbols,
            n_taps,
            alphabet,
            oversampling_factor,
            baudrate,
            wavelength,
            dispersion_parameter,
            fiber_length,
            noise_power_db,
            roll_off,
            bias,
            seed,
            noise_reference,
        })
    }

    /// Stable 64-bit FNV-1a hash over the binary header.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        self.write_header(&mut bytes);
        fnv1a(&bytes)
    }
}

pub(crate) enum HeaderWord {
    U64(u64),
    F64(f64),
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn parse_number(s: &str) -> Option<f64> {
    let s = s.trim();
    if let Some(inner) = s.strip_prefix("sqrt(").and_then(|r| r.strip_suffix(')')) {
        return inner.trim().parse::<f64>().ok().map(f64::sqrt);
    }
    if let Some(inner) = s.strip_prefix("-sqrt(").and_then(|r| r.strip_suffix(')')) {
        return inner.trim().parse::<f64>().ok().map(|v| -v.sqrt());
    }
    s.parse().ok()
}

/// Reflected binary Gray code of width log₂(m), one bit pattern per symbol
/// index, most significant bit first.
pub fn gray_labels(m: usize) -> Result<Vec<Vec<u8>>> {
    if m < 2 || !m.is_power_of_two() {
        return Err(Error::invalid(format!("alphabet size {m} is not a power of two >= 2")));
    }
    let width = m.trailing_zeros() as usize;
    Ok((0..m)
        .map(|i| {
            let g = i ^ (i >> 1);
            (0..width).rev().map(|b| ((g >> b) & 1) as u8).collect()
        })
        .collect())
}

/// Ordered transmit levels with their Gray labels and power normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolAlphabet {
    levels: Vec<f64>,
    gray_labels: Vec<Vec<u8>>,
    power_scale: f64,
    /// Index whose label has integer value `code`.
    index_of_code: Vec<usize>,
}

impl SymbolAlphabet {
    pub fn new(levels: &[f64]) -> Result<Self> {
        let gray_labels = gray_labels(levels.len())?;
        if levels.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("alphabet levels must be finite"));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("alphabet levels must be strictly increasing"));
        }
        let mean_power = levels.iter().map(|v| v * v).sum::<f64>() / levels.len() as f64;
        if mean_power <= 0.0 {
            return Err(Error::invalid("alphabet has zero power"));
        }
        let mut index_of_code = vec![0; levels.len()];
        for (i, label) in gray_labels.iter().enumerate() {
            index_of_code[bits_to_code(label)] = i;
        }
        Ok(SymbolAlphabet {
            levels: levels.to_vec(),
            gray_labels,
            power_scale: 1.0 / mean_power.sqrt(),
            index_of_code,
        })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.levels.len().trailing_zeros() as usize
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn power_scale(&self) -> f64 {
        self.power_scale
    }

    pub fn gray_labels(&self) -> &[Vec<u8>] {
        &self.gray_labels
    }

    pub fn label(&self, index: usize) -> &[u8] {
        &self.gray_labels[index]
    }

    /// Levels after scaling to unit average power.
    pub fn normalized_levels(&self) -> Vec<f64> {
        self.levels.iter().map(|v| v * self.power_scale).collect()
    }

    pub fn index_of_bits(&self, bits: &[u8]) -> usize {
        self.index_of_code[bits_to_code(bits)]
    }
}

fn bits_to_code(bits: &[u8]) -> usize {
    bits.iter().fold(0, |acc, &b| (acc << 1) | (b & 1) as usize)
}

/// Groups consecutive bits into symbols through the Gray labeling.
pub fn map_bits(bits: &[u8], alphabet: &SymbolAlphabet) -> Result<Vec<usize>> {
    let width = alphabet.bits_per_symbol();
    if bits.len() % width != 0 {
        return Err(Error::invalid(format!(
            "{} bits do not divide into {width}-bit symbols",
            bits.len()
        )));
    }
    if let Some(b) = bits.iter().find(|&&b| b > 1) {
        return Err(Error::invalid(format!("bit value {b} is not 0 or 1")));
    }
    Ok(bits.chunks(width).map(|g| alphabet.index_of_bits(g)).collect())
}

/// Inverse of [`map_bits`].
pub fn unmap_bits(indices: &[usize], alphabet: &SymbolAlphabet) -> Vec<u8> {
    indices
        .iter()
        .flat_map(|&q| alphabet.label(q).iter().copied())
        .collect()
}

/// Transmit amplitudes at unit average power.
pub fn normalize(indices: &[usize], alphabet: &SymbolAlphabet) -> Vec<f64> {
    let levels = alphabet.normalized_levels();
    indices.iter().map(|&q| levels[q]).collect()
}

/// One simulated block.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkBlock {
    pub bits: Vec<u8>,
    pub symbol_indices: Vec<usize>,
    pub received: Vec<f64>,
    pub noise_power_db_used: f64,
}

/// Intermediate waveforms of one simulated block, for diagnostics.
#[derive(Debug, Clone)]
pub struct LinkTrace {
    pub block: LinkBlock,
    /// Photodiode output before noise, oversampled.
    pub detected: Vec<f64>,
    /// Photodiode output after noise, oversampled.
    pub detected_noisy: Vec<f64>,
    /// Variance of the injected noise.
    pub noise_variance: f64,
}

/// A link instance with filter responses and FFT plans prepared for one block
/// length.
#[derive(Debug, Clone)]
pub struct ImddLink {
    params: LinkParams,
    alphabet: SymbolAlphabet,
    plan: SpectralPlan,
    rrc: Vec<f64>,
    fiber: Vec<Complex64>,
}

impl ImddLink {
    pub fn new(params: LinkParams) -> Result<Self> {
        params.validate()?;
        let alphabet = params.symbol_alphabet()?;
        let n = params.n_symbols * params.oversampling_factor;
        let spec = RrcSpec::new(params.roll_off, params.symbol_period())?;
        let rrc = dsp::rrc_response(n, params.sample_rate(), &spec)?;
        let fiber = params.fiber().response(n, params.sample_rate());
        Ok(ImddLink {
            alphabet,
            plan: SpectralPlan::new(n),
            rrc,
            fiber,
            params,
        })
    }

    pub fn params(&self) -> &LinkParams {
        &self.params
    }

    pub fn alphabet(&self) -> &SymbolAlphabet {
        &self.alphabet
    }

    pub fn bits_per_block(&self) -> usize {
        self.params.n_symbols * self.alphabet.bits_per_symbol()
    }

    /// Uniform i.i.d. bits for one block.
    pub fn random_bits<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u8> {
        (0..self.bits_per_block()).map(|_| rng.random_range(0..2u8)).collect()
    }

    /// Draws bits and transmits them; both come from `rng`.
    pub fn random_block<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<LinkBlock> {
        let bits = self.random_bits(rng);
        self.transmit(bits, rng)
    }

    pub fn transmit<R: Rng + ?Sized>(&self, bits: Vec<u8>, rng: &mut R) -> Result<LinkBlock> {
        Ok(self.trace(bits, rng)?.block)
    }

    /// Noiseless photodiode output for a symbol sequence, oversampled.
    pub fn detected(&self, indices: &[usize]) -> Vec<f64> {
        let p = &self.params;
        let x = normalize(indices, &self.alphabet);
        let up = dsp::upsample(&x, p.oversampling_factor, p.baudrate);
        let mut field: Vec<Complex64> = self
            .plan
            .filter_real(&up.samples, &self.rrc)
            .into_iter()
            .map(|s| Complex64::new(s + p.bias, 0.0))
            .collect();
        if p.fiber_length != 0.0 && p.dispersion_parameter != 0.0 {
            self.plan.filter_complex(&mut field, &self.fiber);
        }
        field.iter().map(|c| c.norm_sqr()).collect()
    }

    /// Noise variance for a given noiseless detected waveform.
    pub fn noise_variance(&self, detected: &[f64]) -> f64 {
        let scale = self.params.noise_power_linear();
        match self.params.noise_reference {
            NoiseReference::Absolute => scale,
            NoiseReference::DetectedPower => {
                let power = detected.iter().map(|v| v * v).sum::<f64>() / detected.len() as f64;
                scale * power
            }
        }
    }

    /// Receive filter and symbol-rate sampling of an oversampled waveform.
    pub fn receive(&self, detected: &[f64]) -> Vec<f64> {
        let filtered = self.plan.filter_real(detected, &self.rrc);
        filtered
            .into_iter()
            .step_by(self.params.oversampling_factor)
            .collect()
    }

    pub fn trace<R: Rng + ?Sized>(&self, bits: Vec<u8>, rng: &mut R) -> Result<LinkTrace> {
        if bits.len() != self.bits_per_block() {
            return Err(Error::invalid(format!(
                "expected {} bits per block, got {}",
                self.bits_per_block(),
                bits.len()
            )));
        }
        let indices = map_bits(&bits, &self.alphabet)?;
        let detected = self.detected(&indices);
        let noise_variance = self.noise_variance(&detected);
        let mut detected_noisy = detected.clone();
        dsp::add_noise_in_place(&mut detected_noisy, noise_variance, rng)?;
        let received = self.receive(&detected_noisy);
        Ok(LinkTrace {
            block: LinkBlock {
                bits,
                symbol_indices: indices,
                received,
                noise_power_db_used: self.params.noise_power_db,
            },
            detected,
            detected_noisy,
            noise_variance,
        })
    }
}

/// Simulates one block for `bits`, drawing noise from a stream seeded by
/// `params.seed`.
pub fn simulate(params: &LinkParams, bits: Vec<u8>) -> Result<LinkBlock> {
    let link = ImddLink::new(params.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    link.transmit(bits, &mut rng)
}

/// Smallest odd window, centered on the peak, that holds at least 99.9 % of the
/// energy of the noiseless response to a single symbol.
///
/// The excitation is one full-swing symbol (highest level) in the middle of a
/// block of lowest-level symbols; the response is the difference to the
/// unexcited block at symbol rate.
pub fn isi_span_estimate(params: &LinkParams) -> Result<usize> {
    let link = ImddLink::new(params.clone())?;
    let n = params.n_symbols;
    let m = link.alphabet().len();
    let base_idx = vec![0usize; n];
    let mut exc_idx = base_idx.clone();
    exc_idx[n / 2] = m - 1;
    let base = link.receive(&link.detected(&base_idx));
    let exc = link.receive(&link.detected(&exc_idx));
    let diff: Vec<f64> = exc.iter().zip(&base).map(|(a, b)| a - b).collect();
    Ok(energy_span(&diff, 0.999))
}

/// Odd window length around the largest-magnitude sample that captures
/// `fraction` of the total energy of `h`, treating `h` as periodic.
pub fn energy_span(h: &[f64], fraction: f64) -> usize {
    let n = h.len();
    let total: f64 = h.iter().map(|v| v * v).sum();
    if n == 0 || total == 0.0 {
        return 1;
    }
    let peak = (0..n)
        .max_by(|&a, &b| h[a].abs().total_cmp(&h[b].abs()))
        .unwrap_or(0);
    let mut acc = h[peak] * h[peak];
    let mut width = 1;
    let mut half = 0;
    while acc < fraction * total && width < n {
        half += 1;
        acc += h[(peak + half) % n].powi(2) + h[(peak + n - half) % n].powi(2);
        width += 2;
    }
    width.min(if n % 2 == 1 { n } else { n - 1 })
}

/// Nearest-center demapper calibrated on labeled samples. Used as the
/// reference decision rule on noiseless or near-noiseless links.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupDemapper {
    centers: Vec<f64>,
}

impl LookupDemapper {
    /// Class means of `received` grouped by symbol index.
    pub fn fit(received: &[f64], indices: &[usize], m: usize) -> Result<Self> {
        if received.len() != indices.len() {
            return Err(Error::invalid("received and indices differ in length"));
        }
        let mut sum = vec![0.0; m];
        let mut count = vec![0usize; m];
        for (&y, &q) in received.iter().zip(indices) {
            if q >= m {
                return Err(Error::invalid(format!("symbol index {q} out of range")));
            }
            sum[q] += y;
            count[q] += 1;
        }
        if let Some(q) = count.iter().position(|&c| c == 0) {
            return Err(Error::invalid(format!("symbol {q} never observed")));
        }
        Ok(LookupDemapper {
            centers: sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect(),
        })
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Index of the nearest center; ties go to the lower index.
    pub fn decide(&self, y: f64) -> usize {
        let mut best = 0;
        for (q, c) in self.centers.iter().enumerate() {
            if (y - c).abs() < (y - self.centers[best]).abs() {
                best = q;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits_str(labels: &[Vec<u8>]) -> Vec<String> {
        labels
            .iter()
            .map(|l| l.iter().map(|b| char::from(b'0' + b)).collect())
            .collect()
    }

    #[test]
    fn gray_table() {
        assert_eq!(bits_str(&gray_labels(4).unwrap()), ["00", "01", "11", "10"]);
        assert_eq!(bits_str(&gray_labels(2).unwrap()), ["0", "1"]);
        assert_eq!(
            bits_str(&gray_labels(8).unwrap()),
            ["000", "001", "011", "010", "110", "111", "101", "100"]
        );
        assert!(gray_labels(6).is_err());
        assert!(gray_labels(1).is_err());
    }

    #[test]
    fn gray_adjacency_brute_force() {
        for m in [2, 4, 8, 16, 32, 64] {
            let labels = gray_labels(m).unwrap();
            assert!(labels[0].iter().all(|&b| b == 0));
            for w in labels.windows(2) {
                let d = w[0].iter().zip(&w[1]).filter(|(a, b)| a != b).count();
                assert_eq!(d, 1);
            }
            // bijective
            let mut codes: Vec<usize> = labels.iter().map(|l| bits_to_code(l)).collect();
            codes.sort();
            assert_eq!(codes, (0..m).collect::<Vec<_>>());
        }
    }

    #[test]
    fn map_bits_table() {
        let a = SymbolAlphabet::new(&[-3.0, -1.0, 1.0, 3.0]).unwrap();
        assert_eq!(map_bits(&[0, 0, 0, 1, 1, 1, 1, 0], &a).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(map_bits(&[0, 0, 0, 0], &a).unwrap(), vec![0, 0]);
        assert!(matches!(map_bits(&[0, 1, 1], &a), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn map_unmap_exhaustive() {
        let a = SymbolAlphabet::new(&[-3.0, -1.0, 1.0, 3.0]).unwrap();
        for len in (2..=16).step_by(2) {
            for v in 0u32..(1 << len) {
                let bits: Vec<u8> = (0..len).map(|i| ((v >> i) & 1) as u8).collect();
                let q = map_bits(&bits, &a).unwrap();
                assert_eq!(unmap_bits(&q, &a), bits);
            }
        }
    }

    #[test]
    fn power_scales() {
        let lcd = SymbolAlphabet::new(&LinkParams::lcd().alphabet).unwrap();
        assert!((lcd.power_scale() - 1.0 / 5f64.sqrt()).abs() < 1e-15);
        let ssmf = SymbolAlphabet::new(&LinkParams::ssmf().alphabet).unwrap();
        assert!((ssmf.power_scale() - 1.0 / 1.5f64.sqrt()).abs() < 1e-15);
        let bpsk = SymbolAlphabet::new(&[-1.0, 1.0]).unwrap();
        assert_eq!(bpsk.power_scale(), 1.0);
        for a in [lcd, ssmf] {
            let p: f64 = a.normalized_levels().iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_empirical_power() {
        let a = SymbolAlphabet::new(&[-3.0, -1.0, 1.0, 3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..4)).collect();
        let x = normalize(&q, &a);
        let p = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        assert!((p - 1.0).abs() < 0.05);
    }

    #[test]
    fn alphabet_validation() {
        assert!(SymbolAlphabet::new(&[0.0, 1.0, 2.0]).is_err());
        assert!(SymbolAlphabet::new(&[1.0, 0.0]).is_err());
        let mut p = LinkParams::lcd();
        p.n_taps = 8;
        assert!(p.validate().is_err());
        p.n_taps = 7;
        p.oversampling_factor = 1;
        assert!(p.validate().is_err());
    }

    #[test]
    fn constant_stream_is_constant() {
        let mut p = LinkParams::lcd();
        p.n_symbols = 512;
        p.noise_power_db = -300.0;
        p.noise_reference = NoiseReference::Absolute;
        let block = simulate(&p, vec![0; 1024]).unwrap();
        let first = block.received[0];
        for v in &block.received {
            assert!((v - first).abs() < 1e-9);
        }
    }

    #[test]
    fn simulate_is_deterministic() {
        let mut p = LinkParams::ssmf();
        p.n_symbols = 256;
        p.seed = 77;
        let link = ImddLink::new(p.clone()).unwrap();
        let bits = link.random_bits(&mut ChaCha8Rng::seed_from_u64(1));
        let a = simulate(&p, bits.clone()).unwrap();
        let b = simulate(&p, bits).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.received.len(), 256);
    }

    #[test]
    fn zero_dispersion_noiseless_is_separable() {
        let mut p = LinkParams::lcd();
        p.fiber_length = 0.0;
        p.noise_power_db = -300.0;
        p.n_symbols = 4096;
        let link = ImddLink::new(p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = link.random_block(&mut rng).unwrap();
        let demapper = LookupDemapper::fit(&block.received, &block.symbol_indices, 4).unwrap();
        for (&y, &q) in block.received.iter().zip(&block.symbol_indices) {
            assert_eq!(demapper.decide(y), q);
        }
    }

    #[test]
    fn post_detection_noise_has_target_variance() {
        let mut p = LinkParams::lcd();
        p.noise_reference = NoiseReference::Absolute;
        let link = ImddLink::new(p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bits = link.random_bits(&mut rng);
        let t = link.trace(bits, &mut rng).unwrap();
        let n = t.detected.len() as f64;
        let var = t
            .detected
            .iter()
            .zip(&t.detected_noisy)
            .map(|(a, b)| (b - a).powi(2))
            .sum::<f64>()
            / n;
        assert!((var / 0.01 - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn detection_ignores_dispersion_sign() {
        // A real transmit field makes the two signs complex conjugates.
        let mut p = LinkParams::ssmf();
        p.n_symbols = 256;
        let a = ImddLink::new(p.clone()).unwrap();
        p.dispersion_parameter = -p.dispersion_parameter;
        let b = ImddLink::new(p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let idx: Vec<usize> = (0..256).map(|_| rng.random_range(0..4)).collect();
        for (x, y) in a.detected(&idx).iter().zip(&b.detected(&idx)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn isi_span_grows_with_dispersion() {
        let mut p = LinkParams::lcd();
        p.fiber_length = 0.0;
        p.n_symbols = 512;
        let none = isi_span_estimate(&p).unwrap();
        let mut lcd = LinkParams::lcd();
        lcd.n_symbols = 512;
        let lcd_span = isi_span_estimate(&lcd).unwrap();
        let mut ssmf = LinkParams::ssmf();
        ssmf.n_symbols = 512;
        let ssmf_span = isi_span_estimate(&ssmf).unwrap();
        assert!(none <= lcd_span, "{none} {lcd_span}");
        assert!(lcd_span <= 7, "{lcd_span}");
        assert!(ssmf_span >= lcd_span, "{ssmf_span} {lcd_span}");
    }

    #[test]
    fn energy_span_cases() {
        assert_eq!(energy_span(&[0.0, 0.0, 1.0, 0.0, 0.0], 0.999), 1);
        assert_eq!(energy_span(&[0.0, 0.5, 1.0, 0.5, 0.0], 0.999), 3);
        assert_eq!(energy_span(&[0.0; 4], 0.999), 1);
    }

    #[test]
    fn config_round_trip() {
        for p in [LinkParams::lcd(), LinkParams::ssmf()] {
            let text = p.to_config_string();
            let back = LinkParams::from_config_str(&text, LinkParams::lcd()).unwrap();
            assert_eq!(back.fingerprint(), p.fingerprint(), "{text}");
        }
        let p = LinkParams::from_config_str(
            "# custom\ndispersion_parameter_ps_nm_km = -5\nalphabet = [0, 1, sqrt(2), sqrt(3)]\n",
            LinkParams::lcd(),
        )
        .unwrap();
        assert!((p.dispersion_parameter + 5e-6).abs() < 1e-20);
        assert_eq!(p.alphabet, LinkParams::ssmf().alphabet);
        assert!(matches!(
            LinkParams::from_config_str("bogus = 1", LinkParams::lcd()),
            Err(Error::Format { offset: 1, .. })
        ));
    }
}
