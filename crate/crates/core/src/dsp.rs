//! Signal-processing kernels for the oversampled link.
//!
//! Every filter here is applied on the whole block in the frequency domain,
//! i.e. as a circular convolution. The dispersion operator is periodic over
//! the block anyway, so pulse shaping and matched filtering use the same model
//! and no tap truncation length has to be chosen.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Vacuum speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 2.997_924_58e8;

/// Real-valued sampled signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    /// Samples per second.
    pub sample_rate: f64,
}

/// Complex optical field, used from the fiber input up to the photodiode.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldWaveform {
    pub samples: Vec<Complex64>,
    pub sample_rate: f64,
}

impl From<&Waveform> for FieldWaveform {
    fn from(w: &Waveform) -> Self {
        FieldWaveform {
            samples: w.samples.iter().map(|&s| Complex64::new(s, 0.0)).collect(),
            sample_rate: w.sample_rate,
        }
    }
}

/// Root-raised-cosine filter description, unit-energy gain convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RrcSpec {
    pub roll_off: f64,
    /// Symbol period in seconds.
    pub symbol_period: f64,
}

impl RrcSpec {
    pub fn new(roll_off: f64, symbol_period: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&roll_off) {
            return Err(Error::invalid(format!("roll-off {roll_off} outside [0, 1]")));
        }
        if !(symbol_period > 0.0) || !symbol_period.is_finite() {
            return Err(Error::invalid(format!("symbol period {symbol_period} must be positive")));
        }
        Ok(RrcSpec {
            roll_off,
            symbol_period,
        })
    }

    /// Raised-cosine spectrum normalized to 1 in the passband.
    pub fn raised_cosine(&self, freq: f64) -> f64 {
        let t = self.symbol_period;
        let f = freq.abs();
        let f1 = (1.0 - self.roll_off) / (2.0 * t);
        let f2 = (1.0 + self.roll_off) / (2.0 * t);
        if f < f1 {
            1.0
        } else if f > f2 {
            0.0
        } else if self.roll_off == 0.0 {
            // the rectangular edge itself
            0.5
        } else {
            0.5 * (1.0 + (PI * t / self.roll_off * (f - f1)).cos())
        }
    }

    /// Highest frequency with nonzero response.
    pub fn band_edge(&self) -> f64 {
        (1.0 + self.roll_off) / (2.0 * self.symbol_period)
    }
}

/// Frequency of DFT bin `k` for a length-`n` transform at `sample_rate`.
pub fn bin_frequency(k: usize, n: usize, sample_rate: f64) -> f64 {
    let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    k * sample_rate / n as f64
}

/// RRC response on the length-`n` DFT grid.
///
/// Scaled so that the discrete impulse response has unit energy, which makes
/// the cascade of two filters sample to exactly 1 at the symbol instant.
pub fn rrc_response(n: usize, sample_rate: f64, spec: &RrcSpec) -> Result<Vec<f64>> {
    // Nyquist band edge of the sampled grid must cover the RRC support.
    if sample_rate < 2.0 * spec.band_edge() * (1.0 - 1e-12) {
        return Err(Error::invalid(format!(
            "sample rate {sample_rate} below RRC bandwidth {}",
            2.0 * spec.band_edge()
        )));
    }
    let sps = sample_rate * spec.symbol_period;
    Ok((0..n)
        .map(|k| (sps * spec.raised_cosine(bin_frequency(k, n, sample_rate))).sqrt())
        .collect())
}

/// Group-velocity dispersion β₂ in s²/m from D in s/m² and wavelength in m.
pub fn beta2(dispersion: f64, wavelength: f64) -> f64 {
    -dispersion * wavelength * wavelength / (2.0 * PI * SPEED_OF_LIGHT)
}

/// Fiber chromatic dispersion, all SI units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fiber {
    pub wavelength: f64,
    /// D in s/m².
    pub dispersion: f64,
    pub length: f64,
}

impl Fiber {
    /// All-pass response exp(i·β₂/2·ω²·L) on the DFT grid.
    pub fn response(&self, n: usize, sample_rate: f64) -> Vec<Complex64> {
        let b2 = beta2(self.dispersion, self.wavelength);
        (0..n)
            .map(|k| {
                let omega = 2.0 * PI * bin_frequency(k, n, sample_rate);
                Complex64::from_polar(1.0, 0.5 * b2 * omega * omega * self.length)
            })
            .collect()
    }
}

/// Forward/inverse FFT plans for one block length.
#[derive(Clone)]
pub struct SpectralPlan {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for SpectralPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralPlan").field("n", &self.n).finish()
    }
}

impl SpectralPlan {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        SpectralPlan {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place circular filtering: buf ← IFFT(FFT(buf) · response).
    pub fn filter_complex<R>(&self, buf: &mut [Complex64], response: &[R])
    where
        R: Copy + std::ops::Mul<Complex64, Output = Complex64>,
    {
        debug_assert_eq!(buf.len(), self.n);
        debug_assert_eq!(response.len(), self.n);
        self.forward.process(buf);
        let scale = 1.0 / self.n as f64;
        for (b, &h) in buf.iter_mut().zip(response) {
            *b = h * *b * scale;
        }
        self.inverse.process(buf);
    }

    /// Circular filtering of a real signal with a real, even response. The
    /// output is real up to rounding; the imaginary part is dropped.
    pub fn filter_real(&self, x: &[f64], response: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.filter_complex(&mut buf, response);
        buf.into_iter().map(|c| c.re).collect()
    }
}

/// Zero-insertion upsampling.
pub fn upsample(symbols: &[f64], factor: usize, symbol_rate: f64) -> Waveform {
    let factor = factor.max(1);
    let mut samples = vec![0.0; symbols.len() * factor];
    for (k, &s) in symbols.iter().enumerate() {
        samples[k * factor] = s;
    }
    Waveform {
        samples,
        sample_rate: symbol_rate * factor as f64,
    }
}

pub fn rrc_filter(w: &Waveform, spec: &RrcSpec) -> Result<Waveform> {
    let n = w.samples.len();
    let response = rrc_response(n, w.sample_rate, spec)?;
    let plan = SpectralPlan::new(n);
    Ok(Waveform {
        samples: plan.filter_real(&w.samples, &response),
        sample_rate: w.sample_rate,
    })
}

/// Chromatic dispersion over `fiber`. The result is a complex field.
pub fn disperse(w: &FieldWaveform, fiber: &Fiber) -> FieldWaveform {
    let n = w.samples.len();
    let mut samples = w.samples.clone();
    if fiber.length != 0.0 && fiber.dispersion != 0.0 && n > 0 {
        let plan = SpectralPlan::new(n);
        plan.filter_complex(&mut samples, &fiber.response(n, w.sample_rate));
    }
    FieldWaveform {
        samples,
        sample_rate: w.sample_rate,
    }
}

/// Square-law photodiode.
pub fn detect(w: &FieldWaveform) -> Waveform {
    Waveform {
        samples: w.samples.iter().map(|c| c.norm_sqr()).collect(),
        sample_rate: w.sample_rate,
    }
}

/// Adds i.i.d. zero-mean Gaussian noise of variance `sigma2` to every sample.
pub fn add_noise<R: Rng + ?Sized>(w: &Waveform, sigma2: f64, rng: &mut R) -> Result<Waveform> {
    let mut out = w.clone();
    add_noise_in_place(&mut out.samples, sigma2, rng)?;
    Ok(out)
}

pub(crate) fn add_noise_in_place<R: Rng + ?Sized>(
    samples: &mut [f64],
    sigma2: f64,
    rng: &mut R,
) -> Result<()> {
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(Error::invalid(format!("noise variance {sigma2} must be finite and >= 0")));
    }
    if sigma2 == 0.0 {
        return Ok(());
    }
    let sigma = sigma2.sqrt();
    for s in samples.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *s += sigma * z;
    }
    Ok(())
}

/// Picks every `factor`-th sample starting at `phase`.
pub fn downsample(w: &Waveform, factor: usize, phase: usize) -> Result<Vec<f64>> {
    if factor == 0 || phase >= factor {
        return Err(Error::invalid(format!(
            "downsample phase {phase} must lie in [0, {factor})"
        )));
    }
    Ok(w.samples.iter().skip(phase).step_by(factor).copied().collect())
}

/// Cuts `y` into centered windows of odd length `n_taps`, one per sample,
/// wrapping cyclically at the block edges. Returned row-major, `y.len()` rows.
pub fn chunkify(y: &[f64], n_taps: usize) -> Result<Vec<f64>> {
    if n_taps % 2 == 0 {
        return Err(Error::invalid(format!("n_taps must be odd, got {n_taps}")));
    }
    let n = y.len();
    if n_taps > n {
        return Err(Error::invalid(format!("n_taps {n_taps} exceeds block length {n}")));
    }
    let half = n_taps / 2;
    let mut out = Vec::with_capacity(n * n_taps);
    for k in 0..n {
        for j in 0..n_taps {
            out.push(y[(k + n + j - half) % n]);
        }
    }
    Ok(out)
}

/// dB to linear power.
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}
