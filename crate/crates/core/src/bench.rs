//! BER estimation with an error-count stopping rule, parameter sweeps and
//! their CSV results.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::baseline::{fit_chunk_set, LinearReceiver};
use crate::data::{self, ChunkSet, Dataset, DatasetConfig};
use crate::error::{Error, Result};
use crate::link::{ImddLink, SymbolAlphabet};
use crate::neuro::{self, LearningCurve, LifNetwork, LossMode, NetworkSpec, Readout, SpikeStats, TrainConfig};

/// Evaluation blocks use RNG streams from here on, clear of training epochs.
const EVAL_STREAM_BASE: u64 = 1 << 40;
/// Blocks simulated per parallel round. Fixed, so results do not depend on
/// the thread count.
const ROUND_BLOCKS: usize = 8;

/// Anything that turns received chunks into Gray bit decisions.
pub trait Receiver: Sync {
    fn n_taps(&self) -> usize;
    fn param_count(&self) -> usize;
    /// Decided bits for every row of `set`, and the total number of hidden
    /// spikes for spiking receivers. `block` identifies the evaluation block.
    fn decide(&self, set: &ChunkSet, truth: &[u8], block: u64) -> Result<(Vec<u8>, Option<u64>)>;
}

impl Receiver for LifNetwork {
    fn n_taps(&self) -> usize {
        self.spec.n_in
    }

    fn param_count(&self) -> usize {
        LifNetwork::param_count(self)
    }

    fn decide(&self, set: &ChunkSet, _: &[u8], _: u64) -> Result<(Vec<u8>, Option<u64>)> {
        let alphabet = set.params.symbol_alphabet()?;
        let (bits, spikes) = self.decide_bits(set, alphabet.gray_labels());
        Ok((bits, Some(spikes as u64)))
    }
}

impl Receiver for LinearReceiver {
    fn n_taps(&self) -> usize {
        self.equalizer.taps.len()
    }

    fn param_count(&self) -> usize {
        self.equalizer.taps.len() + 1
    }

    fn decide(&self, set: &ChunkSet, _: &[u8], _: u64) -> Result<(Vec<u8>, Option<u64>)> {
        Ok((self.equalizer.predict_bits(set, &self.alphabet), None))
    }
}

/// Synthetic receiver that flips each true bit with probability `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoinFlipReceiver {
    pub p: f64,
    pub seed: u64,
    pub n_taps: usize,
}

impl Receiver for CoinFlipReceiver {
    fn n_taps(&self) -> usize {
        self.n_taps
    }

    fn param_count(&self) -> usize {
        0
    }

    fn decide(&self, _: &ChunkSet, truth: &[u8], block: u64) -> Result<(Vec<u8>, Option<u64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(block);
        let bits = truth
            .iter()
            .map(|&b| if rng.random::<f64>() < self.p { b ^ 1 } else { b })
            .collect();
        Ok((bits, None))
    }
}

/// A trained receiver of either kind, as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedReceiver {
    Snn(LifNetwork),
    Linear(LinearReceiver),
}

impl TrainedReceiver {
    pub fn as_receiver(&self) -> &dyn Receiver {
        match self {
            TrainedReceiver::Snn(n) => n,
            TrainedReceiver::Linear(l) => l,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            TrainedReceiver::Snn(n) => n.save(path),
            TrainedReceiver::Linear(l) => l.save(path),
        }
    }

    /// Loads either checkpoint type, told apart by magic.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(b"LEQW") {
            Ok(TrainedReceiver::Linear(LinearReceiver::from_bytes(&bytes)?))
        } else {
            Ok(TrainedReceiver::Snn(LifNetwork::from_bytes(&bytes)?))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReceiverKind {
    Snn,
    Linear,
}

impl std::str::FromStr for ReceiverKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "snn" => Ok(ReceiverKind::Snn),
            "linear" | "mmse" => Ok(ReceiverKind::Linear),
            other => Err(Error::invalid(format!("unknown receiver '{other}'"))),
        }
    }
}

/// Architecture and training settings of a receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceiverSpec {
    pub kind: ReceiverKind,
    pub n_hidden: usize,
    pub recurrent: bool,
    pub readout: Readout,
    pub loss: LossMode,
    /// Seeds weight init and shuffling.
    pub seed: u64,
    pub train: TrainConfig,
}

impl ReceiverSpec {
    pub fn snn(n_hidden: usize, recurrent: bool, readout: Readout) -> Self {
        ReceiverSpec {
            kind: ReceiverKind::Snn,
            n_hidden,
            recurrent,
            readout,
            loss: LossMode::Symbol,
            seed: 0,
            train: TrainConfig::default(),
        }
    }

    pub fn linear() -> Self {
        ReceiverSpec {
            kind: ReceiverKind::Linear,
            ..ReceiverSpec::snn(0, false, Readout::Motm)
        }
    }
}

/// Trains a receiver on data drawn from `link` (its own seed and noise).
pub fn train_receiver(
    link: &DatasetConfig,
    spec: &ReceiverSpec,
) -> Result<(TrainedReceiver, Option<LearningCurve>)> {
    let mut cfg = link.clone();
    cfg.bit_level = spec.kind == ReceiverKind::Snn && spec.loss == LossMode::Bit;
    let data = Dataset::new(cfg)?;
    let alphabet = data.link().alphabet().clone();
    match spec.kind {
        ReceiverKind::Linear => {
            let set = data.epoch(0)?;
            let fit = fit_chunk_set(&set, &alphabet)?;
            Ok((
                TrainedReceiver::Linear(LinearReceiver {
                    equalizer: fit.equalizer,
                    alphabet,
                }),
                None,
            ))
        }
        ReceiverKind::Snn => {
            if spec.n_hidden == 0 {
                return Err(Error::invalid("hidden size must be positive"));
            }
            let mut ns = NetworkSpec::for_task(link.link.n_taps, alphabet.len(), spec.n_hidden, spec.loss);
            ns.recurrent = spec.recurrent;
            ns.readout = spec.readout;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let mut net = LifNetwork::new(ns, &mut rng)?;
            let tc = TrainConfig {
                seed: spec.seed,
                ..spec.train.clone()
            };
            let curve = neuro::train(&mut net, &data, &tc)?;
            Ok((TrainedReceiver::Snn(net), Some(curve)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateOptions {
    pub min_errors: u64,
    pub max_bits: u64,
    /// Seeds the evaluation blocks.
    pub seed: u64,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            min_errors: 2000,
            max_bits: 100_000_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BerReport {
    pub noise_power_db: f64,
    pub bits_tested: u64,
    pub bit_errors: u64,
    pub ber: f64,
    pub spike_stats: Option<SpikeStats>,
    pub param_count: usize,
    pub blocks_used: u64,
    pub seed: u64,
    pub max_bits: u64,
    /// Stopped by `max_bits` before reaching the error target.
    pub capped: bool,
}

impl BerReport {
    /// No errors were seen, so `ber` only bounds the true rate from above.
    pub fn upper_bound_only(&self) -> bool {
        self.capped && self.bit_errors == 0
    }

    /// Binomial standard deviation of `ber`.
    pub fn std_error(&self) -> f64 {
        (self.ber * (1.0 - self.ber) / self.bits_tested as f64).sqrt()
    }
}

/// Simulates independent blocks at `noise_db` until `min_errors` bit errors
/// or `max_bits` tested bits, and counts the receiver's errors over whole
/// blocks.
pub fn estimate_ber(
    receiver: &dyn Receiver,
    cfg: &DatasetConfig,
    noise_db: f64,
    opts: &EstimateOptions,
) -> Result<BerReport> {
    if opts.min_errors == 0 || opts.max_bits == 0 {
        return Err(Error::invalid("min_errors and max_bits must be at least 1"));
    }
    let cfg = data::set_n_taps(cfg, receiver.n_taps())?;
    let cfg = data::set_noise_power_db(&cfg, noise_db)?;
    let link = ImddLink::new(cfg.link.clone())?;
    let (mut bits_tested, mut bit_errors, mut spikes, mut symbols) = (0u64, 0u64, 0u64, 0u64);
    let mut spiking = false;
    let mut block = 0u64;
    let done = |bits: u64, errors: u64| errors >= opts.min_errors || bits >= opts.max_bits;
    while !done(bits_tested, bit_errors) {
        let round: Vec<Result<(u64, u64, Option<u64>, u64)>> = (block..block + ROUND_BLOCKS as u64)
            .into_par_iter()
            .map(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                rng.set_stream(EVAL_STREAM_BASE + b);
                let lb = link.random_block(&mut rng)?;
                let set = ChunkSet::from_block(&cfg.link, &lb.received, &lb.symbol_indices, false)?;
                let (decided, s) = receiver.decide(&set, &lb.bits, b)?;
                let errors = data::bit_errors(&lb.bits, &decided)?;
                Ok((lb.bits.len() as u64, errors, s, set.len() as u64))
            })
            .collect();
        for r in round {
            let (n, e, s, k) = r?;
            bits_tested += n;
            bit_errors += e;
            symbols += k;
            if let Some(s) = s {
                spiking = true;
                spikes += s;
            }
            block += 1;
            if done(bits_tested, bit_errors) {
                break;
            }
        }
    }
    Ok(BerReport {
        noise_power_db: noise_db,
        bits_tested,
        bit_errors,
        ber: bit_errors as f64 / bits_tested as f64,
        spike_stats: spiking.then(|| SpikeStats {
            input_spikes_per_symbol: 0.0,
            hidden_spikes_per_symbol: spikes as f64 / symbols as f64,
        }),
        param_count: receiver.param_count(),
        blocks_used: block,
        seed: opts.seed,
        max_bits: opts.max_bits,
        capped: bit_errors < opts.min_errors,
    })
}

pub const CSV_HEADER: &str =
    "noise_power_db,bits_tested,bit_errors,ber,hidden_spikes_per_symbol,param_count,seed,blocks_used,max_bits,capped";

/// One line per report under [`CSV_HEADER`]. Floats use the shortest
/// representation that parses back exactly.
pub fn reports_to_csv(reports: &[BerReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let spikes = r
            .spike_stats
            .map(|s| s.hidden_spikes_per_symbol.to_string())
            .unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.noise_power_db,
            r.bits_tested,
            r.bit_errors,
            r.ber,
            spikes,
            r.param_count,
            r.seed,
            r.blocks_used,
            r.max_bits,
            u8::from(r.capped)
        )
        .unwrap();
    }
    out
}

pub fn reports_from_csv(text: &str) -> Result<Vec<BerReport>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::format(0, "missing or unexpected header")),
    }
    let mut out = Vec::new();
    for (no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::format(no as u64, format!("line {}: bad {what}", no + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(bad("field count"));
        }
        let num = |i: usize, what: &str| f[i].trim().parse::<f64>().map_err(|_| bad(what));
        let int = |i: usize, what: &str| f[i].trim().parse::<u64>().map_err(|_| bad(what));
        let spike_stats = if f[4].trim().is_empty() {
            None
        } else {
            Some(SpikeStats {
                input_spikes_per_symbol: 0.0,
                hidden_spikes_per_symbol: num(4, "hidden_spikes_per_symbol")?,
            })
        };
        out.push(BerReport {
            noise_power_db: num(0, "noise_power_db")?,
            bits_tested: int(1, "bits_tested")?,
            bit_errors: int(2, "bit_errors")?,
            ber: num(3, "ber")?,
            spike_stats,
            param_count: int(5, "param_count")? as usize,
            seed: int(6, "seed")?,
            blocks_used: int(7, "blocks_used")?,
            max_bits: int(8, "max_bits")?,
            capped: match f[9].trim() {
                "0" => false,
                "1" => true,
                _ => return Err(bad("capped")),
            },
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Noise,
    Hidden,
    Taps,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "noise" | "noise_db" => Ok(SweepAxis::Noise),
            "hidden" | "hidden_size" => Ok(SweepAxis::Hidden),
            "taps" | "n_taps" => Ok(SweepAxis::Taps),
            other => Err(Error::invalid(format!("unknown sweep axis '{other}'"))),
        }
    }
}

/// `a,b,c` or `start:stop:step` (inclusive).
pub fn parse_values(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::invalid(format!("cannot parse value list '{text}'"));
    let values: Vec<f64> = if text.contains(':') {
        let p: Vec<f64> = text
            .split(':')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [a, b, step] = p[..] else { return Err(bad()) };
        if !(step.abs() > 0.0) || (b - a) * step < 0.0 {
            return Err(bad());
        }
        let n = ((b - a) / step + 1e-9).floor() as usize;
        (0..=n).map(|i| a + i as f64 * step).collect()
    } else {
        text.split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(bad());
    }
    Ok(values)
}

/// Noise grid used when none is given, in dB.
pub fn default_noise_grid() -> Vec<f64> {
    (-24..=-14).map(f64::from).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Link and dataset settings. Its noise power is the training noise and,
    /// for the hidden/taps axes, also the evaluation noise.
    pub data: DatasetConfig,
    pub receiver: ReceiverSpec,
    pub estimate: EstimateOptions,
    /// Retrain at every noise point instead of once.
    pub retrain_per_point: bool,
}

/// One report per sweep value, in order.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<BerReport>> {
    if spec.values.is_empty() {
        return Err(Error::invalid("sweep needs at least one value"));
    }
    let as_count = |v: f64, what: &str| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::invalid(format!("{what} must be a positive integer, got {v}")))
        }
    };
    let eval_noise = spec.data.link.noise_power_db;
    let mut reports = Vec::with_capacity(spec.values.len());
    match spec.axis {
        SweepAxis::Noise => {
            let mut trained = None;
            for &db in &spec.values {
                if spec.retrain_per_point || trained.is_none() {
                    let cfg = if spec.retrain_per_point {
                        data::set_noise_power_db(&spec.data, db)?
                    } else {
                        spec.data.clone()
                    };
                    trained = Some(train_receiver(&cfg, &spec.receiver)?.0);
                }
                let rx = trained.as_ref().unwrap().as_receiver();
                reports.push(estimate_ber(rx, &spec.data, db, &spec.estimate)?);
            }
        }
        SweepAxis::Hidden => {
            for &v in &spec.values {
                let receiver = ReceiverSpec {
                    n_hidden: as_count(v, "hidden size")?,
                    ..spec.receiver.clone()
                };
                let (rx, _) = train_receiver(&spec.data, &receiver)?;
                reports.push(estimate_ber(rx.as_receiver(), &spec.data, eval_noise, &spec.estimate)?);
            }
        }
        SweepAxis::Taps => {
            for &v in &spec.values {
                let cfg = data::set_n_taps(&spec.data, as_count(v, "n_taps")?)?;
                let (rx, _) = train_receiver(&cfg, &spec.receiver)?;
                reports.push(estimate_ber(rx.as_receiver(), &cfg, eval_noise, &spec.estimate)?);
            }
        }
    }
    Ok(reports)
}

/// Mean Bhattacharyya coefficient between the received-value histograms of
/// adjacent alphabet levels, over `bins` common bins.
pub fn adjacent_overlap(received: &[f64], indices: &[usize], alphabet: &SymbolAlphabet, bins: usize) -> Result<f64> {
    let m = alphabet.len();
    if received.len() != indices.len() || received.is_empty() || bins == 0 {
        return Err(Error::invalid("need equally long, nonempty samples and labels"));
    }
    let lo = received.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = received.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo).max(f64::MIN_POSITIVE) / bins as f64;
    let mut hist = vec![vec![0.0; bins]; m];
    for (&y, &q) in received.iter().zip(indices) {
        let b = (((y - lo) / width) as usize).min(bins - 1);
        hist[q][b] += 1.0;
    }
    for h in hist.iter_mut() {
        let total: f64 = h.iter().sum();
        if total == 0.0 {
            return Err(Error::invalid("a level never occurs"));
        }
        h.iter_mut().for_each(|v| *v /= total);
    }
    let bc: f64 = hist
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(p, q)| (p * q).sqrt()).sum::<f64>())
        .sum();
    Ok(bc / (m - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::LinkParams;

    fn small_cfg() -> DatasetConfig {
        let mut p = LinkParams::lcd();
        p.n_symbols = 2000;
        DatasetConfig::new(p)
    }

    #[test]
    fn perfect_receiver_hits_cap() {
        let rx = CoinFlipReceiver {
            p: 0.0,
            seed: 0,
            n_taps: 7,
        };
        let opts = EstimateOptions {
            max_bits: 20_000,
            ..EstimateOptions::default()
        };
        let r = estimate_ber(&rx, &small_cfg(), -20.0, &opts).unwrap();
        assert_eq!(r.bit_errors, 0);
        assert_eq!(r.bits_tested, 20_000);
        assert!(r.upper_bound_only());
        assert_eq!(r.blocks_used, 5);
    }

    #[test]
    fn coin_flip_within_binomial_band() {
        let rx = CoinFlipReceiver {
            p: 0.01,
            seed: 3,
            n_taps: 7,
        };
        let r = estimate_ber(&rx, &small_cfg(), -20.0, &EstimateOptions::default()).unwrap();
        assert!(r.bit_errors >= 2000 && !r.capped);
        let sigma = (0.01 * 0.99 / r.bits_tested as f64).sqrt();
        assert!((r.ber - 0.01).abs() <= 3.0 * sigma, "{}", r.ber);
        // stops within one block of the target
        assert!(r.bit_errors < 2000 + 4000);
    }

    #[test]
    fn estimates_are_reproducible() {
        let rx = CoinFlipReceiver {
            p: 0.05,
            seed: 1,
            n_taps: 7,
        };
        let opts = EstimateOptions {
            min_errors: 500,
            ..EstimateOptions::default()
        };
        let a = estimate_ber(&rx, &small_cfg(), -20.0, &opts).unwrap();
        let b = estimate_ber(&rx, &small_cfg(), -20.0, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_round_trip() {
        let reports = vec![
            BerReport {
                noise_power_db: -20.0,
                bits_tested: 123_456,
                bit_errors: 2001,
                ber: 2001.0 / 123_456.0,
                spike_stats: Some(SpikeStats {
                    input_spikes_per_symbol: 0.0,
                    hidden_spikes_per_symbol: 77.123456789,
                }),
                param_count: 440,
                blocks_used: 7,
                seed: 9,
                max_bits: 100_000_000,
                capped: false,
            },
            BerReport {
                noise_power_db: -14.5,
                bits_tested: 1000,
                bit_errors: 0,
                ber: 0.0,
                spike_stats: None,
                param_count: 8,
                blocks_used: 1,
                seed: 0,
                max_bits: 1000,
                capped: true,
            },
        ];
        let text = reports_to_csv(&reports);
        assert!(text.starts_with("noise_power_db,bits_tested,bit_errors,ber,hidden_spikes_per_symbol,param_count,seed"));
        assert_eq!(reports_from_csv(&text).unwrap(), reports);
        assert!(reports_from_csv("ber\n1\n").is_err());
    }

    #[test]
    fn value_lists() {
        assert_eq!(parse_values("5,40,100").unwrap(), vec![5.0, 40.0, 100.0]);
        assert_eq!(parse_values("-24:-22:1").unwrap(), vec![-24.0, -23.0, -22.0]);
        assert_eq!(parse_values("0:1:0.5").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_values("1:0:1").is_err());
        assert!(parse_values("a,b").is_err());
        assert_eq!(default_noise_grid().len(), 11);
    }

    #[test]
    fn overlap_of_identical_and_disjoint_classes() {
        let a = SymbolAlphabet::new(&[0.0, 1.0]).unwrap();
        let y = [0.0, 0.1, 0.9, 1.0];
        assert!(adjacent_overlap(&y, &[0, 0, 1, 1], &a, 10).unwrap() < 1e-12);
        let y = [0.0, 1.0, 0.0, 1.0];
        assert!((adjacent_overlap(&y, &[0, 0, 1, 1], &a, 10).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noise_sweep_trains_once() {
        let mut p = LinkParams::lcd();
        p.n_symbols = 500;
        let spec = SweepSpec {
            axis: SweepAxis::Noise,
            values: vec![-10.0, -5.0],
            data: DatasetConfig::new(p),
            receiver: ReceiverSpec::linear(),
            estimate: EstimateOptions {
                min_errors: 50,
                max_bits: 200_000,
                seed: 4,
            },
            retrain_per_point: false,
        };
        let r = run_sweep(&spec).unwrap();
        assert_eq!(r.len(), 2);
        assert!(r[0].ber <= r[1].ber + 3.0 * (r[0].std_error() + r[1].std_error()));
    }
}
