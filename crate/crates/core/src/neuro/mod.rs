//! Spiking receiver: one layer of current-based LIF neurons, optionally
//! recurrent, read out by non-spiking leaky integrators.
//!
//! Every chunk value is standardized and injected as a constant current into
//! its own input channel for all `n_steps` steps. Hidden dynamics per step:
//!
//! ```text
//! i ← β_s·i + W_in·x + W_rec·s_prev
//! u ← α·v + i
//! s ← H(u − θ)
//! v ← u − θ·s
//! ```
//!
//! Readout neurons run the same synapse/membrane leaks on `W_out·s` and never
//! spike. Logits are the max over time (MOTM) or the final value (EOTM) of the
//! readout membranes.

mod train;

use std::path::Path;

use rand::Rng;

use crate::data::{ChunkSet, Labels};
use crate::error::{Error, Result};
use crate::io::ByteReader;

pub use train::{
    loss, loss_and_gradient, train, EpochStats, Gradient, LearningCurve, Target, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifParams {
    pub tau_mem: f64,
    pub tau_syn: f64,
    pub threshold: f64,
    pub dt: f64,
    /// Simulation steps per chunk.
    pub n_steps: usize,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams {
            tau_mem: 10.0,
            tau_syn: 5.0,
            threshold: 1.0,
            dt: 1.0,
            n_steps: 30,
        }
    }
}

impl LifParams {
    /// Membrane decay per step.
    pub fn alpha(&self) -> f64 {
        (-self.dt / self.tau_mem).exp()
    }

    /// Synaptic current decay per step.
    pub fn beta_syn(&self) -> f64 {
        (-self.dt / self.tau_syn).exp()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_mem > 0.0 && self.tau_syn > 0.0 && self.dt > 0.0) {
            return Err(Error::invalid("tau_mem, tau_syn and dt must be positive"));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::invalid("threshold must be positive"));
        }
        if self.n_steps == 0 {
            return Err(Error::invalid("n_steps must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readout {
    /// Max over time of the readout membrane.
    Motm,
    /// Readout membrane at the last step.
    Eotm,
}

impl std::str::FromStr for Readout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "motm" => Ok(Readout::Motm),
            "eotm" => Ok(Readout::Eotm),
            other => Err(Error::invalid(format!("unknown readout '{other}'"))),
        }
    }
}

/// What the outputs mean and how they are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// One output per symbol, softmax cross-entropy.
    Symbol,
    /// One log-likelihood ratio per bit, binary cross-entropy.
    Bit,
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "symbol" => Ok(LossMode::Symbol),
            "bit" => Ok(LossMode::Bit),
            other => Err(Error::invalid(format!("unknown loss '{other}'"))),
        }
    }
}

/// Forward spike nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeFn {
    /// Binary spikes. Training backpropagates the surrogate derivative.
    Heaviside,
    /// s = x/(1+k|x|), whose exact derivative is the surrogate. Only useful to
    /// check gradients against finite differences.
    Smooth,
}

/// Fast-sigmoid surrogate derivative 1/(1+k|x|)².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surrogate {
    pub slope: f64,
}

impl Default for Surrogate {
    fn default() -> Self {
        Surrogate { slope: 10.0 }
    }
}

impl Surrogate {
    pub fn grad(&self, x: f64) -> f64 {
        let d = 1.0 + self.slope * x.abs();
        1.0 / (d * d)
    }

    pub fn spike(&self, x: f64, f: SpikeFn) -> f64 {
        match f {
            SpikeFn::Heaviside => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            SpikeFn::Smooth => x / (1.0 + self.slope * x.abs()),
        }
    }
}

/// One LIF membrane update without the synaptic stage: v ← α·v + drive, spike
/// when above threshold, subtract threshold on spike.
pub fn lif_step(v: f64, drive: f64, alpha: f64, threshold: f64) -> (f64, bool) {
    let u = alpha * v + drive;
    if u > threshold {
        (u - threshold, true)
    } else {
        (u, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkSpec {
    pub n_in: usize,
    pub n_hidden: usize,
    pub n_out: usize,
    pub recurrent: bool,
    pub readout: Readout,
    pub mode: LossMode,
    pub lif: LifParams,
    pub surrogate: Surrogate,
}

impl NetworkSpec {
    /// Receiver for `n_taps` windows of an alphabet with `m` levels.
    pub fn for_task(n_taps: usize, m: usize, n_hidden: usize, mode: LossMode) -> Self {
        let n_out = match mode {
            LossMode::Symbol => m,
            LossMode::Bit => m.trailing_zeros() as usize,
        };
        NetworkSpec {
            n_in: n_taps,
            n_hidden,
            n_out,
            recurrent: false,
            readout: Readout::Motm,
            mode,
            lif: LifParams::default(),
            surrogate: Surrogate::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifNetwork {
    pub spec: NetworkSpec,
    /// n_hidden × n_in, row per hidden neuron.
    pub w_in: Vec<f64>,
    /// n_hidden × n_hidden, row = target; empty unless recurrent.
    pub w_rec: Vec<f64>,
    /// n_out × n_hidden.
    pub w_out: Vec<f64>,
    /// Input standardization, per channel.
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
}

/// Recorded forward pass of one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub n_steps: usize,
    /// T × n_hidden spike values (0/1 for Heaviside).
    pub hidden_spikes: Vec<f64>,
    /// T × n_hidden pre-reset membrane.
    pub membrane: Vec<f64>,
    /// T × n_out readout membrane.
    pub readout: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SpikeStats {
    /// Always 0 under real-valued current encoding.
    pub input_spikes_per_symbol: f64,
    pub hidden_spikes_per_symbol: f64,
}

impl LifNetwork {
    /// Uniform init with variance 1/fan-in per layer, measured on the
    /// steady-state membrane: weights are scaled by (1−α)(1−β_s), the inverse
    /// DC gain of the synapse and membrane leaks.
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.lif.validate()?;
        if spec.n_in == 0 || spec.n_hidden == 0 || spec.n_out == 0 {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        let gain = (1.0 - spec.lif.alpha()) * (1.0 - spec.lif.beta_syn());
        let mut init = |rows: usize, fan_in: usize| -> Vec<f64> {
            let a = gain * (3.0 / fan_in as f64).sqrt();
            (0..rows * fan_in).map(|_| rng.random_range(-a..a)).collect()
        };
        let w_in = init(spec.n_hidden, spec.n_in);
        let w_rec = if spec.recurrent {
            init(spec.n_hidden, spec.n_hidden)
        } else {
            Vec::new()
        };
        let w_out = init(spec.n_out, spec.n_hidden);
        Ok(LifNetwork {
            w_in,
            w_rec,
            w_out,
            input_mean: vec![0.0; spec.n_in],
            input_std: vec![1.0; spec.n_in],
            spec,
        })
    }

    pub fn zeros(spec: NetworkSpec) -> Self {
        LifNetwork {
            w_in: vec![0.0; spec.n_hidden * spec.n_in],
            w_rec: if spec.recurrent {
                vec![0.0; spec.n_hidden * spec.n_hidden]
            } else {
                Vec::new()
            },
            w_out: vec![0.0; spec.n_out * spec.n_hidden],
            input_mean: vec![0.0; spec.n_in],
            input_std: vec![1.0; spec.n_in],
            spec,
        }
    }

    /// n_in·n_hidden + n_hidden² (if recurrent) + n_hidden·n_out.
    pub fn param_count(&self) -> usize {
        let s = &self.spec;
        s.n_in * s.n_hidden + if s.recurrent { s.n_hidden * s.n_hidden } else { 0 } + s.n_hidden * s.n_out
    }

    /// Sets the input standardization to the per-channel mean and standard
    /// deviation of `set`.
    pub fn fit_standardization(&mut self, set: &ChunkSet) -> Result<()> {
        if set.n_taps != self.spec.n_in {
            return Err(Error::invalid(format!(
                "network expects {} taps, data has {}",
                self.spec.n_in, set.n_taps
            )));
        }
        let n = set.len() as f64;
        let mut mean = vec![0.0; set.n_taps];
        for row in set.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; set.n_taps];
        for row in set.rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        self.input_std = var.iter().map(|s| (s / n).sqrt().max(1e-12)).collect();
        self.input_mean = mean;
        Ok(())
    }

    pub fn standardize(&self, chunk: &[f64]) -> Vec<f64> {
        chunk
            .iter()
            .zip(&self.input_mean)
            .zip(&self.input_std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    /// T × n_in input currents for one chunk: the standardized chunk repeated
    /// at every step.
    pub fn encode_chunk(&self, chunk: &[f64]) -> Vec<f64> {
        let x = self.standardize(chunk);
        x.repeat(self.spec.lif.n_steps)
    }

    /// Runs the network on explicit T × n_in currents.
    pub fn lif_forward(&self, currents: &[f64]) -> Result<ForwardTrace> {
        let s = &self.spec;
        if currents.len() != s.lif.n_steps * s.n_in {
            return Err(Error::invalid(format!(
                "expected {}×{} currents, got {}",
                s.lif.n_steps,
                s.n_in,
                currents.len()
            )));
        }
        Ok(self.run(Drive::PerStep(currents), SpikeFn::Heaviside))
    }

    /// Recorded forward pass for one standardized input vector.
    pub(crate) fn run(&self, drive: Drive<'_>, spike_fn: SpikeFn) -> ForwardTrace {
        let s = &self.spec;
        let (nh, no, t_max) = (s.n_hidden, s.n_out, s.lif.n_steps);
        let alpha = s.lif.alpha();
        let beta = s.lif.beta_syn();
        let theta = s.lif.threshold;
        let mut syn = vec![0.0; nh];
        let mut v = vec![0.0; nh];
        let mut syn_out = vec![0.0; no];
        let mut mem_out = vec![0.0; no];
        let mut trace = ForwardTrace {
            n_steps: t_max,
            hidden_spikes: vec![0.0; t_max * nh],
            membrane: vec![0.0; t_max * nh],
            readout: vec![0.0; t_max * no],
        };
        let mut input = vec![0.0; nh];
        if let Drive::Constant(x) = drive {
            matvec(&self.w_in, x, &mut input);
        }
        for t in 0..t_max {
            if let Drive::PerStep(c) = drive {
                matvec(&self.w_in, &c[t * s.n_in..(t + 1) * s.n_in], &mut input);
            }
            for j in 0..nh {
                syn[j] = beta * syn[j] + input[j];
            }
            if s.recurrent && t > 0 {
                let prev = &trace.hidden_spikes[(t - 1) * nh..t * nh];
                add_matvec(&self.w_rec, prev, &mut syn);
            }
            let (spk, mem) = (t * nh, (t + 1) * nh);
            for j in 0..nh {
                let u = alpha * v[j] + syn[j];
                let z = s.surrogate.spike(u - theta, spike_fn);
                trace.membrane[spk + j] = u;
                trace.hidden_spikes[spk + j] = z;
                v[j] = u - theta * z;
            }
            let spikes = &trace.hidden_spikes[spk..mem];
            for (o, row) in syn_out.iter_mut().zip(self.w_out.chunks_exact(nh)) {
                *o = beta * *o + dot(row, spikes);
            }
            for k in 0..no {
                mem_out[k] = alpha * mem_out[k] + syn_out[k];
                trace.readout[t * no + k] = mem_out[k];
            }
        }
        trace
    }

    /// Logits and hidden spike count for one raw chunk. Same dynamics as
    /// [`LifNetwork::lif_forward`], without recording the trajectories.
    pub fn infer(&self, chunk: &[f64]) -> (Vec<f64>, usize) {
        let s = &self.spec;
        let (nh, no) = (s.n_hidden, s.n_out);
        let alpha = s.lif.alpha();
        let beta = s.lif.beta_syn();
        let theta = s.lif.threshold;
        let x = self.standardize(chunk);
        let mut input = vec![0.0; nh];
        matvec(&self.w_in, &x, &mut input);
        let mut syn = vec![0.0; nh];
        let mut v = vec![0.0; nh];
        let mut syn_out = vec![0.0; no];
        let mut mem_out = vec![0.0; no];
        let mut logits = vec![f64::NEG_INFINITY; no];
        let mut prev = vec![0.0; nh];
        let mut fired = vec![0.0; nh];
        let mut count = 0.0;
        for t in 0..s.lif.n_steps {
            for (sy, i) in syn.iter_mut().zip(&input) {
                *sy = beta * *sy + i;
            }
            if s.recurrent && t > 0 {
                add_matvec(&self.w_rec, &prev, &mut syn);
            }
            for ((vj, sy), z) in v.iter_mut().zip(&syn).zip(fired.iter_mut()) {
                let u = alpha * *vj + sy;
                *z = f64::from(u8::from(u > theta));
                *vj = u - theta * *z;
            }
            count += fired.iter().sum::<f64>();
            for (((o, m), l), row) in syn_out
                .iter_mut()
                .zip(mem_out.iter_mut())
                .zip(logits.iter_mut())
                .zip(self.w_out.chunks_exact(nh))
            {
                *o = beta * *o + dot(row, &fired);
                *m = alpha * *m + *o;
                if *m > *l {
                    *l = *m;
                }
            }
            std::mem::swap(&mut prev, &mut fired);
        }
        if s.readout == Readout::Eotm {
            logits = mem_out;
        }
        (logits, count as usize)
    }

    pub fn logits(&self, chunk: &[f64]) -> Vec<f64> {
        self.infer(chunk).0
    }

    pub fn predict_symbols(&self, set: &ChunkSet) -> Vec<usize> {
        set.rows().map(|r| argmax(&self.logits(r))).collect()
    }

    pub fn predict_bits(&self, set: &ChunkSet) -> Vec<u8> {
        set.rows()
            .flat_map(|r| llr_to_bits(&self.logits(r)).collect::<Vec<_>>())
            .collect()
    }

    pub fn spike_stats(&self, set: &ChunkSet) -> SpikeStats {
        let total: usize = set.rows().map(|r| self.infer(r).1).sum();
        SpikeStats {
            input_spikes_per_symbol: 0.0,
            hidden_spikes_per_symbol: total as f64 / set.len().max(1) as f64,
        }
    }

    /// Hard decided Gray bits for every row, along with total hidden spikes.
    pub fn decide_bits(&self, set: &ChunkSet, labels: &[Vec<u8>]) -> (Vec<u8>, usize) {
        let mut bits = Vec::with_capacity(set.len() * labels[0].len());
        let mut spikes = 0;
        for row in set.rows() {
            let (logits, n) = self.infer(row);
            spikes += n;
            match self.spec.mode {
                LossMode::Symbol => bits.extend_from_slice(&labels[argmax(&logits)]),
                LossMode::Bit => bits.extend(llr_to_bits(&logits)),
            }
        }
        (bits, spikes)
    }

    /// Checks that `labels` fit the network's loss mode.
    pub(crate) fn check_labels(&self, labels: &Labels) -> Result<()> {
        match (self.spec.mode, labels) {
            (LossMode::Symbol, Labels::Symbols(_)) | (LossMode::Bit, Labels::Bits { .. }) => Ok(()),
            (mode, _) => Err(Error::invalid(format!(
                "{mode:?} loss needs {} labels",
                if mode == LossMode::Symbol { "symbol" } else { "bit" }
            ))),
        }
    }
}

#[derive(Clone, Copy)]
pub(crate) enum Drive<'a> {
    /// Standardized chunk, the same current at every step.
    Constant(&'a [f64]),
    /// T × n_in currents.
    PerStep(&'a [f64]),
}

/// out = W·x for row-major W.
fn matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(x.len())) {
        *o = dot(row, x);
    }
}

/// Four interleaved partial sums, which the compiler can vectorize.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    for (x, y) in a.chunks_exact(4).zip(b.chunks_exact(4)) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail = n - n % 4;
    let rest: f64 = a[tail..].iter().zip(&b[tail..]).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + rest
}

/// out += W·s for row-major W.
fn add_matvec(w: &[f64], s: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(s.len())) {
        *o += dot(row, s);
    }
}

/// Collapses T × n_out readout traces (time-major) to logits.
pub fn decode(traces: &[f64], n_out: usize, readout: Readout) -> Result<Vec<f64>> {
    if n_out == 0 || traces.is_empty() || traces.len() % n_out != 0 {
        return Err(Error::invalid("traces must hold at least one full time step"));
    }
    Ok(decode_unchecked(traces, n_out, readout))
}

fn decode_unchecked(traces: &[f64], n_out: usize, readout: Readout) -> Vec<f64> {
    match readout {
        Readout::Motm => {
            let mut best = vec![f64::NEG_INFINITY; n_out];
            for step in traces.chunks_exact(n_out) {
                for (b, &v) in best.iter_mut().zip(step) {
                    if v > *b {
                        *b = v;
                    }
                }
            }
            best
        }
        Readout::Eotm => traces[traces.len() - n_out..].to_vec(),
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// b = ½(1 + sign ℓ) with sign(0) = +1.
pub fn llr_to_bits(llr: &[f64]) -> impl Iterator<Item = u8> + '_ {
    llr.iter().map(|&l| u8::from(l >= 0.0))
}

const CKPT_MAGIC: &[u8; 4] = b"SNNW";
const CKPT_VERSION: u16 = 1;

impl LifNetwork {
    /// `SNNW` | u16 version | u64 n_in, n_hidden, n_out | u8 recurrent, readout,
    /// mode | f64 tau_mem, tau_syn, threshold, dt | u64 n_steps | f64 slope |
    /// f64 blocks: input_mean, input_std, w_in, w_rec (if recurrent), w_out.
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.spec;
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        for v in [s.n_in, s.n_hidden, s.n_out] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.push(s.recurrent as u8);
        out.push(match s.readout {
            Readout::Motm => 0,
            Readout::Eotm => 1,
        });
        out.push(match s.mode {
            LossMode::Symbol => 0,
            LossMode::Bit => 1,
        });
        for v in [s.lif.tau_mem, s.lif.tau_syn, s.lif.threshold, s.lif.dt] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(s.lif.n_steps as u64).to_le_bytes());
        out.extend_from_slice(&s.surrogate.slope.to_le_bytes());
        for block in [&self.input_mean, &self.input_std, &self.w_in, &self.w_rec, &self.w_out] {
            for v in block.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CKPT_MAGIC)?;
        r.version(CKPT_VERSION)?;
        let n_in = r.u64()? as usize;
        let n_hidden = r.u64()? as usize;
        let n_out = r.u64()? as usize;
        let at = r.offset();
        let flag = |v: u8, at: u64, what: &str| -> Result<u8> {
            if v > 1 {
                Err(Error::format(at, format!("bad {what} flag {v}")))
            } else {
                Ok(v)
            }
        };
        let recurrent = flag(r.u8()?, at, "recurrent")? == 1;
        let readout = if flag(r.u8()?, at + 1, "readout")? == 0 {
            Readout::Motm
        } else {
            Readout::Eotm
        };
        let mode = if flag(r.u8()?, at + 2, "loss mode")? == 0 {
            LossMode::Symbol
        } else {
            LossMode::Bit
        };
        let lif = LifParams {
            tau_mem: r.f64()?,
            tau_syn: r.f64()?,
            threshold: r.f64()?,
            dt: r.f64()?,
            n_steps: r.u64()? as usize,
        };
        let surrogate = Surrogate { slope: r.f64()? };
        let spec = NetworkSpec {
            n_in,
            n_hidden,
            n_out,
            recurrent,
            readout,
            mode,
            lif,
            surrogate,
        };
        let sizes = [
            n_in,
            n_in,
            n_hidden.saturating_mul(n_in),
            if recurrent { n_hidden.saturating_mul(n_hidden) } else { 0 },
            n_out.saturating_mul(n_hidden),
        ];
        let total: usize = sizes.iter().fold(0usize, |a, b| a.saturating_add(*b));
        if total.saturating_mul(8) > r.remaining() {
            return Err(Error::format(
                r.offset(),
                format!("truncated: {total} weights announced, {} bytes left", r.remaining()),
            ));
        }
        let mut read = |n: usize| (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>();
        let input_mean = read(sizes[0])?;
        let input_std = read(sizes[1])?;
        let w_in = read(sizes[2])?;
        let w_rec = read(sizes[3])?;
        let w_out = read(sizes[4])?;
        r.finish()?;
        lif.validate().map_err(|e| Error::format(at, e.to_string()))?;
        Ok(LifNetwork {
            spec,
            w_in,
            w_rec,
            w_out,
            input_mean,
            input_std,
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
