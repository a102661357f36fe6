//! Backpropagation through time with a surrogate spike derivative, and the
//! Adam training loop.
//!
//! The backward pass differentiates every path of the forward pass, including
//! the subtractive reset and the recurrent spikes. Run with
//! [`SpikeFn::Smooth`] it is the exact gradient of the smoothed network,
//! which is what the finite-difference check relies on.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{decode_unchecked, Drive, LifNetwork, LossMode, Readout, SpikeFn};
use crate::data::{Dataset, Labels};
use crate::error::{Error, Result};

/// Rows per unit of parallel work. Fixed so the reduction order, and with it
/// the trained weights, do not depend on the thread count.
const WORK_ROWS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub w_in: Vec<f64>,
    pub w_rec: Vec<f64>,
    pub w_out: Vec<f64>,
}

impl Gradient {
    fn zeros_like(net: &LifNetwork) -> Self {
        Gradient {
            w_in: vec![0.0; net.w_in.len()],
            w_rec: vec![0.0; net.w_rec.len()],
            w_out: vec![0.0; net.w_out.len()],
        }
    }

    fn add(&mut self, other: &Gradient) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn scale(&mut self, f: f64) {
        for block in self.blocks_mut() {
            block.iter_mut().for_each(|x| *x *= f);
        }
    }

    pub fn blocks(&self) -> [&[f64]; 3] {
        [&self.w_in, &self.w_rec, &self.w_out]
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 3] {
        [&mut self.w_in, &mut self.w_rec, &mut self.w_out]
    }
}

/// Target of one row.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Symbol(usize),
    Bits(&'a [u8]),
}

fn targets(labels: &Labels) -> Vec<Target<'_>> {
    match labels {
        Labels::Symbols(q) => q.iter().map(|&i| Target::Symbol(i)).collect(),
        Labels::Bits { width, bits } => bits.chunks_exact(*width).map(Target::Bits).collect(),
    }
}

/// Loss of one logit vector and its derivative.
fn loss_grad(logits: &[f64], target: Target<'_>, mode: LossMode) -> (f64, Vec<f64>) {
    match (mode, target) {
        (LossMode::Symbol, Target::Symbol(y)) => {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let sum: f64 = exp.iter().sum();
            let loss = max + sum.ln() - logits[y];
            let mut g: Vec<f64> = exp.iter().map(|e| e / sum).collect();
            g[y] -= 1.0;
            (loss, g)
        }
        (LossMode::Bit, Target::Bits(b)) => {
            let mut loss = 0.0;
            let g = logits
                .iter()
                .zip(b)
                .map(|(&z, &bit)| {
                    let y = bit as f64;
                    // softplus(z) − y·z
                    loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
                    1.0 / (1.0 + (-z).exp()) - y
                })
                .collect();
            (loss, g)
        }
        _ => panic!("target does not match loss mode"),
    }
}

/// Loss of one standardized input; accumulates its gradient into `grad`.
fn backprop(
    net: &LifNetwork,
    x: &[f64],
    target: Target<'_>,
    spike_fn: SpikeFn,
    grad: &mut Gradient,
) -> f64 {
    let s = &net.spec;
    let (nh, no, t_max) = (s.n_hidden, s.n_out, s.lif.n_steps);
    let alpha = s.lif.alpha();
    let beta = s.lif.beta_syn();
    let theta = s.lif.threshold;

    let trace = net.run(Drive::Constant(x), spike_fn);
    let logits = decode_unchecked(&trace.readout, no, s.readout);
    let (loss, dz) = loss_grad(&logits, target, s.mode);

    // Step at which each logit is read.
    let read_at: Vec<usize> = match s.readout {
        Readout::Eotm => vec![t_max - 1; no],
        Readout::Motm => (0..no)
            .map(|k| {
                let mut best = 0;
                for t in 1..t_max {
                    if trace.readout[t * no + k] > trace.readout[best * no + k] {
                        best = t;
                    }
                }
                best
            })
            .collect(),
    };

    let mut lam_o = vec![0.0; no];
    let mut lam_io = vec![0.0; no];
    let mut lam_u_next = vec![0.0; nh];
    let mut lam_i_next = vec![0.0; nh];
    let mut lam_i = vec![0.0; nh];
    let mut rec_back = vec![0.0; nh];
    let mut lam_i_sum = vec![0.0; nh];

    for t in (0..t_max).rev() {
        for k in 0..no {
            let direct = if read_at[k] == t { dz[k] } else { 0.0 };
            lam_o[k] = direct + alpha * lam_o[k];
            lam_io[k] = lam_o[k] + beta * lam_io[k];
        }
        let spikes = &trace.hidden_spikes[t * nh..(t + 1) * nh];
        let membrane = &trace.membrane[t * nh..(t + 1) * nh];
        for (j, &z) in spikes.iter().enumerate() {
            if z != 0.0 {
                for k in 0..no {
                    grad.w_out[k * nh + j] += lam_io[k] * z;
                }
            }
        }
        if s.recurrent {
            // R^T λi_{t+1}
            rec_back.iter_mut().for_each(|r| *r = 0.0);
            for (post, &l) in lam_i_next.iter().enumerate() {
                if l != 0.0 {
                    let row = &net.w_rec[post * nh..(post + 1) * nh];
                    for (r, &w) in rec_back.iter_mut().zip(row) {
                        *r += w * l;
                    }
                }
            }
        }
        for j in 0..nh {
            let lam_v = alpha * lam_u_next[j];
            let mut lam_s = -theta * lam_v + rec_back[j];
            for k in 0..no {
                lam_s += net.w_out[k * nh + j] * lam_io[k];
            }
            let lam_u = lam_v + s.surrogate.grad(membrane[j] - theta) * lam_s;
            lam_i[j] = lam_u + beta * lam_i_next[j];
            lam_u_next[j] = lam_u;
        }
        if s.recurrent && t > 0 {
            let prev = &trace.hidden_spikes[(t - 1) * nh..t * nh];
            for (pre, &z) in prev.iter().enumerate() {
                if z != 0.0 {
                    for post in 0..nh {
                        grad.w_rec[post * nh + pre] += lam_i[post] * z;
                    }
                }
            }
        }
        for j in 0..nh {
            lam_i_sum[j] += lam_i[j];
        }
        std::mem::swap(&mut lam_i, &mut lam_i_next);
    }

    for (j, l) in lam_i_sum.iter().enumerate() {
        for (g, xi) in grad.w_in[j * s.n_in..(j + 1) * s.n_in].iter_mut().zip(x) {
            *g += l * xi;
        }
    }
    loss
}

/// Mean loss over `rows` (raw chunks, row-major) and its gradient.
pub fn loss_and_gradient(
    net: &LifNetwork,
    chunks: &[f64],
    labels: &Labels,
    spike_fn: SpikeFn,
) -> Result<(f64, Gradient)> {
    net.check_labels(labels)?;
    let rows: Vec<usize> = (0..labels.len()).collect();
    batch_gradient(net, chunks, &targets(labels), &rows, spike_fn)
}

/// Mean loss only, for finite-difference checks.
pub fn loss(net: &LifNetwork, chunks: &[f64], labels: &Labels, spike_fn: SpikeFn) -> Result<f64> {
    net.check_labels(labels)?;
    let t = targets(labels);
    let n_in = net.spec.n_in;
    let total: f64 = chunks
        .chunks_exact(n_in)
        .zip(&t)
        .map(|(row, &target)| {
            let x = net.standardize(row);
            let trace = net.run(Drive::Constant(&x), spike_fn);
            let logits = decode_unchecked(&trace.readout, net.spec.n_out, net.spec.readout);
            loss_grad(&logits, target, net.spec.mode).0
        })
        .sum();
    Ok(total / t.len() as f64)
}

fn batch_gradient(
    net: &LifNetwork,
    chunks: &[f64],
    targets: &[Target<'_>],
    rows: &[usize],
    spike_fn: SpikeFn,
) -> Result<(f64, Gradient)> {
    let n_in = net.spec.n_in;
    if chunks.len() < targets.len() * n_in {
        return Err(Error::invalid("fewer chunk rows than labels"));
    }
    let parts: Vec<(f64, Gradient)> = rows
        .par_chunks(WORK_ROWS)
        .map(|part| {
            let mut g = Gradient::zeros_like(net);
            let mut loss = 0.0;
            for &r in part {
                let x = net.standardize(&chunks[r * n_in..(r + 1) * n_in]);
                loss += backprop(net, &x, targets[r], spike_fn, &mut g);
            }
            (loss, g)
        })
        .collect();
    let mut total = Gradient::zeros_like(net);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add(g);
    }
    let n = rows.len().max(1) as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    /// Shuffling seed; data freshness comes from the dataset seed.
    pub seed: u64,
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 256,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            seed: 0,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// Fraction of training rows decided correctly during the epoch.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LearningCurve {
    pub epochs: Vec<EpochStats>,
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Gradient,
    v: Gradient,
}

impl Adam {
    fn new(net: &LifNetwork, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Gradient::zeros_like(net),
            v: Gradient::zeros_like(net),
        }
    }

    fn update(&mut self, net: &mut LifNetwork, g: &Gradient) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let params = [&mut net.w_in, &mut net.w_rec, &mut net.w_out];
        for (((w, g), m), v) in params
            .into_iter()
            .zip(g.blocks())
            .zip(self.m.blocks_mut())
            .zip(self.v.blocks_mut())
        {
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                w[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Trains `net` on successive epochs of `data`. Input standardization is fit
/// on epoch 0 before the first update.
pub fn train(net: &mut LifNetwork, data: &Dataset, cfg: &TrainConfig) -> Result<LearningCurve> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::invalid("epochs and batch_size must be positive"));
    }
    let first = data.epoch(0)?;
    net.check_labels(&first.labels)?;
    net.fit_standardization(&first)?;
    let mut adam = Adam::new(net, cfg.learning_rate);
    let mut curve = LearningCurve::default();
    let mut set = first;
    for epoch in 0..cfg.epochs {
        if epoch > 0 {
            set = data.epoch(epoch as u64)?;
        }
        let t = targets(&set.labels);
        let mut order: Vec<usize> = (0..set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, g) = batch_gradient(net, &set.chunks, &t, batch, SpikeFn::Heaviside)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("loss is {loss}"),
                });
            }
            loss_sum += loss * batch.len() as f64;
            adam.update(net, &g);
        }
        if net.w_in.iter().chain(&net.w_rec).chain(&net.w_out).any(|w| !w.is_finite()) {
            return Err(Error::Training {
                epoch,
                message: "non-finite weights".into(),
            });
        }
        let accuracy = accuracy(net, &set);
        let stats = EpochStats {
            epoch,
            loss: loss_sum / set.len() as f64,
            accuracy,
        };
        if cfg.verbose {
            eprintln!(
                "epoch {:>3}  loss {:.5}  acc {:.5}  lr {:.2e}",
                epoch, stats.loss, stats.accuracy, adam.lr
            );
        }
        curve.epochs.push(stats);
        adam.lr *= cfg.lr_decay;
    }
    Ok(curve)
}

fn accuracy(net: &LifNetwork, set: &crate::data::ChunkSet) -> f64 {
    let correct: usize = match &set.labels {
        Labels::Symbols(q) => net
            .predict_symbols(set)
            .iter()
            .zip(q)
            .filter(|(a, b)| a == b)
            .count(),
        Labels::Bits { width, bits } => {
            let pred = net.predict_bits(set);
            pred.chunks_exact(*width)
                .zip(bits.chunks_exact(*width))
                .filter(|(a, b)| a == b)
                .count()
        }
    };
    correct as f64 / set.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::super::{LifParams, NetworkSpec, Surrogate};
    use super::*;
    use crate::data::DatasetConfig;
    use crate::link::{LinkParams, NoiseReference};
    use rand::Rng;

    fn tiny(recurrent: bool, readout: Readout, mode: LossMode, seed: u64) -> LifNetwork {
        let spec = NetworkSpec {
            n_in: 3,
            n_hidden: 3,
            n_out: 2,
            recurrent,
            readout,
            mode,
            lif: LifParams {
                n_steps: 8,
                ..LifParams::default()
            },
            surrogate: Surrogate::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = LifNetwork::new(spec, &mut rng).unwrap();
        for w in net.w_in.iter_mut().chain(&mut net.w_rec).chain(&mut net.w_out) {
            *w *= 3.0;
        }
        net
    }

    fn max_rel_error(net: &LifNetwork, chunks: &[f64], labels: &Labels) -> f64 {
        let (_, g) = loss_and_gradient(net, chunks, labels, SpikeFn::Smooth).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for block in 0..3 {
            let len = g.blocks()[block].len();
            for i in 0..len {
                let mut plus = net.clone();
                let mut minus = net.clone();
                [&mut plus.w_in, &mut plus.w_rec, &mut plus.w_out][block][i] += h;
                [&mut minus.w_in, &mut minus.w_rec, &mut minus.w_out][block][i] -= h;
                let fd = (loss(&plus, chunks, labels, SpikeFn::Smooth).unwrap()
                    - loss(&minus, chunks, labels, SpikeFn::Smooth).unwrap())
                    / (2.0 * h);
                let an = g.blocks()[block][i];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let chunks = [0.3, -1.2, 0.8, 1.5, 0.1, -0.4];
        for (recurrent, readout) in [
            (false, Readout::Eotm),
            (true, Readout::Eotm),
            (false, Readout::Motm),
            (true, Readout::Motm),
        ] {
            let net = tiny(recurrent, readout, LossMode::Symbol, 3);
            let labels = Labels::Symbols(vec![1, 0]);
            let err = max_rel_error(&net, &chunks, &labels);
            assert!(err < 1e-4, "{recurrent} {readout:?}: {err}");

            let net = tiny(recurrent, readout, LossMode::Bit, 5);
            let labels = Labels::Bits {
                width: 2,
                bits: vec![1, 0, 0, 1],
            };
            let err = max_rel_error(&net, &chunks, &labels);
            assert!(err < 1e-4, "bit {recurrent} {readout:?}: {err}");
        }
    }

    #[test]
    fn loss_gradients_of_heads() {
        let (l, g) = loss_grad(&[0.0, 0.0], Target::Symbol(0), LossMode::Symbol);
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!((g[0] + 0.5).abs() < 1e-12 && (g[1] - 0.5).abs() < 1e-12);
        let (l, g) = loss_grad(&[0.0], Target::Bits(&[1]), LossMode::Bit);
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!((g[0] + 0.5).abs() < 1e-12);
        // large logits stay finite
        let (l, _) = loss_grad(&[800.0], Target::Bits(&[0]), LossMode::Bit);
        assert!((l - 800.0).abs() < 1e-9);
    }

    #[test]
    fn separable_toy_reaches_zero_ber() {
        let mut p = LinkParams::lcd();
        p.alphabet = vec![-1.0, 1.0];
        p.fiber_length = 0.0;
        p.noise_power_db = -300.0;
        p.noise_reference = NoiseReference::Absolute;
        p.n_taps = 3;
        p.n_symbols = 2000;
        let data = Dataset::new(DatasetConfig::new(p)).unwrap();
        let spec = NetworkSpec::for_task(3, 2, 8, LossMode::Symbol);
        let mut net = LifNetwork::new(spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        train(&mut net, &data, &cfg).unwrap();
        let held_out = data.epoch(1000).unwrap();
        let pred = net.predict_symbols(&held_out);
        let truth = held_out.symbol_indices().unwrap();
        assert_eq!(pred, truth);
    }

    #[test]
    fn training_is_deterministic() {
        let mut p = LinkParams::lcd();
        p.n_symbols = 300;
        let data = Dataset::new(DatasetConfig::new(p)).unwrap();
        let run = || {
            let spec = NetworkSpec::for_task(7, 4, 6, LossMode::Symbol);
            let mut net = LifNetwork::new(spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 50,
                ..TrainConfig::default()
            };
            train(&mut net, &data, &cfg).unwrap();
            net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn label_mode_mismatch_is_rejected() {
        let mut p = LinkParams::lcd();
        p.n_symbols = 100;
        let mut cfg = DatasetConfig::new(p);
        cfg.bit_level = true;
        let data = Dataset::new(cfg).unwrap();
        let spec = NetworkSpec::for_task(7, 4, 4, LossMode::Symbol);
        let mut net = LifNetwork::new(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let err = train(&mut net, &data, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn divergence_reports_epoch() {
        let mut p = LinkParams::lcd();
        p.n_symbols = 64;
        let data = Dataset::new(DatasetConfig::new(p)).unwrap();
        let spec = NetworkSpec::for_task(7, 4, 4, LossMode::Symbol);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = LifNetwork::new(spec, &mut rng).unwrap();
        net.w_out[0] = f64::NAN;
        let _ = rng.random::<f64>();
        let err = train(&mut net, &data, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Training { epoch: 0, .. }), "{err}");
    }
}
