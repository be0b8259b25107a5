//! Mini-batch training and evaluation.
//!
//! Per-sample work runs on the rayon pool. Gradients are reduced in chunks of
//! [`REDUCE_CHUNK`] samples, each summed in sample order, and the chunk sums
//! are then added in order, so results do not depend on the worker count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backward::{backward_keyed, forward_with_tape_keyed, Ablation, GradientSet, GradientTape, Upstream};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::forward::{network_forward, EngineConfig, Network, NetworkOutput};
use crate::loss::{dead_neuron_flags, total_loss, DeadFlags, LossConfig};
use crate::mnist::{encode_with, load_split, Dataset, MnistFiles, Split};
use crate::neuron::{membrane_potential_at, NeuronParams, SpikeTrain};
use crate::optim::{adam_step, init_network, AdamState};

pub const REDUCE_CHUNK: usize = 10;

pub use rayon::ThreadPool;

/// A dedicated pool with `workers` threads.
pub fn thread_pool(workers: usize) -> Result<ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))
}

/// Latency-encoded samples.
#[derive(Debug, Clone)]
pub struct EncodedSet {
    pub inputs: Vec<SpikeTrain>,
    pub labels: Vec<usize>,
}

impl EncodedSet {
    /// Encodes `data`. Background pixels fire at `t_out` and cannot influence
    /// anything before it, so they are omitted.
    pub fn encode(data: &Dataset, config: &RunConfig) -> Result<Self> {
        let params = config.params()?;
        let inputs = (0..data.len())
            .into_par_iter()
            .map(|i| encode_with(data.image(i), config.t_min, config.t_out, &params, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { inputs, labels: (0..data.len()).map(|i| data.label(i)).collect() })
    }

    /// Loads and encodes one split from `config.data_dir`, truncated to
    /// `train_samples` / `test_samples` when those are nonzero.
    pub fn load(config: &RunConfig, split: Split) -> Result<Self> {
        let data = load_split(&config.data_dir, &MnistFiles::default(), split)?;
        let limit = match split {
            Split::Train => config.train_samples,
            Split::Test => config.test_samples,
        };
        let data = if limit > 0 { data.truncated(limit) } else { data };
        Self::encode(&data, config)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Index of the largest potential; ties go to the lowest index.
pub fn predict(v_out: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in v_out.iter().enumerate() {
        if v > v_out[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub loss: f64,
    pub accuracy: f64,
    /// Hidden spikes per hidden neuron per sample.
    pub mean_spikes: f64,
    /// Mean over mini-batches of the fraction of hidden neurons flagged dead.
    pub dead_fraction: f64,
    /// Neuron-sample pairs whose spike train was cut by the `n2` cap.
    pub truncations: u64,
    /// Spikes whose partials were clipped at tangency.
    pub clipped: u64,
    /// Largest per-neuron spike count seen in any sample.
    pub max_spikes: usize,
    /// Largest `|V(z*) - V_th|` over emitted spikes (when auditing).
    pub max_residual: f64,
    /// Emitted spikes outside their validity window (when auditing).
    pub window_violations: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub mean_spikes: f64,
    /// Fraction of hidden neurons firing on fewer than `dead_fraction` of the samples.
    pub dead_fraction: f64,
    /// `histogram[k]` counts hidden (neuron, sample) pairs with exactly `k` spikes.
    pub histogram: Vec<u64>,
    pub max_spikes: usize,
    pub truncations: u64,
}

/// Network, optimizer and shuffle state of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub net: Network,
    pub adam: AdamState,
    pub epoch: u64,
    pub rng: ChaCha8Rng,
    /// Check every emitted spike's root residual and window.
    pub audit_roots: bool,
    params: NeuronParams,
    engine: EngineConfig,
    loss: LossConfig,
}

struct SampleResult {
    loss: f64,
    correct: bool,
    grads: GradientSet,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let net = init_network(&config.sizes, config.seed, config.init_spread)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::from_parts(config, net, None, 0, rng)
    }

    pub fn from_parts(
        config: RunConfig,
        net: Network,
        adam: Option<AdamState>,
        epoch: u64,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if net.sizes() != config.sizes {
            return Err(Error::DimensionMismatch {
                what: "network depth",
                expected: config.sizes.len(),
                found: net.sizes().len(),
            });
        }
        let adam = adam.unwrap_or_else(|| AdamState::new(&net, config.lr));
        Ok(Self {
            params: config.params()?,
            engine: config.engine()?,
            loss: config.loss(),
            config,
            net,
            adam,
            epoch,
            rng,
            audit_roots: false,
        })
    }

    pub fn params(&self) -> &NeuronParams {
        &self.params
    }

    pub fn engine(&self) -> &EngineConfig {
        &self.engine
    }

    /// One pass over `data` in a freshly shuffled order.
    pub fn train_epoch(&mut self, data: &EncodedSet) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if let Some(&bad) = data.labels.iter().find(|&&l| l >= self.net.n_outputs()) {
            return Err(Error::DimensionMismatch { what: "label", expected: self.net.n_outputs(), found: bad });
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);

        let n_hidden: usize = self.net.sizes()[1..self.net.sizes().len() - 1].iter().sum();
        let mut m = EpochMetrics { epoch: self.epoch + 1, ..EpochMetrics::default() };
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut spikes = 0usize;
        let mut dead_sum = 0.0;
        let mut n_batches = 0usize;

        for batch in order.chunks(self.config.batch_size) {
            let checksum = self.net.checksum();
            let taped: Vec<(NetworkOutput, GradientTape)> = batch
                .par_iter()
                .map(|&i| forward_with_tape_keyed(&data.inputs[i], &self.net, checksum, &self.params, &self.engine))
                .collect::<Result<_>>()?;

            let flags: Vec<DeadFlags> = (0..self.net.n_hidden_layers())
                .map(|l| {
                    let counts: Vec<Vec<usize>> = taped.iter().map(|(o, _)| o.hidden[l].spikes.counts()).collect();
                    dead_neuron_flags(&counts, &self.loss)
                })
                .collect();
            if n_hidden > 0 {
                dead_sum += flags.iter().map(DeadFlags::count).sum::<usize>() as f64 / n_hidden as f64;
            }
            n_batches += 1;

            for (out, tape) in &taped {
                spikes += tape.n_spikes();
                m.clipped += tape.clipped_count() as u64;
                for h in &out.hidden {
                    m.truncations += h.truncated.iter().filter(|&&t| t).count() as u64;
                    m.max_spikes = m.max_spikes.max(h.spikes.counts().into_iter().max().unwrap_or(0));
                }
                if self.audit_roots {
                    self.audit(tape, &mut m);
                }
            }

            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let chunk_results: Vec<(f64, usize, GradientSet)> = taped
                .par_chunks(REDUCE_CHUNK)
                .zip(labels.par_chunks(REDUCE_CHUNK))
                .map(|(chunk, labels)| {
                    let mut acc = GradientSet::zeros_like(&self.net);
                    let (mut loss, mut hits) = (0.0, 0usize);
                    for ((out, tape), &label) in chunk.iter().zip(labels) {
                        let r = self.sample_gradient(out, tape, checksum, label, &flags)?;
                        acc.add_assign(&r.grads);
                        loss += r.loss;
                        hits += usize::from(r.correct);
                    }
                    Ok((loss, hits, acc))
                })
                .collect::<Result<_>>()?;

            let mut grads = GradientSet::zeros_like(&self.net);
            for (loss, hits, g) in &chunk_results {
                grads.add_assign(g);
                loss_sum += loss;
                correct += hits;
            }
            grads.scale(1.0 / batch.len() as f64);
            adam_step(&mut self.adam, &mut self.net, &grads)?;
        }

        let n = data.len() as f64;
        m.loss = loss_sum / n;
        m.accuracy = correct as f64 / n;
        m.mean_spikes = if n_hidden > 0 { spikes as f64 / (n_hidden as f64 * n) } else { 0.0 };
        m.dead_fraction = dead_sum / n_batches as f64;
        self.epoch += 1;
        Ok(m)
    }

    fn sample_gradient(
        &self,
        out: &NetworkOutput,
        tape: &GradientTape,
        checksum: u64,
        label: usize,
        flags: &[DeadFlags],
    ) -> Result<SampleResult> {
        let v_hidden: Vec<Vec<f64>> = out.hidden.iter().map(|h| h.potentials_at_end.clone()).collect();
        let terms = total_loss(&out.v_out, &v_hidden, label, flags, self.params.v_th(), &self.loss);
        let upstream = Upstream { v_out: terms.grad_v_out, v_hidden: terms.grad_v_hidden };
        Ok(SampleResult {
            loss: terms.total,
            correct: predict(&out.v_out) == label,
            grads: backward_keyed(tape, &self.net, checksum, &upstream, Ablation::default())?,
        })
    }

    fn audit(&self, tape: &GradientTape, m: &mut EpochMetrics) {
        let v_th = self.params.v_th();
        for (_, _, z, coeffs, lo, hi) in tape.spike_windows() {
            m.max_residual = m.max_residual.max((membrane_potential_at(z, &coeffs) - v_th).abs());
            if !(lo <= z && z < hi) {
                m.window_violations += 1;
            }
        }
    }

    pub fn evaluate(&self, data: &EncodedSet) -> Result<EvalMetrics> {
        evaluate(&self.net, data, &self.params, &self.engine, self.config.dead_fraction)
    }
}

struct EvalPartial {
    correct: usize,
    spikes: usize,
    histogram: Vec<u64>,
    /// Per hidden neuron (all layers concatenated): samples with at least one spike.
    fired: Vec<usize>,
    max_spikes: usize,
    truncations: u64,
}

/// Accuracy and hidden spike statistics of `net` on `data`.
pub fn evaluate(
    net: &Network,
    data: &EncodedSet,
    params: &NeuronParams,
    engine: &EngineConfig,
    dead_fraction: f64,
) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let n_hidden: usize = net.sizes()[1..net.sizes().len() - 1].iter().sum();
    let bins = engine.caps().1 + 1;
    let partials: Vec<EvalPartial> = data
        .inputs
        .par_chunks(REDUCE_CHUNK)
        .zip(data.labels.par_chunks(REDUCE_CHUNK))
        .map(|(inputs, labels)| {
            let mut p = EvalPartial {
                correct: 0,
                spikes: 0,
                histogram: vec![0; bins],
                fired: vec![0; n_hidden],
                max_spikes: 0,
                truncations: 0,
            };
            for (input, &label) in inputs.iter().zip(labels) {
                let out = network_forward(input, net, params, engine)?;
                p.correct += usize::from(predict(&out.v_out) == label);
                let mut offset = 0;
                for h in &out.hidden {
                    let counts = h.spikes.counts();
                    for (j, &c) in counts.iter().enumerate() {
                        p.spikes += c;
                        p.histogram[c.min(bins - 1)] += 1;
                        p.fired[offset + j] += usize::from(c > 0);
                        p.max_spikes = p.max_spikes.max(c);
                    }
                    p.truncations += h.truncated.iter().filter(|&&t| t).count() as u64;
                    offset += counts.len();
                }
            }
            Ok(p)
        })
        .collect::<Result<_>>()?;

    let mut histogram = vec![0u64; bins];
    let mut fired = vec![0usize; n_hidden];
    let (mut correct, mut spikes, mut max_spikes, mut truncations) = (0, 0, 0, 0);
    for p in partials {
        correct += p.correct;
        spikes += p.spikes;
        max_spikes = max_spikes.max(p.max_spikes);
        truncations += p.truncations;
        histogram.iter_mut().zip(&p.histogram).for_each(|(a, b)| *a += b);
        fired.iter_mut().zip(&p.fired).for_each(|(a, b)| *a += b);
    }
    let n = data.len() as f64;
    let dead = fired.iter().filter(|&&f| (f as f64) < dead_fraction * n).count();
    Ok(EvalMetrics {
        accuracy: correct as f64 / n,
        mean_spikes: if n_hidden > 0 { spikes as f64 / (n_hidden as f64 * n) } else { 0.0 },
        dead_fraction: if n_hidden > 0 { dead as f64 / n_hidden as f64 } else { 0.0 },
        histogram,
        max_spikes,
        truncations,
    })
}
