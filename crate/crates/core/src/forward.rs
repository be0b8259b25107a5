//! Event-driven forward pass.
//!
//! Each postsynaptic neuron walks the intervals of the merged presynaptic
//! train. On every interval it solves for a threshold crossing in closed
//! form; a crossing resets the membrane (but not the synaptic current) and
//! the search resumes on the remainder of the same interval. Per-neuron
//! spike lists are then merged into the layer's global order.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::neuron::{
    membrane_potential_at, solve_crossing, time_to_z, CoefficientAccumulator, CoefficientPair,
    NeuronParams, SpikeEvent, SpikeTrain,
};

/// Dense fully-connected projection between two layers.
///
/// Weights are stored post-major: `weights[j * n_pre + i]` is `w[i][j]`,
/// so the fan-in of one postsynaptic neuron is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    n_pre: usize,
    n_post: usize,
    weights: Vec<f64>,
}

impl LayerSpec {
    pub fn new(n_pre: usize, n_post: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != n_pre * n_post {
            return Err(Error::DimensionMismatch {
                what: "layer weights",
                expected: n_pre * n_post,
                found: weights.len(),
            });
        }
        if let Some(bad) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::Config(format!("non-finite weight at index {bad}")));
        }
        Ok(Self { n_pre, n_post, weights })
    }

    pub fn zeros(n_pre: usize, n_post: usize) -> Self {
        Self {
            n_pre,
            n_post,
            weights: vec![0.0; n_pre * n_post],
        }
    }

    pub fn n_pre(&self) -> usize {
        self.n_pre
    }

    pub fn n_post(&self) -> usize {
        self.n_post
    }

    /// `w[i][j]`: from presynaptic `i` to postsynaptic `j`.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[j * self.n_pre + i]
    }

    pub fn set_weight(&mut self, i: usize, j: usize, w: f64) {
        self.weights[j * self.n_pre + i] = w;
    }

    /// Fan-in weights of postsynaptic neuron `j`, indexed by presynaptic source.
    pub fn fan_in(&self, j: usize) -> &[f64] {
        &self.weights[j * self.n_pre..(j + 1) * self.n_pre]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }
}

/// A feed-forward stack; the last layer is the non-firing readout.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
}

impl Network {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a network needs at least a readout layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].n_post != pair[1].n_pre {
                return Err(Error::DimensionMismatch {
                    what: "layer chaining",
                    expected: pair[0].n_post,
                    found: pair[1].n_pre,
                });
            }
        }
        Ok(Self { layers })
    }

    /// All-zero network with the given layer sizes, e.g. `[784, 400, 10]`.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config("need at least input and output sizes".into()));
        }
        Self::new(sizes.windows(2).map(|s| LayerSpec::zeros(s[0], s[1])).collect())
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerSpec] {
        &mut self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].n_pre];
        s.extend(self.layers.iter().map(|l| l.n_post));
        s
    }

    pub fn n_inputs(&self) -> usize {
        self.layers[0].n_pre
    }

    pub fn n_outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].n_post
    }

    pub fn n_hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    /// Multiplicative hash over the raw weight bits (four interleaved lanes);
    /// ties a tape to the weights it saw.
    pub fn checksum(&self) -> u64 {
        const K: u64 = 0x9e37_79b9_7f4a_7c15;
        let mut lanes = [0xcbf2_9ce4_8422_2325u64, 1, 2, 3];
        for layer in &self.layers {
            let mut chunks = layer.weights.chunks_exact(4);
            for c in &mut chunks {
                for (h, w) in lanes.iter_mut().zip(c) {
                    *h = (*h ^ w.to_bits()).wrapping_mul(K).rotate_left(29);
                }
            }
            for w in chunks.remainder() {
                lanes[0] = (lanes[0] ^ w.to_bits()).wrapping_mul(K).rotate_left(29);
            }
            lanes[1] ^= layer.weights.len() as u64;
        }
        lanes.iter().fold(0u64, |acc, &h| (acc ^ h).wrapping_mul(K).rotate_left(31))
    }
}

/// Run-time limits of the event loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    pub n1: usize,
    pub n2: usize,
    pub z_out: f64,
    pub single_spike: bool,
}

impl EngineConfig {
    pub const DEFAULT_N1: usize = 3;
    pub const DEFAULT_N2: usize = 16;

    pub fn new(n1: usize, n2: usize, z_out: f64, single_spike: bool) -> Result<Self> {
        if n1 == 0 || n1 > n2 {
            return Err(Error::Config(format!("spike caps must satisfy 1 <= n1 <= n2, got n1={n1}, n2={n2}")));
        }
        if !(z_out > 1.0 && z_out.is_finite()) {
            return Err(Error::Config(format!("z_out must be finite and > 1, got {z_out}")));
        }
        Ok(Self { n1, n2, z_out, single_spike })
    }

    pub fn from_t_out(n1: usize, n2: usize, t_out: f64, single_spike: bool, params: &NeuronParams) -> Result<Self> {
        Self::new(n1, n2, time_to_z(t_out, params)?, single_spike)
    }

    /// Effective `(n1, n2)` after applying single-spike mode.
    pub fn caps(&self) -> (usize, usize) {
        if self.single_spike {
            (1, 1)
        } else {
            (self.n1, self.n2)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub spikes: SpikeTrain,
    /// Membrane potential of every neuron at `z_out`.
    pub potentials_at_end: Vec<f64>,
    /// Set when the `n2` cap suppressed a further crossing.
    pub truncated: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOutput {
    pub v_out: Vec<f64>,
    pub hidden: Vec<LayerOutput>,
}

/// Everything the backward pass needs about one emitted spike.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct SpikeRecord {
    pub z: f64,
    pub coeffs: CoefficientPair,
    pub sqrt_disc: f64,
    pub disc: f64,
    /// Number of presynaptic events absorbed into `coeffs`.
    pub prefix_end: usize,
    /// Previous own spike, 0 for the first one.
    pub z_prev: f64,
}

/// Coefficients in force at `z_out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct FinalState {
    pub coeffs: CoefficientPair,
    pub prefix_end: usize,
    pub z_prev: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct NeuronTrace {
    pub records: Vec<SpikeRecord>,
    pub final_state: FinalState,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerTrace {
    pub neurons: Vec<NeuronTrace>,
}

/// Distinct-z groups of the presynaptic events that arrive before `z_out`.
struct Intervals<'a> {
    events: &'a [SpikeEvent],
    /// `(start, end)` event ranges sharing one z-value.
    groups: Vec<(usize, usize)>,
    z_out: f64,
}

impl<'a> Intervals<'a> {
    fn new(events: &'a [SpikeEvent], z_out: f64) -> Self {
        let mut groups = Vec::new();
        let mut start = 0;
        while start < events.len() && events[start].z < z_out {
            let z = events[start].z;
            let mut end = start + 1;
            while end < events.len() && events[end].z == z {
                end += 1;
            }
            groups.push((start, end));
            start = end;
        }
        Self { events, groups, z_out }
    }

    fn upper(&self, g: usize) -> f64 {
        match self.groups.get(g + 1) {
            Some(&(s, _)) => self.events[s].z,
            None => self.z_out,
        }
    }
}

/// Resumable per-neuron event loop.
struct NeuronSim {
    acc: CoefficientAccumulator,
    next_group: usize,
    lo: f64,
    hi: f64,
    prefix_end: usize,
    records: Vec<SpikeRecord>,
    exhausted: bool,
}

impl NeuronSim {
    fn new(params: &NeuronParams) -> Self {
        Self {
            acc: CoefficientAccumulator::new(params),
            next_group: 0,
            lo: 1.0,
            hi: 1.0,
            prefix_end: 0,
            records: Vec::new(),
            exhausted: false,
        }
    }

    fn absorb_next(&mut self, iv: &Intervals, fan_in: &[f64]) -> bool {
        let Some(&(start, end)) = iv.groups.get(self.next_group) else {
            return false;
        };
        for ev in &iv.events[start..end] {
            self.acc.absorb(fan_in[ev.source], ev.z);
        }
        self.prefix_end = end;
        self.lo = iv.events[start].z;
        self.hi = iv.upper(self.next_group);
        self.next_group += 1;
        true
    }

    /// Runs until `cap` spikes have been emitted or the train is exhausted.
    fn advance(&mut self, iv: &Intervals, fan_in: &[f64], v_th: f64, cap: usize) {
        while !self.exhausted && self.records.len() < cap {
            let coeffs = self.acc.coefficients();
            if let Some(c) = solve_crossing(&coeffs, v_th, self.lo, self.hi) {
                self.records.push(SpikeRecord {
                    z: c.z,
                    coeffs,
                    sqrt_disc: c.sqrt_disc,
                    disc: c.disc,
                    prefix_end: self.prefix_end,
                    z_prev: self.acc.z_prev(),
                });
                self.acc.reset(c.z);
                self.lo = c.z;
            } else if !self.absorb_next(iv, fan_in) {
                self.exhausted = true;
            }
        }
    }

    /// Absorbs the remaining inputs without firing. Returns whether a
    /// crossing was suppressed on the way.
    fn finish_capped(&mut self, iv: &Intervals, fan_in: &[f64], v_th: f64) -> bool {
        let mut suppressed = false;
        loop {
            if !suppressed && solve_crossing(&self.acc.coefficients(), v_th, self.lo, self.hi).is_some() {
                suppressed = true;
            }
            if !self.absorb_next(iv, fan_in) {
                break;
            }
        }
        self.exhausted = true;
        suppressed
    }

    fn into_trace(self, truncated: bool) -> NeuronTrace {
        NeuronTrace {
            final_state: FinalState {
                coeffs: self.acc.coefficients(),
                prefix_end: self.prefix_end,
                z_prev: self.acc.z_prev(),
            },
            records: self.records,
            truncated,
        }
    }
}

fn check_presyn(presyn: &SpikeTrain, n_pre: usize) -> Result<()> {
    if presyn.n_sources() != n_pre {
        return Err(Error::DimensionMismatch {
            what: "presynaptic train width",
            expected: n_pre,
            found: presyn.n_sources(),
        });
    }
    Ok(())
}

/// Spike sequence of a single neuron and its coefficients at `z_out`.
pub fn neuron_forward(
    presyn: &SpikeTrain,
    fan_in: &[f64],
    params: &NeuronParams,
    config: &EngineConfig,
) -> Result<(Vec<f64>, CoefficientPair)> {
    check_presyn(presyn, fan_in.len())?;
    let iv = Intervals::new(presyn.events(), config.z_out);
    let trace = run_neuron(&iv, fan_in, params, config);
    Ok((
        trace.records.iter().map(|r| r.z).collect(),
        trace.final_state.coeffs,
    ))
}

fn run_neuron(iv: &Intervals, fan_in: &[f64], params: &NeuronParams, config: &EngineConfig) -> NeuronTrace {
    let (_, n2) = config.caps();
    let mut sim = NeuronSim::new(params);
    sim.advance(iv, fan_in, params.v_th(), n2);
    finish(sim, iv, fan_in, params, config)
}

fn finish(mut sim: NeuronSim, iv: &Intervals, fan_in: &[f64], params: &NeuronParams, config: &EngineConfig) -> NeuronTrace {
    let truncated = if sim.exhausted {
        false
    } else {
        let suppressed = sim.finish_capped(iv, fan_in, params.v_th());
        suppressed && !config.single_spike
    };
    sim.into_trace(truncated)
}

#[derive(Clone, Copy, PartialEq)]
struct HeapKey {
    z: f64,
    neuron: usize,
    local: usize,
}

impl Eq for HeapKey {}

impl Ord for HeapKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.z.total_cmp(&other.z).then(self.neuron.cmp(&other.neuron))
    }
}

impl PartialOrd for HeapKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// k-way merge of per-neuron ascending spike lists into global order.
/// Equal z-values are ordered by ascending neuron index.
pub fn merge_global(per_neuron: &[Vec<f64>]) -> SpikeTrain {
    let total = per_neuron.iter().map(Vec::len).sum();
    let mut heap: BinaryHeap<Reverse<HeapKey>> = per_neuron
        .iter()
        .enumerate()
        .filter_map(|(neuron, zs)| zs.first().map(|&z| Reverse(HeapKey { z, neuron, local: 0 })))
        .collect();
    let mut events = Vec::with_capacity(total);
    let mut index: Vec<Vec<usize>> = per_neuron.iter().map(|zs| Vec::with_capacity(zs.len())).collect();
    while let Some(Reverse(key)) = heap.pop() {
        index[key.neuron].push(events.len());
        events.push(SpikeEvent {
            z: key.z,
            source: key.neuron,
            local_index: key.local,
        });
        let next = key.local + 1;
        if let Some(&z) = per_neuron[key.neuron].get(next) {
            heap.push(Reverse(HeapKey { z, neuron: key.neuron, local: next }));
        }
    }
    SpikeTrain::from_parts(events, index)
}

pub(crate) fn layer_forward_traced(
    presyn: &SpikeTrain,
    layer: &LayerSpec,
    params: &NeuronParams,
    config: &EngineConfig,
) -> Result<(LayerOutput, LayerTrace)> {
    check_presyn(presyn, layer.n_pre)?;
    let iv = Intervals::new(presyn.events(), config.z_out);
    let (n1, n2) = config.caps();
    let v_th = params.v_th();

    // Stage 1: every neuron up to n1 spikes.
    let mut sims: Vec<NeuronSim> = (0..layer.n_post)
        .map(|j| {
            let mut sim = NeuronSim::new(params);
            sim.advance(&iv, layer.fan_in(j), v_th, n1);
            sim
        })
        .collect();
    // Stage 2: only neurons that reached n1 continue.
    if n2 > n1 {
        for (j, sim) in sims.iter_mut().enumerate() {
            if sim.records.len() == n1 {
                sim.advance(&iv, layer.fan_in(j), v_th, n2);
            }
        }
    }
    let neurons: Vec<NeuronTrace> = sims
        .into_iter()
        .enumerate()
        .map(|(j, sim)| finish(sim, &iv, layer.fan_in(j), params, config))
        .collect();

    let lists: Vec<Vec<f64>> = neurons.iter().map(|n| n.records.iter().map(|r| r.z).collect()).collect();
    let output = LayerOutput {
        spikes: merge_global(&lists),
        potentials_at_end: neurons
            .iter()
            .map(|n| membrane_potential_at(config.z_out, &n.final_state.coeffs))
            .collect(),
        truncated: neurons.iter().map(|n| n.truncated).collect(),
    };
    Ok((output, LayerTrace { neurons }))
}

/// Forward pass of one spiking layer (two-stage partitioned).
pub fn layer_forward(
    presyn: &SpikeTrain,
    layer: &LayerSpec,
    params: &NeuronParams,
    config: &EngineConfig,
) -> Result<LayerOutput> {
    layer_forward_traced(presyn, layer, params, config).map(|(out, _)| out)
}

/// Same as [`layer_forward`] but without stage partitioning; used to check
/// that partitioning does not change results.
pub fn layer_forward_single_stage(
    presyn: &SpikeTrain,
    layer: &LayerSpec,
    params: &NeuronParams,
    config: &EngineConfig,
) -> Result<LayerOutput> {
    check_presyn(presyn, layer.n_pre)?;
    let iv = Intervals::new(presyn.events(), config.z_out);
    let neurons: Vec<NeuronTrace> = (0..layer.n_post)
        .map(|j| run_neuron(&iv, layer.fan_in(j), params, config))
        .collect();
    let lists: Vec<Vec<f64>> = neurons.iter().map(|n| n.records.iter().map(|r| r.z).collect()).collect();
    Ok(LayerOutput {
        spikes: merge_global(&lists),
        potentials_at_end: neurons
            .iter()
            .map(|n| membrane_potential_at(config.z_out, &n.final_state.coeffs))
            .collect(),
        truncated: neurons.iter().map(|n| n.truncated).collect(),
    })
}

/// Readout potentials of non-firing output neurons at `z_out`.
pub fn output_potentials(
    hidden: &SpikeTrain,
    out_layer: &LayerSpec,
    params: &NeuronParams,
    config: &EngineConfig,
) -> Result<Vec<f64>> {
    check_presyn(hidden, out_layer.n_pre)?;
    let scale = params.scale();
    let z_out = config.z_out;
    Ok((0..out_layer.n_post)
        .map(|o| {
            let w = out_layer.fan_in(o);
            let (mut a, mut b) = (0.0, 0.0);
            for ev in hidden.events().iter().take_while(|e| e.z < z_out) {
                let wz = w[ev.source] * ev.z;
                a += wz;
                b += wz * ev.z;
            }
            scale * a / z_out - scale * b / (z_out * z_out)
        })
        .collect())
}

pub(crate) fn network_forward_traced(
    input: &SpikeTrain,
    net: &Network,
    params: &NeuronParams,
    config: &EngineConfig,
) -> Result<(NetworkOutput, Vec<LayerTrace>)> {
    let (readout, hidden_layers) = net.layers.split_last().expect("network has a readout layer");
    let mut hidden = Vec::with_capacity(hidden_layers.len());
    let mut traces = Vec::with_capacity(hidden_layers.len());
    for layer in hidden_layers {
        let presyn = hidden.last().map_or(input, |h: &LayerOutput| &h.spikes);
        let (out, trace) = layer_forward_traced(presyn, layer, params, config)?;
        hidden.push(out);
        traces.push(trace);
    }
    let last = hidden.last().map_or(input, |h| &h.spikes);
    let v_out = output_potentials(last, readout, params, config)?;
    Ok((NetworkOutput { v_out, hidden }, traces))
}

pub fn network_forward(
    input: &SpikeTrain,
    net: &Network,
    params: &NeuronParams,
    config: &EngineConfig,
) -> Result<NetworkOutput> {
    network_forward_traced(input, net, params, config).map(|(out, _)| out)
}
