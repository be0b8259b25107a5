//! Exact reverse-mode gradients through spike timings.
//!
//! Every emitted spike is `z* = 2 b / (a + sqrt(a^2 - 4 v_th b))` for the
//! coefficient pair in force on its interval. Those coefficients are sums
//! over presynaptic events, weighted by `max(z_prev, z_m)`, so a spike's
//! sensitivity flows into (1) the fan-in weights of its prefix, (2) the
//! presynaptic spike times, and (3) the neuron's own previous spike (the
//! reset path). Readout potentials at `z_out` add direct terms.

use crate::error::{Error, Result};
use crate::forward::{network_forward_traced, LayerTrace, Network, NetworkOutput};
use crate::forward::{EngineConfig, FinalState, SpikeRecord};
use crate::neuron::{accumulate_coefficients, solve_crossing, CoefficientPair, NeuronParams, SpikeTrain};

/// Below this discriminant the crossing is treated as tangent and its
/// partials are clipped to zero.
pub const TANGENCY_TOL: f64 = 1e-12;

/// Recorded forward computation of one sample.
#[derive(Debug, Clone)]
pub struct GradientTape {
    /// Input train followed by the merged train of every hidden layer.
    trains: Vec<SpikeTrain>,
    layers: Vec<LayerTrace>,
    weights_checksum: u64,
    scale: f64,
    v_th: f64,
    z_out: f64,
}

impl GradientTape {
    pub fn trains(&self) -> &[SpikeTrain] {
        &self.trains
    }

    pub fn n_spikes(&self) -> usize {
        self.layers.iter().map(|l| l.neurons.iter().map(|n| n.records.len()).sum::<usize>()).sum()
    }

    /// Number of recorded spikes whose partials are clipped at tangency.
    pub fn clipped_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.neurons)
            .flat_map(|n| &n.records)
            .filter(|r| r.disc < TANGENCY_TOL)
            .count()
    }

    /// Every recorded spike and its validity window, for residual checks:
    /// `(layer, neuron, z, coeffs, window_lo, window_hi)`.
    pub fn spike_windows(&self) -> Vec<(usize, usize, f64, CoefficientPair, f64, f64)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let events = self.trains[l].events();
            for (j, neuron) in layer.neurons.iter().enumerate() {
                for r in &neuron.records {
                    let start = events[r.prefix_end - 1].z;
                    let lo = start.max(r.z_prev);
                    let hi = events.get(r.prefix_end).map_or(self.z_out, |e| e.z.min(self.z_out));
                    out.push((l, j, r.z, r.coeffs, lo, hi));
                }
            }
        }
        out
    }

    /// Re-runs the forward pass and checks that every spike is reproduced
    /// bit-exactly, that each recorded root follows from its recorded
    /// coefficients, and that the coefficients agree with a one-pass
    /// accumulation over the recorded prefix.
    pub fn replay_matches(&self, net: &Network, params: &NeuronParams, config: &EngineConfig) -> Result<bool> {
        let (_, fresh) = network_forward_traced(&self.trains[0], net, params, config)?;
        if fresh != self.layers {
            return Ok(false);
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let events = self.trains[l].events();
            for (j, neuron) in layer.neurons.iter().enumerate() {
                let fan_in = net.layers()[l].fan_in(j);
                for r in &neuron.records {
                    let lo = events[r.prefix_end - 1].z.max(r.z_prev);
                    let hi = events.get(r.prefix_end).map_or(self.z_out, |e| e.z.min(self.z_out));
                    match solve_crossing(&r.coeffs, self.v_th, lo, hi) {
                        Some(c) if c.z.to_bits() == r.z.to_bits() => {}
                        _ => return Ok(false),
                    }
                    let batch = accumulate_coefficients(&events[..r.prefix_end], fan_in, r.z_prev, params);
                    let tol = 1e-12 * (r.coeffs.a_tilde.abs() + r.coeffs.b_tilde.abs()).max(1.0);
                    if (batch.a_tilde - r.coeffs.a_tilde).abs() > tol || (batch.b_tilde - r.coeffs.b_tilde).abs() > tol {
                        return Ok(false);
                    }
                }
            }
        }
        Ok(true)
    }
}

/// Weight gradients, laid out exactly like the network's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    layers: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net.layers().iter().map(|l| vec![0.0; l.weights().len()]).collect(),
        }
    }

    pub fn from_layers(layers: Vec<Vec<f64>>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.layers
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.layers.iter_mut().flatten().for_each(|x| *x *= factor);
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flatten().copied()
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// First non-finite entry as `(layer, index, value)`.
    pub fn first_non_finite(&self) -> Option<(usize, usize, f64)> {
        self.layers
            .iter()
            .enumerate()
            .find_map(|(l, g)| g.iter().position(|x| !x.is_finite()).map(|i| (l, i, g[i])))
    }
}

/// Loss sensitivities delivered to the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Upstream {
    pub v_out: Vec<f64>,
    /// One vector per hidden layer.
    pub v_hidden: Vec<Vec<f64>>,
}

impl Upstream {
    pub fn zeros(net: &Network) -> Self {
        let sizes = net.sizes();
        Self {
            v_out: vec![0.0; net.n_outputs()],
            v_hidden: sizes[1..sizes.len() - 1].iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// `(dz*/da, dz*/db)` for a recorded crossing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikePartials {
    pub d_a: f64,
    pub d_b: f64,
    pub clipped: bool,
}

/// Partial derivatives of the smaller root of `v_th z^2 - a z + b = 0`.
pub fn spike_time_partials(coeffs: &CoefficientPair, v_th: f64) -> SpikePartials {
    let disc = coeffs.a_tilde * coeffs.a_tilde - 4.0 * v_th * coeffs.b_tilde;
    partials_from_disc(coeffs.a_tilde, disc, v_th)
}

fn partials_from_disc(a: f64, disc: f64, v_th: f64) -> SpikePartials {
    if disc < TANGENCY_TOL {
        return SpikePartials { d_a: 0.0, d_b: 0.0, clipped: true };
    }
    let d = disc.sqrt();
    SpikePartials {
        d_a: (1.0 - a / d) / (2.0 * v_th),
        d_b: 1.0 / d,
        clipped: false,
    }
}

/// Forward pass that also records the tape. Values are identical to
/// [`crate::forward::network_forward`].
pub fn forward_with_tape(
    input: &SpikeTrain,
    net: &Network,
    params: &NeuronParams,
    config: &EngineConfig,
) -> Result<(NetworkOutput, GradientTape)> {
    forward_with_tape_keyed(input, net, net.checksum(), params, config)
}

/// As [`forward_with_tape`] with the weight checksum computed by the caller,
/// so that a mini-batch hashes its weights once.
pub fn forward_with_tape_keyed(
    input: &SpikeTrain,
    net: &Network,
    checksum: u64,
    params: &NeuronParams,
    config: &EngineConfig,
) -> Result<(NetworkOutput, GradientTape)> {
    let (output, layers) = network_forward_traced(input, net, params, config)?;
    let mut trains = Vec::with_capacity(output.hidden.len() + 1);
    trains.push(input.clone());
    trains.extend(output.hidden.iter().map(|h| h.spikes.clone()));
    let tape = GradientTape {
        trains,
        layers,
        weights_checksum: checksum,
        scale: params.scale(),
        v_th: params.v_th(),
        z_out: config.z_out,
    };
    Ok((output, tape))
}

/// Fault injection for demonstrating that the gradient checks are sensitive.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Ablation {
    /// Drop every gradient term that flows through a neuron's own previous spike.
    pub drop_reset_paths: bool,
    /// Negate `dz*/db`.
    pub flip_partial_b: bool,
}

pub fn backward(tape: &GradientTape, net: &Network, upstream: &Upstream) -> Result<GradientSet> {
    backward_with(tape, net, upstream, Ablation::default())
}

pub fn backward_with(tape: &GradientTape, net: &Network, upstream: &Upstream, ablation: Ablation) -> Result<GradientSet> {
    backward_keyed(tape, net, net.checksum(), upstream, ablation)
}

/// As [`backward_with`] with the weight checksum computed by the caller.
pub fn backward_keyed(
    tape: &GradientTape,
    net: &Network,
    checksum: u64,
    upstream: &Upstream,
    ablation: Ablation,
) -> Result<GradientSet> {
    if checksum != tape.weights_checksum {
        return Err(Error::TapeMismatch { tape: tape.weights_checksum, weights: checksum });
    }
    let n_hidden = net.n_hidden_layers();
    if upstream.v_out.len() != net.n_outputs() {
        return Err(Error::DimensionMismatch {
            what: "upstream v_out",
            expected: net.n_outputs(),
            found: upstream.v_out.len(),
        });
    }
    if upstream.v_hidden.len() != n_hidden {
        return Err(Error::DimensionMismatch {
            what: "upstream hidden layers",
            expected: n_hidden,
            found: upstream.v_hidden.len(),
        });
    }
    for (l, v) in upstream.v_hidden.iter().enumerate() {
        if v.len() != net.layers()[l].n_post() {
            return Err(Error::DimensionMismatch {
                what: "upstream v_hidden",
                expected: net.layers()[l].n_post(),
                found: v.len(),
            });
        }
    }

    let mut grads = GradientSet::zeros_like(net);
    let scale = tape.scale;
    let z_out = tape.z_out;

    // Readout layer.
    let readout = &net.layers()[n_hidden];
    let last = &tape.trains[n_hidden];
    let mut g_z = vec![0.0; last.len()];
    {
        let g_w = &mut grads.layers[n_hidden];
        let inv = 1.0 / z_out;
        let inv2 = inv * inv;
        for (o, &g) in upstream.v_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let w = readout.fan_in(o);
            let row = &mut g_w[o * readout.n_pre()..(o + 1) * readout.n_pre()];
            for (m, ev) in last.events().iter().enumerate().take_while(|(_, e)| e.z < z_out) {
                row[ev.source] += g * scale * (ev.z * inv - ev.z * ev.z * inv2);
                g_z[m] += g * scale * w[ev.source] * (inv - 2.0 * ev.z * inv2);
            }
        }
    }

    let mut work = NeuronWork::default();
    for l in (0..n_hidden).rev() {
        let layer = &net.layers()[l];
        let presyn = tape.trains[l].events();
        let post = &tape.trains[l + 1];
        let need_input_grad = l > 0;
        let mut g_prev = vec![0.0; if need_input_grad { presyn.len() } else { 0 }];
        let g_w = &mut grads.layers[l];
        for (j, neuron) in tape.layers[l].neurons.iter().enumerate() {
            let mut g_local: Vec<f64> = post.neuron_spikes(j).iter().map(|&g| g_z[g]).collect();
            let g_v = upstream.v_hidden[l][j];
            if g_v == 0.0 && g_local.iter().all(|&g| g == 0.0) {
                continue;
            }
            let fan_in = layer.fan_in(j);
            work.prepare(presyn, fan_in, scale);

            // Readout of the hidden potential at z_out.
            if g_v != 0.0 {
                let FinalState { prefix_end, z_prev, .. } = neuron.final_state;
                let g_a = g_v / z_out;
                let g_b = -g_v / (z_out * z_out);
                let split = work.add_term(presyn, prefix_end, z_prev, g_a, g_b);
                if !ablation.drop_reset_paths && z_prev > 0.0 {
                    let k = g_local.len() - 1;
                    g_local[k] += g_b * work.prefix_wz[split];
                }
            }

            for k in (0..neuron.records.len()).rev() {
                let g = g_local[k];
                if g == 0.0 {
                    continue;
                }
                let r: &SpikeRecord = &neuron.records[k];
                let mut partials = partials_from_disc(r.coeffs.a_tilde, r.disc, tape.v_th);
                if partials.clipped {
                    continue;
                }
                if ablation.flip_partial_b {
                    partials.d_b = -partials.d_b;
                }
                let g_a = g * partials.d_a;
                let g_b = g * partials.d_b;
                let split = work.add_term(presyn, r.prefix_end, r.z_prev, g_a, g_b);
                if !ablation.drop_reset_paths && k > 0 {
                    g_local[k - 1] += g_b * work.prefix_wz[split];
                }
            }

            let row = &mut g_w[j * layer.n_pre()..(j + 1) * layer.n_pre()];
            let (mut c_a, mut c_b) = (0.0, 0.0);
            for (m, ev) in presyn.iter().enumerate().take(work.max_end) {
                c_a += work.diff_a[m];
                c_b += work.diff_b[m];
                if c_a == 0.0 && c_b == 0.0 {
                    continue;
                }
                row[ev.source] += scale * ev.z * (c_a + c_b * ev.z);
                if need_input_grad {
                    g_prev[m] += scale * fan_in[ev.source] * (c_a + 2.0 * c_b * ev.z);
                }
            }
        }
        g_z = g_prev;
    }
    Ok(grads)
}

/// Per-neuron scratch space: difference arrays over presynaptic events and
/// prefix sums of `scale * w * z`.
#[derive(Default)]
struct NeuronWork {
    diff_a: Vec<f64>,
    diff_b: Vec<f64>,
    prefix_wz: Vec<f64>,
    max_end: usize,
}

impl NeuronWork {
    fn prepare(&mut self, presyn: &[crate::neuron::SpikeEvent], fan_in: &[f64], scale: f64) {
        let m = presyn.len();
        self.diff_a.clear();
        self.diff_a.resize(m + 1, 0.0);
        self.diff_b.clear();
        self.diff_b.resize(m + 1, 0.0);
        self.prefix_wz.clear();
        self.prefix_wz.reserve(m + 1);
        let mut acc = 0.0;
        self.prefix_wz.push(0.0);
        for ev in presyn {
            acc += scale * fan_in[ev.source] * ev.z;
            self.prefix_wz.push(acc);
        }
        self.max_end = 0;
    }

    /// Registers a term `g_a * a + g_b * b` whose coefficients cover events
    /// `[0, end)` with previous own spike `z_prev`. Events strictly earlier
    /// than `z_prev` take the `z_prev` branch of the max; ties take the
    /// event-time branch. Returns the branch split index.
    fn add_term(&mut self, presyn: &[crate::neuron::SpikeEvent], end: usize, z_prev: f64, g_a: f64, g_b: f64) -> usize {
        let split = presyn[..end].partition_point(|e| e.z < z_prev);
        self.diff_a[0] += g_a + g_b * z_prev;
        self.diff_a[split] -= g_b * z_prev;
        self.diff_a[end] -= g_a;
        self.diff_b[split] += g_b;
        self.diff_b[end] -= g_b;
        self.max_end = self.max_end.max(end);
        split
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{network_forward, LayerSpec};

    fn setup() -> (Network, NeuronParams, EngineConfig, SpikeTrain) {
        let p = NeuronParams::new(1.0, 2.0).unwrap();
        let cfg = EngineConfig::from_t_out(3, 16, 1.0, false, &p).unwrap();
        let net = Network::new(vec![
            LayerSpec::new(2, 2, vec![3.0, 2.5, 4.0, -1.0]).unwrap(),
            LayerSpec::new(2, 2, vec![1.0, -0.5, 0.3, 0.7]).unwrap(),
        ])
        .unwrap();
        let input = SpikeTrain::from_times(&[vec![0.0], vec![0.2]], &p).unwrap();
        (net, p, cfg, input)
    }

    #[test]
    fn partial_examples() {
        let s = spike_time_partials(&CoefficientPair { a_tilde: 5.0, b_tilde: 5.0 }, 1.0);
        assert!((s.d_a - -0.618_033_988_749_894_8).abs() < 1e-12);
        assert!((s.d_b - 0.447_213_595_499_957_9).abs() < 1e-12);
        let s = spike_time_partials(&CoefficientPair { a_tilde: 2.0, b_tilde: 0.0 }, 1.0);
        assert_eq!((s.d_a, s.d_b), (0.0, 0.5));
        let s = spike_time_partials(&CoefficientPair { a_tilde: 4.0, b_tilde: 4.0 }, 1.0);
        assert!(s.clipped);
        assert_eq!((s.d_a, s.d_b), (0.0, 0.0));
    }

    #[test]
    fn partials_match_finite_differences() {
        let c = CoefficientPair { a_tilde: 5.0, b_tilde: 5.0 };
        let h = 1e-6;
        let z = |a: f64, b: f64| {
            crate::neuron::solve_next_spike(&CoefficientPair { a_tilde: a, b_tilde: b }, 1.0, 1.0, 10.0).unwrap()
        };
        let fd_a = (z(5.0 + h, 5.0) - z(5.0 - h, 5.0)) / (2.0 * h);
        let fd_b = (z(5.0, 5.0 + h) - z(5.0, 5.0 - h)) / (2.0 * h);
        let s = spike_time_partials(&c, 1.0);
        assert!((fd_a - s.d_a).abs() < 1e-8);
        assert!((fd_b - s.d_b).abs() < 1e-8);
    }

    #[test]
    fn tape_is_recording_neutral() {
        let (net, p, cfg, input) = setup();
        let plain = network_forward(&input, &net, &p, &cfg).unwrap();
        let (taped, tape) = forward_with_tape(&input, &net, &p, &cfg).unwrap();
        assert_eq!(plain, taped);
        assert!(tape.n_spikes() > 0);
        assert!(tape.replay_matches(&net, &p, &cfg).unwrap());
    }

    #[test]
    fn zero_weight_tape_is_empty() {
        let (_, p, cfg, input) = setup();
        let net = Network::zeros(&[2, 3, 2]).unwrap();
        let (_, tape) = forward_with_tape(&input, &net, &p, &cfg).unwrap();
        assert_eq!(tape.n_spikes(), 0);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let (net, p, cfg, input) = setup();
        let (_, tape) = forward_with_tape(&input, &net, &p, &cfg).unwrap();
        let g = backward(&tape, &net, &Upstream::zeros(&net)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn tape_mismatch_is_detected() {
        let (mut net, p, cfg, input) = setup();
        let (_, tape) = forward_with_tape(&input, &net, &p, &cfg).unwrap();
        net.layers_mut()[0].set_weight(0, 0, 3.5);
        let err = backward(&tape, &net, &Upstream::zeros(&net)).unwrap_err();
        assert!(matches!(err, Error::TapeMismatch { .. }));
    }

    #[test]
    fn upstream_shape_is_checked() {
        let (net, p, cfg, input) = setup();
        let (_, tape) = forward_with_tape(&input, &net, &p, &cfg).unwrap();
        let mut up = Upstream::zeros(&net);
        up.v_out.push(0.0);
        assert!(backward(&tape, &net, &up).is_err());
    }

    #[test]
    fn single_spike_weight_derivative() {
        // 1 input, w = 5, tau_i = 1: dz*/dw = -0.17082039324993690892
        let p = NeuronParams::new(1.0, 2.0).unwrap();
        let cfg = EngineConfig::from_t_out(3, 16, 1.0, false, &p).unwrap();
        let net = Network::new(vec![
            LayerSpec::new(1, 1, vec![5.0]).unwrap(),
            LayerSpec::new(1, 1, vec![1.0]).unwrap(),
        ])
        .unwrap();
        let input = SpikeTrain::from_times(&[vec![0.0]], &p).unwrap();
        let (out, tape) = forward_with_tape(&input, &net, &p, &cfg).unwrap();
        let z = out.hidden[0].spikes.events()[0].z;
        let zo = cfg.z_out;
        let dv_dz = 1.0 / zo - 2.0 * z / (zo * zo);
        let mut up = Upstream::zeros(&net);
        up.v_out[0] = 1.0;
        let g = backward(&tape, &net, &up).unwrap();
        let dz_dw = g.layers()[0][0] / dv_dz;
        assert!((dz_dw - -0.170_820_393_249_936_9).abs() < 1e-10, "{dz_dw}");
        assert!(dz_dw < 0.0);
    }
}
