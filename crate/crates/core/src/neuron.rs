//! Closed-form LIF dynamics in the z-domain.
//!
//! Time is mapped to `z = exp(t / tau_i)`. With the leaky factor fixed at
//! `p = tau_i / tau_v = 2`, the membrane potential between two consecutive
//! events (presynaptic arrivals or own resets) is
//!
//! ```text
//! V(z) = a / z - b / z^2
//! ```
//!
//! where `(a, b)` is a [`CoefficientPair`] built from the presynaptic spikes
//! seen so far and the neuron's last own spike. A threshold crossing is the
//! smaller root of `v_th z^2 - a z + b = 0`.

use crate::error::{Error, Result};

/// Discriminants in `[-DISC_CLAMP, 0)` are treated as a grazing tangency.
pub const DISC_CLAMP: f64 = 1e-12;

/// Parameters of the current-based LIF neuron.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuronParams {
    tau_i: f64,
    tau_v: f64,
    v_th: f64,
    beta_i: f64,
    beta_v: f64,
}

impl NeuronParams {
    /// Builds parameters from the current time constant and the leaky factor.
    /// Only `p = 2` has a closed-form crossing and is accepted.
    pub fn new(tau_i: f64, p: f64) -> Result<Self> {
        if !(tau_i.is_finite() && tau_i > 0.0) {
            return Err(Error::InvalidParams(format!("tau_i must be positive, got {tau_i}")));
        }
        if p != 2.0 {
            return Err(Error::InvalidParams(format!(
                "only leaky factor p = 2 is supported, got {p}"
            )));
        }
        Ok(Self {
            tau_i,
            tau_v: tau_i / p,
            v_th: 1.0,
            beta_i: 1.0,
            beta_v: 1.0,
        })
    }

    pub fn with_threshold(mut self, v_th: f64) -> Result<Self> {
        if !(v_th.is_finite() && v_th > 0.0) {
            return Err(Error::InvalidParams(format!("threshold must be positive, got {v_th}")));
        }
        self.v_th = v_th;
        Ok(self)
    }

    pub fn with_betas(mut self, beta_i: f64, beta_v: f64) -> Result<Self> {
        if !(beta_i > 0.0 && beta_v > 0.0 && beta_i.is_finite() && beta_v.is_finite()) {
            return Err(Error::InvalidParams("scale coefficients must be positive".into()));
        }
        self.beta_i = beta_i;
        self.beta_v = beta_v;
        Ok(self)
    }

    pub fn tau_i(&self) -> f64 {
        self.tau_i
    }

    pub fn tau_v(&self) -> f64 {
        self.tau_v
    }

    pub fn p(&self) -> f64 {
        self.tau_i / self.tau_v
    }

    pub fn v_th(&self) -> f64 {
        self.v_th
    }

    pub fn beta_i(&self) -> f64 {
        self.beta_i
    }

    pub fn beta_v(&self) -> f64 {
        self.beta_v
    }

    /// `beta_i * beta_v * tau_i * tau_v / (tau_i - tau_v)`, which is
    /// `beta_i * beta_v * tau_i` at `p = 2`.
    pub fn scale(&self) -> f64 {
        self.beta_i * self.beta_v * self.tau_i * self.tau_v / (self.tau_i - self.tau_v)
    }
}

pub fn time_to_z(t: f64, params: &NeuronParams) -> Result<f64> {
    let z = (t / params.tau_i).exp();
    if !t.is_finite() || !z.is_finite() {
        return Err(Error::TimeOverflow { t, tau_i: params.tau_i });
    }
    Ok(z)
}

pub fn z_to_time(z: f64, params: &NeuronParams) -> f64 {
    params.tau_i * z.ln()
}

/// Values of the current kernel `A`, the voltage decay `B` and the PSP
/// kernel `K = A - B` at elapsed time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    pub a: f64,
    pub b: f64,
    pub k: f64,
}

pub fn kernel_eval(t: f64, params: &NeuronParams) -> Result<Kernel> {
    if t < 0.0 || t.is_nan() {
        return Err(Error::NegativeTime(t));
    }
    let a = (-t / params.tau_i).exp();
    let b = (-t / params.tau_v).exp();
    Ok(Kernel { a, b, k: a - b })
}

/// One spike in a layer's merged train.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikeEvent {
    /// Transformed spike time `exp(t / tau_i)`.
    pub z: f64,
    /// Index of the emitting neuron.
    pub source: usize,
    /// Position of this spike within its neuron's own firing sequence.
    pub local_index: usize,
}

/// Spikes of one layer in global order, with the per-neuron view alongside.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpikeTrain {
    events: Vec<SpikeEvent>,
    per_neuron: Vec<Vec<usize>>,
    n_sources: usize,
}

impl SpikeTrain {
    pub fn empty(n_sources: usize) -> Self {
        Self {
            events: Vec::new(),
            per_neuron: vec![Vec::new(); n_sources],
            n_sources,
        }
    }

    /// Builds a train from unordered `(z, source)` pairs. Events are sorted
    /// by `z`, ties by ascending source; local indices follow that order.
    pub fn from_unsorted(n_sources: usize, mut spikes: Vec<(f64, usize)>) -> Result<Self> {
        for &(z, source) in &spikes {
            if !(z.is_finite() && z >= 1.0) {
                return Err(Error::Config(format!("spike z-value {z} outside [1, inf)")));
            }
            if source >= n_sources {
                return Err(Error::DimensionMismatch {
                    what: "spike source",
                    expected: n_sources,
                    found: source,
                });
            }
        }
        spikes.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let mut per_neuron = vec![Vec::new(); n_sources];
        let events = spikes
            .into_iter()
            .enumerate()
            .map(|(g, (z, source))| {
                let local_index = per_neuron[source].len();
                per_neuron[source].push(g);
                SpikeEvent { z, source, local_index }
            })
            .collect();
        Ok(Self { events, per_neuron, n_sources })
    }

    /// Builds a train from per-source spike times in the t-domain.
    pub fn from_times(times: &[Vec<f64>], params: &NeuronParams) -> Result<Self> {
        let mut spikes = Vec::new();
        for (source, ts) in times.iter().enumerate() {
            for &t in ts {
                if t < 0.0 {
                    return Err(Error::NegativeTime(t));
                }
                spikes.push((time_to_z(t, params)?, source));
            }
        }
        Self::from_unsorted(times.len(), spikes)
    }

    /// Assembles a train from parts that are already globally ordered.
    pub(crate) fn from_parts(events: Vec<SpikeEvent>, per_neuron: Vec<Vec<usize>>) -> Self {
        let n_sources = per_neuron.len();
        Self { events, per_neuron, n_sources }
    }

    pub fn events(&self) -> &[SpikeEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    /// Global indices of the spikes of `neuron`, in local order.
    pub fn neuron_spikes(&self, neuron: usize) -> &[usize] {
        &self.per_neuron[neuron]
    }

    pub fn counts(&self) -> Vec<usize> {
        self.per_neuron.iter().map(Vec::len).collect()
    }

    /// Spike times of each neuron, in the t-domain.
    pub fn times(&self, params: &NeuronParams) -> Vec<Vec<f64>> {
        self.per_neuron
            .iter()
            .map(|idx| idx.iter().map(|&g| z_to_time(self.events[g].z, params)).collect())
            .collect()
    }
}

/// Coefficients of `V(z) = a_tilde / z - b_tilde / z^2` on one inter-event interval.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CoefficientPair {
    pub a_tilde: f64,
    pub b_tilde: f64,
}

/// Coefficients from a prefix of the presynaptic train in one pass.
/// `weights` is indexed by presynaptic source; `z_prev` is the neuron's last
/// own spike (0 if it has not fired).
pub fn accumulate_coefficients(
    prefix: &[SpikeEvent],
    weights: &[f64],
    z_prev: f64,
    params: &NeuronParams,
) -> CoefficientPair {
    let scale = params.scale();
    let mut a = 0.0;
    let mut b = 0.0;
    for ev in prefix {
        let wz = weights[ev.source] * ev.z;
        a += wz;
        b += wz * z_prev.max(ev.z);
    }
    CoefficientPair {
        a_tilde: scale * a,
        b_tilde: scale * b,
    }
}

/// Event-by-event form of [`accumulate_coefficients`].
#[derive(Debug, Clone, Copy)]
pub struct CoefficientAccumulator {
    scale: f64,
    sum_a: f64,
    sum_b: f64,
    z_prev: f64,
}

impl CoefficientAccumulator {
    pub fn new(params: &NeuronParams) -> Self {
        Self {
            scale: params.scale(),
            sum_a: 0.0,
            sum_b: 0.0,
            z_prev: 0.0,
        }
    }

    #[inline]
    pub fn absorb(&mut self, weight: f64, z: f64) {
        let wz = weight * z;
        self.sum_a += wz;
        self.sum_b += wz * self.z_prev.max(z);
    }

    /// Re-evaluates `b_tilde` after an own spike at `z_prev`. Every absorbed
    /// event must precede the spike, so each `max` selects `z_prev`.
    #[inline]
    pub fn reset(&mut self, z_prev: f64) {
        self.z_prev = z_prev;
        self.sum_b = self.sum_a * z_prev;
    }

    pub fn z_prev(&self) -> f64 {
        self.z_prev
    }

    #[inline]
    pub fn coefficients(&self) -> CoefficientPair {
        CoefficientPair {
            a_tilde: self.scale * self.sum_a,
            b_tilde: self.scale * self.sum_b,
        }
    }
}

pub fn membrane_potential_at(z: f64, coeffs: &CoefficientPair) -> f64 {
    coeffs.a_tilde / z - coeffs.b_tilde / (z * z)
}

/// A located crossing with the square root of its discriminant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Crossing {
    pub z: f64,
    pub sqrt_disc: f64,
    pub disc: f64,
}

#[inline]
pub(crate) fn solve_crossing(coeffs: &CoefficientPair, v_th: f64, z_lo: f64, z_hi: f64) -> Option<Crossing> {
    let CoefficientPair { a_tilde: a, b_tilde: b } = *coeffs;
    if !(a >= 0.0 && b >= 0.0) || z_lo >= z_hi {
        return None;
    }
    let mut disc = a * a - 4.0 * v_th * b;
    if disc < 0.0 {
        if disc < -DISC_CLAMP {
            return None;
        }
        disc = 0.0;
    }
    let sqrt_disc = disc.sqrt();
    // 2b / (a + D) is the smaller root without cancellation.
    let denom = a + sqrt_disc;
    let z = if denom > 0.0 { 2.0 * b / denom } else { 0.0 };
    (z >= z_lo && z < z_hi).then_some(Crossing { z, sqrt_disc, disc })
}

/// First upward threshold crossing inside `[z_lo, z_hi)`, if any.
pub fn solve_next_spike(coeffs: &CoefficientPair, v_th: f64, z_lo: f64, z_hi: f64) -> Option<f64> {
    solve_crossing(coeffs, v_th, z_lo, z_hi).map(|c| c.z)
}
