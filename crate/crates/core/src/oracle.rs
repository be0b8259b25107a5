//! Independent ground truth for the closed-form engine.
//!
//! [`ode_simulate`] integrates the raw current/voltage differential system
//! with classical RK4, applies synaptic impulses at presynaptic spike times,
//! and locates threshold crossings by bisection. It deliberately uses none of
//! the z-domain machinery. [`finite_diff_grad`] provides central-difference
//! gradients of the training loss.

use crate::backward::GradientSet;
use crate::error::{Error, Result};
use crate::forward::{network_forward, EngineConfig, Network};
use crate::loss::{total_loss, DeadFlags, LossConfig};
use crate::neuron::{NeuronParams, SpikeTrain};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeConfig {
    /// Largest RK4 step (time units).
    pub max_step: f64,
    /// Crossing located once `|V - V_th|` falls below this (potential units).
    pub v_tol: f64,
    pub t_out: f64,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self { max_step: 1e-4, v_tol: 1e-10, t_out: 1.0 }
    }
}

impl OdeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_step > 0.0 && self.v_tol > 0.0 && self.t_out > 0.0) {
            return Err(Error::Config("ODE step, tolerance and t_out must be positive".into()));
        }
        Ok(())
    }
}

/// State just before and after a reset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResetSnapshot {
    pub t: f64,
    pub current_before: f64,
    pub current_after: f64,
    pub v_before: f64,
    pub v_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronOde {
    pub spikes: Vec<f64>,
    pub v_end: f64,
    pub resets: Vec<ResetSnapshot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeResult {
    /// `hidden_spikes[layer][neuron]` in the t-domain.
    pub hidden_spikes: Vec<Vec<Vec<f64>>>,
    pub v_hidden: Vec<Vec<f64>>,
    pub v_out: Vec<f64>,
}

#[derive(Clone, Copy)]
struct Dyn {
    tau_i: f64,
    tau_v: f64,
    beta_v: f64,
}

impl Dyn {
    fn deriv(&self, i: f64, v: f64) -> (f64, f64) {
        (-i / self.tau_i, -v / self.tau_v + self.beta_v * i)
    }

    fn rk4(&self, i: f64, v: f64, h: f64) -> (f64, f64) {
        let (k1i, k1v) = self.deriv(i, v);
        let (k2i, k2v) = self.deriv(i + 0.5 * h * k1i, v + 0.5 * h * k1v);
        let (k3i, k3v) = self.deriv(i + 0.5 * h * k2i, v + 0.5 * h * k2v);
        let (k4i, k4v) = self.deriv(i + h * k3i, v + h * k3v);
        (
            i + h / 6.0 * (k1i + 2.0 * k2i + 2.0 * k3i + k4i),
            v + h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v),
        )
    }

    fn dv(&self, i: f64, v: f64) -> f64 {
        self.deriv(i, v).1
    }
}

const MAX_BISECT: usize = 200;

/// Integrates one neuron driven by `(time, weight)` impulses sorted by time.
/// With `threshold = None` the neuron never fires.
pub fn simulate_neuron(
    impulses: &[(f64, f64)],
    params: &NeuronParams,
    threshold: Option<f64>,
    cfg: &OdeConfig,
) -> Result<NeuronOde> {
    let d = Dyn {
        tau_i: params.tau_i(),
        tau_v: params.tau_v(),
        beta_v: params.beta_v(),
    };
    let beta_i = params.beta_i();
    let t_out = cfg.t_out;
    let (mut t, mut cur, mut v) = (0.0f64, 0.0f64, 0.0f64);
    let mut next = 0;
    let mut spikes = Vec::new();
    let mut resets = Vec::new();

    while t < t_out {
        while next < impulses.len() && impulses[next].0 <= t {
            cur += beta_i * impulses[next].1;
            next += 1;
        }
        let segment_end = impulses.get(next).map_or(t_out, |e| e.0.min(t_out));
        let h = cfg.max_step.min(segment_end - t);
        if h <= 0.0 {
            break;
        }
        let (c1, v1) = d.rk4(cur, v, h);
        let Some(th) = threshold else {
            (t, cur, v) = (if segment_end - t <= cfg.max_step { segment_end } else { t + h }, c1, v1);
            continue;
        };
        if v >= th {
            return Err(Error::OdeRefinement(t));
        }
        // Upper end of a bracket [0, hi] containing the first upward crossing.
        let mut bracket = None;
        if v1 >= th {
            bracket = Some(h);
        } else if d.dv(cur, v) > 0.0 && d.dv(c1, v1) < 0.0 {
            // Potential peaks inside the step; locate the peak.
            let (mut lo, mut hi) = (0.0, h);
            for _ in 0..MAX_BISECT {
                let mid = 0.5 * (lo + hi);
                let (cm, vm) = d.rk4(cur, v, mid);
                if d.dv(cm, vm) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo < 1e-15 {
                    break;
                }
            }
            let (_, vp) = d.rk4(cur, v, hi);
            if vp >= th {
                bracket = Some(hi);
            }
        }
        match bracket {
            None => {
                (t, cur, v) = (if segment_end - t <= cfg.max_step { segment_end } else { t + h }, c1, v1);
            }
            Some(hi_start) => {
                let (mut lo, mut hi) = (0.0, hi_start);
                let mut state = d.rk4(cur, v, hi);
                for _ in 0..MAX_BISECT {
                    let mid = 0.5 * (lo + hi);
                    let (cm, vm) = d.rk4(cur, v, mid);
                    if vm >= th {
                        hi = mid;
                        state = (cm, vm);
                    } else {
                        lo = mid;
                    }
                    if (state.1 - th).abs() <= cfg.v_tol && hi - lo < 1e-13 {
                        break;
                    }
                }
                let tc = t + hi;
                if tc >= t_out {
                    v = state.1;
                    break;
                }
                spikes.push(tc);
                resets.push(ResetSnapshot {
                    t: tc,
                    current_before: state.0,
                    current_after: state.0,
                    v_before: state.1,
                    v_after: 0.0,
                });
                (t, cur, v) = (tc, state.0, 0.0);
            }
        }
    }
    Ok(NeuronOde { spikes, v_end: v, resets })
}

/// Simulates the whole network from per-source input spike times.
pub fn ode_simulate(net: &Network, input_times: &[Vec<f64>], params: &NeuronParams, cfg: &OdeConfig) -> Result<OdeResult> {
    cfg.validate()?;
    if input_times.len() != net.n_inputs() {
        return Err(Error::DimensionMismatch {
            what: "oracle input width",
            expected: net.n_inputs(),
            found: input_times.len(),
        });
    }
    let mut presyn: Vec<Vec<f64>> = input_times.to_vec();
    let mut hidden_spikes = Vec::new();
    let mut v_hidden = Vec::new();
    let n_layers = net.layers().len();
    for (l, layer) in net.layers().iter().enumerate() {
        let readout = l + 1 == n_layers;
        let mut layer_spikes = Vec::with_capacity(layer.n_post());
        let mut layer_v = Vec::with_capacity(layer.n_post());
        for j in 0..layer.n_post() {
            let mut impulses: Vec<(f64, f64)> = presyn
                .iter()
                .enumerate()
                .flat_map(|(i, ts)| ts.iter().map(move |&t| (t, layer.weight(i, j))))
                .collect();
            impulses.sort_by(|a, b| a.0.total_cmp(&b.0));
            let threshold = (!readout).then_some(params.v_th());
            let sim = simulate_neuron(&impulses, params, threshold, cfg)?;
            layer_spikes.push(sim.spikes);
            layer_v.push(sim.v_end);
        }
        if readout {
            return Ok(OdeResult { hidden_spikes, v_hidden, v_out: layer_v });
        }
        presyn = layer_spikes.clone();
        hidden_spikes.push(layer_spikes);
        v_hidden.push(layer_v);
    }
    unreachable!("network always ends with a readout layer")
}

/// Central-difference gradient of the per-sample loss with flags held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct FdGradient {
    pub grads: GradientSet,
    /// Set where the forward spike counts at `w + step` or `w - step`
    /// differ from those at `w`.
    pub discontinuous: Vec<Vec<bool>>,
}

pub struct LossProblem<'a> {
    pub input: &'a SpikeTrain,
    pub label: usize,
    pub flags: &'a [DeadFlags],
    pub params: &'a NeuronParams,
    pub engine: &'a EngineConfig,
    pub loss: &'a LossConfig,
}

impl LossProblem<'_> {
    /// Loss value and hidden spike counts per layer.
    pub fn evaluate(&self, net: &Network) -> Result<(f64, Vec<Vec<usize>>)> {
        let out = network_forward(self.input, net, self.params, self.engine)?;
        let v_hidden: Vec<Vec<f64>> = out.hidden.iter().map(|h| h.potentials_at_end.clone()).collect();
        let terms = total_loss(&out.v_out, &v_hidden, self.label, self.flags, self.params.v_th(), self.loss);
        Ok((terms.total, out.hidden.iter().map(|h| h.spikes.counts()).collect()))
    }
}

pub fn finite_diff_grad(net: &Network, problem: &LossProblem, step: f64) -> Result<FdGradient> {
    if !(step > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let (_, base_counts) = problem.evaluate(net)?;
    let mut grads = GradientSet::zeros_like(net);
    let mut discontinuous: Vec<Vec<bool>> = net.layers().iter().map(|l| vec![false; l.weights().len()]).collect();
    let mut probe = net.clone();
    for l in 0..net.layers().len() {
        for idx in 0..net.layers()[l].weights().len() {
            let w0 = net.layers()[l].weights()[idx];
            probe.layers_mut()[l].weights_mut()[idx] = w0 + step;
            let (up, c_up) = problem.evaluate(&probe)?;
            probe.layers_mut()[l].weights_mut()[idx] = w0 - step;
            let (down, c_down) = problem.evaluate(&probe)?;
            probe.layers_mut()[l].weights_mut()[idx] = w0;
            grads.layers_mut()[l][idx] = (up - down) / (2.0 * step);
            discontinuous[l][idx] = c_up != base_counts || c_down != base_counts;
        }
    }
    Ok(FdGradient { grads, discontinuous })
}
