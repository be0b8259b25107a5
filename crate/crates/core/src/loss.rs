//! Composite objective: softmax cross-entropy on readout potentials, the
//! dead-neuron spike-count penalty on hidden end-potentials, and a small
//! output-norm regularizer.

use crate::error::{Error, Result};

/// Flag predicate applied to one neuron's batch statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CountCondition {
    /// Flag neurons that fired (at least once) on fewer than
    /// `dead_fraction * batch_size` samples.
    FiredOnFewSamples,
    /// Flag neurons whose total spike count over the batch is below the given value.
    TotalCountBelow(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub sigma: f64,
    pub dead_fraction: f64,
    pub count_condition: CountCondition,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            sigma: 0.0001,
            dead_fraction: 0.1,
            count_condition: CountCondition::FiredOnFewSamples,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.sigma >= 0.0) {
            return Err(Error::Config("lambda and sigma must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.dead_fraction) {
            return Err(Error::Config(format!("dead_fraction {} outside [0, 1]", self.dead_fraction)));
        }
        Ok(())
    }
}

/// Per-hidden-neuron penalty flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeadFlags(pub Vec<bool>);

impl DeadFlags {
    pub fn none(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&f| f).count()
    }
}

/// `-log softmax(v)[label]` and its gradient `softmax(v) - onehot(label)`.
pub fn softmax_cross_entropy(v_out: &[f64], label: usize) -> (f64, Vec<f64>) {
    assert!(label < v_out.len(), "label {label} out of range for {} classes", v_out.len());
    let max = v_out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v_out.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (v_out[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Flags from per-sample spike counts of one hidden layer
/// (`counts[sample][neuron]`).
pub fn dead_neuron_flags(counts: &[Vec<usize>], config: &LossConfig) -> DeadFlags {
    assert!(!counts.is_empty(), "dead-neuron flags need a nonempty mini-batch");
    let n = counts[0].len();
    let batch = counts.len() as f64;
    let flags = (0..n)
        .map(|j| match config.count_condition {
            CountCondition::FiredOnFewSamples => {
                let fired = counts.iter().filter(|c| c[j] > 0).count() as f64;
                fired < config.dead_fraction * batch
            }
            CountCondition::TotalCountBelow(limit) => counts.iter().map(|c| c[j]).sum::<usize>() < limit,
        })
        .collect();
    DeadFlags(flags)
}

/// `(1/J) sum_j P_j (v_th - v_hidden[j])` and its gradient.
pub fn spike_count_penalty(v_hidden: &[f64], flags: &DeadFlags, v_th: f64) -> (f64, Vec<f64>) {
    assert_eq!(v_hidden.len(), flags.len());
    let inv_j = 1.0 / v_hidden.len() as f64;
    let mut loss = 0.0;
    let grad = v_hidden
        .iter()
        .zip(&flags.0)
        .map(|(&v, &f)| {
            if f {
                loss += v_th - v;
                -inv_j
            } else {
                0.0
            }
        })
        .collect();
    (loss * inv_j, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub cross_entropy: f64,
    pub penalty: f64,
    pub norm: f64,
    pub grad_v_out: Vec<f64>,
    /// One gradient vector per hidden layer.
    pub grad_v_hidden: Vec<Vec<f64>>,
}

/// Per-sample objective. `flags` holds one [`DeadFlags`] per hidden layer;
/// the penalty is summed over layers.
pub fn total_loss(
    v_out: &[f64],
    v_hidden: &[Vec<f64>],
    label: usize,
    flags: &[DeadFlags],
    v_th: f64,
    config: &LossConfig,
) -> LossTerms {
    let (cross_entropy, mut grad_v_out) = softmax_cross_entropy(v_out, label);
    let n_out = v_out.len() as f64;
    let norm = v_out.iter().map(|v| v * v).sum::<f64>() / n_out;
    for (g, v) in grad_v_out.iter_mut().zip(v_out) {
        *g += 2.0 * config.sigma * v / n_out;
    }
    let mut penalty = 0.0;
    let grad_v_hidden = v_hidden
        .iter()
        .zip(flags)
        .map(|(v, f)| {
            let (l, mut g) = spike_count_penalty(v, f, v_th);
            penalty += l;
            g.iter_mut().for_each(|x| *x *= config.lambda);
            g
        })
        .collect();
    LossTerms {
        total: cross_entropy + config.lambda * penalty + config.sigma * norm,
        cross_entropy,
        penalty,
        norm,
        grad_v_out,
        grad_v_hidden,
    }
}
