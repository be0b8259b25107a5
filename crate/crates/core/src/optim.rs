//! Adam updates and weight initialisation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backward::GradientSet;
use crate::error::{Error, Result};
use crate::forward::{LayerSpec, Network};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(net: &Network, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = net.layers().iter().map(|l| vec![0.0; l.weights().len()]).collect();
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn check_shapes(&self, net: &Network, grads: &GradientSet) -> Result<()> {
        let layers = net.layers();
        if layers.len() != self.m.len() || grads.layers().len() != layers.len() {
            return Err(Error::DimensionMismatch {
                what: "optimizer layers",
                expected: layers.len(),
                found: grads.layers().len(),
            });
        }
        for ((l, m), g) in layers.iter().zip(&self.m).zip(grads.layers()) {
            if m.len() != l.weights().len() || g.len() != l.weights().len() {
                return Err(Error::DimensionMismatch {
                    what: "optimizer weights",
                    expected: l.weights().len(),
                    found: g.len(),
                });
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of every weight in `net`.
pub fn adam_step(state: &mut AdamState, net: &mut Network, grads: &GradientSet) -> Result<()> {
    state.check_shapes(net, grads)?;
    if let Some((layer, index, value)) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient { layer, index, value });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (((layer, m), v), g) in net
        .layers_mut()
        .iter_mut()
        .zip(&mut state.m)
        .zip(&mut state.v)
        .zip(grads.layers())
    {
        for (((w, m), v), &g) in layer.weights_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// How the initialisation spread `0.3` is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitSpread {
    /// Standard deviation 0.3.
    #[default]
    StdDev,
    /// Variance 0.3, i.e. standard deviation sqrt(0.3).
    Variance,
}

pub const INIT_MEAN: f64 = 0.03;
pub const INIT_SPREAD: f64 = 0.3;

impl InitSpread {
    pub fn std_dev(self) -> f64 {
        match self {
            InitSpread::StdDev => INIT_SPREAD,
            InitSpread::Variance => INIT_SPREAD.sqrt(),
        }
    }
}

/// I.i.d. Gaussian weights for an `n_pre x n_post` projection.
pub fn init_weights(n_pre: usize, n_post: usize, seed: u64, spread: InitSpread) -> LayerSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(INIT_MEAN, spread.std_dev()).expect("valid normal");
    let weights = (0..n_pre * n_post).map(|_| normal.sample(&mut rng)).collect();
    LayerSpec::new(n_pre, n_post, weights).expect("shape is consistent")
}

/// Initialises every layer; layer `l` draws from stream `seed + l`.
pub fn init_network(sizes: &[usize], seed: u64, spread: InitSpread) -> Result<Network> {
    if sizes.len() < 2 {
        return Err(Error::Config("need at least input and output sizes".into()));
    }
    Network::new(
        sizes
            .windows(2)
            .enumerate()
            .map(|(l, s)| init_weights(s[0], s[1], seed.wrapping_add(l as u64), spread))
            .collect(),
    )
}
