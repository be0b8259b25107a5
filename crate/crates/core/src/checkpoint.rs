//! Versioned binary checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "MSPKCKPT"
//! version    u32
//! config     u64 length + UTF-8 TOML of the RunConfig
//! epoch      u64
//! rng        32-byte seed, u128 word position
//! layers     u64 count, then per layer: u64 n_pre, u64 n_post, n_pre*n_post f64 weights
//! adam       u64 step, f64 lr, f64 beta1, f64 beta2, f64 eps,
//!            then per layer the first moments, then per layer the second moments
//! ```
//!
//! Weights are stored post-major: entry `j * n_pre + i` connects input `i`
//! to neuron `j`.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::forward::{LayerSpec, Network};
use crate::optim::AdamState;
use crate::train::Trainer;

pub const MAGIC: &[u8; 8] = b"MSPKCKPT";
pub const VERSION: u32 = 1;

/// Upper bound on any single length field, to reject corrupt headers early.
const MAX_LEN: u64 = 1 << 32;

pub fn write_checkpoint<W: Write>(mut w: W, trainer: &Trainer) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    let cfg = trainer.config.to_toml();
    w.write_u64::<LE>(cfg.len() as u64)?;
    w.write_all(cfg.as_bytes())?;
    w.write_u64::<LE>(trainer.epoch)?;
    w.write_all(&trainer.rng.get_seed())?;
    w.write_u128::<LE>(trainer.rng.get_word_pos())?;
    let layers = trainer.net.layers();
    w.write_u64::<LE>(layers.len() as u64)?;
    for l in layers {
        w.write_u64::<LE>(l.n_pre() as u64)?;
        w.write_u64::<LE>(l.n_post() as u64)?;
        write_f64s(&mut w, l.weights())?;
    }
    let a = &trainer.adam;
    w.write_u64::<LE>(a.step)?;
    for x in [a.lr, a.beta1, a.beta2, a.eps] {
        w.write_f64::<LE>(x)?;
    }
    for m in a.m.iter().chain(&a.v) {
        write_f64s(&mut w, m)?;
    }
    Ok(())
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    for &x in xs {
        w.write_f64::<LE>(x)?;
    }
    Ok(())
}

fn read_len<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    let n = r.read_u64::<LE>()?;
    if n > MAX_LEN {
        return Err(Error::Checkpoint(format!("implausible {what} {n}")));
    }
    Ok(n as usize)
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LE>(&mut out)?;
    Ok(out)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Trainer> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: VERSION });
    }
    let cfg_len = read_len(&mut r, "config length")?;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg)?;
    let cfg = String::from_utf8(cfg).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let config = RunConfig::from_toml(&cfg)?;
    let epoch = r.read_u64::<LE>()?;
    let mut seed = [0u8; 32];
    r.read_exact(&mut seed)?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(r.read_u128::<LE>()?);

    let n_layers = read_len(&mut r, "layer count")?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let n_pre = read_len(&mut r, "layer width")?;
        let n_post = read_len(&mut r, "layer width")?;
        let weights = read_f64s(&mut r, n_pre * n_post)?;
        layers.push(LayerSpec::new(n_pre, n_post, weights)?);
    }
    let net = Network::new(layers)?;
    let step = r.read_u64::<LE>()?;
    let mut hyper = [0.0; 4];
    r.read_f64_into::<LE>(&mut hyper)?;
    let sizes: Vec<usize> = net.layers().iter().map(|l| l.weights().len()).collect();
    let m = sizes.iter().map(|&n| read_f64s(&mut r, n)).collect::<Result<Vec<_>>>()?;
    let v = sizes.iter().map(|&n| read_f64s(&mut r, n)).collect::<Result<Vec<_>>>()?;
    let adam = AdamState { step, lr: hyper[0], beta1: hyper[1], beta2: hyper[2], eps: hyper[3], m, v };
    Trainer::from_parts(config, net, Some(adam), epoch, rng)
}

pub fn save(path: &Path, trainer: &Trainer) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, trainer)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&bytes[..])
}
