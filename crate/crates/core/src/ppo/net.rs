//! Flat-parameter policy/value network with hand-rolled backprop.
//!
//! Architecture: input -> tanh(hidden) -> tanh(hidden) -> {action logits,
//! scalar value}. All parameters live in one `Vec<f64>` so the optimizer,
//! finite-difference checks, and checkpointing can treat them uniformly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Sparse input vector. Observations here are mostly one-hot blocks, so a
/// forward pass only touches ~28 of several hundred input rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub len: usize,
    /// (index, value) pairs; indices strictly increasing, within `len`.
    pub active: Vec<(u32, f64)>,
}

impl Features {
    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.len];
        for &(i, x) in &self.active {
            v[i as usize] = x;
        }
        v
    }
}

/// Activations cached by a forward pass, reused for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub logits: Vec<f64>,
    pub value: f64,
}

/// Parameter block layout inside the flat vector:
/// w1 [input][hidden] | b1 | w2 [hidden][hidden] | b2 |
/// wp [hidden][action] | bp | wv [hidden] | bv.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyValueNet {
    input_len: usize,
    hidden: usize,
    action_count: usize,
    params: Vec<f64>,
}

impl PolicyValueNet {
    pub fn new(input_len: usize, hidden: usize, action_count: usize, seed: u64) -> Self {
        assert!(input_len > 0 && hidden > 0 && action_count >= 2);
        let mut net = PolicyValueNet {
            input_len,
            hidden,
            action_count,
            params: vec![0.0; param_count(input_len, hidden, action_count)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (o_w1, _, o_w2, _, o_wp, _, o_wv, _) = net.offsets();
        let mut init = |lo: usize, n: usize, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut net.params[lo..lo + n] {
                *p = rng.gen_range(-bound..bound);
            }
        };
        init(o_w1, input_len * hidden, input_len, hidden, &mut rng);
        init(o_w2, hidden * hidden, hidden, hidden, &mut rng);
        init(o_wp, hidden * action_count, hidden, action_count, &mut rng);
        init(o_wv, hidden, hidden, 1, &mut rng);
        net
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    #[allow(clippy::type_complexity)]
    fn offsets(&self) -> (usize, usize, usize, usize, usize, usize, usize, usize) {
        let (f, h, a) = (self.input_len, self.hidden, self.action_count);
        let o_w1 = 0;
        let o_b1 = o_w1 + f * h;
        let o_w2 = o_b1 + h;
        let o_b2 = o_w2 + h * h;
        let o_wp = o_b2 + h;
        let o_bp = o_wp + h * a;
        let o_wv = o_bp + a;
        let o_bv = o_wv + h;
        (o_w1, o_b1, o_w2, o_b2, o_wp, o_bp, o_wv, o_bv)
    }

    pub fn forward(&self, x: &Features) -> Forward {
        assert_eq!(x.len, self.input_len, "feature length mismatch");
        let (h, a) = (self.hidden, self.action_count);
        let (o_w1, o_b1, o_w2, o_b2, o_wp, o_bp, o_wv, o_bv) = self.offsets();
        let p = &self.params;

        let mut h1 = p[o_b1..o_b1 + h].to_vec();
        for &(f, v) in &x.active {
            let row = o_w1 + f as usize * h;
            for (k, h1k) in h1.iter_mut().enumerate() {
                *h1k += v * p[row + k];
            }
        }
        for v in &mut h1 {
            *v = v.tanh();
        }

        let mut h2 = p[o_b2..o_b2 + h].to_vec();
        for (j, &h1j) in h1.iter().enumerate() {
            let row = o_w2 + j * h;
            for (k, h2k) in h2.iter_mut().enumerate() {
                *h2k += h1j * p[row + k];
            }
        }
        for v in &mut h2 {
            *v = v.tanh();
        }

        let mut logits = p[o_bp..o_bp + a].to_vec();
        let mut value = p[o_bv];
        for (j, &h2j) in h2.iter().enumerate() {
            let row = o_wp + j * a;
            for (k, lk) in logits.iter_mut().enumerate() {
                *lk += h2j * p[row + k];
            }
            value += h2j * p[o_wv + j];
        }

        Forward { h1, h2, logits, value }
    }

    /// Accumulates d(loss)/d(params) into `grad` given upstream gradients on
    /// the heads. `grad` must have `param_count()` entries.
    pub fn backward(
        &self,
        x: &Features,
        fwd: &Forward,
        dlogits: &[f64],
        dvalue: f64,
        grad: &mut [f64],
    ) {
        assert_eq!(dlogits.len(), self.action_count);
        assert_eq!(grad.len(), self.params.len());
        let (h, a) = (self.hidden, self.action_count);
        let (o_w1, o_b1, o_w2, o_b2, o_wp, o_bp, o_wv, o_bv) = self.offsets();
        let p = &self.params;

        let mut dh2 = vec![0.0; h];
        for (j, &h2j) in fwd.h2.iter().enumerate() {
            let row = o_wp + j * a;
            let mut acc = p[o_wv + j] * dvalue;
            for (k, &dk) in dlogits.iter().enumerate() {
                grad[row + k] += h2j * dk;
                acc += p[row + k] * dk;
            }
            grad[o_wv + j] += h2j * dvalue;
            dh2[j] = acc;
        }
        for (k, &dk) in dlogits.iter().enumerate() {
            grad[o_bp + k] += dk;
        }
        grad[o_bv] += dvalue;

        // tanh' from the post-activation value.
        let mut dz2 = vec![0.0; h];
        for j in 0..h {
            dz2[j] = dh2[j] * (1.0 - fwd.h2[j] * fwd.h2[j]);
        }

        let mut dh1 = vec![0.0; h];
        for (j, &h1j) in fwd.h1.iter().enumerate() {
            let row = o_w2 + j * h;
            let mut acc = 0.0;
            for (k, &dzk) in dz2.iter().enumerate() {
                grad[row + k] += h1j * dzk;
                acc += p[row + k] * dzk;
            }
            dh1[j] = acc;
        }
        for (k, &dzk) in dz2.iter().enumerate() {
            grad[o_b2 + k] += dzk;
        }

        let mut dz1 = vec![0.0; h];
        for j in 0..h {
            dz1[j] = dh1[j] * (1.0 - fwd.h1[j] * fwd.h1[j]);
        }
        for &(f, v) in &x.active {
            let row = o_w1 + f as usize * h;
            for (k, &dzk) in dz1.iter().enumerate() {
                grad[row + k] += v * dzk;
            }
        }
        for (k, &dzk) in dz1.iter().enumerate() {
            grad[o_b1 + k] += dzk;
        }
    }

    pub fn save<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.input_len as u32).to_le_bytes())?;
        w.write_all(&(self.hidden as u32).to_le_bytes())?;
        w.write_all(&(self.action_count as u32).to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = u16::from_le_bytes(read_array(r)?);
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let input_len = u32::from_le_bytes(read_array(r)?) as usize;
        let hidden = u32::from_le_bytes(read_array(r)?) as usize;
        let action_count = u32::from_le_bytes(read_array(r)?) as usize;
        let count = u64::from_le_bytes(read_array(r)?) as usize;
        if input_len == 0 || hidden == 0 || action_count < 2 {
            return Err(CheckpointError::BadShape);
        }
        if count != param_count(input_len, hidden, action_count) {
            return Err(CheckpointError::BadShape);
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let p = f64::from_le_bytes(read_array(r)?);
            if !p.is_finite() {
                return Err(CheckpointError::NonFiniteParameter);
            }
            params.push(p);
        }
        let mut tail = [0u8; 1];
        match r.read(&mut tail) {
            Ok(0) => {}
            Ok(_) => return Err(CheckpointError::TrailingBytes),
            Err(e) => return Err(CheckpointError::Io(e)),
        }
        Ok(PolicyValueNet {
            input_len,
            hidden,
            action_count,
            params,
        })
    }

    pub fn save_to_path(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.save(&mut f)
    }

    pub fn load_from_path(path: &Path) -> Result<Self, CheckpointError> {
        let mut f = std::fs::File::open(path)?;
        Self::load(&mut f)
    }
}

fn param_count(input_len: usize, hidden: usize, action_count: usize) -> usize {
    input_len * hidden + hidden + hidden * hidden + hidden + hidden * action_count + action_count
        + hidden
        + 1
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PVNC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("checkpoint shape header inconsistent")]
    BadShape,
    #[error("checkpoint holds a non-finite parameter")]
    NonFiniteParameter,
    #[error("trailing bytes after checkpoint payload")]
    TrailingBytes,
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(CheckpointError::Io)
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N], CheckpointError> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

/// Per-parameter adaptive gradient step with first/second moment estimates
/// and bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, param_count: usize) -> Self {
        assert!(lr > 0.0 && lr.is_finite());
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}
