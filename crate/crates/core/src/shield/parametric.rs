//! Parametric shield: logistic regression over raw key bits. Unlike the exact
//! table it generalizes to pairs it never saw, at the price of both kinds of
//! classification error.

use super::{ShieldError, ShieldKey};

/// Feature layout: every state byte expanded to 8 bits (LSB first), then a
/// one-hot action block. The bias is kept separate from the weight vector.
pub fn key_features(key: &ShieldKey, state_width: usize, action_count: usize) -> Vec<f64> {
    let mut x = vec![0.0; state_width * 8 + action_count];
    for (i, &byte) in key.state.as_bytes().iter().enumerate() {
        for bit in 0..8 {
            x[i * 8 + bit] = f64::from(byte >> bit & 1);
        }
    }
    let a = key.action.index();
    if a < action_count {
        x[state_width * 8 + a] = 1.0;
    }
    x
}

#[derive(Debug, Clone)]
pub struct ParametricShield {
    weights: Vec<f64>,
    bias: f64,
    threshold: f64,
    state_width: usize,
    action_count: usize,
    /// Mean cross-entropy after each accepted epoch. Diagnostic only; not
    /// part of the wire format.
    loss_per_epoch: Vec<f64>,
}

impl PartialEq for ParametricShield {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights
            && self.bias == other.bias
            && self.threshold == other.threshold
            && self.state_width == other.state_width
            && self.action_count == other.action_count
    }
}

impl ParametricShield {
    /// Probability the pair is safe.
    pub fn score(&self, key: &ShieldKey) -> f64 {
        assert_eq!(
            key.state.len(),
            self.state_width,
            "parametric shield answers only for the key family it was trained on"
        );
        let x = key_features(key, self.state_width, self.action_count);
        sigmoid(dot(&self.weights, &x) + self.bias)
    }

    /// True means safe: score at or above the decision threshold.
    pub fn query(&self, key: &ShieldKey) -> bool {
        self.score(key) >= self.threshold
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn state_width(&self) -> usize {
        self.state_width
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn loss_per_epoch(&self) -> &[f64] {
        &self.loss_per_epoch
    }

    pub(crate) fn from_parts(
        weights: Vec<f64>,
        bias: f64,
        threshold: f64,
        state_width: usize,
        action_count: usize,
    ) -> Self {
        ParametricShield {
            weights,
            bias,
            threshold,
            state_width,
            action_count,
            loss_per_epoch: Vec::new(),
        }
    }
}

/// Fits the scorer by full-batch gradient descent on mean binary
/// cross-entropy: catastrophic keys are pushed toward score 0, safe keys
/// toward 1. A halving guard on the step size keeps the recorded loss
/// non-increasing even with an aggressive initial rate.
pub fn train_parametric(
    catastrophic: &[ShieldKey],
    safe: &[ShieldKey],
    epochs: usize,
    learning_rate: f64,
) -> Result<ParametricShield, ShieldError> {
    if catastrophic.is_empty() {
        return Err(ShieldError::EmptyPositives);
    }
    let mut width = None;
    for k in catastrophic.iter().chain(safe) {
        match width {
            None => width = Some(k.state.len()),
            Some(w) if w != k.state.len() => {
                return Err(ShieldError::MixedKeyWidth(w + 1, k.state.len() + 1))
            }
            _ => {}
        }
    }
    for c in catastrophic {
        if safe.contains(c) {
            return Err(ShieldError::OverlappingClasses);
        }
    }
    let state_width = width.expect("at least one key present");
    let action_count = catastrophic
        .iter()
        .chain(safe)
        .map(|k| k.action.index() + 1)
        .max()
        .expect("nonempty");

    let data: Vec<(Vec<f64>, f64)> = catastrophic
        .iter()
        .map(|k| (key_features(k, state_width, action_count), 0.0))
        .chain(safe.iter().map(|k| (key_features(k, state_width, action_count), 1.0)))
        .collect();

    let dim = state_width * 8 + action_count;
    let mut weights = vec![0.0; dim];
    let mut bias = 0.0;
    let mut lr = learning_rate;
    let mut loss_per_epoch = Vec::with_capacity(epochs);
    let mut loss = bce_loss(&weights, bias, &data);

    for _ in 0..epochs {
        let (grad_w, grad_b) = bce_grad(&weights, bias, &data);
        loop {
            let cand_w: Vec<f64> = weights
                .iter()
                .zip(&grad_w)
                .map(|(w, g)| w - lr * g)
                .collect();
            let cand_b = bias - lr * grad_b;
            let cand_loss = bce_loss(&cand_w, cand_b, &data);
            if cand_loss <= loss + 1e-9 || lr < 1e-12 {
                weights = cand_w;
                bias = cand_b;
                loss = cand_loss.min(loss);
                break;
            }
            lr *= 0.5;
        }
        loss_per_epoch.push(loss);
    }

    Ok(ParametricShield {
        weights,
        bias,
        threshold: 0.5,
        state_width,
        action_count,
        loss_per_epoch,
    })
}

/// Mean binary cross-entropy; label 1.0 means safe.
pub fn bce_loss(weights: &[f64], bias: f64, data: &[(Vec<f64>, f64)]) -> f64 {
    let n = data.len() as f64;
    data.iter()
        .map(|(x, y)| {
            let z = dot(weights, x) + bias;
            // ln sigma(z) = -softplus(-z), ln(1 - sigma(z)) = -softplus(z)
            y * softplus(-z) + (1.0 - y) * softplus(z)
        })
        .sum::<f64>()
        / n
}

pub fn bce_grad(weights: &[f64], bias: f64, data: &[(Vec<f64>, f64)]) -> (Vec<f64>, f64) {
    let n = data.len() as f64;
    let mut gw = vec![0.0; weights.len()];
    let mut gb = 0.0;
    for (x, y) in data {
        let err = sigmoid(dot(weights, x) + bias) - y;
        for (g, xi) in gw.iter_mut().zip(x) {
            *g += err * xi / n;
        }
        gb += err / n;
    }
    (gw, gb)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}
