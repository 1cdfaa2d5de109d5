//! Clipped-surrogate policy update with exact analytic gradients.
//!
//! The scored distribution is always the shielded one: softmax restricted to
//! the mask each sample was collected under, falling back to the default
//! policy when everything was blocked. Gradients flow through the restricted
//! softmax only; fallback samples contribute constants.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::buffer::{normalize_advantages, RolloutBuffer, StepSample};
use super::net::{Adam, PolicyValueNet};
use super::AgentError;

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Probability vector of the shielded policy: softmax over unmasked logits,
/// or the default policy when the mask blocks everything. Numerically equal
/// (up to rounding) to `apply_shield(softmax(logits), mask, default)`.
pub fn masked_probs(logits: &[f64], mask: &[bool], default_policy: &[f64]) -> Vec<f64> {
    assert_eq!(logits.len(), mask.len());
    assert_eq!(logits.len(), default_policy.len());
    if !mask.iter().any(|&m| m) {
        return default_policy.to_vec();
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&z, _)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for (k, (&z, &m)) in logits.iter().zip(mask).enumerate() {
        if m {
            let e = (z - max).exp();
            out[k] = e;
            sum += e;
        }
    }
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Log-probability of `action` under the shielded policy, evaluated in the
/// log domain so it stays consistent across sampling and update time.
pub fn masked_log_prob(
    logits: &[f64],
    mask: &[bool],
    default_policy: &[f64],
    action: usize,
) -> f64 {
    if !mask.iter().any(|&m| m) {
        return default_policy[action].ln();
    }
    assert!(mask[action], "scored action was blocked by its own mask");
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&z, _)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&z, _)| (z - max).exp())
        .sum::<f64>()
        .ln();
    (logits[action] - max) - log_sum
}

/// Shannon entropy of a probability vector, zero-mass entries contributing 0.
pub fn dist_entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BatchStats {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Mean minibatch loss: -min(ratio*A, clip(ratio)*A) + vc*0.5*(V-R)^2 - ec*H.
/// Pure function of the parameters; the finite-difference oracle probes it.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    net: &PolicyValueNet,
    steps: &[StepSample],
    adv: &[f64],
    ret: &[f64],
    idx: &[usize],
    clip: f64,
    value_coef: f64,
    entropy_coef: f64,
    default_policy: &[f64],
) -> f64 {
    let mut total = 0.0;
    for &i in idx {
        let s = &steps[i];
        let fwd = net.forward(&s.features);
        let probs = masked_probs(&fwd.logits, &s.mask, default_policy);
        let logp = masked_log_prob(&fwd.logits, &s.mask, default_policy, s.action as usize);
        let ratio = (logp - s.log_prob).exp();
        let surr1 = ratio * adv[i];
        let surr2 = ratio.clamp(1.0 - clip, 1.0 + clip) * adv[i];
        let vdiff = fwd.value - ret[i];
        total += -surr1.min(surr2) + value_coef * 0.5 * vdiff * vdiff
            - entropy_coef * dist_entropy(&probs);
    }
    total / idx.len() as f64
}

/// Same loss, plus its exact gradient accumulated into `grad` (which must be
/// zeroed by the caller) and per-minibatch diagnostics.
#[allow(clippy::too_many_arguments)]
pub fn batch_grad(
    net: &PolicyValueNet,
    steps: &[StepSample],
    adv: &[f64],
    ret: &[f64],
    idx: &[usize],
    clip: f64,
    value_coef: f64,
    entropy_coef: f64,
    default_policy: &[f64],
    grad: &mut [f64],
) -> BatchStats {
    let scale = 1.0 / idx.len() as f64;
    let mut st = BatchStats::default();
    let action_count = net.action_count();
    let mut dlogits = vec![0.0; action_count];
    for &i in idx {
        let s = &steps[i];
        let a = s.action as usize;
        let fwd = net.forward(&s.features);
        let blocked = !s.mask.iter().any(|&m| m);
        let probs = masked_probs(&fwd.logits, &s.mask, default_policy);
        let logp = masked_log_prob(&fwd.logits, &s.mask, default_policy, a);
        let entropy = dist_entropy(&probs);
        let ratio = (logp - s.log_prob).exp();
        let surr1 = ratio * adv[i];
        let surr2 = ratio.clamp(1.0 - clip, 1.0 + clip) * adv[i];
        let pg = -surr1.min(surr2);
        let vdiff = fwd.value - ret[i];

        st.policy_loss += pg * scale;
        st.value_loss += 0.5 * vdiff * vdiff * scale;
        st.entropy += entropy * scale;
        st.approx_kl += (s.log_prob - logp) * scale;
        if surr2 < surr1 {
            st.clip_fraction += scale;
        }

        dlogits.iter_mut().for_each(|d| *d = 0.0);
        if !blocked {
            // min picks the unclipped branch iff surr1 <= surr2; only then
            // does the surrogate depend on theta.
            let dlogp = if surr1 <= surr2 { -ratio * adv[i] } else { 0.0 };
            for k in 0..action_count {
                if !s.mask[k] {
                    continue;
                }
                let p = probs[k];
                let indicator = if k == a { 1.0 } else { 0.0 };
                let mut d = dlogp * (indicator - p);
                if p > 0.0 {
                    // d(-H)/dz_k = p_k (ln p_k + H)
                    d += entropy_coef * p * (p.ln() + entropy);
                }
                dlogits[k] = d * scale;
            }
        }
        let dvalue = value_coef * vdiff * scale;
        net.backward(&s.features, &fwd, &dlogits, dvalue, grad);
    }
    st.loss = st.policy_loss + value_coef * st.value_loss - entropy_coef * st.entropy;
    st
}

#[derive(Debug, Clone, Copy, Default)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub minibatches: usize,
    pub samples: usize,
}

/// Runs the epoch/minibatch schedule over a finished buffer. Advantages are
/// normalized once over the whole buffer (std floored at 1e-8). A non-finite
/// minibatch loss aborts before that minibatch's step is applied; steps from
/// earlier minibatches remain.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    net: &mut PolicyValueNet,
    opt: &mut Adam,
    buffer: &RolloutBuffer,
    clip: f64,
    epochs: usize,
    minibatch: usize,
    value_coef: f64,
    entropy_coef: f64,
    default_policy: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats, AgentError> {
    assert!(buffer.is_finished(), "finish the buffer before updating");
    if buffer.is_empty() {
        return Err(AgentError::EmptyBuffer);
    }
    let mut adv = buffer.advantages().to_vec();
    normalize_advantages(&mut adv);

    let mut order: Vec<usize> = (0..buffer.len()).collect();
    let mut grad = vec![0.0; net.param_count()];
    let mut stats = UpdateStats {
        samples: buffer.len(),
        ..Default::default()
    };
    for epoch in 0..epochs {
        order.shuffle(rng);
        for (mb, chunk) in order.chunks(minibatch.max(1)).enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let st = batch_grad(
                net,
                buffer.steps(),
                &adv,
                buffer.returns(),
                chunk,
                clip,
                value_coef,
                entropy_coef,
                default_policy,
                &mut grad,
            );
            if !st.loss.is_finite() {
                return Err(AgentError::NonFiniteLoss {
                    epoch,
                    minibatch: mb,
                    loss: st.loss,
                });
            }
            opt.step(net.params_mut(), &grad);
            stats.policy_loss += st.policy_loss;
            stats.value_loss += st.value_loss;
            stats.entropy += st.entropy;
            stats.clip_fraction += st.clip_fraction;
            stats.approx_kl += st.approx_kl;
            stats.minibatches += 1;
        }
    }
    let n = stats.minibatches as f64;
    stats.policy_loss /= n;
    stats.value_loss /= n;
    stats.entropy /= n;
    stats.clip_fraction /= n;
    stats.approx_kl /= n;
    Ok(stats)
}
