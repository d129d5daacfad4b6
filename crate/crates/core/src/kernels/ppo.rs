//! Synthetic PPO quantities: deterministic rewards, GAE, and the
//! policy-plus-value loss decomposition.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};

use super::{check_labels, log_softmax_row, shifted_label, KernelError};

pub const GAE_GAMMA: f64 = 1.0;
pub const GAE_LAMBDA: f64 = 0.95;

/// 1 where position `t` is attended and predicts a supervised next label.
pub fn valid_mask(labels: ArrayView2<i64>, mask: ArrayView2<f64>) -> Array2<f64> {
    Array2::from_shape_fn(labels.dim(), |(b, t)| {
        if mask[[b, t]] != 0.0 && shifted_label(&labels, b, t).is_some() {
            1.0
        } else {
            0.0
        }
    })
}

/// r[b,t] = valid · ((labels[b,t+1] mod 7) − 3) / 3.
pub fn ppo_synthetic_rewards(labels: ArrayView2<i64>, mask: ArrayView2<f64>) -> Array2<f64> {
    let valid = valid_mask(labels, mask);
    Array2::from_shape_fn(labels.dim(), |(b, t)| {
        if valid[[b, t]] == 0.0 {
            0.0
        } else {
            let l = labels[[b, t + 1]];
            ((l.rem_euclid(7) - 3) as f64) / 3.0
        }
    })
}

/// Log-probability of each shifted label; zero at invalid positions.
pub fn token_logprobs(
    logits: ArrayView3<f64>,
    labels: ArrayView2<i64>,
    mask: ArrayView2<f64>,
) -> Result<Array2<f64>, KernelError> {
    check_labels(&logits, &labels)?;
    let valid = valid_mask(labels, mask);
    let mut out = Array2::zeros(labels.dim());
    for ((b, t), v) in valid.indexed_iter() {
        if *v != 0.0 {
            let target = labels[[b, t + 1]] as usize;
            out[[b, t]] = log_softmax_row(logits.slice(s![b, t, ..]))[target];
        }
    }
    Ok(out)
}

/// Generalized advantage estimation with zero bootstrap past the last step.
/// Returns `(advantages, returns)` with `returns = advantages + values`.
pub fn gae(
    rewards: ArrayView2<f64>,
    values: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    gamma: f64,
    lam: f64,
) -> (Array2<f64>, Array2<f64>) {
    let (b, t) = rewards.dim();
    let mut adv = Array2::zeros((b, t));
    for bi in 0..b {
        let mut carry = 0.0;
        for ti in (0..t).rev() {
            let (next_v, next_m) = if ti + 1 < t { (values[[bi, ti + 1]], mask[[bi, ti + 1]]) } else { (0.0, 0.0) };
            let delta = rewards[[bi, ti]] + gamma * next_v * next_m - values[[bi, ti]];
            let a = delta + gamma * lam * next_m * carry;
            let a = if mask[[bi, ti]] == 0.0 { 0.0 } else { a };
            adv[[bi, ti]] = a;
            carry = a;
        }
    }
    let returns = &adv + &values;
    (adv, returns)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoLoss {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub token_logprobs: Array2<f64>,
    pub rewards: Array2<f64>,
    pub advantages: Array2<f64>,
    pub returns: Array2<f64>,
    pub valid: Array2<f64>,
}

/// policy_loss = −mean_valid(logp · A), value_loss = mean_valid((v − R)²).
pub fn ppo_method_loss(
    logits: ArrayView3<f64>,
    values: ArrayView2<f64>,
    labels: ArrayView2<i64>,
    mask: ArrayView2<f64>,
) -> Result<PpoLoss, KernelError> {
    if values.dim() != labels.dim() || mask.dim() != labels.dim() {
        return Err(KernelError::Shape(format!(
            "values {:?}, labels {:?}, mask {:?} after time-axis normalization",
            values.dim(),
            labels.dim(),
            mask.dim()
        )));
    }
    let lp = token_logprobs(logits, labels, mask)?;
    let valid = valid_mask(labels, mask);
    let n = valid.sum();
    if n == 0.0 {
        return Err(KernelError::NoSupervisedTokens);
    }
    let rewards = ppo_synthetic_rewards(labels, mask);
    let (advantages, returns) = gae(rewards.view(), values, valid.view(), GAE_GAMMA, GAE_LAMBDA);
    let policy_loss = -(&lp * &advantages * &valid).sum() / n;
    let value_loss = ((&values - &returns).mapv(|d| d * d) * &valid).sum() / n;
    Ok(PpoLoss {
        loss: policy_loss + value_loss,
        policy_loss,
        value_loss,
        token_logprobs: lp,
        rewards,
        advantages,
        returns,
        valid,
    })
}

/// Gradients of the PPO loss with advantages and returns held constant.
pub fn ppo_loss_grad(
    logits: ArrayView3<f64>,
    values: ArrayView2<f64>,
    labels: ArrayView2<i64>,
    out: &PpoLoss,
) -> (Array3<f64>, Array2<f64>) {
    let n = out.valid.sum();
    let mut dlogits = Array3::zeros(logits.dim());
    for ((b, t), v) in out.valid.indexed_iter() {
        if *v == 0.0 {
            continue;
        }
        let w = -out.advantages[[b, t]] / n;
        let target = labels[[b, t + 1]] as usize;
        let lp = log_softmax_row(logits.slice(s![b, t, ..]));
        let mut g = dlogits.slice_mut(s![b, t, ..]);
        for (gv, l) in g.iter_mut().zip(&lp) {
            *gv = -w * l.exp();
        }
        g[target] += w;
    }
    let dvalues = (&values - &out.returns).mapv(|d| 2.0 * d / n) * &out.valid;
    (dlogits, dvalues)
}
