//! The method-specific quantities the engine derives from raw runtime
//! outputs: causal cross-entropy, sequence log-probabilities, preference
//! losses, synthetic PPO rewards with GAE, and learning-rate schedules.
//!
//! Run with `cargo run --example method_kernels`.

use ndarray::{array, Array3};

use eqv::contract::{DpoLossType, DpoSettings};
use eqv::kernels::dpo::{dpo_loss, DpoInputs};
use eqv::kernels::ppo::{gae, ppo_method_loss, ppo_synthetic_rewards, GAE_GAMMA, GAE_LAMBDA};
use eqv::kernels::schedule::{lr_schedule, ScheduleKind, Warmup};
use eqv::kernels::{global_grad_norm, sequence_logprobs, shifted_causal_ce, IGNORE_INDEX};

fn main() {
    // B=1, T=3, V=2; position t predicts labels[t+1].
    let logits = Array3::from_shape_vec((1, 3, 2), vec![2.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
    let labels = array![[IGNORE_INDEX, 0, 1]];
    println!("shifted CE        {:.6}", shifted_causal_ce(logits.view(), labels.view()).unwrap());
    println!("sequence logps    {:?}", sequence_logprobs(logits.view(), labels.view()).unwrap());

    for loss_type in [DpoLossType::Sigmoid, DpoLossType::Orpo, DpoLossType::Simpo] {
        let inputs = DpoInputs {
            policy_logps: vec![-1.0, -2.0],
            ref_logps: Some(vec![-1.5, -1.5]),
            lengths: vec![2, 2],
            settings: DpoSettings { beta: 0.25, loss_type, label_smoothing: 0.1, simpo_margin: 0.5 },
        };
        println!("{loss_type:<17?} {:.6}", dpo_loss(&inputs).unwrap());
    }

    // Two-step GAE by hand: A = [1 + 0.95·1, 1] = [1.95, 1.0].
    let (adv, ret) = gae(array![[1.0, 1.0]].view(), array![[0.0, 0.0]].view(), array![[1.0, 1.0]].view(), GAE_GAMMA, GAE_LAMBDA);
    println!("GAE advantages    {adv}\nGAE returns       {ret}");

    let labels = array![[IGNORE_INDEX, 3, 10, 5]];
    let mask = array![[1.0, 1.0, 1.0, 1.0]];
    println!("synthetic rewards {}", ppo_synthetic_rewards(labels.view(), mask.view()));
    let logits = Array3::from_shape_fn((1, 4, 11), |(_, t, v)| ((t * 11 + v) as f64 * 0.37).sin());
    let values = array![[0.1, -0.2, 0.3, 0.0]];
    let ppo = ppo_method_loss(logits.view(), values.view(), labels.view(), mask.view()).unwrap();
    println!("PPO loss          {:.6} = policy {:.6} + value {:.6}", ppo.loss, ppo.policy_loss, ppo.value_loss);

    for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
        let lr = lr_schedule(1e-3, Warmup::Steps(2), kind, 8).unwrap();
        println!("{kind:<17?} {:?}", lr.map(|x| (x * 1e7).round() / 1e7));
    }
    println!("grad norm         {}", global_grad_norm([[3.0].as_slice(), [4.0].as_slice()]));
}
