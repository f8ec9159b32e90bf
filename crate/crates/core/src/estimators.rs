//! Baseline estimators: the GRPO group-average value, Monte-Carlo
//! continuation values (MCS@n), and GAE advantages over supplied values.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::trace_model::{Group, Method, ValueAssignment};

/// GAE smoothing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaeParams {
    /// Exponential smoothing factor, in `[0, 1]`.
    pub lambda: f64,
    /// Discount factor, in `[0, 1]`.
    pub gamma: f64,
}

impl GaeParams {
    /// Validates that both parameters lie in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) || !(0.0..=1.0).contains(&self.gamma) {
            return Err(validation!(
                "gae params lambda={} gamma={} must lie in [0, 1]",
                self.lambda,
                self.gamma
            ));
        }
        Ok(())
    }
}

/// Group-average baseline: every token of every rollout is valued at the mean
/// terminal reward of the group; advantage = reward − mean.
pub fn grpo_values(group: &Group) -> Result<Vec<ValueAssignment>> {
    if group.rollouts.is_empty() {
        return Err(validation!("group {}: empty group", group.prompt_id));
    }
    let mean = group.mean_reward();
    Ok(group
        .rollouts
        .iter()
        .map(|rollout| ValueAssignment {
            rollout_id: rollout.rollout_id,
            method: Method::Grpo,
            values: vec![mean; rollout.eta()],
            advantages: vec![rollout.reward - mean; rollout.eta()],
        })
        .collect())
}

/// State key for Monte-Carlo continuation values: `(rollout_id, token_index)`
/// where the token index counts generated tokens from zero.
pub type StateKey = (u64, usize);

/// Monte-Carlo continuation values: each listed state is valued at the
/// arithmetic mean of its continuations' terminal rewards.
///
/// Every state must name a rollout of `group`, address a generated token, and
/// carry at least one continuation reward.
pub fn mcs_values(
    group: &Group,
    continuations: &BTreeMap<StateKey, Vec<f64>>,
) -> Result<BTreeMap<StateKey, f64>> {
    let etas: BTreeMap<u64, usize> = group
        .rollouts
        .iter()
        .map(|r| (r.rollout_id, r.eta()))
        .collect();
    let mut values = BTreeMap::new();
    for (&(rollout_id, token_index), rewards) in continuations {
        let eta = *etas.get(&rollout_id).ok_or_else(|| {
            validation!("state ({rollout_id}, {token_index}): rollout not in group")
        })?;
        if token_index >= eta {
            return Err(validation!(
                "state ({rollout_id}, {token_index}): token index outside generated range {eta}"
            ));
        }
        if rewards.is_empty() {
            return Err(validation!(
                "state ({rollout_id}, {token_index}): no continuation rewards"
            ));
        }
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        values.insert((rollout_id, token_index), mean);
    }
    Ok(values)
}

/// GAE advantages over caller-supplied per-token values.
///
/// The TD residual is `delta_t = r_t + V(s_{t+1}) - V(s_t)` with the terminal
/// bootstrap `V(s_{T+1}) = 0`, and the advantage is the geometrically
/// weighted residual sum `A_t = sum_i (lambda*gamma)^i delta_{t+i}`. When
/// `lambda*gamma == 1` the sum telescopes to
/// `A_t = (suffix reward sum from t) - V(s_t)`, which is used directly so the
/// terminal-only-reward case yields `A_t = r - V(s_t)` without rounding.
pub fn gae_advantages(values: &[f64], rewards: &[f64], params: &GaeParams) -> Result<Vec<f64>> {
    params.validate()?;
    if values.len() != rewards.len() {
        return Err(validation!(
            "gae length mismatch: {} values vs {} rewards",
            values.len(),
            rewards.len()
        ));
    }
    let t_len = values.len();
    let mut advantages = vec![0.0; t_len];
    let decay = params.lambda * params.gamma;
    if decay == 1.0 {
        let mut suffix_reward = 0.0;
        for t in (0..t_len).rev() {
            suffix_reward += rewards[t];
            advantages[t] = suffix_reward - values[t];
        }
    } else {
        let mut acc = 0.0;
        for t in (0..t_len).rev() {
            let next_value = if t + 1 < t_len { values[t + 1] } else { 0.0 };
            let delta = rewards[t] + next_value - values[t];
            acc = delta + decay * acc;
            advantages[t] = acc;
        }
    }
    Ok(advantages)
}

/// Rescales each rollout's advantages by the group reward standard deviation
/// (GRPO-style normalization), leaving values untouched.
///
/// Uses the sample standard deviation (`N-1` denominator) with a small floor
/// so all-equal-reward groups map to zero advantages rather than NaN.
pub fn std_normalize_advantages(group: &Group, assignments: &mut [ValueAssignment]) {
    const STD_FLOOR: f64 = 1e-8;
    let n = group.rollouts.len();
    if n < 2 {
        return;
    }
    let mean = group.mean_reward();
    let var: f64 = group
        .rollouts
        .iter()
        .map(|r| (r.reward - mean).powi(2))
        .sum::<f64>()
        / (n - 1) as f64;
    let std = var.sqrt().max(STD_FLOOR);
    for assignment in assignments {
        for adv in &mut assignment.advantages {
            *adv /= std;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace_model::{F32Matrix, Rollout};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Naive O(T^2) double-loop GAE oracle, straight from the defining sum.
    fn naive_gae(values: &[f64], rewards: &[f64], params: &GaeParams) -> Vec<f64> {
        let t_len = values.len();
        let decay = params.lambda * params.gamma;
        (0..t_len)
            .map(|t| {
                let mut acc = 0.0;
                for i in 0..t_len - t {
                    let next = if t + i + 1 < t_len {
                        values[t + i + 1]
                    } else {
                        0.0
                    };
                    let delta = rewards[t + i] + next - values[t + i];
                    acc += decay.powi(i as i32) * delta;
                }
                acc
            })
            .collect()
    }

    pub(crate) fn toy_group(rewards: &[f64]) -> Group {
        let rollouts = rewards
            .iter()
            .enumerate()
            .map(|(i, &reward)| Rollout {
                rollout_id: i as u64,
                prompt_id: 1,
                tokens: vec![" p".into(), " a".into(), " b".into(), " c".into()],
                prompt_len: 1,
                reward,
                hidden: F32Matrix::from_vec(vec![0.0; 6], 3, 2).unwrap(),
                terminal: true,
            })
            .collect();
        Group {
            prompt_id: 1,
            rollouts,
        }
    }

    #[test]
    fn test_grpo_two_point_mean() {
        let group = toy_group(&[1.0, 0.0]);
        let out = grpo_values(&group).unwrap();
        for assignment in &out {
            assert!(assignment.values.iter().all(|&v| v == 0.5));
        }
        assert!(out[0].advantages.iter().all(|&a| a == 0.5));
        assert!(out[1].advantages.iter().all(|&a| a == -0.5));
    }

    #[test]
    fn test_grpo_equal_rewards_zero_advantage() {
        // 0.75 averages exactly in binary, so the zero here is exact; a
        // non-dyadic reward like 0.7 would leave 1-ulp residue in the mean.
        let group = toy_group(&[0.75, 0.75, 0.75]);
        let out = grpo_values(&group).unwrap();
        for assignment in out {
            assert!(assignment.advantages.iter().all(|&a| a == 0.0));
        }
        let group = toy_group(&[0.7, 0.7, 0.7]);
        let out = grpo_values(&group).unwrap();
        for assignment in out {
            assert!(assignment.advantages.iter().all(|&a| a.abs() < 1e-15));
        }
    }

    #[test]
    fn test_grpo_five_rollout_mean() {
        let group = toy_group(&[1.0, 1.0, 0.0, 0.0, 0.0]);
        let out = grpo_values(&group).unwrap();
        for assignment in out {
            assert!(assignment.values.iter().all(|&v| (v - 0.4).abs() < 1e-15));
        }
    }

    #[test]
    fn test_grpo_permutation_invariant() {
        let group = toy_group(&[0.9, 0.1, 0.4]);
        let mut permuted = group.clone();
        permuted.rollouts.rotate_left(1);
        let a = grpo_values(&group).unwrap();
        let b = grpo_values(&permuted).unwrap();
        let find = |out: &[ValueAssignment], id: u64| {
            out.iter().find(|v| v.rollout_id == id).unwrap().clone()
        };
        for id in 0..3 {
            assert_eq!(find(&a, id).values, find(&b, id).values);
            assert_eq!(find(&a, id).advantages, find(&b, id).advantages);
        }
    }

    #[test]
    fn test_mcs_single_and_pair() {
        let group = toy_group(&[1.0, 0.0]);
        let mut continuations = BTreeMap::new();
        continuations.insert((0, 0), vec![1.0]);
        continuations.insert((1, 2), vec![1.0, 0.0]);
        let values = mcs_values(&group, &continuations).unwrap();
        assert_eq!(values[&(0, 0)], 1.0);
        assert_eq!(values[&(1, 2)], 0.5);
    }

    #[test]
    fn test_mcs_duplicate_list_unchanged() {
        let group = toy_group(&[1.0, 0.0]);
        let mut once = BTreeMap::new();
        once.insert((0, 1), vec![1.0, 0.0, 1.0]);
        let mut twice = BTreeMap::new();
        twice.insert((0, 1), vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        let a = mcs_values(&group, &once).unwrap();
        let b = mcs_values(&group, &twice).unwrap();
        assert_eq!(a[&(0, 1)], b[&(0, 1)]);
    }

    #[test]
    fn test_mcs_empty_continuations_rejected() {
        let group = toy_group(&[1.0]);
        let mut continuations = BTreeMap::new();
        continuations.insert((0, 0), vec![]);
        assert!(mcs_values(&group, &continuations).is_err());
    }

    #[test]
    fn test_gae_zero_values_terminal_reward() {
        let values = vec![0.0; 5];
        let mut rewards = vec![0.0; 5];
        rewards[4] = 1.0;
        let params = GaeParams {
            lambda: 1.0,
            gamma: 1.0,
        };
        let adv = gae_advantages(&values, &rewards, &params).unwrap();
        assert!(adv.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn test_gae_constant_values_exact() {
        let values = vec![0.3; 6];
        let mut rewards = vec![0.0; 6];
        rewards[5] = 0.8;
        let params = GaeParams {
            lambda: 1.0,
            gamma: 1.0,
        };
        let adv = gae_advantages(&values, &rewards, &params).unwrap();
        assert!(adv.iter().all(|&a| a == 0.8 - 0.3));
    }

    #[test]
    fn test_gae_random_values_telescoping_exact() {
        // lambda = gamma = 1 with terminal-only reward must give r - V(s_t)
        // bit-exactly, not just approximately.
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        for _ in 0..200 {
            let t_len = rng.gen_range(1..12);
            let values: Vec<f64> = (0..t_len).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut rewards = vec![0.0; t_len];
            let r = rng.gen_range(0.0..1.0);
            rewards[t_len - 1] = r;
            let params = GaeParams {
                lambda: 1.0,
                gamma: 1.0,
            };
            let adv = gae_advantages(&values, &rewards, &params).unwrap();
            for t in 0..t_len {
                assert_eq!(adv[t], r - values[t]);
            }
        }
    }

    #[test]
    fn test_gae_matches_naive_oracle() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        for _ in 0..500 {
            let t_len = rng.gen_range(1..16);
            let values: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let rewards: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let params = GaeParams {
                lambda: rng.gen_range(0.0..1.0),
                gamma: rng.gen_range(0.0..1.0),
            };
            let fast = gae_advantages(&values, &rewards, &params).unwrap();
            let slow = naive_gae(&values, &rewards, &params);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn test_gae_seven_step_fixed_params() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(21);
        let values: Vec<f64> = (0..7).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut rewards = vec![0.0; 7];
        rewards[6] = 1.0;
        let params = GaeParams {
            lambda: 0.95,
            gamma: 1.0,
        };
        let fast = gae_advantages(&values, &rewards, &params).unwrap();
        let slow = naive_gae(&values, &rewards, &params);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn test_gae_length_mismatch_rejected() {
        let params = GaeParams {
            lambda: 1.0,
            gamma: 1.0,
        };
        assert!(gae_advantages(&[0.0], &[0.0, 1.0], &params).is_err());
    }

    #[test]
    fn test_std_normalization_scales_by_sample_std() {
        let group = toy_group(&[1.0, 0.0]);
        let mut out = grpo_values(&group).unwrap();
        std_normalize_advantages(&group, &mut out);
        // Sample std of {1, 0} is sqrt(0.5); advantages were +-0.5.
        let expected = 0.5 / 0.5f64.sqrt();
        assert!((out[0].advantages[0] - expected).abs() < 1e-12);
        assert!((out[1].advantages[0] + expected).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn prop_gae_telescoping_invariant(
            seed in 0u64..300,
            t_len in 1usize..24,
        ) {
            // With lambda = gamma = 1 and terminal-only reward, A_t + V(s_t)
            // is the same constant r at every position.
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..t_len).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut rewards = vec![0.0; t_len];
            let r = rng.gen_range(0.0..1.0);
            rewards[t_len - 1] = r;
            let params = GaeParams { lambda: 1.0, gamma: 1.0 };
            let adv = gae_advantages(&values, &rewards, &params).unwrap();
            for t in 0..t_len {
                prop_assert!((adv[t] + values[t] - r).abs() < 1e-12);
            }
        }

        #[test]
        fn prop_grpo_values_in_unit_interval(seed in 0u64..200) {
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..7);
            let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let group = toy_group(&rewards);
            let out = grpo_values(&group).unwrap();
            for assignment in out {
                prop_assert!(assignment.values.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
