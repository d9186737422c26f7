//! Score-function gradient estimators and their enumeration oracles.
//!
//! For a softmax row `p = softmax(u)`, the score of outcome `j` is
//! `e_j - p`. A trace's score is the concatenation of its depth-row and
//! redundancy-row scores, placed at the bucket's offsets in the flat layout.

use serde::{Deserialize, Serialize};

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::norm::{normalize_lengths, NormStatsSource};
use crate::types::{Baseline, PolicyParams, PromptInstance, PromptSet, RolloutGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Verifier indicator.
    Accuracy,
    /// Logistic per-prompt normalized length.
    NormalizedLength,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveKind {
    pub kind: Objective,
    pub baseline: Baseline,
}

impl ObjectiveKind {
    pub fn accuracy(baseline: Baseline) -> Self {
        Self {
            kind: Objective::Accuracy,
            baseline,
        }
    }

    pub fn normalized_length(baseline: Baseline) -> Self {
        Self {
            kind: Objective::NormalizedLength,
            baseline,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Ascent,
    Descent,
}

/// Per-sample objective values of one group.
pub fn group_values(
    group: &RolloutGroup,
    kind: Objective,
    norm: &NormStatsSource<'_>,
) -> Result<Vec<f64>> {
    match kind {
        Objective::Accuracy => Ok(group
            .samples
            .iter()
            .map(|s| if s.correct { 1.0 } else { 0.0 })
            .collect()),
        Objective::NormalizedLength => normalize_lengths(group, norm),
    }
}

/// Advantages of one group. The group-mean baseline is rescaled by
/// `k / (k - 1)`, which equals subtracting the mean of the other samples and
/// keeps the estimator unbiased.
pub fn advantages(values: &[f64], baseline: Baseline) -> Vec<f64> {
    match baseline {
        Baseline::None => values.to_vec(),
        Baseline::GroupMean => {
            let k = values.len() as f64;
            if values.len() < 2 {
                return vec![0.0; values.len()];
            }
            let mean = values.iter().sum::<f64>() / k;
            let scale = k / (k - 1.0);
            values.iter().map(|v| (v - mean) * scale).collect()
        }
    }
}

fn add_row_score(grad: &mut [f64], offset: usize, probs: &[f64], index: usize, weight: f64) {
    for (j, p) in probs.iter().enumerate() {
        let indicator = if j == index { 1.0 } else { 0.0 };
        grad[offset + j] += weight * (indicator - p);
    }
}

/// `(1/N) sum_i A_i * grad log pi(y_i)` over every sample in `batch`, with
/// `A_i` the (baselined) objective value. Groups are reduced in input order,
/// so the result is bitwise deterministic.
pub fn estimate_gradient(
    params: &PolicyParams,
    batch: &[RolloutGroup],
    objective: ObjectiveKind,
    norm: &NormStatsSource<'_>,
) -> Result<Vec<f64>> {
    let n: usize = batch.iter().map(|g| g.samples.len()).sum();
    if n == 0 {
        return Err(Error::Empty("gradient batch has no samples".into()));
    }
    params.validate()?;
    let depth_probs: Vec<Vec<f64>> = (0..params.buckets()).map(|b| params.depth_probs(b)).collect();
    let red_probs: Vec<Vec<f64>> = (0..params.buckets())
        .map(|b| params.redundancy_probs(b))
        .collect();
    let mut grad = vec![0.0; params.len()];
    for group in batch {
        let values = group_values(group, objective.kind, norm)?;
        let adv = advantages(&values, objective.baseline);
        for (sample, a) in group.samples.iter().zip(adv) {
            let (b, s, r) = (sample.bucket, sample.latent_depth, sample.latent_redundancy);
            if b >= params.buckets() || s < 1 || s > params.depth_dim() || r >= params.redundancy_dim() {
                return Err(Error::Config(format!(
                    "rollout latents ({b}, {s}, {r}) do not fit the policy"
                )));
            }
            if a == 0.0 {
                continue;
            }
            add_row_score(&mut grad, params.depth_offset(b), &depth_probs[b], s - 1, a);
            add_row_score(&mut grad, params.redundancy_offset(b), &red_probs[b], r, a);
        }
    }
    let inv = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(grad)
}

/// Objective value at every latent, indexed `[s - 1][r]`.
fn latent_values(
    prompt: &PromptInstance,
    kind: Objective,
    env: &EnvConfig,
    norm: &NormStatsSource<'_>,
) -> Result<Vec<Vec<f64>>> {
    match kind {
        Objective::Accuracy => Ok((1..=env.s_max)
            .map(|s| {
                let v = if s >= prompt.required_depth { 1.0 } else { 0.0 };
                vec![v; env.r_max + 1]
            })
            .collect()),
        Objective::NormalizedLength => {
            if norm.is_live() {
                return Err(Error::Unsupported(
                    "exact objectives need frozen normalization statistics".into(),
                ));
            }
            let stats = norm.frozen_stats(&prompt.id)?;
            Ok((1..=env.s_max)
                .map(|s| {
                    (0..=env.r_max)
                        .map(|r| norm.apply(env.token_count(s, r) as f64, stats))
                        .collect()
                })
                .collect())
        }
    }
}

/// Exact expectation of the objective for one prompt, by enumerating the
/// latent grid.
pub fn exact_objective(
    params: &PolicyParams,
    prompt: &PromptInstance,
    objective: ObjectiveKind,
    env: &EnvConfig,
    norm: &NormStatsSource<'_>,
) -> Result<f64> {
    env.check_params(params)?;
    let values = latent_values(prompt, objective.kind, env, norm)?;
    let b = env.bucket_for(prompt);
    let p = params.depth_probs(b);
    let q = params.redundancy_probs(b);
    let mut total = 0.0;
    for (s_idx, row) in values.iter().enumerate() {
        for (r, v) in row.iter().enumerate() {
            total += p[s_idx] * q[r] * v;
        }
    }
    Ok(total)
}

/// Exact gradient of [`exact_objective`] through the softmax rows.
pub fn exact_gradient(
    params: &PolicyParams,
    prompt: &PromptInstance,
    objective: ObjectiveKind,
    env: &EnvConfig,
    norm: &NormStatsSource<'_>,
) -> Result<Vec<f64>> {
    env.check_params(params)?;
    let values = latent_values(prompt, objective.kind, env, norm)?;
    let b = env.bucket_for(prompt);
    let p = params.depth_probs(b);
    let q = params.redundancy_probs(b);
    let mut grad = vec![0.0; params.len()];
    for (s_idx, row) in values.iter().enumerate() {
        for (r, v) in row.iter().enumerate() {
            let w = p[s_idx] * q[r] * v;
            if w == 0.0 {
                continue;
            }
            add_row_score(&mut grad, params.depth_offset(b), &p, s_idx, w);
            add_row_score(&mut grad, params.redundancy_offset(b), &q, r, w);
        }
    }
    Ok(grad)
}

/// Weighted exact objective over the whole prompt distribution.
pub fn exact_objective_over(
    params: &PolicyParams,
    prompts: &PromptSet,
    objective: ObjectiveKind,
    env: &EnvConfig,
    norm: &NormStatsSource<'_>,
) -> Result<f64> {
    prompts.prompts().iter().try_fold(0.0, |acc, p| {
        Ok(acc + p.weight * exact_objective(params, p, objective, env, norm)?)
    })
}

/// Exact expected accuracy over the prompt distribution.
pub fn exact_accuracy(params: &PolicyParams, prompts: &PromptSet, env: &EnvConfig) -> Result<f64> {
    exact_objective_over(
        params,
        prompts,
        ObjectiveKind::accuracy(Baseline::None),
        env,
        &NormStatsSource::live(),
    )
}

/// Exact expected raw token count over the prompt distribution.
pub fn exact_expected_length(params: &PolicyParams, prompts: &PromptSet, env: &EnvConfig) -> Result<f64> {
    env.check_params(params)?;
    let mut total = 0.0;
    for prompt in prompts.prompts() {
        let b = env.bucket_for(prompt);
        let p = params.depth_probs(b);
        let q = params.redundancy_probs(b);
        let mut e = 0.0;
        for (s_idx, ps) in p.iter().enumerate() {
            for (r, qr) in q.iter().enumerate() {
                e += ps * qr * env.token_count(s_idx + 1, r) as f64;
            }
        }
        total += prompt.weight * e;
    }
    Ok(total)
}

/// `params + lr * gradient` (ascent) or `params - lr * gradient` (descent).
pub fn sgd_step(
    params: &PolicyParams,
    gradient: &[f64],
    lr: f64,
    direction: Direction,
) -> Result<PolicyParams> {
    if gradient.len() != params.len() {
        return Err(Error::Config(format!(
            "gradient has {} entries, parameters have {}",
            gradient.len(),
            params.len()
        )));
    }
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate {lr} must be positive")));
    }
    if let Some(i) = gradient.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("gradient entry {i} is {}", gradient[i])));
    }
    let sign = match direction {
        Direction::Ascent => 1.0,
        Direction::Descent => -1.0,
    };
    let flat: Vec<f64> = params
        .flat()
        .iter()
        .zip(gradient)
        .map(|(p, g)| p + sign * lr * g)
        .collect();
    params.with_flat(&flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::make_trace;
    use crate::norm::freeze_stats;
    use crate::types::{LenStats, ReferenceSnapshot};
    use std::collections::BTreeMap;

    fn prompt(ops: &[i64]) -> PromptInstance {
        PromptInstance {
            id: "p".into(),
            required_depth: ops.len(),
            operands: ops.to_vec(),
            answer: ops.iter().sum(),
            weight: 1.0,
        }
    }

    fn snapshot_with(params: &PolicyParams, id: &str, mean: f64, std: f64) -> ReferenceSnapshot {
        ReferenceSnapshot {
            params: params.clone(),
            per_prompt_accuracy: BTreeMap::new(),
            per_prompt_len_stats: BTreeMap::from([(id.to_string(), LenStats { mean, std })]),
            rollouts_used: 2,
        }
    }

    fn group_of(latents: &[(usize, usize)], p: &PromptInstance, env: &EnvConfig) -> RolloutGroup {
        let samples = latents
            .iter()
            .map(|&(s, r)| make_trace(s, r, 0, p, env).unwrap())
            .collect();
        RolloutGroup::new(p.id.clone(), samples).unwrap()
    }

    #[test]
    fn all_correct_group_mean_is_zero() {
        let env = EnvConfig::new(4, 2);
        let p = prompt(&[1, 2]);
        let params = PolicyParams::global(vec![0.1, 0.4, -0.3, 0.0], vec![0.2, 0.0, 1.0]);
        let g = group_of(&[(2, 0), (3, 1), (4, 2), (2, 2)], &p, &env);
        let grad = estimate_gradient(
            &params,
            &[g],
            ObjectiveKind::accuracy(Baseline::GroupMean),
            &NormStatsSource::live(),
        )
        .unwrap();
        assert!(grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn equal_lengths_give_zero_length_gradient() {
        let env = EnvConfig::new(4, 2);
        let p = prompt(&[1, 2]);
        let params = PolicyParams::uniform(4, 2, 1);
        let g = group_of(&[(3, 1), (3, 1), (3, 1)], &p, &env);
        let grad = estimate_gradient(
            &params,
            &[g],
            ObjectiveKind::normalized_length(Baseline::GroupMean),
            &NormStatsSource::live(),
        )
        .unwrap();
        assert!(grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_batch_is_an_error() {
        let params = PolicyParams::uniform(4, 2, 1);
        assert!(matches!(
            estimate_gradient(
                &params,
                &[],
                ObjectiveKind::accuracy(Baseline::None),
                &NormStatsSource::live()
            ),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn exact_objective_examples() {
        let env = EnvConfig::new(4, 2);
        let p = prompt(&[1, 2, 3]);
        let acc = ObjectiveKind::accuracy(Baseline::None);
        let uniform = PolicyParams::uniform(4, 2, 1);
        let v = exact_objective(&uniform, &p, acc, &env, &NormStatsSource::live()).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        let point = PolicyParams::global(vec![-1e9, -1e9, 1e9, -1e9], vec![0.0; 3]);
        let v = exact_objective(&point, &p, acc, &env, &NormStatsSource::live()).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn exact_normalized_length_by_hand() {
        // token_count = 10 s + 5 r + 3 needs tokens_per_step 10 and
        // tokens_per_redundancy 5; closing tokens are 2, so shift the mean by 1.
        let env = EnvConfig {
            tokens_per_step: 10,
            tokens_per_redundancy: 5,
            ..EnvConfig::new(2, 1)
        };
        let p = prompt(&[4]);
        let params = PolicyParams::uniform(2, 1, 1);
        let snap = snapshot_with(&params, "p", 20.5 - 1.0, 5.5902);
        let v = exact_objective(
            &params,
            &p,
            ObjectiveKind::normalized_length(Baseline::None),
            &env,
            &NormStatsSource::frozen(&snap),
        )
        .unwrap();
        let sigma = |z: f64| 1.0 / (1.0 + (-z).exp());
        let expected = [13.0, 18.0, 23.0, 28.0]
            .iter()
            .map(|l| sigma((l - 20.5) / 5.5902))
            .sum::<f64>()
            / 4.0;
        assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
    }

    #[test]
    fn live_source_is_unsupported_for_exact_length() {
        let env = EnvConfig::new(4, 2);
        let p = prompt(&[1]);
        let params = PolicyParams::uniform(4, 2, 1);
        assert!(matches!(
            exact_gradient(
                &params,
                &p,
                ObjectiveKind::normalized_length(Baseline::None),
                &env,
                &NormStatsSource::live()
            ),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let env = EnvConfig::new(4, 2);
        let p = prompt(&[5]);
        let params = PolicyParams::global(vec![0.3, -0.2, 1.1, 0.0], vec![0.5, -0.5, 0.0]);
        // depth 1 suffices, so accuracy is identically 1
        let g = exact_gradient(
            &params,
            &p,
            ObjectiveKind::accuracy(Baseline::None),
            &env,
            &NormStatsSource::live(),
        )
        .unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn exact_gradient_rows_sum_to_zero_and_skip_redundancy_for_accuracy() {
        let env = EnvConfig::new(5, 3);
        let p = prompt(&[2, 2, 2]);
        let params = PolicyParams::global(vec![0.3, -0.2, 1.1, 0.0, 0.7], vec![0.5, -0.5, 0.0, 0.2]);
        let g = exact_gradient(
            &params,
            &p,
            ObjectiveKind::accuracy(Baseline::None),
            &env,
            &NormStatsSource::live(),
        )
        .unwrap();
        assert!(g[..5].iter().sum::<f64>().abs() < 1e-10);
        assert!(g[5..].iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn frozen_snapshot_from_rollouts_feeds_exact_oracle() {
        let env = EnvConfig::new(3, 1);
        let p = prompt(&[1, 1]);
        let params = PolicyParams::uniform(3, 1, 1);
        let g = group_of(&[(1, 0), (3, 1)], &p, &env);
        let snap = freeze_stats(&params, &[g]).unwrap();
        let v = exact_objective(
            &params,
            &p,
            ObjectiveKind::normalized_length(Baseline::None),
            &env,
            &NormStatsSource::frozen(&snap),
        )
        .unwrap();
        assert!(v > 0.0 && v < 1.0);
    }

    #[test]
    fn sgd_step_arithmetic() {
        let params = PolicyParams::global(vec![1.0, 2.0], vec![0.0, 0.0]);
        let zero = vec![0.0; 4];
        assert_eq!(sgd_step(&params, &zero, 0.1, Direction::Descent).unwrap(), params);
        let g = vec![1.0, 0.0, 0.0, 0.0];
        let down = sgd_step(&params, &g, 0.1, Direction::Descent).unwrap();
        assert!((down.depth_logits[0][0] - 0.9).abs() < 1e-15);
        let g = vec![0.3, -0.7, 1.9, 0.01];
        let back = sgd_step(
            &sgd_step(&params, &g, 0.37, Direction::Ascent).unwrap(),
            &g,
            0.37,
            Direction::Descent,
        )
        .unwrap();
        for (a, b) in back.flat().iter().zip(params.flat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_step_refuses_non_finite() {
        let params = PolicyParams::global(vec![1.0, 2.0], vec![0.0, 0.0]);
        let g = vec![f64::NAN, 0.0, 0.0, 0.0];
        assert!(matches!(
            sgd_step(&params, &g, 0.1, Direction::Ascent),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn leave_one_out_equivalence() {
        let v = [1.0, 0.0, 0.0, 1.0, 1.0];
        let a = advantages(&v, Baseline::GroupMean);
        for i in 0..v.len() {
            let others: f64 = v.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, x)| x).sum();
            let loo = v[i] - others / (v.len() - 1) as f64;
            assert!((a[i] - loo).abs() < 1e-15);
        }
    }
}
