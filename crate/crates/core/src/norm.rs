//! Per-prompt logistic length normalization.
//!
//! A raw token count is standardized with the prompt's length mean and
//! standard deviation and squashed through the logistic function. Live mode
//! takes the statistics from the rollout group itself; frozen mode looks
//! them up in a reference snapshot so the scale stays fixed across steps.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::types::{LenStats, PolicyParams, ReferenceSnapshot, RolloutGroup};

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    Live,
    Frozen(&'a ReferenceSnapshot),
}

#[derive(Debug, Clone, Copy)]
pub struct NormStatsSource<'a> {
    pub mode: NormMode<'a>,
    pub variance_floor: f64,
}

impl<'a> NormStatsSource<'a> {
    pub fn live() -> Self {
        Self {
            mode: NormMode::Live,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
        }
    }

    pub fn frozen(snapshot: &'a ReferenceSnapshot) -> Self {
        Self {
            mode: NormMode::Frozen(snapshot),
            variance_floor: DEFAULT_VARIANCE_FLOOR,
        }
    }

    pub fn is_live(&self) -> bool {
        matches!(self.mode, NormMode::Live)
    }

    /// Frozen statistics for a prompt. Live sources have none.
    pub fn frozen_stats(&self, prompt_id: &str) -> Result<LenStats> {
        match self.mode {
            NormMode::Live => Err(Error::Unsupported(
                "live statistics depend on the sampled group".into(),
            )),
            NormMode::Frozen(snap) => snap.len_stats(prompt_id),
        }
    }

    /// Statistics applied to `group`.
    pub fn stats_for(&self, group: &RolloutGroup) -> Result<LenStats> {
        match self.mode {
            NormMode::Live => Ok(group.stats()),
            NormMode::Frozen(snap) => snap.len_stats(&group.prompt_id),
        }
    }

    /// Normalized value of one raw length under fixed statistics.
    pub fn apply(&self, len: f64, stats: LenStats) -> f64 {
        let scale = stats.std.max(self.variance_floor.sqrt());
        logistic((len - stats.mean) / scale)
    }
}

/// Logistic function clamped to stay strictly inside (0, 1).
pub fn logistic(z: f64) -> f64 {
    let v = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    v.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Normalized length of every sample, in input order.
pub fn normalize_lengths(group: &RolloutGroup, source: &NormStatsSource<'_>) -> Result<Vec<f64>> {
    if group.samples.is_empty() {
        return Err(Error::Empty(format!("group for `{}`", group.prompt_id)));
    }
    let stats = source.stats_for(group)?;
    Ok(group
        .samples
        .iter()
        .map(|s| source.apply(s.token_count as f64, stats))
        .collect())
}

/// Freezes per-prompt accuracy and raw-length statistics from rollouts of
/// `params`. Several groups for one prompt are pooled.
pub fn freeze_stats(params: &PolicyParams, rollouts: &[RolloutGroup]) -> Result<ReferenceSnapshot> {
    if rollouts.is_empty() {
        return Err(Error::Empty("no rollouts to freeze".into()));
    }
    let mut pooled: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for g in rollouts {
        let entry = pooled.entry(g.prompt_id.as_str()).or_default();
        for s in &g.samples {
            entry.0.push(s.token_count as f64);
            entry.1 += usize::from(s.correct);
        }
    }
    let mut per_prompt_accuracy = BTreeMap::new();
    let mut per_prompt_len_stats = BTreeMap::new();
    let mut rollouts_used = usize::MAX;
    for (id, (lengths, hits)) in pooled {
        if lengths.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "prompt `{id}` has {} rollouts; at least 2 are needed",
                lengths.len()
            )));
        }
        rollouts_used = rollouts_used.min(lengths.len());
        per_prompt_accuracy.insert(id.to_string(), hits as f64 / lengths.len() as f64);
        per_prompt_len_stats.insert(id.to_string(), LenStats::from_lengths(&lengths)?);
    }
    Ok(ReferenceSnapshot {
        params: params.clone(),
        per_prompt_accuracy,
        per_prompt_len_stats,
        rollouts_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::TraceSample;

    fn sample(id: &str, len: usize, correct: bool) -> TraceSample {
        TraceSample {
            prompt_id: id.into(),
            bucket: 0,
            latent_depth: 1,
            latent_redundancy: 0,
            text: String::new(),
            token_count: len,
            extracted_answer: None,
            correct,
        }
    }

    fn group(id: &str, lens: &[usize]) -> RolloutGroup {
        RolloutGroup::new(id, lens.iter().map(|&l| sample(id, l, true)).collect()).unwrap()
    }

    #[test]
    fn equal_lengths_map_to_one_half() {
        let g = group("p", &[40, 40, 40]);
        let out = normalize_lengths(&g, &NormStatsSource::live()).unwrap();
        assert_eq!(out, vec![0.5; 3]);
    }

    #[test]
    fn hand_evaluated_live_value() {
        let g = group("p", &[100, 200, 300]);
        let out = normalize_lengths(&g, &NormStatsSource::live()).unwrap();
        let z = 100.0 / 81.6497;
        assert!((z - 1.22474_f64).abs() < 1e-5);
        // 1 / (1 + exp(-1.22474)) = 0.772897
        assert!((out[2] - 0.772897).abs() < 1e-6, "{}", out[2]);
        assert_eq!(out[1], 0.5);
        assert!(out[0] < out[1] && out[1] < out[2]);
    }

    #[test]
    fn freeze_records_population_stats() {
        let params = PolicyParams::uniform(2, 1, 1);
        let snap = freeze_stats(&params, &[group("p1", &[10, 20])]).unwrap();
        assert_eq!(snap.len_stats("p1").unwrap(), LenStats { mean: 15.0, std: 5.0 });
        assert_eq!(snap.rollouts_used, 2);
        let again = freeze_stats(&params, &[group("p1", &[10, 20])]).unwrap();
        assert_eq!(snap, again);
    }

    #[test]
    fn freeze_needs_two_rollouts() {
        let params = PolicyParams::uniform(2, 1, 1);
        let lone = RolloutGroup {
            prompt_id: "p2".into(),
            samples: vec![sample("p2", 10, true)],
            len_mean: 10.0,
            len_std: 0.0,
        };
        assert!(matches!(
            freeze_stats(&params, &[lone]),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn frozen_reproduces_live_on_the_same_rollouts() {
        let params = PolicyParams::uniform(2, 1, 1);
        let g = group("p", &[12, 30, 7, 30, 19]);
        let snap = freeze_stats(&params, std::slice::from_ref(&g)).unwrap();
        let live = normalize_lengths(&g, &NormStatsSource::live()).unwrap();
        let frozen = normalize_lengths(&g, &NormStatsSource::frozen(&snap)).unwrap();
        assert_eq!(live, frozen);
    }

    #[test]
    fn frozen_lookup_failure() {
        let params = PolicyParams::uniform(2, 1, 1);
        let snap = freeze_stats(&params, &[group("p", &[1, 2])]).unwrap();
        let other = group("q", &[1, 2]);
        assert!(matches!(
            normalize_lengths(&other, &NormStatsSource::frozen(&snap)),
            Err(Error::MissingStats(id)) if id == "q"
        ));
    }

    #[test]
    fn logistic_stays_inside_the_unit_interval() {
        for z in [-1e6, -800.0, -40.0, 0.0, 40.0, 1e6] {
            let v = logistic(z);
            assert!(v > 0.0 && v < 1.0, "{z} -> {v}");
        }
    }
}
