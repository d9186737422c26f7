//! Shared domain types: prompts and the prompt distribution, sampled traces,
//! rollout groups, policy parameters, reference snapshots and trainer state.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{tag, StreamSeed};

/// One arithmetic-chain task. The answer is the running sum of `operands`
/// after `required_depth` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub id: String,
    pub required_depth: usize,
    pub operands: Vec<i64>,
    pub answer: i64,
    pub weight: f64,
}

impl PromptInstance {
    /// Running total after `steps` steps. Steps past `required_depth` add
    /// nothing, so the partial is constant from the required depth onward.
    pub fn partial(&self, steps: usize) -> i64 {
        self.operands
            .iter()
            .take(steps.min(self.required_depth))
            .sum()
    }

    /// Operand consumed at 1-based step `step`; zero past the required depth.
    pub fn operand_at(&self, step: usize) -> i64 {
        if step == 0 || step > self.required_depth {
            0
        } else {
            self.operands.get(step - 1).copied().unwrap_or(0)
        }
    }

    pub fn recompute_answer(&self) -> i64 {
        self.partial(self.required_depth)
    }

    /// Structural checks independent of any environment.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidPrompt {
            id: self.id.clone(),
            reason,
        };
        if self.id.is_empty() {
            return Err(bad("empty id".into()));
        }
        if self.required_depth == 0 {
            return Err(bad("required_depth must be positive".into()));
        }
        if self.operands.len() != self.required_depth {
            return Err(bad(format!(
                "expected {} operands, found {}",
                self.required_depth,
                self.operands.len()
            )));
        }
        if !self.weight.is_finite() || self.weight < 0.0 {
            return Err(bad(format!("weight {} is not a nonnegative number", self.weight)));
        }
        let recomputed = self.recompute_answer();
        if recomputed != self.answer {
            return Err(bad(format!(
                "stored answer {} differs from recomputed {}",
                self.answer, recomputed
            )));
        }
        // A shorter chain must never land on the answer, otherwise correctness
        // would not be determined by depth alone.
        for s in 0..self.required_depth {
            if self.partial(s) == self.answer {
                return Err(bad(format!("answer already reached after {s} steps")));
            }
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct RawPromptSet {
    prompts: Vec<RawPrompt>,
}

#[derive(Deserialize)]
struct RawPrompt {
    id: String,
    required_depth: i64,
    operands: Vec<i64>,
    answer: i64,
    #[serde(default = "one")]
    weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Serialize)]
struct PromptSetDoc<'a> {
    prompts: &'a [PromptInstance],
}

/// The prompt distribution: validated prompts with weights summing to one.
#[derive(Debug, Clone)]
pub struct PromptSet {
    prompts: Vec<PromptInstance>,
    sampler: WeightedIndex<f64>,
}

impl PartialEq for PromptSet {
    fn eq(&self, other: &Self) -> bool {
        self.prompts == other.prompts
    }
}

impl PromptSet {
    /// Validates, checks id uniqueness and normalizes weights. Order is kept.
    pub fn new(mut prompts: Vec<PromptInstance>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::Empty("prompt set has no prompts".into()));
        }
        let mut seen = HashSet::new();
        for p in &prompts {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::DuplicateId(p.id.clone()));
            }
            p.validate()?;
        }
        let total: f64 = prompts.iter().map(|p| p.weight).sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::WeightSum(total));
        }
        // already-normalized weights are kept bit-for-bit so saving and
        // reloading a set is lossless
        if (total - 1.0).abs() > 1e-12 {
            for p in &mut prompts {
                p.weight /= total;
            }
        }
        let sampler = WeightedIndex::new(prompts.iter().map(|p| p.weight))
            .map_err(|_| Error::WeightSum(total))?;
        Ok(Self { prompts, sampler })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: RawPromptSet = serde_json::from_str(s)?;
        let prompts = raw
            .prompts
            .into_iter()
            .map(|r| {
                if r.required_depth <= 0 {
                    return Err(Error::InvalidPrompt {
                        id: r.id,
                        reason: format!("required_depth {} is not positive", r.required_depth),
                    });
                }
                Ok(PromptInstance {
                    id: r.id,
                    required_depth: r.required_depth as usize,
                    operands: r.operands,
                    answer: r.answer,
                    weight: r.weight,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(prompts)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&PromptSetDoc {
            prompts: &self.prompts,
        })
        .expect("prompt set serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn prompts(&self) -> &[PromptInstance] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PromptInstance> {
        self.prompts.iter().find(|p| p.id == id)
    }

    /// Draws a prompt index according to the weights.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.sampler.sample(rng)
    }

    /// Seeded family of `n` uniform-weight prompts whose required depths
    /// cycle through `min_depth..=max_depth`. Operands are in 1..=9, so no
    /// shorter chain reaches the answer.
    pub fn synthetic(n: usize, min_depth: usize, max_depth: usize, seed: u64) -> Result<Self> {
        if min_depth == 0 || min_depth > max_depth {
            return Err(Error::Config(format!(
                "invalid depth range {min_depth}..={max_depth}"
            )));
        }
        let mut rng = StreamSeed(seed).lane(&[tag::PROMPTS]);
        let span = max_depth - min_depth + 1;
        let prompts = (0..n)
            .map(|i| {
                let depth = min_depth + i % span;
                let operands: Vec<i64> = (0..depth).map(|_| rng.gen_range(1..=9)).collect();
                let answer = operands.iter().sum();
                PromptInstance {
                    id: format!("p{i:03}"),
                    required_depth: depth,
                    operands,
                    answer,
                    weight: 1.0,
                }
            })
            .collect();
        Self::new(prompts)
    }
}

/// One sampled response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub prompt_id: String,
    /// Policy row the trace was drawn from (0 for globally shared logits).
    #[serde(default)]
    pub bucket: usize,
    pub latent_depth: usize,
    pub latent_redundancy: usize,
    pub text: String,
    pub token_count: usize,
    pub extracted_answer: Option<i64>,
    pub correct: bool,
}

/// Whitespace tokenization used for every length in the crate.
pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Mean and population standard deviation of raw token counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LenStats {
    pub mean: f64,
    pub std: f64,
}

impl LenStats {
    pub fn from_lengths(lengths: &[f64]) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::Empty("no lengths".into()));
        }
        let n = lengths.len() as f64;
        let mean = lengths.iter().sum::<f64>() / n;
        let var = lengths.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: var.max(0.0).sqrt(),
        })
    }
}

/// The k rollouts of one prompt together with their length statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt_id: String,
    pub samples: Vec<TraceSample>,
    pub len_mean: f64,
    pub len_std: f64,
}

impl RolloutGroup {
    pub fn new(prompt_id: impl Into<String>, samples: Vec<TraceSample>) -> Result<Self> {
        let prompt_id = prompt_id.into();
        if samples.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "prompt `{prompt_id}` has {} rollouts; at least 2 are needed",
                samples.len()
            )));
        }
        if let Some(s) = samples.iter().find(|s| s.prompt_id != prompt_id) {
            return Err(Error::Mismatch(format!(
                "sample for `{}` in group for `{prompt_id}`",
                s.prompt_id
            )));
        }
        let stats = LenStats::from_lengths(&lengths_of(&samples))?;
        Ok(Self {
            prompt_id,
            samples,
            len_mean: stats.mean,
            len_std: stats.std,
        })
    }

    pub fn stats(&self) -> LenStats {
        LenStats {
            mean: self.len_mean,
            std: self.len_std,
        }
    }

    pub fn accuracy(&self) -> f64 {
        self.samples.iter().filter(|s| s.correct).count() as f64 / self.samples.len() as f64
    }
}

pub(crate) fn lengths_of(samples: &[TraceSample]) -> Vec<f64> {
    samples.iter().map(|s| s.token_count as f64).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Logits of the trace policy: one depth row (index `s - 1`) and one
/// redundancy row (index `r`) per conditioning bucket. Globally shared
/// policies have a single bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub depth_logits: Vec<Vec<f64>>,
    pub redundancy_logits: Vec<Vec<f64>>,
}

impl PolicyParams {
    /// Single-bucket policy from two logit vectors.
    pub fn global(depth: Vec<f64>, redundancy: Vec<f64>) -> Self {
        Self {
            depth_logits: vec![depth],
            redundancy_logits: vec![redundancy],
        }
    }

    /// The same logit vectors replicated into `buckets` rows.
    pub fn replicated(depth: Vec<f64>, redundancy: Vec<f64>, buckets: usize) -> Self {
        Self {
            depth_logits: vec![depth; buckets],
            redundancy_logits: vec![redundancy; buckets],
        }
    }

    pub fn uniform(s_max: usize, r_max: usize, buckets: usize) -> Self {
        Self::replicated(vec![0.0; s_max], vec![0.0; r_max + 1], buckets)
    }

    pub fn buckets(&self) -> usize {
        self.depth_logits.len()
    }

    pub fn depth_dim(&self) -> usize {
        self.depth_logits.first().map_or(0, Vec::len)
    }

    pub fn redundancy_dim(&self) -> usize {
        self.redundancy_logits.first().map_or(0, Vec::len)
    }

    /// Total number of logits, the length of every gradient vector.
    pub fn len(&self) -> usize {
        self.buckets() * (self.depth_dim() + self.redundancy_dim())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Offset of a bucket's depth row in the flat layout.
    pub fn depth_offset(&self, bucket: usize) -> usize {
        bucket * self.depth_dim()
    }

    /// Offset of a bucket's redundancy row in the flat layout (all depth rows
    /// come first).
    pub fn redundancy_offset(&self, bucket: usize) -> usize {
        self.buckets() * self.depth_dim() + bucket * self.redundancy_dim()
    }

    pub fn depth_probs(&self, bucket: usize) -> Vec<f64> {
        softmax(&self.depth_logits[bucket])
    }

    pub fn redundancy_probs(&self, bucket: usize) -> Vec<f64> {
        softmax(&self.redundancy_logits[bucket])
    }

    pub fn flat(&self) -> Vec<f64> {
        self.depth_logits
            .iter()
            .chain(self.redundancy_logits.iter())
            .flatten()
            .copied()
            .collect()
    }

    /// Rebuilds parameters with this shape from a flat vector.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.len() {
            return Err(Error::Config(format!(
                "flat vector has {} entries, parameters have {}",
                flat.len(),
                self.len()
            )));
        }
        let (d, r) = (self.depth_dim(), self.redundancy_dim());
        let split = self.buckets() * d;
        Ok(Self {
            depth_logits: flat[..split].chunks(d).map(<[f64]>::to_vec).collect(),
            redundancy_logits: flat[split..].chunks(r).map(<[f64]>::to_vec).collect(),
        })
    }

    /// Shape consistency and finiteness.
    pub fn validate(&self) -> Result<()> {
        if self.depth_logits.is_empty() || self.depth_logits.len() != self.redundancy_logits.len() {
            return Err(Error::Config("policy needs matching depth and redundancy rows".into()));
        }
        let (d, r) = (self.depth_dim(), self.redundancy_dim());
        if d == 0 || r == 0 {
            return Err(Error::Config("policy rows must be nonempty".into()));
        }
        if self.depth_logits.iter().any(|row| row.len() != d)
            || self.redundancy_logits.iter().any(|row| row.len() != r)
        {
            return Err(Error::Config("ragged policy rows".into()));
        }
        if self.flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite policy logit".into()));
        }
        Ok(())
    }
}

/// Frozen policy together with its per-prompt accuracy and length statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSnapshot {
    pub params: PolicyParams,
    pub per_prompt_accuracy: BTreeMap<String, f64>,
    pub per_prompt_len_stats: BTreeMap<String, LenStats>,
    pub rollouts_used: usize,
}

impl ReferenceSnapshot {
    pub fn len_stats(&self, prompt_id: &str) -> Result<LenStats> {
        self.per_prompt_len_stats
            .get(prompt_id)
            .copied()
            .ok_or_else(|| Error::MissingStats(prompt_id.to_string()))
    }

    pub fn accuracy(&self, prompt_id: &str) -> Result<f64> {
        self.per_prompt_accuracy
            .get(prompt_id)
            .copied()
            .ok_or_else(|| Error::MissingStats(prompt_id.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "stage1")]
    StageI,
    #[serde(rename = "stage2")]
    StageII,
    #[serde(rename = "primal_dual")]
    PrimalDual,
}

impl Stage {
    pub fn label(&self) -> &'static str {
        match self {
            Stage::StageI => "stage1",
            Stage::StageII => "stage2",
            Stage::PrimalDual => "primal_dual",
        }
    }
}

/// Which update a training step performed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Stage I: accuracy fell below the reference margin.
    RectifyAccuracy,
    /// Stage I: accuracy acceptable, descend on normalized length.
    ShortenLength,
    /// Stage II: normalized length above the frozen budget.
    RectifyLength,
    /// Stage II: length budget satisfied, ascend on accuracy.
    MaximizeAccuracy,
    /// Primal-dual Lagrangian step.
    PrimalDual,
}

pub const DECISION_HISTORY: usize = 64;

/// Mutable training state; a single writer advances it one step at a time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: u64,
    pub stage: Stage,
    pub params: PolicyParams,
    pub dual_lambda: f64,
    pub rng_state: StreamSeed,
    pub last_decisions: VecDeque<Branch>,
    pub length_history: VecDeque<f64>,
}

impl TrainerState {
    pub fn new(stage: Stage, params: PolicyParams, dual_lambda: f64, seed: u64) -> Self {
        Self {
            step: 0,
            stage,
            params,
            dual_lambda: dual_lambda.max(0.0),
            rng_state: StreamSeed(seed),
            last_decisions: VecDeque::new(),
            length_history: VecDeque::new(),
        }
    }

    pub(crate) fn record(&mut self, branch: Branch, mean_len: f64, history_cap: usize) {
        self.last_decisions.push_back(branch);
        while self.last_decisions.len() > DECISION_HISTORY {
            self.last_decisions.pop_front();
        }
        self.length_history.push_back(mean_len);
        while self.length_history.len() > history_cap.max(1) {
            self.length_history.pop_front();
        }
    }
}

/// Sliding-window saturation rule for leaving Stage I.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Saturation {
    pub window: usize,
    pub threshold: f64,
}

impl Default for Saturation {
    fn default() -> Self {
        Self {
            window: 50,
            threshold: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    None,
    #[default]
    GroupMean,
}

/// Optimization hyperparameters. Defaults are desk-scale choices; none of
/// them are published values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// Accuracy tolerance against the reference.
    pub epsilon: f64,
    /// Switching slack for the accuracy constraint.
    pub eta_slack: f64,
    /// Stage II normalized-length tolerance.
    pub delta: f64,
    /// Switching slack for the Stage II length constraint.
    pub eta_len: f64,
    pub lr_theta: f64,
    pub lr_lambda: f64,
    pub lambda_init: f64,
    /// Prompts per minibatch.
    pub batch_size: usize,
    /// Rollouts per prompt.
    pub rollouts_per_prompt: usize,
    pub total_steps: u64,
    /// Stage I ends at this step at the latest.
    pub stage1_budget: u64,
    /// Optional early end of Stage I when length stops improving.
    pub saturation: Option<Saturation>,
    pub accuracy_baseline: Baseline,
    pub length_baseline: Baseline,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            epsilon: 0.02,
            eta_slack: 0.01,
            delta: 0.02,
            eta_len: 0.01,
            lr_theta: 0.05,
            lr_lambda: 0.1,
            lambda_init: 0.0,
            batch_size: 16,
            rollouts_per_prompt: 16,
            total_steps: 1000,
            stage1_budget: 500,
            saturation: None,
            accuracy_baseline: Baseline::GroupMean,
            length_baseline: Baseline::GroupMean,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        check(self.epsilon >= 0.0 && self.epsilon.is_finite(), "epsilon must be >= 0")?;
        check(self.eta_slack > 0.0 && self.eta_slack.is_finite(), "eta_slack must be > 0")?;
        check(self.delta >= 0.0 && self.delta.is_finite(), "delta must be >= 0")?;
        check(self.eta_len > 0.0 && self.eta_len.is_finite(), "eta_len must be > 0")?;
        check(self.lr_theta > 0.0 && self.lr_theta.is_finite(), "lr_theta must be > 0")?;
        check(self.lr_lambda > 0.0 && self.lr_lambda.is_finite(), "lr_lambda must be > 0")?;
        check(self.lambda_init >= 0.0 && self.lambda_init.is_finite(), "lambda_init must be >= 0")?;
        check(self.batch_size >= 1, "batch_size must be >= 1")?;
        check(self.rollouts_per_prompt >= 2, "rollouts_per_prompt must be >= 2")?;
        if let Some(s) = &self.saturation {
            check(s.window >= 1, "saturation window must be >= 1")?;
            check(s.threshold.is_finite(), "saturation threshold must be finite")?;
        }
        Ok(())
    }

    /// How many per-step mean lengths the trainer state keeps.
    pub fn history_cap(&self) -> usize {
        2 * self.saturation.map_or(Saturation::default().window, |s| s.window)
    }
}
