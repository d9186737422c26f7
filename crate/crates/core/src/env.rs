//! The synthetic reasoning environment.
//!
//! A trace is determined by two latents: the number of reasoning steps `s`
//! and the number of repeated verification blocks `r`. Both are drawn
//! independently from categorical distributions given by the policy logits.
//! The rendered answer is the running total after `s` steps, which matches
//! the ground truth exactly when `s >= required_depth`.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{count_tokens, log_softmax, PolicyParams, PromptInstance, TraceSample};

/// Tokens on the closing `Answer: <n>` line.
pub const CLOSING_TOKENS: usize = 2;

const ANSWER_PREFIX: &str = "Answer:";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Conditioning {
    /// One logit row shared by all prompts.
    Global,
    /// One logit row per difficulty hint. The hint equals the prompt's
    /// required depth except for a `noise_prob` fraction of prompts, which
    /// get a hashed arbitrary hint instead.
    Bucketed { noise_prob: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub s_max: usize,
    pub r_max: usize,
    pub tokens_per_step: usize,
    pub tokens_per_redundancy: usize,
    pub conditioning: Conditioning,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            s_max: 6,
            r_max: 4,
            tokens_per_step: 8,
            tokens_per_redundancy: 12,
            conditioning: Conditioning::Global,
        }
    }
}

impl EnvConfig {
    pub fn new(s_max: usize, r_max: usize) -> Self {
        Self {
            s_max,
            r_max,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.s_max < 2 {
            return Err(Error::Config("env.s_max must be >= 2".into()));
        }
        if self.r_max < 1 {
            return Err(Error::Config("env.r_max must be >= 1".into()));
        }
        if self.tokens_per_step < 1 || self.tokens_per_redundancy < 1 {
            return Err(Error::Config("env token weights must be >= 1".into()));
        }
        if let Conditioning::Bucketed { noise_prob } = self.conditioning {
            if !(0.0..=1.0).contains(&noise_prob) {
                return Err(Error::Config("env noise_prob must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Checks that every prompt is solvable within `s_max` steps.
    pub fn check_prompt(&self, prompt: &PromptInstance) -> Result<()> {
        if prompt.required_depth > self.s_max {
            return Err(Error::InvalidPrompt {
                id: prompt.id.clone(),
                reason: format!(
                    "required_depth {} exceeds s_max {}",
                    prompt.required_depth, self.s_max
                ),
            });
        }
        Ok(())
    }

    pub fn buckets(&self) -> usize {
        match self.conditioning {
            Conditioning::Global => 1,
            Conditioning::Bucketed { .. } => self.s_max,
        }
    }

    /// Size of the latent grid.
    pub fn grid_size(&self) -> usize {
        self.s_max * (self.r_max + 1)
    }

    /// Policy row used for `prompt`.
    pub fn bucket_for(&self, prompt: &PromptInstance) -> usize {
        match self.conditioning {
            Conditioning::Global => 0,
            Conditioning::Bucketed { noise_prob } => {
                let digest = Sha256::digest(prompt.id.as_bytes());
                let word = |i: usize| {
                    u64::from_le_bytes(digest[8 * i..8 * i + 8].try_into().expect("8 bytes"))
                };
                let u = (word(0) >> 11) as f64 / (1u64 << 53) as f64;
                let hint = if u < noise_prob {
                    1 + (word(1) % self.s_max as u64) as usize
                } else {
                    prompt.required_depth.clamp(1, self.s_max)
                };
                hint - 1
            }
        }
    }

    /// Exact token count of a rendered `(s, r)` trace.
    pub fn token_count(&self, s: usize, r: usize) -> usize {
        self.tokens_per_step * s + self.tokens_per_redundancy * r + CLOSING_TOKENS
    }

    pub fn check_params(&self, params: &PolicyParams) -> Result<()> {
        params.validate()?;
        if params.depth_dim() != self.s_max
            || params.redundancy_dim() != self.r_max + 1
            || params.buckets() != self.buckets()
        {
            return Err(Error::Config(format!(
                "policy shape {}x({}, {}) does not match env {}x({}, {})",
                params.buckets(),
                params.depth_dim(),
                params.redundancy_dim(),
                self.buckets(),
                self.s_max,
                self.r_max + 1
            )));
        }
        Ok(())
    }
}

/// Pads with filler words or glues trailing words together so the line has
/// exactly `n` whitespace tokens.
fn fit_tokens(mut words: Vec<String>, n: usize) -> String {
    while words.len() > n.max(1) {
        let last = words.pop().expect("nonempty");
        let prev = words.pop().expect("nonempty");
        words.push(format!("{prev}_{last}"));
    }
    while words.len() < n {
        let at = words.len() - 1;
        words.insert(at, "so".to_string());
    }
    words.join(" ")
}

fn step_line(step: usize, operand: i64, total: i64, tokens: usize) -> String {
    let words = [
        "Step".to_string(),
        format!("{step}:"),
        "add".to_string(),
        format!("{operand},"),
        "running".to_string(),
        "total".to_string(),
        "is".to_string(),
        format!("{total}."),
    ];
    fit_tokens(words.to_vec(), tokens)
}

/// Restates the last step line, so repeated checks add little new text.
fn verification_block(step: usize, operand: i64, total: i64, tokens: usize) -> String {
    let words = [
        "Double-check:".to_string(),
        "Step".to_string(),
        format!("{step}:"),
        "add".to_string(),
        format!("{operand},"),
        "running".to_string(),
        "total".to_string(),
        "is".to_string(),
        format!("{total},"),
        "total".to_string(),
        "is".to_string(),
        format!("{total}."),
    ];
    fit_tokens(words.to_vec(), tokens)
}

/// Deterministic text of an `(s, r)` trace: `s` step lines, `r` identical
/// verification blocks, then the answer line.
pub fn render_trace(s: usize, r: usize, prompt: &PromptInstance, env: &EnvConfig) -> Result<String> {
    if s < 1 || s > env.s_max {
        return Err(Error::Range(format!("depth {s} outside 1..={}", env.s_max)));
    }
    if r > env.r_max {
        return Err(Error::Range(format!("redundancy {r} outside 0..={}", env.r_max)));
    }
    let mut lines = Vec::with_capacity(s + r + 1);
    for step in 1..=s {
        lines.push(step_line(
            step,
            prompt.operand_at(step),
            prompt.partial(step),
            env.tokens_per_step,
        ));
    }
    let total = prompt.partial(s);
    let check = verification_block(s, prompt.operand_at(s), total, env.tokens_per_redundancy);
    lines.extend(std::iter::repeat_n(check, r));
    lines.push(format!("{ANSWER_PREFIX} {total}"));
    Ok(lines.join("\n"))
}

/// Outcome of checking a trace's final answer line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub extracted: Option<i64>,
    pub correct: bool,
    /// The final line is missing or is not a parseable answer line.
    pub malformed: bool,
}

/// Parses the value on the final `Answer:` line of `text`.
pub fn extract_answer(text: &str) -> Option<i64> {
    let last = text.lines().rev().find(|l| !l.trim().is_empty())?;
    last.trim()
        .strip_prefix(ANSWER_PREFIX)?
        .trim()
        .parse()
        .ok()
}

/// Checks the trace text against the ground truth. Latents are not consulted.
pub fn verify(trace: &TraceSample, prompt: &PromptInstance) -> Verdict {
    if trace.prompt_id != prompt.id {
        log::warn!(
            "verifying trace for `{}` against prompt `{}`",
            trace.prompt_id,
            prompt.id
        );
    }
    verify_text(&trace.text, prompt)
}

pub fn verify_text(text: &str, prompt: &PromptInstance) -> Verdict {
    match extract_answer(text) {
        Some(v) => Verdict {
            extracted: Some(v),
            correct: v == prompt.answer,
            malformed: false,
        },
        None => Verdict {
            extracted: None,
            correct: false,
            malformed: true,
        },
    }
}

/// Builds the sample for fixed latents: renders, counts and verifies.
pub fn make_trace(
    s: usize,
    r: usize,
    bucket: usize,
    prompt: &PromptInstance,
    env: &EnvConfig,
) -> Result<TraceSample> {
    let text = render_trace(s, r, prompt, env)?;
    let verdict = verify_text(&text, prompt);
    Ok(TraceSample {
        prompt_id: prompt.id.clone(),
        bucket,
        latent_depth: s,
        latent_redundancy: r,
        token_count: count_tokens(&text),
        text,
        extracted_answer: verdict.extracted,
        correct: verdict.correct,
    })
}

/// Categorical samplers for every bucket of a fixed policy.
pub struct TraceSampler<'a> {
    env: &'a EnvConfig,
    depth: Vec<WeightedIndex<f64>>,
    redundancy: Vec<WeightedIndex<f64>>,
}

impl<'a> TraceSampler<'a> {
    pub fn new(params: &PolicyParams, env: &'a EnvConfig) -> Result<Self> {
        env.check_params(params)?;
        let build = |probs: Vec<f64>| {
            WeightedIndex::new(probs).map_err(|e| Error::Numeric(format!("policy row: {e}")))
        };
        let depth = (0..params.buckets())
            .map(|b| build(params.depth_probs(b)))
            .collect::<Result<_>>()?;
        let redundancy = (0..params.buckets())
            .map(|b| build(params.redundancy_probs(b)))
            .collect::<Result<_>>()?;
        Ok(Self {
            env,
            depth,
            redundancy,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, prompt: &PromptInstance, rng: &mut R) -> Result<TraceSample> {
        let bucket = self.env.bucket_for(prompt);
        let s = self.depth[bucket].sample(rng) + 1;
        let r = self.redundancy[bucket].sample(rng);
        make_trace(s, r, bucket, prompt, self.env)
    }
}

/// Draws one trace: `s` and `r` independently from the prompt's policy row.
pub fn sample_trace<R: Rng + ?Sized>(
    params: &PolicyParams,
    prompt: &PromptInstance,
    env: &EnvConfig,
    rng: &mut R,
) -> Result<TraceSample> {
    TraceSampler::new(params, env)?.sample(prompt, rng)
}

/// Log-probability of the trace's latents under `params`.
pub fn trace_logprob(params: &PolicyParams, trace: &TraceSample, env: &EnvConfig) -> Result<f64> {
    latent_logprob(params, trace.bucket, trace.latent_depth, trace.latent_redundancy, env)
}

pub fn latent_logprob(
    params: &PolicyParams,
    bucket: usize,
    s: usize,
    r: usize,
    env: &EnvConfig,
) -> Result<f64> {
    env.check_params(params)?;
    if bucket >= params.buckets() {
        return Err(Error::Range(format!("bucket {bucket} outside policy")));
    }
    if s < 1 || s > env.s_max || r > env.r_max {
        return Err(Error::Range(format!("latents ({s}, {r}) outside grid")));
    }
    let depth = log_softmax(&params.depth_logits[bucket]);
    let red = log_softmax(&params.redundancy_logits[bucket]);
    Ok(depth[s - 1] + red[r])
}
