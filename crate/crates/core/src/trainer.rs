//! Constraint-rectified training, its two-stage extension and the
//! primal-dual baseline.
//!
//! Stage I descends on normalized length while minibatch accuracy stays at
//! or above `reference - epsilon - eta_slack` and otherwise ascends on
//! accuracy. Stage II swaps the roles: it ascends on accuracy while the
//! frozen-scale normalized length stays within the Stage I budget. The
//! primal-dual variant instead carries a Lagrange multiplier on the accuracy
//! constraint.

use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, TraceSampler};
use crate::error::{Error, Result};
use crate::grad::{
    estimate_gradient, exact_objective_over, group_values, sgd_step, Direction, Objective,
    ObjectiveKind,
};
use crate::norm::{freeze_stats, NormStatsSource};
use crate::rng::{tag, StreamSeed};
use crate::types::{
    Branch, HyperParams, PolicyParams, PromptSet, ReferenceSnapshot, RolloutGroup, Stage,
    TrainerState,
};

/// Latent grids up to this many (prompt, latent) cells get an exact Stage II
/// length budget; larger ones fall back to the sampled estimate.
const EXACT_BUDGET_CELLS: usize = 1_000_000;

/// Comparisons against a margin treat values this close as ties, so a
/// threshold written in decimals (0.8 - 0.05 - 0.05) still ties with 0.7.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchDecision {
    pub branch: Branch,
    pub acc_current: f64,
    pub acc_reference: f64,
    pub margin: f64,
}

/// Rectify accuracy iff `acc_current < acc_reference - epsilon - eta_slack`;
/// ties take the length branch.
pub fn switching_decision(
    acc_current: f64,
    acc_reference: f64,
    epsilon: f64,
    eta_slack: f64,
) -> SwitchDecision {
    let margin = acc_reference - epsilon - eta_slack;
    let branch = if acc_current < margin - TIE_TOLERANCE {
        Branch::RectifyAccuracy
    } else {
        Branch::ShortenLength
    };
    SwitchDecision {
        branch,
        acc_current,
        acc_reference,
        margin,
    }
}

/// Stage II length budget, fixed at the transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageIIGuard {
    /// Expected normalized length of the Stage I policy under frozen stats.
    pub len_reference: f64,
    pub delta: f64,
    pub eta_len: f64,
}

impl StageIIGuard {
    pub fn threshold(&self) -> f64 {
        self.len_reference + self.delta + self.eta_len
    }

    /// Strict: a minibatch exactly at the threshold still takes the accuracy step.
    pub fn violated(&self, mean_lnorm: f64) -> bool {
        mean_lnorm > self.threshold() + TIE_TOLERANCE
    }
}

/// Frozen Stage I policy, its length statistics and the derived budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTwoFrozen {
    /// First step taken under Stage II.
    pub start_step: u64,
    pub snapshot: ReferenceSnapshot,
    pub guard: StageIIGuard,
}

/// One JSONL log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: Stage,
    pub branch: Branch,
    pub acc: f64,
    pub acc_ref: f64,
    pub mean_len: f64,
    pub mean_lnorm: f64,
    pub lambda: f64,
}

/// Borrowed inputs shared by every step.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub env: &'a EnvConfig,
    pub prompts: &'a PromptSet,
    pub hp: &'a HyperParams,
    /// Regenerate reference rollouts every step instead of using cached
    /// per-prompt reference accuracies.
    pub fresh_reference: bool,
}

/// Rollouts of `k` samples for each listed prompt. Rollout `j` of slot `i`
/// draws from lane `lane ++ [i, j]`.
pub fn rollouts(
    params: &PolicyParams,
    prompt_indices: &[usize],
    k: usize,
    env: &EnvConfig,
    prompts: &PromptSet,
    seed: StreamSeed,
    lane: &[u64],
) -> Result<Vec<RolloutGroup>> {
    let sampler = TraceSampler::new(params, env)?;
    let mut path = lane.to_vec();
    path.extend([0, 0]);
    let depth = path.len();
    prompt_indices
        .iter()
        .enumerate()
        .map(|(slot, &idx)| {
            let prompt = &prompts.prompts()[idx];
            let samples = (0..k)
                .map(|j| {
                    let mut p = path.clone();
                    p[depth - 2] = slot as u64;
                    p[depth - 1] = j as u64;
                    sampler.sample(prompt, &mut seed.lane(&p))
                })
                .collect::<Result<Vec<_>>>()?;
            RolloutGroup::new(prompt.id.clone(), samples)
        })
        .collect()
}

/// Samples `k_ref` rollouts per prompt from frozen `params` and records
/// per-prompt accuracy and length statistics.
pub fn build_reference(
    params: &PolicyParams,
    prompts: &PromptSet,
    env: &EnvConfig,
    k_ref: usize,
    seed: StreamSeed,
    lane: &[u64],
) -> Result<ReferenceSnapshot> {
    if prompts.is_empty() {
        return Err(Error::Empty("reference needs prompts".into()));
    }
    if k_ref < 2 {
        return Err(Error::InsufficientData(format!(
            "reference needs at least 2 rollouts per prompt, got {k_ref}"
        )));
    }
    let all: Vec<usize> = (0..prompts.len()).collect();
    let groups = rollouts(params, &all, k_ref, env, prompts, seed, lane)?;
    freeze_stats(params, &groups)
}

/// Whether Stage I should end before this step: the step budget is used up,
/// or the windowed mean length stopped decreasing by at least the
/// saturation threshold (relative to the preceding window).
pub fn stage_transition(state: &TrainerState, hp: &HyperParams) -> bool {
    if state.stage != Stage::StageI {
        return false;
    }
    if state.step >= hp.stage1_budget {
        return true;
    }
    let Some(sat) = hp.saturation else {
        return false;
    };
    let w = sat.window;
    let h = &state.length_history;
    if h.len() < 2 * w {
        return false;
    }
    let start = h.len() - 2 * w;
    let prev: f64 = h.iter().skip(start).take(w).sum::<f64>() / w as f64;
    let cur: f64 = h.iter().skip(start + w).sum::<f64>() / w as f64;
    if prev <= 0.0 {
        return true;
    }
    (prev - cur) / prev < sat.threshold
}

/// Dual ascent with projection onto `lambda >= 0`.
pub fn dual_update(lambda: f64, residual: f64, lr_lambda: f64) -> f64 {
    (lambda + lr_lambda * residual).max(0.0)
}

struct Batch {
    prompt_indices: Vec<usize>,
    groups: Vec<RolloutGroup>,
}

impl Batch {
    fn sample(params: &PolicyParams, state: &TrainerState, ctx: &StepContext<'_>) -> Result<Self> {
        let seed = state.rng_state;
        let mut rng = seed.lane(&[tag::BATCH, state.step]);
        let prompt_indices: Vec<usize> = (0..ctx.hp.batch_size)
            .map(|_| ctx.prompts.sample_index(&mut rng))
            .collect();
        let groups = rollouts(
            params,
            &prompt_indices,
            ctx.hp.rollouts_per_prompt,
            ctx.env,
            ctx.prompts,
            seed,
            &[tag::ROLLOUT, state.step],
        )?;
        Ok(Self {
            prompt_indices,
            groups,
        })
    }

    fn samples(&self) -> impl Iterator<Item = &crate::types::TraceSample> {
        self.groups.iter().flat_map(|g| g.samples.iter())
    }

    fn count(&self) -> usize {
        self.groups.iter().map(|g| g.samples.len()).sum()
    }

    fn accuracy(&self) -> f64 {
        self.samples().filter(|s| s.correct).count() as f64 / self.count() as f64
    }

    fn mean_len(&self) -> f64 {
        self.samples().map(|s| s.token_count as f64).sum::<f64>() / self.count() as f64
    }

    fn mean_lnorm(&self, norm: &NormStatsSource<'_>) -> Result<f64> {
        let mut total = 0.0;
        for g in &self.groups {
            total += group_values(g, Objective::NormalizedLength, norm)?.iter().sum::<f64>();
        }
        Ok(total / self.count() as f64)
    }

    /// Reference accuracy for this minibatch: cached per-prompt accuracies
    /// averaged over the sampled prompts, or fresh reference rollouts drawn
    /// on the same lanes as the current policy's rollouts.
    fn reference_accuracy(
        &self,
        reference: &ReferenceSnapshot,
        state: &TrainerState,
        ctx: &StepContext<'_>,
    ) -> Result<f64> {
        if ctx.fresh_reference {
            let groups = rollouts(
                &reference.params,
                &self.prompt_indices,
                ctx.hp.rollouts_per_prompt,
                ctx.env,
                ctx.prompts,
                state.rng_state,
                &[tag::ROLLOUT, state.step],
            )?;
            let n: usize = groups.iter().map(|g| g.samples.len()).sum();
            let hits = groups
                .iter()
                .flat_map(|g| &g.samples)
                .filter(|s| s.correct)
                .count();
            Ok(hits as f64 / n as f64)
        } else {
            let mut total = 0.0;
            for &i in &self.prompt_indices {
                total += reference.accuracy(&ctx.prompts.prompts()[i].id)?;
            }
            Ok(total / self.prompt_indices.len() as f64)
        }
    }
}

/// Applies an SGD step; a non-finite gradient leaves the parameters unchanged.
fn apply_step(
    params: &PolicyParams,
    grad: &[f64],
    lr: f64,
    direction: Direction,
    step: u64,
) -> Result<PolicyParams> {
    match sgd_step(params, grad, lr, direction) {
        Ok(p) => Ok(p),
        Err(Error::Numeric(msg)) => {
            log::warn!("step {step}: update refused ({msg})");
            Ok(params.clone())
        }
        Err(e) => Err(e),
    }
}

fn finish(
    mut state: TrainerState,
    params: PolicyParams,
    record: StepRecord,
    hp: &HyperParams,
) -> (TrainerState, StepRecord) {
    state.params = params;
    state.record(record.branch, record.mean_len, hp.history_cap());
    state.step += 1;
    (state, record)
}

/// One Stage I step.
pub fn crt_step(
    state: TrainerState,
    reference: &ReferenceSnapshot,
    ctx: &StepContext<'_>,
) -> Result<(TrainerState, StepRecord)> {
    if state.stage != Stage::StageI {
        return Err(Error::Config(format!("crt_step called in {}", state.stage.label())));
    }
    let batch = Batch::sample(&state.params, &state, ctx)?;
    let acc = batch.accuracy();
    let acc_ref = batch.reference_accuracy(reference, &state, ctx)?;
    let live = NormStatsSource::live();
    let decision = switching_decision(acc, acc_ref, ctx.hp.epsilon, ctx.hp.eta_slack);
    let (objective, direction) = match decision.branch {
        Branch::RectifyAccuracy => (ObjectiveKind::accuracy(ctx.hp.accuracy_baseline), Direction::Ascent),
        _ => (
            ObjectiveKind::normalized_length(ctx.hp.length_baseline),
            Direction::Descent,
        ),
    };
    let grad = estimate_gradient(&state.params, &batch.groups, objective, &live)?;
    let params = apply_step(&state.params, &grad, ctx.hp.lr_theta, direction, state.step)?;
    let record = StepRecord {
        step: state.step,
        stage: Stage::StageI,
        branch: decision.branch,
        acc,
        acc_ref,
        mean_len: batch.mean_len(),
        mean_lnorm: batch.mean_lnorm(&live)?,
        lambda: state.dual_lambda,
    };
    Ok(finish(state, params, record, ctx.hp))
}

/// Freezes the current policy as the Stage I reference, fixes normalization
/// statistics from its rollouts and derives the Stage II length budget.
pub fn enter_stage_two(
    mut state: TrainerState,
    k_ref: usize,
    ctx: &StepContext<'_>,
) -> Result<(TrainerState, StageTwoFrozen)> {
    if state.stage != Stage::StageI {
        return Err(Error::Config("stage transition requires Stage I".into()));
    }
    let snapshot = build_reference(
        &state.params,
        ctx.prompts,
        ctx.env,
        k_ref,
        state.rng_state,
        &[tag::FREEZE, state.step],
    )?;
    let frozen = NormStatsSource::frozen(&snapshot);
    let len_reference = if ctx.env.grid_size() * ctx.prompts.len() <= EXACT_BUDGET_CELLS {
        exact_objective_over(
            &state.params,
            ctx.prompts,
            ObjectiveKind::normalized_length(crate::types::Baseline::None),
            ctx.env,
            &frozen,
        )?
    } else {
        sampled_len_reference(&snapshot, k_ref, ctx, &state)?
    };
    let guard = StageIIGuard {
        len_reference,
        delta: ctx.hp.delta,
        eta_len: ctx.hp.eta_len,
    };
    state.stage = Stage::StageII;
    let start_step = state.step;
    Ok((
        state,
        StageTwoFrozen {
            start_step,
            snapshot,
            guard,
        },
    ))
}

fn sampled_len_reference(
    snapshot: &ReferenceSnapshot,
    k_ref: usize,
    ctx: &StepContext<'_>,
    state: &TrainerState,
) -> Result<f64> {
    let all: Vec<usize> = (0..ctx.prompts.len()).collect();
    let groups = rollouts(
        &snapshot.params,
        &all,
        k_ref,
        ctx.env,
        ctx.prompts,
        state.rng_state,
        &[tag::FREEZE, state.step],
    )?;
    let frozen = NormStatsSource::frozen(snapshot);
    let mut total = 0.0;
    for (g, p) in groups.iter().zip(ctx.prompts.prompts()) {
        let v = group_values(g, Objective::NormalizedLength, &frozen)?;
        total += p.weight * v.iter().sum::<f64>() / v.len() as f64;
    }
    Ok(total)
}

/// One Stage II step.
pub fn stage2_step(
    state: TrainerState,
    frozen: &StageTwoFrozen,
    ctx: &StepContext<'_>,
) -> Result<(TrainerState, StepRecord)> {
    if state.stage != Stage::StageII {
        return Err(Error::Config(format!("stage2_step called in {}", state.stage.label())));
    }
    let batch = Batch::sample(&state.params, &state, ctx)?;
    let norm = NormStatsSource::frozen(&frozen.snapshot);
    let mean_lnorm = batch.mean_lnorm(&norm)?;
    let (branch, objective, direction) = if frozen.guard.violated(mean_lnorm) {
        (
            Branch::RectifyLength,
            ObjectiveKind::normalized_length(ctx.hp.length_baseline),
            Direction::Descent,
        )
    } else {
        (
            Branch::MaximizeAccuracy,
            ObjectiveKind::accuracy(ctx.hp.accuracy_baseline),
            Direction::Ascent,
        )
    };
    let grad = estimate_gradient(&state.params, &batch.groups, objective, &norm)?;
    let params = apply_step(&state.params, &grad, ctx.hp.lr_theta, direction, state.step)?;
    let record = StepRecord {
        step: state.step,
        stage: Stage::StageII,
        branch,
        acc: batch.accuracy(),
        acc_ref: batch.reference_accuracy(&frozen.snapshot, &state, ctx)?,
        mean_len: batch.mean_len(),
        mean_lnorm,
        lambda: state.dual_lambda,
    };
    Ok(finish(state, params, record, ctx.hp))
}

/// One primal-dual step on `mean lnorm + lambda * ((acc_ref - epsilon) - acc)`.
pub fn pd_step(
    state: TrainerState,
    reference: &ReferenceSnapshot,
    ctx: &StepContext<'_>,
) -> Result<(TrainerState, StepRecord)> {
    if state.stage != Stage::PrimalDual {
        return Err(Error::Config(format!("pd_step called in {}", state.stage.label())));
    }
    if !(state.dual_lambda >= 0.0) {
        return Err(Error::Numeric(format!("dual variable {} is negative", state.dual_lambda)));
    }
    let batch = Batch::sample(&state.params, &state, ctx)?;
    let acc = batch.accuracy();
    let acc_ref = batch.reference_accuracy(reference, &state, ctx)?;
    let residual = (acc_ref - ctx.hp.epsilon) - acc;
    let live = NormStatsSource::live();
    let lambda = state.dual_lambda;

    let len_grad = estimate_gradient(
        &state.params,
        &batch.groups,
        ObjectiveKind::normalized_length(ctx.hp.length_baseline),
        &live,
    )?;
    let acc_grad = estimate_gradient(
        &state.params,
        &batch.groups,
        ObjectiveKind::accuracy(ctx.hp.accuracy_baseline),
        &live,
    )?;
    // the residual depends on theta only through -acc
    let lagrangian_grad: Vec<f64> = len_grad
        .iter()
        .zip(&acc_grad)
        .map(|(l, a)| l - lambda * a)
        .collect();
    let params = apply_step(
        &state.params,
        &lagrangian_grad,
        ctx.hp.lr_theta,
        Direction::Descent,
        state.step,
    )?;
    let record = StepRecord {
        step: state.step,
        stage: Stage::PrimalDual,
        branch: Branch::PrimalDual,
        acc,
        acc_ref,
        mean_len: batch.mean_len(),
        mean_lnorm: batch.mean_lnorm(&live)?,
        lambda,
    };
    let hp = ctx.hp;
    let (mut state, record) = finish(state, params, record, hp);
    state.dual_lambda = dual_update(lambda, residual, hp.lr_lambda);
    assert!(state.dual_lambda >= 0.0, "dual variable left the nonnegative orthant");
    Ok((state, record))
}

/// Training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Stage I until the transition rule fires, then Stage II.
    CrtTwoStage,
    /// Stage I for the whole run.
    CrtStage1Only,
    /// Lagrangian baseline.
    PrimalDual,
}

/// In-memory training session: state plus everything frozen along the way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub env: EnvConfig,
    pub hp: HyperParams,
    pub mode: Mode,
    pub fresh_reference: bool,
    pub k_ref: usize,
    pub state: TrainerState,
    pub reference: ReferenceSnapshot,
    pub stage2: Option<StageTwoFrozen>,
}

impl Session {
    /// Starts from `init`, which also serves as the frozen reference policy.
    #[allow(clippy::too_many_arguments)]
    pub fn start(
        env: EnvConfig,
        hp: HyperParams,
        mode: Mode,
        fresh_reference: bool,
        k_ref: usize,
        init: PolicyParams,
        prompts: &PromptSet,
        seed: u64,
    ) -> Result<Self> {
        env.validate()?;
        hp.validate()?;
        env.check_params(&init)?;
        for p in prompts.prompts() {
            env.check_prompt(p)?;
        }
        let stage = match mode {
            Mode::PrimalDual => Stage::PrimalDual,
            _ => Stage::StageI,
        };
        let state = TrainerState::new(stage, init.clone(), hp.lambda_init, seed);
        let reference = build_reference(&init, prompts, &env, k_ref, state.rng_state, &[tag::REFERENCE])?;
        Ok(Self {
            env,
            hp,
            mode,
            fresh_reference,
            k_ref,
            state,
            reference,
            stage2: None,
        })
    }

    fn ctx<'a>(&'a self, prompts: &'a PromptSet) -> StepContext<'a> {
        StepContext {
            env: &self.env,
            prompts,
            hp: &self.hp,
            fresh_reference: self.fresh_reference,
        }
    }

    pub fn finished(&self) -> bool {
        self.state.step >= self.hp.total_steps
    }

    /// Executes one step, entering Stage II first when the transition rule fires.
    /// Executes one step, entering Stage II first when the transition rule
    /// fires. On error the session is left unchanged.
    pub fn advance(&mut self, prompts: &PromptSet) -> Result<StepRecord> {
        let ctx = self.ctx(prompts);
        let mut state = self.state.clone();
        let mut entered = None;
        if self.mode == Mode::CrtTwoStage && stage_transition(&state, &self.hp) {
            let (next, frozen) = enter_stage_two(state, self.k_ref, &ctx)?;
            log::info!(
                "entering stage 2 at step {} (length budget {:.4})",
                next.step,
                frozen.guard.threshold()
            );
            state = next;
            entered = Some(frozen);
        }
        let (next, record) = match state.stage {
            Stage::StageI => crt_step(state, &self.reference, &ctx)?,
            Stage::StageII => {
                let frozen = entered
                    .as_ref()
                    .or(self.stage2.as_ref())
                    .ok_or_else(|| Error::Config("stage 2 without frozen statistics".into()))?;
                stage2_step(state, frozen, &ctx)?
            }
            Stage::PrimalDual => pd_step(state, &self.reference, &ctx)?,
        };
        if entered.is_some() {
            self.stage2 = entered;
        }
        self.state = next;
        Ok(record)
    }
}
