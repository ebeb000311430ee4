//! Stage-2 reinforcement learning: grouped rollouts per question, rewards
//! normalized within each group, a clipped-ratio surrogate with a KL penalty
//! toward the frozen start-of-RL snapshot, and joint updates of the decoder
//! and the bridge.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{bridge_backward, bridge_forward, BridgeParams};
use crate::corpus::{MmvqaItem, VolumeId};
use crate::error::{Result, VoxError};
use crate::linalg::{mean, std_pop, Mat};
use crate::model::Model;
use crate::optim::{global_norm, Adam, AdamConfig};
use crate::policy::{
    decode_backward, decode_forward, response_logprobs, sample_response, PolicyParams, Sampler,
};
use crate::prompts::think_prompt;
use crate::rewards::{parse_response, total_reward, ConsistencyScorer, DiscretizerSpec, RewardBreakdown};
use crate::rng::{derive_rng, salt};
use crate::sft::LogRow;
use crate::text::{EmbeddingTable, TextAnchor, TokenId};

#[derive(Debug, Clone, Copy)]
pub struct RlConfig {
    /// Rollouts per question.
    pub k: usize,
    pub eps_clip: f64,
    /// KL penalty coefficient.
    pub beta: f64,
    /// Stabilizer added to the advantage denominator.
    pub eps_std: f64,
    pub lr: f64,
    pub steps: usize,
    pub temperature: f64,
    pub max_new: usize,
    pub items_per_step: usize,
    /// Fraction of the question set used for training; the rest is eligible
    /// as held-out material.
    pub data_fraction: f64,
    /// Include the consistency term in the reward used for advantages.
    pub use_consistency: bool,
    pub probe_every: usize,
    pub probe_size: usize,
    pub log_transcripts: bool,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            k: 8,
            eps_clip: 0.2,
            beta: 0.04,
            eps_std: 1e-4,
            lr: 1e-4,
            steps: 500,
            temperature: 1.0,
            max_new: 48,
            items_per_step: 2,
            data_fraction: 1.0,
            use_consistency: true,
            probe_every: 25,
            probe_size: 64,
            log_transcripts: false,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(VoxError::config("group size must be at least 2"));
        }
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            return Err(VoxError::config("clip width must lie in (0,1)"));
        }
        if !(self.beta >= 0.0) || !(self.eps_std > 0.0) {
            return Err(VoxError::config(
                "kl coefficient must be nonnegative and eps_std positive",
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(VoxError::config("sampling temperature must be positive"));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(VoxError::config("data fraction must lie in (0,1]"));
        }
        if self.max_new == 0 || self.items_per_step == 0 {
            return Err(VoxError::config("max_new and items_per_step must be positive"));
        }
        Ok(())
    }
}

/// A_k = (r_k − mean) / (population std + eps_std).
pub fn group_advantages(rewards: &[f64], eps_std: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(VoxError::invalid("advantage groups need at least 2 rewards"));
    }
    let mu = mean(rewards);
    let sd = std_pop(rewards);
    Ok(rewards.iter().map(|r| (r - mu) / (sd + eps_std)).collect())
}

/// Mean over tokens of exp(d) − d − 1 with d = ref − theta. Convexity makes
/// every summand nonnegative, with zero exactly at equal log-probs.
pub fn kl_penalty(logprobs_theta: &[f64], logprobs_ref: &[f64]) -> Result<f64> {
    if logprobs_theta.len() != logprobs_ref.len() {
        return Err(VoxError::DimensionMismatch("kl input lengths differ"));
    }
    if logprobs_theta.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = logprobs_theta
        .iter()
        .zip(logprobs_ref)
        .map(|(t, r)| {
            let d = r - t;
            d.exp() - d - 1.0
        })
        .sum();
    Ok(sum / logprobs_theta.len() as f64)
}

/// One sampled, scored response.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub tokens: Vec<TokenId>,
    /// Log-probs recorded at sampling time; the ratio baseline.
    pub logprobs_old: Vec<f64>,
    pub hit_eos: bool,
    pub breakdown: RewardBreakdown,
    /// The reward the advantages were computed from (total, or format plus
    /// accuracy when the consistency term is ablated).
    pub reward_used: f64,
}

#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub volume_id: VolumeId,
    pub question_id: usize,
    pub correct_letter: char,
    pub prompt: Vec<TokenId>,
    pub rollouts: Vec<Rollout>,
    pub advantages: Vec<f64>,
}

/// Sample K responses for one question under the current model. Each (step,
/// question, k) triple names its own rng stream, so groups are reproducible
/// and order-independent.
pub fn rollout_group(
    model: &Model,
    item: &MmvqaItem,
    question_id: usize,
    prefix: &Mat,
    config: &RlConfig,
    seed: u64,
    step: usize,
) -> Result<RolloutGroup> {
    if config.k < 2 {
        return Err(VoxError::invalid("rollout groups need K >= 2"));
    }
    let prompt = model.vocab.tokenize(&think_prompt(item));
    let mut rollouts = Vec::with_capacity(config.k);
    for k in 0..config.k {
        let mut rng = derive_rng(
            seed,
            &[salt::ROLLOUT, step as u64, question_id as u64, k as u64],
        );
        let sampled = sample_response(
            &model.policy,
            &model.table,
            Some(prefix),
            &prompt,
            config.max_new,
            Sampler::Temperature(config.temperature),
            &mut rng,
        )?;
        rollouts.push(Rollout {
            tokens: sampled.tokens,
            logprobs_old: sampled.logprobs,
            hit_eos: sampled.hit_eos,
            breakdown: RewardBreakdown {
                r_fmt: 0.0,
                r_acc: 0.0,
                raw_score: 0.0,
                r_con: 0.0,
                total: 0.0,
            },
            reward_used: 0.0,
        });
    }
    Ok(RolloutGroup {
        volume_id: item.volume_id,
        question_id,
        correct_letter: item.correct_letter,
        prompt,
        rollouts,
        advantages: vec![0.0; config.k],
    })
}

/// Score every rollout in place and fill the group's advantages.
pub fn score_group(
    model: &Model,
    group: &mut RolloutGroup,
    item: &MmvqaItem,
    scorer: &dyn ConsistencyScorer,
    spec: &DiscretizerSpec,
    config: &RlConfig,
) -> Result<()> {
    let mut rewards = Vec::with_capacity(group.rollouts.len());
    for r in &mut group.rollouts {
        let parsed = parse_response(&model.vocab, &r.tokens);
        let breakdown = total_reward(
            &parsed,
            item.correct_letter,
            &item.reference_report,
            scorer,
            spec,
        )?;
        r.reward_used = if config.use_consistency {
            breakdown.total
        } else {
            breakdown.r_fmt + breakdown.r_acc
        };
        r.breakdown = breakdown;
        rewards.push(r.reward_used);
    }
    group.advantages = group_advantages(&rewards, config.eps_std)?;
    Ok(())
}

/// Loss and gradient of the clipped-surrogate objective plus the KL penalty,
/// over the concatenation [policy parameters; bridge parameters]. The terms:
///
///   loss = −(1/ΣK) Σ_groups Σ_k (1/|o_k|) Σ_t min(ρ_t A_k, clip(ρ_t) A_k)
///          + β · (1/ΣK) Σ_groups Σ_k (1/|o_k|) Σ_t [exp(d_t) − d_t − 1]
///
/// with ρ_t = exp(ℓ_θ,t − ℓ_old,t) and d_t = ℓ_ref,t − ℓ_θ,t. The KL term
/// weights tokens exactly like the surrogate so both scale identically.
fn grpo_core(
    policy: &PolicyParams,
    bridge: &BridgeParams,
    table: &EmbeddingTable,
    anchor: &TextAnchor,
    ref_policy: &PolicyParams,
    ref_bridge: &BridgeParams,
    groups: &[RolloutGroup],
    features: &BTreeMap<VolumeId, Mat>,
    config: &RlConfig,
    want_grads: bool,
) -> Result<(f64, f64, Option<Vec<f64>>)> {
    if groups.is_empty() {
        return Err(VoxError::EmptyInput("rollout groups"));
    }
    let total_k: usize = groups.iter().map(|g| g.rollouts.len()).sum();
    if total_k == 0 {
        return Err(VoxError::EmptyInput("rollouts"));
    }
    let np = policy.flat_len();
    let nb = bridge.flat_len();
    let mut grads = if want_grads { Some(vec![0.0; np + nb]) } else { None };
    let mut surrogate = 0.0;
    let mut kl_term = 0.0;

    for group in groups {
        let feats = features.get(&group.volume_id).ok_or(VoxError::invalid(
            "rollout group references a volume with no encoded features",
        ))?;
        let (prefix, cache) = bridge_forward(feats, anchor, bridge)?;
        let (ref_prefix, _) = bridge_forward(feats, anchor, ref_bridge)?;
        let mut dprefix_group = Mat::zeros(prefix.rows(), prefix.cols());

        for (k, rollout) in group.rollouts.iter().enumerate() {
            if rollout.tokens.is_empty() {
                return Err(VoxError::EmptyInput("rollout token sequence"));
            }
            if rollout.logprobs_old.len() != rollout.tokens.len() {
                return Err(VoxError::DimensionMismatch(
                    "recorded log-probs do not cover the rollout",
                ));
            }
            let a = group.advantages[k];
            let mut seq = group.prompt.clone();
            seq.extend_from_slice(&rollout.tokens);
            let out = decode_forward(policy, table, Some(&prefix), &seq)?;
            let theta = &out.logprobs[group.prompt.len()..];
            let refs = response_logprobs(
                ref_policy,
                table,
                Some(&ref_prefix),
                &group.prompt,
                &rollout.tokens,
            )?;
            let w = 1.0 / (total_k as f64 * rollout.tokens.len() as f64);
            let lo = 1.0 - config.eps_clip;
            let hi = 1.0 + config.eps_clip;
            let mut dlogp = vec![0.0; seq.len()];
            for t in 0..rollout.tokens.len() {
                let rho = (theta[t] - rollout.logprobs_old[t]).exp();
                let unclipped = rho * a;
                let clipped = rho.clamp(lo, hi) * a;
                surrogate -= w * unclipped.min(clipped);
                let d = refs[t] - theta[t];
                kl_term += w * (d.exp() - d - 1.0);
                if want_grads {
                    let mut g = 0.0;
                    if unclipped <= clipped {
                        g -= w * rho * a;
                    }
                    g += config.beta * w * (1.0 - d.exp());
                    dlogp[group.prompt.len() + t] = g;
                }
            }
            if want_grads {
                let (pgrads, dprefix) = decode_backward(policy, table, &seq, &out, &dlogp)?;
                let acc = grads.as_mut().expect("grads allocated");
                for (dst, src) in acc[..np].iter_mut().zip(pgrads.flat()) {
                    *dst += src;
                }
                dprefix_group.add_scaled(&dprefix, 1.0);
            }
        }
        if want_grads {
            let bgrads = bridge_backward(bridge, &cache, &dprefix_group)?;
            let acc = grads.as_mut().expect("grads allocated");
            for (dst, src) in acc[np..].iter_mut().zip(bgrads.flat()) {
                *dst += src;
            }
        }
    }
    let loss = surrogate + config.beta * kl_term;
    if !loss.is_finite() {
        return Err(VoxError::NonFinite("grpo loss"));
    }
    Ok((loss, kl_term, grads))
}

/// Loss only; the finite-difference harness drives this.
pub fn grpo_loss(
    policy: &PolicyParams,
    bridge: &BridgeParams,
    table: &EmbeddingTable,
    anchor: &TextAnchor,
    ref_policy: &PolicyParams,
    ref_bridge: &BridgeParams,
    groups: &[RolloutGroup],
    features: &BTreeMap<VolumeId, Mat>,
    config: &RlConfig,
) -> Result<f64> {
    grpo_core(
        policy, bridge, table, anchor, ref_policy, ref_bridge, groups, features, config, false,
    )
    .map(|(loss, _, _)| loss)
}

/// Loss plus analytic gradient over [policy; bridge] flats.
pub fn grpo_loss_and_grads(
    policy: &PolicyParams,
    bridge: &BridgeParams,
    table: &EmbeddingTable,
    anchor: &TextAnchor,
    ref_policy: &PolicyParams,
    ref_bridge: &BridgeParams,
    groups: &[RolloutGroup],
    features: &BTreeMap<VolumeId, Mat>,
    config: &RlConfig,
) -> Result<(f64, f64, Vec<f64>)> {
    let (loss, kl, grads) = grpo_core(
        policy, bridge, table, anchor, ref_policy, ref_bridge, groups, features, config, true,
    )?;
    Ok((loss, kl, grads.expect("grads requested")))
}

pub struct GrpoStep {
    pub loss: f64,
    pub kl: f64,
    pub grad_norm: f64,
}

/// One optimizer update on scored groups. Aborts with the offending group
/// named when the loss goes non-finite.
pub fn grpo_step(
    model: &mut Model,
    ref_policy: &PolicyParams,
    ref_bridge: &BridgeParams,
    groups: &[RolloutGroup],
    features: &BTreeMap<VolumeId, Mat>,
    config: &RlConfig,
    adam: &mut Adam,
) -> Result<GrpoStep> {
    let out = grpo_loss_and_grads(
        &model.policy,
        &model.bridge,
        &model.table,
        &model.anchor,
        ref_policy,
        ref_bridge,
        groups,
        features,
        config,
    );
    let (loss, kl, grads) = match out {
        Ok(v) => v,
        Err(VoxError::NonFinite(what)) => {
            let ids: Vec<usize> = groups.iter().map(|g| g.question_id).collect();
            eprintln!("non-finite {what} while updating on question ids {ids:?}");
            return Err(VoxError::NonFinite(what));
        }
        Err(e) => return Err(e),
    };
    let np = model.policy.flat_len();
    let mut flat = model.policy.flat();
    flat.extend(model.bridge.flat());
    let grad_norm = global_norm(&grads);
    adam.step(&mut flat, &grads)?;
    model.policy.set_flat(&flat[..np]);
    model.bridge.set_flat(&flat[np..]);
    model.bridge.clamp_temperature();
    Ok(GrpoStep {
        loss,
        kl,
        grad_norm,
    })
}

/// Greedy think-mode accuracy by strict parsing; the cheap mid-run progress
/// signal (full evaluation with fallback extraction lives in the eval layer).
pub fn probe_accuracy(
    model: &Model,
    items: &[MmvqaItem],
    features: &BTreeMap<VolumeId, Mat>,
    max_new: usize,
) -> Result<f64> {
    if items.is_empty() {
        return Err(VoxError::EmptyInput("probe items"));
    }
    let mut correct = 0usize;
    for item in items {
        let feats = features.get(&item.volume_id).ok_or(VoxError::invalid(
            "probe item references a volume with no encoded features",
        ))?;
        let (prefix, _) = bridge_forward(feats, &model.anchor, &model.bridge)?;
        let prompt = model.vocab.tokenize(&think_prompt(item));
        let mut rng = derive_rng(0, &[salt::ROLLOUT]);
        let sampled = sample_response(
            &model.policy,
            &model.table,
            Some(&prefix),
            &prompt,
            max_new,
            Sampler::Greedy,
            &mut rng,
        )?;
        let parsed = parse_response(&model.vocab, &sampled.tokens);
        if parsed.answer_letter == Some(item.correct_letter) {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

/// One metric-history row; written as CSV by `metrics_to_csv`.
#[derive(Debug, Clone, Copy)]
pub struct RlMetricRow {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_r_fmt: f64,
    pub mean_r_acc: f64,
    pub mean_r_con: f64,
    pub kl: f64,
    pub probe_accuracy: f64,
}

pub fn metrics_to_csv(rows: &[RlMetricRow]) -> String {
    let mut out = String::from("step,mean_reward,mean_r_fmt,mean_r_acc,mean_r_con,kl,probe_accuracy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            r.step, r.mean_reward, r.mean_r_fmt, r.mean_r_acc, r.mean_r_con, r.kl, r.probe_accuracy
        ));
    }
    out
}

/// One reward-audit record per scored response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditRecord {
    pub step: usize,
    pub question_id: usize,
    pub k: usize,
    pub r_fmt: f64,
    pub r_acc: f64,
    pub raw_score: f64,
    pub r_con: f64,
    pub total: f64,
}

/// One generation-transcript record per response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub step: usize,
    pub question_id: usize,
    pub k: usize,
    pub text: String,
    pub stop_reason: String,
    pub logprob_sum: f64,
}

pub struct RlRun {
    pub metrics: Vec<RlMetricRow>,
    pub audit: Vec<AuditRecord>,
    pub transcripts: Vec<TranscriptRecord>,
}

/// The RL loop: sample groups, score them, update, and probe periodically.
/// The reference snapshot is taken from the model as passed in.
pub fn rl_train(
    model: &mut Model,
    train: &[MmvqaItem],
    probe: &[MmvqaItem],
    features: &BTreeMap<VolumeId, Mat>,
    scorer: &dyn ConsistencyScorer,
    spec: &DiscretizerSpec,
    config: &RlConfig,
    seed: u64,
) -> Result<RlRun> {
    config.validate()?;
    if config.steps == 0 {
        return Ok(RlRun {
            metrics: Vec::new(),
            audit: Vec::new(),
            transcripts: Vec::new(),
        });
    }
    if train.is_empty() {
        return Err(VoxError::EmptyInput("rl training items"));
    }
    let ref_policy = model.policy.clone();
    let ref_bridge = model.bridge.clone();
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        model.policy.flat_len() + model.bridge.flat_len(),
    );
    let probe_items: Vec<MmvqaItem> = probe.iter().take(config.probe_size).cloned().collect();
    let mut metrics = Vec::with_capacity(config.steps);
    let mut audit = Vec::new();
    let mut transcripts = Vec::new();
    let mut last_probe = f64::NAN;

    for step in 0..config.steps {
        let mut pick = derive_rng(seed, &[salt::ROLLOUT, step as u64]);
        let mut groups = Vec::with_capacity(config.items_per_step);
        let mut item_refs = Vec::with_capacity(config.items_per_step);
        for _ in 0..config.items_per_step {
            let qid = pick.gen_range(0..train.len());
            let item = &train[qid];
            let feats = features.get(&item.volume_id).ok_or(VoxError::invalid(
                "training item references a volume with no encoded features",
            ))?;
            let (prefix, _) = bridge_forward(feats, &model.anchor, &model.bridge)?;
            let mut group = rollout_group(model, item, qid, &prefix, config, seed, step)?;
            score_group(model, &mut group, item, scorer, spec, config)?;
            groups.push(group);
            item_refs.push(item);
        }
        for group in &groups {
            for (k, r) in group.rollouts.iter().enumerate() {
                audit.push(AuditRecord {
                    step,
                    question_id: group.question_id,
                    k,
                    r_fmt: r.breakdown.r_fmt,
                    r_acc: r.breakdown.r_acc,
                    raw_score: r.breakdown.raw_score,
                    r_con: r.breakdown.r_con,
                    total: r.breakdown.total,
                });
                if config.log_transcripts {
                    transcripts.push(TranscriptRecord {
                        step,
                        question_id: group.question_id,
                        k,
                        text: model.vocab.detokenize(&r.tokens)?,
                        stop_reason: if r.hit_eos { "eos" } else { "length" }.to_string(),
                        logprob_sum: r.logprobs_old.iter().sum(),
                    });
                }
            }
        }
        let update = grpo_step(
            model,
            &ref_policy,
            &ref_bridge,
            &groups,
            features,
            config,
            &mut adam,
        )?;
        let is_probe_step = step % config.probe_every == 0 || step + 1 == config.steps;
        if is_probe_step && !probe_items.is_empty() {
            last_probe = probe_accuracy(model, &probe_items, features, config.max_new)?;
        }
        let n = groups.iter().map(|g| g.rollouts.len()).sum::<usize>() as f64;
        let sum_of = |f: &dyn Fn(&Rollout) -> f64| -> f64 {
            groups
                .iter()
                .flat_map(|g| g.rollouts.iter())
                .map(f)
                .sum::<f64>()
                / n
        };
        metrics.push(RlMetricRow {
            step,
            mean_reward: sum_of(&|r| r.reward_used),
            mean_r_fmt: sum_of(&|r| r.breakdown.r_fmt),
            mean_r_acc: sum_of(&|r| r.breakdown.r_acc),
            mean_r_con: sum_of(&|r| r.breakdown.r_con),
            kl: update.kl,
            probe_accuracy: last_probe,
        });
    }
    Ok(RlRun {
        metrics,
        audit,
        transcripts,
    })
}

/// Convenience used by training logs shared with stage 1.
pub fn metric_to_logrow(r: &RlMetricRow, lr: f64) -> LogRow {
    LogRow {
        step: r.step,
        mean_loss: -r.mean_reward,
        grad_norm: 0.0,
        lr,
    }
}
