//! Stage-1 training. Two phases share this module: a language-model warmup
//! that teaches the frozen-to-be decoder report style and the tagged answer
//! format, and the supervised fine-tune proper, which trains only the bridge
//! with abnormality-weighted cross entropy.

use crate::bridge::bridge_backward;
use crate::corpus::{token_weights, Corpus};
use crate::error::{Result, VoxError};
use crate::linalg::Mat;
use crate::model::Model;
use crate::optim::{global_norm, Adam, AdamConfig};
use crate::policy::{decode_backward, decode_forward, PolicyParams};
use crate::rng::{derive_rng, salt};
use crate::text::{reserved, EmbeddingTable, TokenId};
use rand::Rng;

/// Default loss multiplier for tokens inside abnormal sentences.
pub const DEFAULT_LAMBDA: f64 = 1.10;

/// One supervised item: frozen patch features plus the weighted target text.
#[derive(Debug, Clone)]
pub struct SftItem {
    pub features: Mat,
    pub targets: Vec<TokenId>,
    pub alpha: Vec<f64>,
}

/// Report-generation items: targets are the report tokens plus `<eos>`, with
/// weight `lambda` on abnormal-sentence tokens and 1 elsewhere (the closing
/// `<eos>` counts as normal).
pub fn prepare_sft_items(model: &Model, corpus: &Corpus, lambda: f64) -> Result<Vec<SftItem>> {
    let mut items = Vec::with_capacity(corpus.len());
    for (volume, report) in corpus.volumes.iter().zip(&corpus.reports) {
        let mut targets = model.vocab.tokenize(&report.flat_text());
        let mut alpha = token_weights(report, lambda)?;
        targets.push(reserved::EOS);
        alpha.push(1.0);
        items.push(SftItem {
            features: model.features(volume)?,
            targets,
            alpha,
        });
    }
    Ok(items)
}

/// Weighted negative log-likelihood: L = −Σ_t α_t · logP(y_t | y_<t, prefix).
pub fn arw_loss(
    policy: &PolicyParams,
    table: &EmbeddingTable,
    prefix: Option<&Mat>,
    targets: &[TokenId],
    alpha: &[f64],
) -> Result<f64> {
    if alpha.len() != targets.len() {
        return Err(VoxError::DimensionMismatch("alpha length != target length"));
    }
    let out = decode_forward(policy, table, prefix, targets)?;
    let loss = -out
        .logprobs
        .iter()
        .zip(alpha)
        .map(|(lp, a)| a * lp)
        .sum::<f64>();
    if !loss.is_finite() {
        return Err(VoxError::NonFinite("weighted cross-entropy loss"));
    }
    Ok(loss)
}

/// Loss plus gradients with respect to the decoder parameters and the prefix
/// rows. The weighting enters only through d(loss)/d(logprob_t) = −α_t.
pub fn arw_grads(
    policy: &PolicyParams,
    table: &EmbeddingTable,
    prefix: Option<&Mat>,
    targets: &[TokenId],
    alpha: &[f64],
) -> Result<(f64, PolicyParams, Mat)> {
    if alpha.len() != targets.len() {
        return Err(VoxError::DimensionMismatch("alpha length != target length"));
    }
    let out = decode_forward(policy, table, prefix, targets)?;
    let loss = -out
        .logprobs
        .iter()
        .zip(alpha)
        .map(|(lp, a)| a * lp)
        .sum::<f64>();
    if !loss.is_finite() {
        return Err(VoxError::NonFinite("weighted cross-entropy loss"));
    }
    let dlogp: Vec<f64> = alpha.iter().map(|a| -a).collect();
    let (grads, dprefix) = decode_backward(policy, table, targets, &out, &dlogp)?;
    Ok((loss, grads, dprefix))
}

/// Gradient of arw_loss with respect to the logits at one target position:
/// α_t · (softmax(logits) − onehot(y_t)). Exposes the per-position weighting
/// for verification; training uses `arw_grads`.
pub fn arw_logit_grad_at(
    policy: &PolicyParams,
    table: &EmbeddingTable,
    prefix: Option<&Mat>,
    targets: &[TokenId],
    alpha: &[f64],
    position: usize,
) -> Result<Vec<f64>> {
    if alpha.len() != targets.len() {
        return Err(VoxError::DimensionMismatch("alpha length != target length"));
    }
    if position >= targets.len() {
        return Err(VoxError::invalid("position past the end of the targets"));
    }
    let out = decode_forward(policy, table, prefix, targets)?;
    let m = prefix.map_or(0, |p| p.rows());
    let h = out.cache.hfin.row(m + position);
    let mut logits = crate::policy::logits_for_row(policy, table, h);
    crate::linalg::softmax_in_place(&mut logits);
    let a = alpha[position];
    let y = targets[position];
    for (j, p) in logits.iter_mut().enumerate() {
        *p = a * (*p - if j == y { 1.0 } else { 0.0 });
    }
    Ok(logits)
}

pub struct SftStep {
    pub mean_loss: f64,
    /// Norm of the mean bridge gradient before the optimizer update.
    pub grad_norm: f64,
}

/// One bridge-only update on a batch: forward through the bridge, weighted
/// decode, backward into the bridge, Adam step. The decoder and the
/// embedding table are never touched.
pub fn sft_step(
    model: &mut Model,
    batch: &[&SftItem],
    adam: &mut Adam,
) -> Result<SftStep> {
    if batch.is_empty() {
        return Err(VoxError::EmptyInput("sft batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss_sum = 0.0;
    let mut grad_accum = vec![0.0; model.bridge.flat_len()];
    for item in batch {
        let (prefix, cache) = model.prefix(&item.features)?;
        let (loss, _, dprefix) = arw_grads(
            &model.policy,
            &model.table,
            Some(&prefix),
            &item.targets,
            &item.alpha,
        )?;
        loss_sum += loss;
        let bgrads = bridge_backward(&model.bridge, &cache, &dprefix)?;
        for (acc, g) in grad_accum.iter_mut().zip(bgrads.flat()) {
            *acc += scale * g;
        }
    }
    let mean_loss = scale * loss_sum;
    if !mean_loss.is_finite() {
        return Err(VoxError::NonFinite("mean batch loss"));
    }
    let grad_norm = global_norm(&grad_accum);
    let mut flat = model.bridge.flat();
    adam.step(&mut flat, &grad_accum)?;
    model.bridge.set_flat(&flat);
    model.bridge.clamp_temperature();
    Ok(SftStep {
        mean_loss,
        grad_norm,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct SftConfig {
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            lambda: DEFAULT_LAMBDA,
            lr: 1e-3,
            batch_size: 8,
            steps: 2000,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !(self.lr >= 0.0) {
            return Err(VoxError::config("lambda must be positive and lr nonnegative"));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(VoxError::config("batch_size and steps must be positive"));
        }
        Ok(())
    }
}

/// One training-log row, shared by warmup and SFT.
#[derive(Debug, Clone, Copy)]
pub struct LogRow {
    pub step: usize,
    pub mean_loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,mean_loss,grad_norm,lr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:?},{:?},{:?}\n",
            r.step, r.mean_loss, r.grad_norm, r.lr
        ));
    }
    out
}

/// Bridge-only training loop. Batches are drawn with replacement from a
/// per-step stream, so a (seed, step) pair names its batch reproducibly.
pub fn sft_train(
    model: &mut Model,
    items: &[SftItem],
    config: &SftConfig,
    seed: u64,
) -> Result<Vec<LogRow>> {
    config.validate()?;
    if items.is_empty() {
        return Err(VoxError::EmptyInput("sft items"));
    }
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        model.bridge.flat_len(),
    );
    let mut rows = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut rng = derive_rng(seed, &[salt::SFT, step as u64]);
        let batch: Vec<&SftItem> = (0..config.batch_size)
            .map(|_| &items[rng.gen_range(0..items.len())])
            .collect();
        let out = sft_step(model, &batch, &mut adam)?;
        rows.push(LogRow {
            step,
            mean_loss: out.mean_loss,
            grad_norm: out.grad_norm,
            lr: config.lr,
        });
    }
    Ok(rows)
}

/// One warmup item: a token sequence trained under a fixed prefix. The
/// prefix is part of the item because report items use the (frozen,
/// untrained) bridge output while transcript items use prefixes chosen per
/// variant. Positions outside [loss_from, loss_to) are context only:
/// transcript items carry the question prompt before `loss_from`, and the
/// rationale-only variant ends its loss before the answer tag so the answer
/// letter is never trained under a prefix that could predict it.
#[derive(Debug, Clone)]
pub struct WarmupItem {
    pub prefix: Mat,
    pub tokens: Vec<TokenId>,
    pub loss_from: usize,
    pub loss_to: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct WarmupConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            lr: 1e-3,
            batch_size: 8,
            steps: 2000,
        }
    }
}

/// Decoder-only language-model training: uniform cross entropy over each
/// item's tokens. The bridge is not consulted and never changes.
pub fn warmup_train(
    model: &mut Model,
    items: &[WarmupItem],
    config: &WarmupConfig,
    seed: u64,
) -> Result<Vec<LogRow>> {
    if items.is_empty() {
        return Err(VoxError::EmptyInput("warmup items"));
    }
    if config.batch_size == 0 || config.steps == 0 {
        return Err(VoxError::config("batch_size and steps must be positive"));
    }
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        model.policy.flat_len(),
    );
    let mut rows = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut rng = derive_rng(seed, &[salt::WARMUP, step as u64]);
        let mut loss_sum = 0.0;
        let mut grad_accum = vec![0.0; model.policy.flat_len()];
        let scale = 1.0 / config.batch_size as f64;
        for _ in 0..config.batch_size {
            let item = &items[rng.gen_range(0..items.len())];
            let mut alpha = vec![1.0; item.tokens.len()];
            for (t, a) in alpha.iter_mut().enumerate() {
                if t < item.loss_from || t >= item.loss_to {
                    *a = 0.0;
                }
            }
            let (loss, grads, _) = arw_grads(
                &model.policy,
                &model.table,
                Some(&item.prefix),
                &item.tokens,
                &alpha,
            )?;
            loss_sum += loss;
            for (acc, g) in grad_accum.iter_mut().zip(grads.flat()) {
                *acc += scale * g;
            }
        }
        let mean_loss = scale * loss_sum;
        if !mean_loss.is_finite() {
            return Err(VoxError::NonFinite("mean warmup loss"));
        }
        let grad_norm = global_norm(&grad_accum);
        let mut flat = model.policy.flat();
        adam.step(&mut flat, &grad_accum)?;
        model.policy.set_flat(&flat);
        rows.push(LogRow {
            step,
            mean_loss,
            grad_norm,
            lr: config.lr,
        });
    }
    Ok(rows)
}

/// Spread of the random prefix jitter applied to transcript warmup items.
/// Bridge training moves the fused prefix roughly this far from the anchor,
/// so the decoder has to keep producing tagged answers anywhere in that
/// neighborhood, not just at the anchor point itself.
const TRANSCRIPT_JITTER_MAX: f64 = 0.3;

/// How many rotated bridge prefixes each transcript trains under. One copy
/// would pair every prefix with a single fixed letter, and the decoder then
/// memorizes that pairing instead of the rationale; several conflicting
/// pairings leave the rationale as the only signal that predicts the letter.
const TRANSCRIPT_ROTATIONS: usize = 4;

/// Standard warmup corpus. Reports go under the untrained bridge prefix of
/// their own volume (twice, to keep report mass comparable to the expanded
/// transcript set), teaching the decoder to read the bridge. Each VQA
/// transcript (prompt + tagged target + eos) appears under a jittered anchor
/// prefix and under the bridge prefixes of several rotated, deliberately
/// mismatched volumes. Those prefixes carry no signal about the transcript's
/// own volume, so the answer letter stays at chance until RL. The mismatched
/// copies are essential: bridge training later drags the fused prefix deep
/// into the region the decoder associates with report prose, and only
/// transcripts trained under prefixes from that same region keep the tag
/// grammar attached to the question prompt rather than the prefix style.
/// Spreading them over several rotations stops the decoder from keying the
/// answer letter on the identity of any one prefix.
///
/// One additional copy per transcript uses the matched prefix of the item's
/// own volume, with the loss confined to the rationale span between the
/// think tags. That is the only place the decoder is taught to describe what
/// the prefix shows inside a transcript, and it is what gives RL a toehold:
/// without it the mismatched copies train the rationale to ignore the prefix
/// outright. The answer tag and letter sit outside the span, so the matched
/// prefix never teaches the letter and the chance-level start survives.
pub fn prepare_warmup_items(
    model: &Model,
    corpus: &Corpus,
    vqa: &[crate::corpus::MmvqaItem],
    catalog: &crate::corpus::AbnormalityCatalog,
    seed: u64,
) -> Result<Vec<WarmupItem>> {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};
    let mut items = Vec::new();
    let mut volume_prefixes = Vec::with_capacity(corpus.len());
    let mut volume_pos = std::collections::BTreeMap::new();
    for (pos, (volume, report)) in corpus.volumes.iter().zip(&corpus.reports).enumerate() {
        let features = model.features(volume)?;
        let (prefix, _) = model.prefix(&features)?;
        let mut tokens = model.vocab.tokenize(&report.flat_text());
        tokens.push(reserved::EOS);
        let loss_to = tokens.len();
        items.push(WarmupItem {
            prefix: prefix.clone(),
            tokens: tokens.clone(),
            loss_from: 0,
            loss_to,
        });
        items.push(WarmupItem {
            prefix: prefix.clone(),
            tokens,
            loss_from: 0,
            loss_to,
        });
        volume_prefixes.push(prefix);
        volume_pos.insert(volume.id, pos);
    }
    let anchor_prefix = model.anchor_prefix();
    let mut rng = derive_rng(seed, &[salt::WARMUP, u64::from(u32::MAX)]);
    for (idx, item) in vqa.iter().enumerate() {
        let prompt = crate::prompts::think_prompt(item);
        let target = crate::prompts::think_target(item, catalog)?;
        let mut tokens = model.vocab.tokenize(&prompt);
        let loss_from = tokens.len();
        tokens.extend(model.vocab.tokenize(&target));
        tokens.push(reserved::EOS);
        let scale: f64 = rng.gen_range(0.0..TRANSCRIPT_JITTER_MAX);
        let mut jittered = anchor_prefix.clone();
        for i in 0..jittered.rows() {
            for v in jittered.row_mut(i) {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += scale * n;
            }
        }
        items.push(WarmupItem {
            prefix: jittered,
            tokens: tokens.clone(),
            loss_from,
            loss_to: tokens.len(),
        });
        // Rotate away from the item's own volume so the prefix can never
        // encode the answer.
        let pos = volume_pos.get(&item.volume_id).copied().unwrap_or(idx);
        let n = volume_prefixes.len();
        if n > 0 {
            for r in 1..=TRANSCRIPT_ROTATIONS.min(n.saturating_sub(1)).max(1) {
                let mismatched = volume_prefixes[(pos + r) % n].clone();
                items.push(WarmupItem {
                    prefix: mismatched,
                    tokens: tokens.clone(),
                    loss_from,
                    loss_to: tokens.len(),
                });
            }
        }
        // Matched copy, rationale span only: teach "describe the prefix"
        // inside the transcript format without ever training the letter
        // under an informative prefix.
        if let Some(&own) = volume_pos.get(&item.volume_id) {
            let close = tokens[loss_from..]
                .iter()
                .position(|&t| t == reserved::THINK_CLOSE);
            if let Some(rel) = close {
                items.push(WarmupItem {
                    prefix: volume_prefixes[own].clone(),
                    tokens: tokens.clone(),
                    loss_from,
                    loss_to: loss_from + rel + 1,
                });
            }
        }
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::BridgeConfig;
    use crate::corpus::{build_mmvqa, generate_corpus, AbnormalityCatalog, CorpusConfig};
    use crate::model::Model;
    use crate::policy::PolicyConfig;
    use crate::prompts::vocab_corpus;
    use crate::text::Vocab;

    fn small_model(n_volumes: usize, seed: u64) -> (Model, Corpus, AbnormalityCatalog) {
        let catalog = AbnormalityCatalog::standard();
        let config = CorpusConfig {
            n_volumes,
            abnormal_max: 2,
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(&catalog, &config, seed).unwrap();
        let vocab = Vocab::build(&vocab_corpus(&catalog, &corpus)).unwrap();
        let model = Model::init(
            vocab,
            PolicyConfig::default(),
            BridgeConfig::default(),
            seed,
        )
        .unwrap();
        (model, corpus, catalog)
    }

    #[test]
    fn arw_loss_matches_direct_substitution() {
        // Two targets with known log-probs and the second position abnormal:
        // L = 0.5 + 1.1 * 1.0 when logP = (-0.5, -1.0). A handcrafted check
        // is run on the weighted-combination arithmetic itself.
        let logp = [-0.5, -1.0];
        let alpha = [1.0, 1.1];
        let loss: f64 = -logp.iter().zip(alpha).map(|(lp, a)| a * lp).sum::<f64>();
        assert!((loss - 1.6).abs() < 1e-12);

        // And the model-backed path agrees with its own decode log-probs.
        let (model, corpus, _) = small_model(2, 5);
        let items = prepare_sft_items(&model, &corpus, 1.1).unwrap();
        let item = &items[0];
        let (prefix, _) = model.prefix(&item.features).unwrap();
        let loss = arw_loss(
            &model.policy,
            &model.table,
            Some(&prefix),
            &item.targets,
            &item.alpha,
        )
        .unwrap();
        let out = decode_forward(&model.policy, &model.table, Some(&prefix), &item.targets).unwrap();
        let expect: f64 = -out
            .logprobs
            .iter()
            .zip(&item.alpha)
            .map(|(lp, a)| a * lp)
            .sum::<f64>();
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn lambda_one_collapses_to_plain_cross_entropy() {
        let (model, corpus, _) = small_model(2, 7);
        let items = prepare_sft_items(&model, &corpus, 1.0).unwrap();
        let item = &items[0];
        let (prefix, _) = model.prefix(&item.features).unwrap();
        let weighted = arw_loss(
            &model.policy,
            &model.table,
            Some(&prefix),
            &item.targets,
            &item.alpha,
        )
        .unwrap();
        let out = decode_forward(&model.policy, &model.table, Some(&prefix), &item.targets).unwrap();
        let plain: f64 = -out.logprobs.iter().sum::<f64>();
        assert!((weighted - plain).abs() <= 1e-12);
    }

    #[test]
    fn abnormal_logit_grads_scale_exactly_with_lambda() {
        let (model, corpus, _) = small_model(3, 9);
        let lambda = 1.37;
        let weighted = prepare_sft_items(&model, &corpus, lambda).unwrap();
        let unit = prepare_sft_items(&model, &corpus, 1.0).unwrap();
        let mut checked = 0;
        for (w, u) in weighted.iter().zip(&unit) {
            let (prefix, _) = model.prefix(&w.features).unwrap();
            for t in 0..w.targets.len() {
                if w.alpha[t] == 1.0 {
                    continue;
                }
                let gw = arw_logit_grad_at(
                    &model.policy,
                    &model.table,
                    Some(&prefix),
                    &w.targets,
                    &w.alpha,
                    t,
                )
                .unwrap();
                let gu = arw_logit_grad_at(
                    &model.policy,
                    &model.table,
                    Some(&prefix),
                    &u.targets,
                    &u.alpha,
                    t,
                )
                .unwrap();
                for (a, b) in gw.iter().zip(&gu) {
                    assert!((a - lambda * b).abs() <= 1e-10, "{a} vs {}", lambda * b);
                }
                checked += 1;
            }
        }
        assert!(checked > 0, "no abnormal positions found");
    }

    #[test]
    fn loss_strictly_increases_in_lambda_with_abnormal_tokens() {
        let (model, corpus, _) = small_model(2, 11);
        assert!(corpus.reports[0]
            .sentences
            .iter()
            .any(|s| s.kind == crate::corpus::SentenceKind::Abnormal));
        let lambdas = [1.0, 1.1, 1.5, 2.0];
        let mut losses = Vec::new();
        for &l in &lambdas {
            let items = prepare_sft_items(&model, &corpus, l).unwrap();
            let item = &items[0];
            let (prefix, _) = model.prefix(&item.features).unwrap();
            losses.push(
                arw_loss(
                    &model.policy,
                    &model.table,
                    Some(&prefix),
                    &item.targets,
                    &item.alpha,
                )
                .unwrap(),
            );
        }
        for pair in losses.windows(2) {
            assert!(pair[1] > pair[0], "losses not increasing: {losses:?}");
        }
    }

    #[test]
    fn batch_loss_is_mean_of_item_losses() {
        let (mut model, corpus, _) = small_model(3, 13);
        let items = prepare_sft_items(&model, &corpus, 1.1).unwrap();
        let mut expect = 0.0;
        for item in &items {
            let (prefix, _) = model.prefix(&item.features).unwrap();
            expect += arw_loss(
                &model.policy,
                &model.table,
                Some(&prefix),
                &item.targets,
                &item.alpha,
            )
            .unwrap();
        }
        expect /= items.len() as f64;
        let batch: Vec<&SftItem> = items.iter().collect();
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            model.bridge.flat_len(),
        );
        let out = sft_step(&mut model, &batch, &mut adam).unwrap();
        assert!((out.mean_loss - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_step_changes_nothing_and_reports_loss() {
        let (mut model, corpus, _) = small_model(2, 15);
        let items = prepare_sft_items(&model, &corpus, 1.1).unwrap();
        let before = model.bridge.flat();
        let batch: Vec<&SftItem> = items.iter().collect();
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            model.bridge.flat_len(),
        );
        let out = sft_step(&mut model, &batch, &mut adam).unwrap();
        assert!(out.mean_loss.is_finite() && out.mean_loss > 0.0);
        assert_eq!(model.bridge.flat(), before);
    }

    #[test]
    fn sft_touches_only_the_bridge() {
        let (mut model, corpus, _) = small_model(4, 17);
        let items = prepare_sft_items(&model, &corpus, 1.1).unwrap();
        let policy_before = model.policy.flat();
        let table_before = model.table.mat().data().to_vec();
        let bridge_before = model.bridge.flat();
        let config = SftConfig {
            steps: 5,
            batch_size: 2,
            ..SftConfig::default()
        };
        sft_train(&mut model, &items, &config, 17).unwrap();
        assert_eq!(model.policy.flat(), policy_before);
        assert_eq!(model.table.mat().data(), &table_before[..]);
        assert_ne!(model.bridge.flat(), bridge_before);
    }

    #[test]
    fn training_reduces_loss_over_200_steps() {
        let (mut model, corpus, _) = small_model(50, 19);
        let items = prepare_sft_items(&model, &corpus, 1.1).unwrap();
        let config = SftConfig {
            steps: 200,
            batch_size: 8,
            lr: 1e-3,
            lambda: 1.1,
        };
        let rows = sft_train(&mut model, &items, &config, 19).unwrap();
        assert_eq!(rows.len(), 200);
        assert!(
            rows.last().unwrap().mean_loss < rows[0].mean_loss,
            "first {} last {}",
            rows[0].mean_loss,
            rows.last().unwrap().mean_loss
        );
    }

    #[test]
    fn sft_training_is_deterministic() {
        let run = || {
            let (mut model, corpus, _) = small_model(6, 21);
            let items = prepare_sft_items(&model, &corpus, 1.1).unwrap();
            let config = SftConfig {
                steps: 10,
                batch_size: 4,
                ..SftConfig::default()
            };
            let rows = sft_train(&mut model, &items, &config, 21).unwrap();
            (model.bridge.flat(), rows.last().unwrap().mean_loss)
        };
        let (a_params, a_loss) = run();
        let (b_params, b_loss) = run();
        assert_eq!(a_params, b_params);
        assert_eq!(a_loss, b_loss);
    }

    #[test]
    fn warmup_trains_decoder_and_leaves_bridge() {
        let (mut model, corpus, catalog) = small_model(6, 23);
        let vqa = build_mmvqa(&catalog, &corpus, 23).unwrap().items;
        let items = prepare_warmup_items(&model, &corpus, &vqa, &catalog, 23).unwrap();
        // Jittered anchor + rotated mismatches + one matched rationale copy.
        let copies_per_transcript = 1 + TRANSCRIPT_ROTATIONS.min(corpus.len() - 1).max(1) + 1;
        assert_eq!(items.len(), 2 * corpus.len() + copies_per_transcript * vqa.len());
        let matched = items
            .iter()
            .filter(|it| it.loss_to < it.tokens.len())
            .count();
        assert_eq!(matched, vqa.len());
        for it in &items {
            assert!(it.loss_from < it.loss_to);
            // A truncated span must end exactly on the think close tag.
            if it.loss_to < it.tokens.len() {
                assert_eq!(it.tokens[it.loss_to - 1], reserved::THINK_CLOSE);
            }
        }
        let bridge_before = model.bridge.flat();
        let policy_before = model.policy.flat();
        let config = WarmupConfig {
            steps: 8,
            batch_size: 4,
            ..WarmupConfig::default()
        };
        let rows = warmup_train(&mut model, &items, &config, 23).unwrap();
        assert_eq!(rows.len(), 8);
        assert_eq!(model.bridge.flat(), bridge_before);
        assert_ne!(model.policy.flat(), policy_before);
        assert!(rows.iter().all(|r| r.mean_loss.is_finite()));
    }

    #[test]
    fn log_csv_has_header_and_rows() {
        let rows = vec![LogRow {
            step: 0,
            mean_loss: 1.5,
            grad_norm: 0.25,
            lr: 1e-3,
        }];
        let csv = log_to_csv(&rows);
        assert!(csv.starts_with("step,mean_loss,grad_norm,lr\n"));
        assert!(csv.contains("0,1.5,0.25,0.001"));
    }
}
