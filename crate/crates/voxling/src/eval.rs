//! Evaluation harness: multiple-choice accuracy with and without a reasoning
//! instruction, similarity-fallback answer extraction, report-generation
//! metrics, abnormal-token recall, and the paired consistency comparison.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::bridge::bridge_forward;
use crate::corpus::{LabeledReport, McOption, MmvqaItem, SentenceKind, VolumeId, TEMPLATE_STOPWORDS};
use crate::error::{Result, VoxError};
use crate::linalg::Mat;
use crate::model::Model;
use crate::policy::{sample_response, Sampler};
use crate::prompts::{direct_prompt, think_prompt};
use crate::rewards::{parse_response, ConsistencyScorer};
use crate::rng::derive_rng;
use crate::text::{split_text, TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Think,
    NoThink,
}

impl EvalMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalMode::Think => "think",
            EvalMode::NoThink => "no_think",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub n_items: usize,
    pub accuracy: f64,
    pub n_fallback_extractions: usize,
    /// confusion[truth][predicted], letters in A..D order; sums to n_items.
    pub confusion: [[usize; 4]; 4],
}

/// Per-item evaluation record for the optional detail file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalItemRecord {
    pub id: VolumeId,
    pub mode: EvalMode,
    pub parsed_letter: char,
    pub fallback_used: bool,
    pub correct: bool,
}

fn letter_index(c: char) -> usize {
    (c as u8 - b'A') as usize
}

/// Accuracy and confusion accounting, separated from decoding so the
/// bookkeeping is testable against synthetic letter streams.
pub struct EvalAccumulator {
    mode: EvalMode,
    confusion: [[usize; 4]; 4],
    n_items: usize,
    n_correct: usize,
    n_fallback: usize,
}

impl EvalAccumulator {
    pub fn new(mode: EvalMode) -> EvalAccumulator {
        EvalAccumulator {
            mode,
            confusion: [[0; 4]; 4],
            n_items: 0,
            n_correct: 0,
            n_fallback: 0,
        }
    }

    pub fn add(&mut self, truth: char, predicted: char, fallback_used: bool) {
        self.confusion[letter_index(truth)][letter_index(predicted)] += 1;
        self.n_items += 1;
        if truth == predicted {
            self.n_correct += 1;
        }
        if fallback_used {
            self.n_fallback += 1;
        }
    }

    pub fn finish(self) -> EvalReport {
        EvalReport {
            mode: self.mode,
            n_items: self.n_items,
            accuracy: self.n_correct as f64 / self.n_items.max(1) as f64,
            n_fallback_extractions: self.n_fallback,
            confusion: self.confusion,
        }
    }
}

fn token_counts(tokens: &[String]) -> BTreeMap<String, f64> {
    let mut counts = BTreeMap::new();
    for t in tokens {
        *counts.entry(t.to_lowercase()).or_insert(0.0) += 1.0;
    }
    counts
}

fn cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(k, va)| b.get(k).map(|vb| va * vb))
        .sum();
    if dot == 0.0 {
        return 0.0;
    }
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Answer extraction: strict parse first; on failure, the option whose text
/// has the highest bag-of-tokens cosine similarity to the raw output wins,
/// earliest letter on ties. Returns (letter, fallback_used).
pub fn extract_letter(vocab: &Vocab, tokens: &[TokenId], options: &[McOption]) -> Result<(char, bool)> {
    let parsed = parse_response(vocab, tokens);
    if let Some(letter) = parsed.answer_letter {
        return Ok((letter, false));
    }
    let text = vocab.detokenize(tokens)?;
    let out_counts = token_counts(&split_text(&text));
    let mut best_letter = options.first().map_or('A', |o| o.letter);
    let mut best_sim = f64::NEG_INFINITY;
    for opt in options {
        let sim = cosine(&out_counts, &token_counts(&split_text(&opt.text)));
        if sim > best_sim {
            best_sim = sim;
            best_letter = opt.letter;
        }
    }
    Ok((best_letter, true))
}

/// Greedy decoding over the item set in the requested mode.
pub fn eval_mmvqa(
    model: &Model,
    items: &[MmvqaItem],
    features: &BTreeMap<VolumeId, Mat>,
    mode: EvalMode,
    max_new: usize,
) -> Result<(EvalReport, Vec<EvalItemRecord>)> {
    if items.is_empty() {
        return Err(VoxError::EmptyInput("evaluation items"));
    }
    let mut acc = EvalAccumulator::new(mode);
    let mut records = Vec::with_capacity(items.len());
    let mut rng = derive_rng(0, &[]);
    for item in items {
        let feats = features.get(&item.volume_id).ok_or(VoxError::invalid(
            "evaluation item references a volume with no encoded features",
        ))?;
        let (prefix, _) = bridge_forward(feats, &model.anchor, &model.bridge)?;
        let prompt_text = match mode {
            EvalMode::Think => think_prompt(item),
            EvalMode::NoThink => direct_prompt(item),
        };
        let prompt = model.vocab.tokenize(&prompt_text);
        let sampled = sample_response(
            &model.policy,
            &model.table,
            Some(&prefix),
            &prompt,
            max_new,
            Sampler::Greedy,
            &mut rng,
        )?;
        let (letter, fallback_used) = extract_letter(&model.vocab, &sampled.tokens, &item.options)?;
        acc.add(item.correct_letter, letter, fallback_used);
        records.push(EvalItemRecord {
            id: item.volume_id,
            mode,
            parsed_letter: letter,
            fallback_used,
            correct: letter == item.correct_letter,
        });
    }
    Ok((acc.finish(), records))
}

pub fn eval_report_to_csv(report: &EvalReport) -> String {
    let mut out = String::from("mode,n_items,accuracy,n_fallback_extractions");
    for truth in ["a", "b", "c", "d"] {
        for pred in ["a", "b", "c", "d"] {
            out.push_str(&format!(",truth_{truth}_pred_{pred}"));
        }
    }
    out.push('\n');
    out.push_str(&format!(
        "{},{},{:?},{}",
        report.mode.as_str(),
        report.n_items,
        report.accuracy,
        report.n_fallback_extractions
    ));
    for row in &report.confusion {
        for cell in row {
            out.push_str(&format!(",{cell}"));
        }
    }
    out.push('\n');
    out
}

pub fn eval_records_to_csv(records: &[EvalItemRecord]) -> String {
    let mut out = String::from("id,mode,parsed_letter,fallback_used,correct\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.id,
            r.mode.as_str(),
            r.parsed_letter,
            r.fallback_used,
            r.correct
        ));
    }
    out
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], f64> {
    let mut counts: BTreeMap<&[String], f64> = BTreeMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0.0) += 1.0;
        }
    }
    counts
}

/// BLEU-n: geometric mean of modified i-gram precisions for i = 1..n, times
/// the brevity penalty. Any zero precision gives an exact 0.
pub fn bleu_n(candidate: &[String], reference: &[String], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(VoxError::invalid("bleu order must be between 1 and 4"));
    }
    if reference.is_empty() {
        return Err(VoxError::EmptyInput("bleu reference"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let cand = ngram_counts(candidate, order);
        let refs = ngram_counts(reference, order);
        let total: f64 = cand.values().sum();
        if total == 0.0 {
            return Ok(0.0);
        }
        let clipped: f64 = cand
            .iter()
            .map(|(gram, count)| count.min(*refs.get(gram).unwrap_or(&0.0)))
            .sum();
        if clipped == 0.0 {
            return Ok(0.0);
        }
        log_sum += (clipped / total).ln();
    }
    let precision = (log_sum / n as f64).exp();
    let c = candidate.len() as f64;
    let r = reference.len() as f64;
    let brevity = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(precision * brevity)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for x in a {
        let mut prev = 0;
        for (j, y) in b.iter().enumerate() {
            let cur = dp[j + 1];
            dp[j + 1] = if x == y { prev + 1 } else { dp[j + 1].max(dp[j]) };
            prev = cur;
        }
    }
    dp[b.len()]
}

/// ROUGE-L: F-measure of the longest common subsequence.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> Result<f64> {
    if reference.is_empty() {
        return Err(VoxError::EmptyInput("rouge reference"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let recall = lcs / reference.len() as f64;
    let precision = lcs / candidate.len() as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Fraction of the reference's abnormal-sentence content tokens (unique,
/// stopwords removed) that appear anywhere in the generated text.
pub fn abnormal_recall(generated: &str, reference: &LabeledReport) -> Result<f64> {
    let mut wanted: BTreeSet<String> = BTreeSet::new();
    for s in &reference.sentences {
        if s.kind == SentenceKind::Abnormal {
            for tok in split_text(&s.text) {
                let t = tok.to_lowercase();
                if !TEMPLATE_STOPWORDS.contains(&t.as_str()) {
                    wanted.insert(t);
                }
            }
        }
    }
    if wanted.is_empty() {
        return Err(VoxError::invalid(
            "reference report has no abnormal sentences",
        ));
    }
    let have: BTreeSet<String> = split_text(generated)
        .into_iter()
        .map(|t| t.to_lowercase())
        .collect();
    let hit = wanted.iter().filter(|t| have.contains(*t)).count();
    Ok(hit as f64 / wanted.len() as f64)
}

/// Two-sided exact binomial sign test over paired differences; ties drop out.
/// Returns (n_positive, n_negative, p_value); all-tie input gives p = 1.
pub fn paired_sign_test(diffs: &[f64]) -> (usize, usize, f64) {
    let n_pos = diffs.iter().filter(|&&d| d > 0.0).count();
    let n_neg = diffs.iter().filter(|&&d| d < 0.0).count();
    let m = n_pos + n_neg;
    if m == 0 {
        return (0, 0, 1.0);
    }
    let k = n_pos.min(n_neg);
    // P(X <= k) for X ~ Binomial(m, 1/2), doubled and clamped.
    let mut tail = 0.0;
    let mut log_choose = 0.0; // ln C(m, 0)
    for i in 0..=k {
        if i > 0 {
            log_choose += ((m - i + 1) as f64).ln() - (i as f64).ln();
        }
        tail += (log_choose - m as f64 * 2.0_f64.ln()).exp();
    }
    (n_pos, n_neg, (2.0 * tail).min(1.0))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsistencyEffect {
    pub n_items: usize,
    pub mean_with: f64,
    pub mean_without: f64,
    pub mean_difference: f64,
    pub n_positive: usize,
    pub n_negative: usize,
    pub p_value: f64,
}

/// Paired comparison of think-text consistency between two trained models on
/// the same items: greedy think-mode decode, parse, score the rationale
/// against the reference (malformed outputs score 0).
pub fn consistency_effect(
    model_with: &Model,
    model_without: &Model,
    items: &[MmvqaItem],
    features: &BTreeMap<VolumeId, Mat>,
    scorer: &dyn ConsistencyScorer,
    max_new: usize,
) -> Result<ConsistencyEffect> {
    if items.len() < 10 {
        return Err(VoxError::invalid(
            "consistency comparison needs at least 10 items",
        ));
    }
    let mut with_scores = Vec::with_capacity(items.len());
    let mut without_scores = Vec::with_capacity(items.len());
    for item in items {
        for (model, scores) in [
            (model_with, &mut with_scores),
            (model_without, &mut without_scores),
        ] {
            let feats = features.get(&item.volume_id).ok_or(VoxError::invalid(
                "comparison item references a volume with no encoded features",
            ))?;
            let (prefix, _) = bridge_forward(feats, &model.anchor, &model.bridge)?;
            let prompt = model.vocab.tokenize(&think_prompt(item));
            let mut rng = derive_rng(0, &[]);
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
            let score = match parsed.think_text.as_deref() {
                Some(think) => scorer.score(think, &item.reference_report)?,
                None => 0.0,
            };
            scores.push(score);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let diffs: Vec<f64> = with_scores
        .iter()
        .zip(&without_scores)
        .map(|(a, b)| a - b)
        .collect();
    let (n_positive, n_negative, p_value) = paired_sign_test(&diffs);
    Ok(ConsistencyEffect {
        n_items: items.len(),
        mean_with: mean(&with_scores),
        mean_without: mean(&without_scores),
        mean_difference: mean(&diffs),
        n_positive,
        n_negative,
        p_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::BridgeConfig;
    use crate::corpus::{build_mmvqa, generate_corpus, AbnormalityCatalog, CorpusConfig};
    use crate::policy::PolicyConfig;
    use crate::prompts::vocab_corpus;
    use crate::rng::derive_rng;
    use crate::text::Vocab;
    use rand::Rng;

    fn toks(text: &str) -> Vec<String> {
        split_text(text)
    }

    #[test]
    fn bleu_self_match_is_one_and_disjoint_zero() {
        let a = toks("there is effusion in the right pleural space");
        assert!((bleu_n(&a, &a, 4).unwrap() - 1.0).abs() < 1e-12);
        let b = toks("cardiac silhouette looks enlarged today");
        assert_eq!(bleu_n(&b, &a, 4).unwrap(), 0.0);
        assert!(bleu_n(&a, &[], 4).is_err());
        assert!(bleu_n(&a, &a, 5).is_err());
        assert_eq!(bleu_n(&[], &a, 2).unwrap(), 0.0);
    }

    #[test]
    fn bleu_applies_brevity_penalty() {
        let cand = toks("a");
        let reference = toks("a b");
        let got = bleu_n(&cand, &reference, 1).unwrap();
        assert!((got - (-1.0f64).exp()).abs() < 1e-12, "{got}");
    }

    #[test]
    fn bleu_clips_repeated_ngrams() {
        // candidate "a a a" vs reference "a": clipped count 1 of 3.
        let cand = toks("a a a");
        let reference = toks("a");
        let got = bleu_n(&cand, &reference, 1).unwrap();
        assert!((got - 1.0 / 3.0).abs() < 1e-12, "{got}");
    }

    #[test]
    fn rouge_matches_hand_lcs() {
        let a = toks("a b c");
        let b = toks("a c b");
        let got = rouge_l(&a, &b).unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-12, "{got}");
        assert!((rouge_l(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(rouge_l(&toks("x y"), &a).unwrap(), 0.0);
        assert!(rouge_l(&a, &[]).is_err());
    }

    #[test]
    fn abnormal_recall_counts_content_tokens() {
        let catalog = AbnormalityCatalog::standard();
        let text = "the right apex is clear . there is effusion in the right pleural space .";
        let labeled = crate::corpus::label_sentences(text, &catalog).unwrap();
        // abnormal content tokens: effusion, right, pleural, space
        assert!((abnormal_recall(text, &labeled).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(abnormal_recall("nothing relevant here", &labeled).unwrap(), 0.0);
        let half = abnormal_recall("effusion pleural", &labeled).unwrap();
        assert!((half - 0.5).abs() < 1e-12);
        let normal_only = crate::corpus::label_sentences("the right apex is clear .", &catalog).unwrap();
        assert!(abnormal_recall("anything", &normal_only).is_err());
    }

    #[test]
    fn sign_test_handles_ties_and_extremes() {
        let (p, n, pv) = paired_sign_test(&[0.0, 0.0]);
        assert_eq!((p, n), (0, 0));
        assert_eq!(pv, 1.0);
        let (p, n, pv) = paired_sign_test(&[1.0; 12]);
        assert_eq!((p, n), (12, 0));
        assert!((pv - 2.0 / 4096.0).abs() < 1e-12);
        let (_, _, pv) = paired_sign_test(&[1.0, -1.0, 1.0, -1.0]);
        assert!(pv > 0.9);
    }

    fn eval_setup(seed: u64) -> (Model, Vec<MmvqaItem>, BTreeMap<VolumeId, Mat>) {
        let catalog = AbnormalityCatalog::standard();
        let config = CorpusConfig {
            n_volumes: 12,
            abnormal_max: 2,
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(&catalog, &config, seed).unwrap();
        let vocab = Vocab::build(&vocab_corpus(&catalog, &corpus)).unwrap();
        let model = Model::init(
            vocab,
            PolicyConfig {
                dim: 16,
                ff: 32,
                prefix_len: 4,
                ..PolicyConfig::default()
            },
            BridgeConfig {
                dim: 16,
                hidden: 8,
                slots: 4,
                ..BridgeConfig::default()
            },
            seed,
        )
        .unwrap();
        let items = build_mmvqa(&catalog, &corpus, seed).unwrap().items;
        let features = model.feature_map(&corpus.volumes).unwrap();
        (model, items, features)
    }

    #[test]
    fn extraction_prefers_strict_parse() {
        let (model, items, _) = eval_setup(45);
        let item = &items[0];
        let good = model
            .vocab
            .tokenize("<think> something </think> <answer> C </answer>");
        let (letter, fallback) = extract_letter(&model.vocab, &good, &item.options).unwrap();
        assert_eq!(letter, 'C');
        assert!(!fallback);
    }

    #[test]
    fn fallback_recovers_verbatim_option_phrase() {
        let (model, items, _) = eval_setup(47);
        let item = &items[0];
        let target = item
            .options
            .iter()
            .find(|o| o.letter == item.correct_letter)
            .unwrap();
        let malformed = model
            .vocab
            .tokenize(&format!("the scan clearly shows {}", target.text));
        let (letter, fallback) = extract_letter(&model.vocab, &malformed, &item.options).unwrap();
        assert_eq!(letter, item.correct_letter);
        assert!(fallback);
    }

    #[test]
    fn fallback_breaks_ties_by_earliest_letter() {
        let (model, items, _) = eval_setup(49);
        let item = &items[0];
        // No option token appears: all similarities are zero.
        let tokens = model.vocab.tokenize("scan scan scan");
        let (letter, fallback) = extract_letter(&model.vocab, &tokens, &item.options).unwrap();
        assert_eq!(letter, 'A');
        assert!(fallback);
    }

    #[test]
    fn accumulator_matches_uniform_monte_carlo() {
        let mut acc = EvalAccumulator::new(EvalMode::Think);
        let mut rng = derive_rng(51, &[]);
        let letters = ['A', 'B', 'C', 'D'];
        let n = 10_000;
        for _ in 0..n {
            let truth = letters[rng.gen_range(0..4)];
            let pred = letters[rng.gen_range(0..4)];
            acc.add(truth, pred, false);
        }
        let report = acc.finish();
        assert_eq!(report.n_items, n);
        assert!((report.accuracy - 0.25).abs() < 0.02, "{}", report.accuracy);
        let total: usize = report.confusion.iter().flatten().sum();
        assert_eq!(total, n);
    }

    #[test]
    fn eval_mmvqa_is_deterministic_and_accounts_every_item() {
        let (model, items, features) = eval_setup(53);
        let (r1, recs1) = eval_mmvqa(&model, &items, &features, EvalMode::Think, 12).unwrap();
        let (r2, _) = eval_mmvqa(&model, &items, &features, EvalMode::Think, 12).unwrap();
        assert_eq!(r1.accuracy, r2.accuracy);
        assert_eq!(r1.confusion, r2.confusion);
        assert_eq!(r1.n_items, items.len());
        assert_eq!(recs1.len(), items.len());
        let total: usize = r1.confusion.iter().flatten().sum();
        assert_eq!(total, r1.n_items);
        let (r3, _) = eval_mmvqa(&model, &items, &features, EvalMode::NoThink, 12).unwrap();
        assert_eq!(r3.mode, EvalMode::NoThink);
        let csv = eval_report_to_csv(&r1);
        assert!(csv.starts_with("mode,n_items,accuracy,n_fallback_extractions,truth_a_pred_a"));
        let csv2 = eval_records_to_csv(&recs1);
        assert!(csv2.starts_with("id,mode,parsed_letter,fallback_used,correct\n"));
    }

    #[test]
    fn consistency_effect_is_zero_for_identical_models() {
        let (model, items, features) = eval_setup(55);
        if items.len() < 10 {
            // The comparison needs ten usable questions.
            panic!("setup produced too few items: {}", items.len());
        }
        let scorer = crate::rewards::TokenF1Scorer::new(AbnormalityCatalog::standard());
        let effect =
            consistency_effect(&model, &model, &items[..10], &features, &scorer, 12).unwrap();
        assert_eq!(effect.mean_difference, 0.0);
        assert_eq!(effect.p_value, 1.0);
        assert!(
            consistency_effect(&model, &model, &items[..4.min(items.len())], &features, &scorer, 12)
                .is_err()
        );
    }
}
