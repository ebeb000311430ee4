//! Rollout rewards: format compliance, answer accuracy, and a discretized
//! consistency score between the think text and the reference report.
//!
//! A response is well formed iff its tokens match exactly
//! `<think> T </think> <answer> X </answer>` where T contains no tag tokens
//! and X is one of the option letters. A single trailing `<eos>` is stripped
//! before matching so that properly terminated generations are not punished.

use std::collections::BTreeSet;

use crate::corpus::{label_sentences, AbnormalityCatalog, SentenceKind, TEMPLATE_STOPWORDS};
use crate::error::{Result, VoxError};
use crate::text::{reserved, split_text, TokenId, Vocab};

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedResponse {
    pub well_formed: bool,
    pub think_text: Option<String>,
    pub answer_letter: Option<char>,
}

impl ParsedResponse {
    fn malformed() -> ParsedResponse {
        ParsedResponse {
            well_formed: false,
            think_text: None,
            answer_letter: None,
        }
    }
}

/// Grammar check over token ids; extracted text comes from the vocabulary.
pub fn parse_response(vocab: &Vocab, tokens: &[TokenId]) -> ParsedResponse {
    let mut toks = tokens;
    if let Some((&last, rest)) = toks.split_last() {
        if last == reserved::EOS {
            toks = rest;
        }
    }
    // <think> T </think> <answer> X </answer>, nothing else; T may be empty.
    if toks.len() < 5 || toks[0] != reserved::THINK_OPEN {
        return ParsedResponse::malformed();
    }
    let close = match toks.iter().position(|&t| t == reserved::THINK_CLOSE) {
        Some(i) => i,
        None => return ParsedResponse::malformed(),
    };
    let think = &toks[1..close];
    if think.iter().any(|t| reserved::TAGS.contains(t)) {
        return ParsedResponse::malformed();
    }
    let tail = &toks[close + 1..];
    if tail.len() != 3
        || tail[0] != reserved::ANSWER_OPEN
        || tail[2] != reserved::ANSWER_CLOSE
    {
        return ParsedResponse::malformed();
    }
    let letter = match reserved::letter_char(tail[1]) {
        Some(c) => c,
        None => return ParsedResponse::malformed(),
    };
    let think_text = match vocab.detokenize(think) {
        Ok(t) => t,
        Err(_) => return ParsedResponse::malformed(),
    };
    ParsedResponse {
        well_formed: true,
        think_text: Some(think_text),
        answer_letter: Some(letter),
    }
}

pub fn format_reward(parsed: &ParsedResponse) -> f64 {
    if parsed.well_formed {
        1.0
    } else {
        0.0
    }
}

pub fn accuracy_reward(parsed: &ParsedResponse, truth_letter: char) -> Result<f64> {
    if !('A'..='D').contains(&truth_letter) {
        return Err(VoxError::invalid("truth letter must be one of A, B, C, D"));
    }
    Ok(if parsed.well_formed && parsed.answer_letter == Some(truth_letter) {
        1.0
    } else {
        0.0
    })
}

/// Pluggable think-text scorer; must return values in [0,1].
pub trait ConsistencyScorer {
    fn score(&self, think_text: &str, reference_report: &str) -> Result<f64>;
}

/// Default scorer: token-level F1 over unique content tokens (stopwords
/// removed) between the think text and the reference's abnormal sentences.
/// A config flag widens the reference side to the whole report.
pub struct TokenF1Scorer {
    catalog: AbnormalityCatalog,
    pub restrict_to_abnormal: bool,
}

impl TokenF1Scorer {
    pub fn new(catalog: AbnormalityCatalog) -> TokenF1Scorer {
        TokenF1Scorer {
            catalog,
            restrict_to_abnormal: true,
        }
    }
}

fn content_tokens(text: &str) -> BTreeSet<String> {
    split_text(text)
        .into_iter()
        .map(|t| t.to_lowercase())
        .filter(|t| !TEMPLATE_STOPWORDS.contains(&t.as_str()))
        .collect()
}

impl ConsistencyScorer for TokenF1Scorer {
    fn score(&self, think_text: &str, reference_report: &str) -> Result<f64> {
        if reference_report.trim().is_empty() {
            return Err(VoxError::EmptyInput("reference report"));
        }
        let reference = if self.restrict_to_abnormal {
            let labeled = label_sentences(reference_report, &self.catalog)?;
            labeled
                .sentences
                .iter()
                .filter(|s| s.kind == SentenceKind::Abnormal)
                .map(|s| s.text.clone())
                .collect::<Vec<_>>()
                .join(" ")
        } else {
            reference_report.to_string()
        };
        let ref_tokens = content_tokens(&reference);
        let cand_tokens = content_tokens(think_text);
        if ref_tokens.is_empty() || cand_tokens.is_empty() {
            return Ok(0.0);
        }
        let overlap = cand_tokens.intersection(&ref_tokens).count() as f64;
        if overlap == 0.0 {
            return Ok(0.0);
        }
        let precision = overlap / cand_tokens.len() as f64;
        let recall = overlap / ref_tokens.len() as f64;
        Ok(2.0 * precision * recall / (precision + recall))
    }
}

/// Thresholds mapping a raw [0,1] score onto the fixed level set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscretizerSpec {
    pub thresholds: (f64, f64, f64),
}

pub const CONSISTENCY_LEVELS: [f64; 4] = [0.0, 0.5, 0.8, 1.0];

impl Default for DiscretizerSpec {
    fn default() -> Self {
        DiscretizerSpec {
            thresholds: (0.25, 0.6, 0.85),
        }
    }
}

impl DiscretizerSpec {
    pub fn validate(&self) -> Result<()> {
        let (t1, t2, t3) = self.thresholds;
        if !(0.0 < t1 && t1 < t2 && t2 < t3 && t3 < 1.0) {
            return Err(VoxError::invalid("thresholds must satisfy 0 < t1 < t2 < t3 < 1"));
        }
        Ok(())
    }
}

/// Half-open bands: level 0 below t1, then 0.5, 0.8, and 1.0 from t3 up.
pub fn discretize(score: f64, spec: &DiscretizerSpec) -> Result<f64> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&score) {
        return Err(VoxError::invalid("score must lie in [0,1]"));
    }
    let (t1, t2, t3) = spec.thresholds;
    Ok(if score < t1 {
        CONSISTENCY_LEVELS[0]
    } else if score < t2 {
        CONSISTENCY_LEVELS[1]
    } else if score < t3 {
        CONSISTENCY_LEVELS[2]
    } else {
        CONSISTENCY_LEVELS[3]
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBreakdown {
    pub r_fmt: f64,
    pub r_acc: f64,
    /// Raw consistency score before discretization (0 when malformed).
    pub raw_score: f64,
    pub r_con: f64,
    pub total: f64,
}

/// Compose the three rewards. The consistency part is only computed for
/// well-formed responses.
pub fn total_reward(
    parsed: &ParsedResponse,
    truth_letter: char,
    reference_report: &str,
    scorer: &dyn ConsistencyScorer,
    spec: &DiscretizerSpec,
) -> Result<RewardBreakdown> {
    let r_fmt = format_reward(parsed);
    let r_acc = accuracy_reward(parsed, truth_letter)?;
    let (raw_score, r_con) = if parsed.well_formed {
        let think = parsed.think_text.as_deref().unwrap_or("");
        let raw = scorer.score(think, reference_report)?;
        (raw, discretize(raw, spec)?)
    } else {
        (0.0, 0.0)
    };
    Ok(RewardBreakdown {
        r_fmt,
        r_acc,
        raw_score,
        r_con,
        total: r_fmt + r_acc + r_con,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(&["effusion visible in the right pleural space . nodule mass edema".into()])
            .unwrap()
    }

    fn parse(v: &Vocab, text: &str) -> ParsedResponse {
        parse_response(v, &v.tokenize(text))
    }

    #[test]
    fn canonical_response_parses() {
        let v = vocab();
        let p = parse(&v, "<think> effusion visible </think> <answer> B </answer>");
        assert!(p.well_formed);
        assert_eq!(p.think_text.as_deref(), Some("effusion visible"));
        assert_eq!(p.answer_letter, Some('B'));
    }

    #[test]
    fn missing_think_block_is_malformed() {
        let v = vocab();
        assert!(!parse(&v, "<answer> B </answer>").well_formed);
    }

    #[test]
    fn nested_think_tags_are_malformed() {
        let v = vocab();
        assert!(!parse(&v, "<think> <think> effusion </think> </think> <answer> A </answer>").well_formed);
    }

    #[test]
    fn trailing_eos_is_tolerated() {
        let v = vocab();
        let mut ids = v.tokenize("<think> effusion </think> <answer> C </answer>");
        ids.push(reserved::EOS);
        let p = parse_response(&v, &ids);
        assert!(p.well_formed);
        assert_eq!(p.answer_letter, Some('C'));
    }

    #[test]
    fn trailing_tokens_after_answer_are_malformed() {
        let v = vocab();
        assert!(!parse(&v, "<think> effusion </think> <answer> C </answer> effusion").well_formed);
    }

    #[test]
    fn empty_think_is_well_formed() {
        let v = vocab();
        let p = parse(&v, "<think> </think> <answer> D </answer>");
        assert!(p.well_formed);
        assert_eq!(p.think_text.as_deref(), Some(""));
    }

    #[test]
    fn accuracy_gates_on_format() {
        let v = vocab();
        let good = parse(&v, "<think> effusion </think> <answer> B </answer>");
        assert_eq!(accuracy_reward(&good, 'B').unwrap(), 1.0);
        assert_eq!(accuracy_reward(&good, 'C').unwrap(), 0.0);
        let bad = parse(&v, "<answer> B </answer>");
        assert_eq!(accuracy_reward(&bad, 'B').unwrap(), 0.0);
        assert!(accuracy_reward(&good, 'E').is_err());
    }

    #[test]
    fn f1_matches_hand_oracle() {
        let catalog = AbnormalityCatalog::standard();
        let scorer = TokenF1Scorer::new(catalog);
        // think {effusion, lungs}; abnormal reference tokens {effusion, space}
        // wait: compute over the standard templates instead
        let reference = "the right apex is clear . there is effusion in the right pleural space .";
        // abnormal content tokens: {effusion, right, pleural, space}
        let s = scorer.score("effusion pleural", reference).unwrap();
        // precision 2/2, recall 2/4 -> F1 = 2*(1*0.5)/1.5 = 2/3
        assert!((s - 2.0 / 3.0).abs() < 1e-12, "score {s}");
        let perfect = scorer
            .score("there is effusion in the right pleural space .", reference)
            .unwrap();
        assert!((perfect - 1.0).abs() < 1e-12);
        let zero = scorer.score("cardiac silhouette", reference).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn f1_half_overlap_two_by_two() {
        // think = {a, b}, reference tokens = {b, c} -> precision 1/2, recall
        // 1/2, F1 = 1/2. Uses a custom catalog so 'b c' is the abnormal text.
        let catalog = AbnormalityCatalog::from_lexicon(&[("b", &["b"], "zone")]);
        let scorer = TokenF1Scorer::new(catalog);
        let s = scorer.score("a b", "b c .").unwrap();
        assert!((s - 0.5).abs() < 1e-12, "score {s}");
    }

    #[test]
    fn empty_reference_errors() {
        let scorer = TokenF1Scorer::new(AbnormalityCatalog::standard());
        assert!(scorer.score("anything", "  ").is_err());
    }

    #[test]
    fn discretizer_bands_and_edges() {
        let spec = DiscretizerSpec::default();
        assert_eq!(discretize(0.0, &spec).unwrap(), 0.0);
        assert_eq!(discretize(0.24, &spec).unwrap(), 0.0);
        assert_eq!(discretize(0.25, &spec).unwrap(), 0.5);
        assert_eq!(discretize(0.5, &spec).unwrap(), 0.5);
        assert_eq!(discretize(0.6, &spec).unwrap(), 0.8);
        assert_eq!(discretize(0.85, &spec).unwrap(), 1.0);
        assert_eq!(discretize(1.0, &spec).unwrap(), 1.0);
        assert!(discretize(1.5, &spec).is_err());
        assert!(discretize(-0.1, &spec).is_err());
    }

    #[test]
    fn discretizer_is_monotone_and_surjective() {
        let spec = DiscretizerSpec::default();
        let mut last = -1.0;
        let mut seen = BTreeSet::new();
        for i in 0..=100 {
            let s = i as f64 / 100.0;
            let level = discretize(s, &spec).unwrap();
            assert!(level >= last);
            last = level;
            seen.insert((level * 10.0) as i64);
        }
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn invalid_thresholds_rejected() {
        let spec = DiscretizerSpec {
            thresholds: (0.6, 0.25, 0.85),
        };
        assert!(discretize(0.5, &spec).is_err());
    }

    #[test]
    fn total_reward_composes() {
        let v = vocab();
        let catalog = AbnormalityCatalog::standard();
        let scorer = TokenF1Scorer::new(catalog);
        let spec = DiscretizerSpec::default();
        let reference = "the right apex is clear . there is effusion in the right pleural space .";

        let p = parse(&v, "<think> there is effusion in the right pleural space . </think> <answer> B </answer>");
        let b = total_reward(&p, 'B', reference, &scorer, &spec).unwrap();
        assert_eq!((b.r_fmt, b.r_acc, b.r_con, b.total), (1.0, 1.0, 1.0, 3.0));

        let malformed = parse(&v, "no tags at all");
        let b = total_reward(&malformed, 'B', reference, &scorer, &spec).unwrap();
        assert_eq!((b.r_fmt, b.r_acc, b.r_con, b.total), (0.0, 0.0, 0.0, 0.0));

        let wrong = parse(&v, "<think> effusion pleural </think> <answer> C </answer>");
        let b = total_reward(&wrong, 'B', reference, &scorer, &spec).unwrap();
        // raw 2/3 falls in the [0.6, 0.85) band
        assert_eq!((b.r_fmt, b.r_acc, b.r_con, b.total), (1.0, 0.0, 0.8, 1.8));
        assert!((0.0..=3.0).contains(&b.total));
    }
}
