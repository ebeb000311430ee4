//! Prompt and target templates shared by warmup, RL rollouts, and evaluation.
//!
//! All templates are plain token text: punctuation is space-separated so the
//! splitter round-trips them, and option letters use the reserved single-token
//! forms. Keeping every template here, in one place, guarantees the rollout,
//! training, and evaluation paths feed the model byte-identical prompts.

use crate::corpus::{label_sentences, template_texts, AbnormalityCatalog, Corpus, MmvqaItem, SentenceKind};
use crate::error::{Result, VoxError};

/// Instruction suffix asking for a rationale before the answer.
pub const THINK_SUFFIX: &str = "think then answer .";

/// Instruction suffix for answer-only mode. The wording is a local
/// convention, not normative; evaluation only relies on it being distinct
/// from the rationale instruction.
pub const DIRECT_SUFFIX: &str = "answer only .";

fn option_block(item: &MmvqaItem) -> String {
    let mut s = String::from("options :");
    for opt in &item.options {
        s.push(' ');
        s.push(opt.letter);
        s.push(' ');
        s.push_str(&opt.text);
    }
    s.push_str(" .");
    s
}

/// Question plus options plus the rationale instruction.
pub fn think_prompt(item: &MmvqaItem) -> String {
    format!("{} {} {}", item.question, option_block(item), THINK_SUFFIX)
}

/// Question plus options plus the answer-only instruction.
pub fn direct_prompt(item: &MmvqaItem) -> String {
    format!("{} {} {}", item.question, option_block(item), DIRECT_SUFFIX)
}

/// Supervised response for a VQA item: the rationale is the reference
/// report's abnormal sentences, the answer is the correct letter.
pub fn think_target(item: &MmvqaItem, catalog: &AbnormalityCatalog) -> Result<String> {
    let labeled = label_sentences(&item.reference_report, catalog)?;
    let rationale = labeled
        .sentences
        .iter()
        .filter(|s| s.kind == SentenceKind::Abnormal)
        .map(|s| s.text.clone())
        .collect::<Vec<_>>()
        .join(" ");
    if rationale.is_empty() {
        return Err(VoxError::invalid(
            "reference report has no abnormal sentences to build a rationale from",
        ));
    }
    Ok(format!(
        "<think> {rationale} </think> <answer> {} </answer>",
        item.correct_letter
    ))
}

/// Seed texts for vocabulary construction: the corpus reports and question,
/// every renderable template sentence, and the instruction scaffolding. A
/// vocabulary built from these tokenizes any prompt or target without <unk>.
pub fn vocab_corpus(catalog: &AbnormalityCatalog, corpus: &Corpus) -> Vec<String> {
    let mut texts = corpus.vocab_texts();
    texts.extend(template_texts(catalog));
    texts.push(format!("options : {THINK_SUFFIX} {DIRECT_SUFFIX}"));
    texts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_mmvqa, generate_corpus, CorpusConfig};
    use crate::text::{reserved, Vocab};

    fn small_setup() -> (AbnormalityCatalog, Corpus, Vec<MmvqaItem>) {
        let catalog = AbnormalityCatalog::standard();
        let config = CorpusConfig {
            n_volumes: 12,
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(&catalog, &config, 11).unwrap();
        let items = build_mmvqa(&catalog, &corpus, 11).unwrap().items;
        (catalog, corpus, items)
    }

    #[test]
    fn prompts_embed_question_and_all_options() {
        let (_, _, items) = small_setup();
        let item = &items[0];
        let p = think_prompt(item);
        assert!(p.starts_with(&item.question));
        for opt in &item.options {
            assert!(p.contains(&format!("{} {}", opt.letter, opt.text)), "{p}");
        }
        assert!(p.ends_with(THINK_SUFFIX));
        assert!(direct_prompt(item).ends_with(DIRECT_SUFFIX));
    }

    #[test]
    fn think_target_wraps_abnormal_sentences_and_letter() {
        let (catalog, _, items) = small_setup();
        let item = &items[0];
        let t = think_target(item, &catalog).unwrap();
        assert!(t.starts_with("<think> "));
        assert!(t.ends_with(&format!("</answer>")));
        assert!(t.contains(&format!("<answer> {} </answer>", item.correct_letter)));
        let labeled = label_sentences(&item.reference_report, &catalog).unwrap();
        for s in labeled.sentences.iter().filter(|s| s.kind == SentenceKind::Abnormal) {
            assert!(t.contains(&s.text), "missing {:?} in {t}", s.text);
        }
    }

    #[test]
    fn vocab_covers_prompts_and_targets_without_unk() {
        let (catalog, corpus, items) = small_setup();
        let vocab = Vocab::build(&vocab_corpus(&catalog, &corpus)).unwrap();
        for item in &items {
            for text in [
                think_prompt(item),
                direct_prompt(item),
                think_target(item, &catalog).unwrap(),
            ] {
                let ids = vocab.tokenize(&text);
                assert!(
                    !ids.contains(&reserved::UNK),
                    "unk inside tokenization of {text:?}"
                );
                assert_eq!(vocab.detokenize(&ids).unwrap(), text);
            }
        }
    }

    #[test]
    fn prompt_letters_use_reserved_tokens() {
        let (catalog, corpus, items) = small_setup();
        let vocab = Vocab::build(&vocab_corpus(&catalog, &corpus)).unwrap();
        let ids = vocab.tokenize(&think_prompt(&items[0]));
        for letter in reserved::LETTERS {
            assert!(ids.contains(&letter));
        }
    }
}
