//! Scratch diagnostic: which link is broken between the bridge prefix and
//! the answer letter after SFT and after RL?

use voxling::checkpoint::checkpoint_from_string;
use voxling::config::RunConfig;
use voxling::corpus::{corpus_from_jsonl, label_sentences, mmvqa_from_jsonl, AbnormalityCatalog};
use voxling::error::Result;
use voxling::eval::abnormal_recall;
use voxling::model::Model;
use voxling::policy::{sample_response, Sampler};
use voxling::prompts::think_prompt;
use voxling::rng::derive_rng;
use voxling::text::{text_anchor, EmbeddingTable, Vocab};

fn load(checkpoint: &str) -> Result<Model> {
    let read = |name: &str| std::fs::read_to_string(format!("/tmp/full7/{name}")).unwrap();
    let vocab = Vocab::from_file_string(&read("vocab.txt"))?;
    let table = EmbeddingTable::from_file_string(&read("embeddings.txt"))?;
    let anchor = text_anchor(&table)?;
    let (_, policy, bridge) = checkpoint_from_string(&read(checkpoint))?;
    Ok(Model {
        vocab,
        table,
        anchor,
        policy,
        bridge,
        encoder_seed: 7,
    })
}

fn main() -> Result<()> {
    let config = RunConfig {
        out: "/tmp/full7".to_string(),
        seed: 7,
        ..RunConfig::default()
    };
    let catalog = AbnormalityCatalog::standard();
    let read = |name: &str| std::fs::read_to_string(format!("/tmp/full7/{name}")).unwrap();
    let corpus = corpus_from_jsonl(&catalog, &read("corpus.jsonl"))?;
    let items = mmvqa_from_jsonl(&read("mmvqa.jsonl"))?;

    for ckpt in ["checkpoint_sft.txt", "checkpoint_rl.txt"] {
        if !std::path::Path::new(&format!("/tmp/full7/{ckpt}")).exists() {
            continue;
        }
        let model = load(ckpt)?;
        let mut rng = derive_rng(999, &[1]);

        // Use the LAST 32 items: the holdout is the tail of the shuffled
        // order, but any fixed subset works for a relative comparison.
        let probe: Vec<_> = items.iter().rev().take(32).collect();

        let mut report_recall = 0.0;
        let mut think_recall = 0.0;
        let mut forced_acc = 0usize;
        let mut greedy_acc = 0usize;
        let mut n = 0usize;
        for item in &probe {
            let vpos = corpus
                .volumes
                .iter()
                .position(|v| v.id == item.volume_id)
                .unwrap();
            let volume = &corpus.volumes[vpos];
            let report = &corpus.reports[vpos];
            let features = model.features(volume)?;
            let (prefix, _) = model.prefix(&features)?;
            let labeled = label_sentences(&item.reference_report, &catalog)?;

            // Link 1: report generation from z alone.
            let gen = sample_response(
                &model.policy,
                &model.table,
                Some(&prefix),
                &[],
                config.eval_max_new,
                Sampler::Greedy,
                &mut rng,
            )?;
            let gen_text = model.vocab.detokenize(&gen.tokens)?;
            report_recall += abnormal_recall(&gen_text, report)?;

            // Link 2: greedy think under the true prefix.
            let prompt_toks = model.vocab.tokenize(&think_prompt(item));
            let gen = sample_response(
                &model.policy,
                &model.table,
                Some(&prefix),
                &prompt_toks,
                config.eval_max_new,
                Sampler::Greedy,
                &mut rng,
            )?;
            let think_text = model.vocab.detokenize(&gen.tokens)?;
            think_recall += abnormal_recall(&think_text, report)?;
            let gtext = think_text;

            // Greedy answer letter for reference.
            if let Some(pos) = gtext.find("<answer>") {
                let letter = gtext[pos..]
                    .split_whitespace()
                    .nth(1)
                    .and_then(|w| w.chars().next())
                    .unwrap_or('?');
                if letter.eq_ignore_ascii_case(&item.correct_letter) {
                    greedy_acc += 1;
                }
            }

            // Link 3: forced true think, does the letter follow?
            let rationale = labeled
                .sentences
                .iter()
                .filter(|s| s.kind == voxling::corpus::SentenceKind::Abnormal)
                .map(|s| s.text.clone())
                .collect::<Vec<_>>()
                .join(" ");
            let forced = format!("<think> {rationale} </think> <answer>");
            let mut toks = prompt_toks.clone();
            toks.extend(model.vocab.tokenize(&forced));
            let gen = sample_response(
                &model.policy,
                &model.table,
                Some(&prefix),
                &toks,
                1,
                Sampler::Greedy,
                &mut rng,
            )?;
            let letter_text = model.vocab.detokenize(&gen.tokens)?;
            let letter = letter_text.chars().next().unwrap_or('?');
            if letter.eq_ignore_ascii_case(&item.correct_letter) {
                forced_acc += 1;
            }
            n += 1;
        }
        println!(
            "{ckpt}: report_recall {:.3} think_recall {:.3} forced_letter_acc {}/{} greedy_acc {}/{}",
            report_recall / n as f64,
            think_recall / n as f64,
            forced_acc,
            n,
            greedy_acc,
            n
        );
    }
    Ok(())
}
