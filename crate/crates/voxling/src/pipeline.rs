//! The six pipeline commands behind the command-line binary: corpus
//! generation, corpus analysis, the two training stages, evaluation, and the
//! gradient self-check. Each command reads its inputs from the output
//! directory, writes its artifacts there, and finishes with a manifest that
//! lists every written file with a content hash. Nothing here depends on wall
//! clock or machine identity, so a repeated command with the same config and
//! seed reproduces its files byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridge::{bridge_backward, bridge_forward, BridgeParams};
use crate::checkpoint::{checkpoint_from_string, checkpoint_to_string, CheckpointMeta};
use crate::config::RunConfig;
use crate::corpus::{
    build_mmvqa, corpus_from_jsonl, corpus_to_jsonl, generate_corpus, mmvqa_from_jsonl,
    mmvqa_to_jsonl, position_density, AbnormalityCatalog, Corpus, MmvqaItem, SentenceKind,
    VolumeId,
};
use crate::error::{Result, VoxError};
use crate::eval::{eval_mmvqa, eval_records_to_csv, eval_report_to_csv, EvalMode};
use crate::grpo::{metrics_to_csv, rl_train, rollout_group, score_group, RlConfig};
use crate::linalg::Mat;
use crate::model::Model;
use crate::optim::{grad_check, GradCheckReport};
use crate::policy::PolicyParams;
use crate::rewards::TokenF1Scorer;
use crate::rng::{derive_rng, salt};
use crate::sft::{
    arw_grads, arw_loss, log_to_csv, prepare_sft_items, prepare_warmup_items, sft_train,
    warmup_train,
};
use crate::text::{text_anchor, EmbeddingTable, Vocab};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// What a command leaves behind besides its artifacts: the seed and config
/// it ran under and a hash per written file.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub files: BTreeMap<String, String>,
}

/// Output directory handle that records a hash for everything written
/// through it, so the closing manifest is complete by construction.
pub struct RunDir {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<RunDir> {
        fs::create_dir_all(root)?;
        Ok(RunDir {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.root.join(name), contents)?;
        self.files.insert(name.to_string(), sha256_hex(contents.as_bytes()));
        Ok(())
    }

    /// Write the resolved config echo and the manifest, consuming the handle.
    /// The manifest lists every file written through this handle; it cannot
    /// contain its own hash, so it lists all the others.
    pub fn finish(mut self, command: &str, config: &RunConfig) -> Result<Manifest> {
        let echo = config.to_file_string();
        self.write("config_resolved.txt", &echo)?;
        let manifest = Manifest {
            command: command.to_string(),
            seed: config.seed,
            config_sha256: sha256_hex(echo.as_bytes()),
            files: self.files,
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| VoxError::Parse(e.to_string()))?;
        fs::write(self.root.join(format!("manifest_{command}.json")), json)?;
        Ok(manifest)
    }
}

fn read_required(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(VoxError::MissingFile(path.display().to_string()));
    }
    Ok(fs::read_to_string(path)?)
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = read_required(path)?;
    serde_json::from_str(&text).map_err(|e| VoxError::Parse(format!("{}: {e}", path.display())))
}

/// Train/holdout partition of volume ids. Both sides keep the shuffled
/// order, so "the first n of train" is a well-defined subsample.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<VolumeId>,
    pub holdout: Vec<VolumeId>,
}

pub fn split_volumes(n_volumes: usize, holdout_fraction: f64, seed: u64) -> Result<Split> {
    if n_volumes < 2 {
        return Err(VoxError::invalid("need at least 2 volumes to split"));
    }
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(VoxError::invalid("holdout fraction must lie in (0,1)"));
    }
    let mut ids: Vec<VolumeId> = (0..n_volumes).collect();
    let mut rng = derive_rng(seed, &[salt::SPLIT]);
    ids.shuffle(&mut rng);
    let n_holdout = ((n_volumes as f64 * holdout_fraction).round() as usize).clamp(1, n_volumes - 1);
    let holdout = ids.split_off(n_volumes - n_holdout);
    Ok(Split { train: ids, holdout })
}

fn filter_corpus(corpus: &Corpus, keep: &BTreeSet<VolumeId>) -> Corpus {
    let mut volumes = Vec::new();
    let mut reports = Vec::new();
    for (v, r) in corpus.volumes.iter().zip(&corpus.reports) {
        if keep.contains(&v.id) {
            volumes.push(v.clone());
            reports.push(r.clone());
        }
    }
    Corpus { volumes, reports }
}

fn filter_items(items: &[MmvqaItem], keep: &BTreeSet<VolumeId>) -> Vec<MmvqaItem> {
    items.iter().filter(|i| keep.contains(&i.volume_id)).cloned().collect()
}

/// Everything the training and evaluation commands reload from a `gen` run.
struct GenArtifacts {
    catalog: AbnormalityCatalog,
    corpus: Corpus,
    items: Vec<MmvqaItem>,
    vocab: Vocab,
    table: EmbeddingTable,
    /// Seed `gen` ran under; the frozen encoder stream is part of the
    /// dataset's identity, so later stages reuse it even if their own seed
    /// differs.
    data_seed: u64,
}

fn load_gen_artifacts(config: &RunConfig) -> Result<GenArtifacts> {
    let out = Path::new(&config.out);
    let catalog = AbnormalityCatalog::standard();
    let corpus = corpus_from_jsonl(&catalog, &read_required(&out.join("corpus.jsonl"))?)?;
    let items = mmvqa_from_jsonl(&read_required(&out.join("mmvqa.jsonl"))?)?;
    let vocab = Vocab::from_file_string(&read_required(&out.join("vocab.txt"))?)?;
    let table = EmbeddingTable::from_file_string(&read_required(&out.join("embeddings.txt"))?)?;
    let gen_manifest = read_manifest(&out.join("manifest_gen.json"))?;
    if table.dim() != config.dim {
        return Err(VoxError::config(
            "model dim disagrees with the stored embedding table; regenerate or fix the config",
        ));
    }
    Ok(GenArtifacts {
        catalog,
        corpus,
        items,
        vocab,
        table,
        data_seed: gen_manifest.seed,
    })
}

fn assemble_model(
    gen: &GenArtifacts,
    policy: PolicyParams,
    bridge: BridgeParams,
) -> Result<Model> {
    if policy.config.dim != bridge.config.dim || policy.config.prefix_len != bridge.config.slots {
        return Err(VoxError::DimensionMismatch("policy and bridge shapes disagree"));
    }
    Ok(Model {
        anchor: text_anchor(&gen.table)?,
        vocab: gen.vocab.clone(),
        table: gen.table.clone(),
        policy,
        bridge,
        encoder_seed: gen.data_seed,
    })
}

fn load_checkpoint_model(gen: &GenArtifacts, path: &Path, config: &RunConfig) -> Result<Model> {
    let (_, policy, bridge) = checkpoint_from_string(&read_required(path)?)?;
    if policy.config != config.policy_config() || bridge.config != config.bridge_config() {
        return Err(VoxError::config(format!(
            "checkpoint {} was trained with a different model shape than the config requests",
            path.display()
        )));
    }
    assemble_model(gen, policy, bridge)
}

#[derive(Debug)]
pub struct GenSummary {
    pub n_volumes: usize,
    pub n_items: usize,
    pub n_skipped: usize,
    pub vocab_size: usize,
}

/// Generate the corpus, the question set, the vocabulary, and the frozen
/// embedding table.
pub fn cmd_gen(config: &RunConfig) -> Result<GenSummary> {
    let catalog = AbnormalityCatalog::standard();
    config.validate(&catalog)?;
    let corpus = generate_corpus(&catalog, &config.corpus_config(), config.seed)?;
    let build = build_mmvqa(&catalog, &corpus, config.seed)?;
    let vocab = Vocab::build(&crate::prompts::vocab_corpus(&catalog, &corpus))?;
    let table = EmbeddingTable::init(vocab.size(), config.dim, config.seed);

    let mut dir = RunDir::create(Path::new(&config.out))?;
    dir.write("corpus.jsonl", &corpus_to_jsonl(&catalog, &corpus)?)?;
    dir.write("mmvqa.jsonl", &mmvqa_to_jsonl(&build.items)?)?;
    dir.write("vocab.txt", &vocab.to_file_string())?;
    dir.write("embeddings.txt", &table.to_file_string())?;
    dir.finish("gen", config)?;
    Ok(GenSummary {
        n_volumes: corpus.len(),
        n_items: build.items.len(),
        n_skipped: build.skipped.len(),
        vocab_size: vocab.size(),
    })
}

#[derive(Debug)]
pub struct AnalyzeSummary {
    /// Human-readable composition table, also written to composition.txt.
    pub table: String,
    pub normal_leads: bool,
}

/// Positional and compositional statistics of a generated corpus.
pub fn cmd_analyze(config: &RunConfig) -> Result<AnalyzeSummary> {
    let out = Path::new(&config.out);
    let catalog = AbnormalityCatalog::standard();
    let corpus = corpus_from_jsonl(&catalog, &read_required(&out.join("corpus.jsonl"))?)?;
    let items = mmvqa_from_jsonl(&read_required(&out.join("mmvqa.jsonl"))?)?;
    let density = position_density(&corpus.reports, 10)?;

    let n_normal: usize = corpus.reports.iter().map(|r| r.count(SentenceKind::Normal)).sum();
    let n_abnormal: usize = corpus.reports.iter().map(|r| r.count(SentenceKind::Abnormal)).sum();
    let ratio = n_normal as f64 / n_abnormal.max(1) as f64;
    let normal_leads = density.normal_mean_pos < density.abnormal_mean_pos;
    let mut table = String::new();
    table.push_str(&format!("reports                 {}\n", corpus.len()));
    table.push_str(&format!("question items          {}\n", items.len()));
    table.push_str(&format!("normal sentences        {n_normal}\n"));
    table.push_str(&format!("abnormal sentences      {n_abnormal}\n"));
    table.push_str(&format!("normal per abnormal     {ratio:.3}\n"));
    table.push_str(&format!(
        "normal mean position    {:.3}\n",
        density.normal_mean_pos
    ));
    table.push_str(&format!(
        "abnormal mean position  {:.3}\n",
        density.abnormal_mean_pos
    ));
    table.push_str(&format!(
        "normal sentences lead   {}\n",
        if normal_leads { "yes" } else { "no" }
    ));

    let mut dir = RunDir::create(out)?;
    dir.write("density.csv", &density.to_csv())?;
    dir.write("composition.txt", &table)?;
    dir.finish("analyze", config)?;
    Ok(AnalyzeSummary { table, normal_leads })
}

#[derive(Debug)]
pub struct SftSummary {
    pub warmup_final_loss: f64,
    pub sft_final_loss: f64,
    pub n_train_volumes: usize,
}

/// Stage 1: decoder warmup followed by bridge training on the train split.
pub fn cmd_sft(config: &RunConfig) -> Result<SftSummary> {
    let catalog = AbnormalityCatalog::standard();
    config.validate(&catalog)?;
    let gen = load_gen_artifacts(config)?;
    let split = split_volumes(gen.corpus.len(), config.holdout_fraction, gen.data_seed)?;
    let train_set: BTreeSet<VolumeId> = split.train.iter().copied().collect();
    let train_corpus = filter_corpus(&gen.corpus, &train_set);
    let train_items = filter_items(&gen.items, &train_set);

    let mut model = assemble_model(
        &gen,
        PolicyParams::init(config.policy_config(), config.seed),
        BridgeParams::init(config.bridge_config(), config.seed),
    )?;

    let warmup_items =
        prepare_warmup_items(&model, &train_corpus, &train_items, &gen.catalog, config.seed)?;
    let warmup_rows = warmup_train(&mut model, &warmup_items, &config.warmup_config(), config.seed)?;
    let sft_items = prepare_sft_items(&model, &train_corpus, config.sft_lambda)?;
    let sft_rows = sft_train(&mut model, &sft_items, &config.sft_config(), config.seed)?;

    let meta = CheckpointMeta { stage: "sft".to_string(), seed: config.seed };
    let mut dir = RunDir::create(Path::new(&config.out))?;
    dir.write("warmup_log.csv", &log_to_csv(&warmup_rows))?;
    dir.write("sft_log.csv", &log_to_csv(&sft_rows))?;
    dir.write(
        "checkpoint_sft.txt",
        &checkpoint_to_string(&meta, &model.policy, &model.bridge),
    )?;
    dir.finish("sft", config)?;
    Ok(SftSummary {
        warmup_final_loss: warmup_rows.last().map_or(f64::NAN, |r| r.mean_loss),
        sft_final_loss: sft_rows.last().map_or(f64::NAN, |r| r.mean_loss),
        n_train_volumes: train_corpus.len(),
    })
}

#[derive(Debug)]
pub struct RlSummary {
    pub final_mean_reward: f64,
    pub final_probe_accuracy: f64,
    pub n_train_items: usize,
}

/// Stage 2: GRPO from the stage-1 checkpoint on a fraction of the train
/// split, probing on held-out questions.
pub fn cmd_rl(config: &RunConfig) -> Result<RlSummary> {
    let catalog = AbnormalityCatalog::standard();
    config.validate(&catalog)?;
    let gen = load_gen_artifacts(config)?;
    let out = Path::new(&config.out);
    let mut model = load_checkpoint_model(&gen, &out.join("checkpoint_sft.txt"), config)?;

    let split = split_volumes(gen.corpus.len(), config.holdout_fraction, gen.data_seed)?;
    let n_rl = ((split.train.len() as f64 * config.rl_data_fraction).ceil() as usize)
        .clamp(1, split.train.len());
    let rl_set: BTreeSet<VolumeId> = split.train[..n_rl].iter().copied().collect();
    let holdout_set: BTreeSet<VolumeId> = split.holdout.iter().copied().collect();
    let train_items = filter_items(&gen.items, &rl_set);
    let probe_items = filter_items(&gen.items, &holdout_set);
    let features = model.feature_map(&gen.corpus.volumes)?;
    let mut scorer = TokenF1Scorer::new(gen.catalog.clone());
    scorer.restrict_to_abnormal = config.restrict_to_abnormal;

    let run = rl_train(
        &mut model,
        &train_items,
        &probe_items,
        &features,
        &scorer,
        &config.discretizer_spec(),
        &config.rl_config(),
        config.seed,
    )?;

    let meta = CheckpointMeta { stage: "rl".to_string(), seed: config.seed };
    let mut dir = RunDir::create(out)?;
    dir.write("rl_metrics.csv", &metrics_to_csv(&run.metrics))?;
    let mut audit = String::new();
    for record in &run.audit {
        audit.push_str(&serde_json::to_string(record).map_err(|e| VoxError::Parse(e.to_string()))?);
        audit.push('\n');
    }
    dir.write("reward_audit.jsonl", &audit)?;
    if config.rl_log_transcripts {
        let mut lines = String::new();
        for record in &run.transcripts {
            lines.push_str(
                &serde_json::to_string(record).map_err(|e| VoxError::Parse(e.to_string()))?,
            );
            lines.push('\n');
        }
        dir.write("transcripts.jsonl", &lines)?;
    }
    dir.write(
        "checkpoint_rl.txt",
        &checkpoint_to_string(&meta, &model.policy, &model.bridge),
    )?;
    dir.finish("rl", config)?;
    Ok(RlSummary {
        final_mean_reward: run.metrics.last().map_or(f64::NAN, |r| r.mean_reward),
        final_probe_accuracy: run.metrics.last().map_or(f64::NAN, |r| r.probe_accuracy),
        n_train_items: train_items.len(),
    })
}

#[derive(Debug)]
pub struct EvalSummary {
    pub checkpoint: String,
    pub n_items: usize,
    pub think_accuracy: Option<f64>,
    pub no_think_accuracy: Option<f64>,
}

/// Held-out evaluation of a trained checkpoint in one or both answer modes.
pub fn cmd_eval(config: &RunConfig) -> Result<EvalSummary> {
    let catalog = AbnormalityCatalog::standard();
    config.validate(&catalog)?;
    let gen = load_gen_artifacts(config)?;
    let out = Path::new(&config.out);
    let checkpoint_path = match config.eval_checkpoint.as_str() {
        "sft" => out.join("checkpoint_sft.txt"),
        "rl" => out.join("checkpoint_rl.txt"),
        // auto: prefer the stage-2 checkpoint, fall back to stage 1
        _ => {
            let rl = out.join("checkpoint_rl.txt");
            if rl.exists() {
                rl
            } else {
                out.join("checkpoint_sft.txt")
            }
        }
    };
    let model = load_checkpoint_model(&gen, &checkpoint_path, config)?;

    let split = split_volumes(gen.corpus.len(), config.holdout_fraction, gen.data_seed)?;
    let holdout_set: BTreeSet<VolumeId> = split.holdout.iter().copied().collect();
    let eval_items = filter_items(&gen.items, &holdout_set);
    let holdout_volumes: Vec<_> = gen
        .corpus
        .volumes
        .iter()
        .filter(|v| holdout_set.contains(&v.id))
        .cloned()
        .collect();
    let features = model.feature_map(&holdout_volumes)?;

    let modes: Vec<EvalMode> = match config.eval_mode.as_str() {
        "think" => vec![EvalMode::Think],
        "no_think" => vec![EvalMode::NoThink],
        _ => vec![EvalMode::Think, EvalMode::NoThink],
    };
    let mut dir = RunDir::create(out)?;
    let mut think_accuracy = None;
    let mut no_think_accuracy = None;
    for mode in modes {
        let (report, records) = eval_mmvqa(&model, &eval_items, &features, mode, config.eval_max_new)?;
        dir.write(
            &format!("eval_report_{}.csv", mode.as_str()),
            &eval_report_to_csv(&report),
        )?;
        if config.per_item_records {
            dir.write(
                &format!("eval_records_{}.csv", mode.as_str()),
                &eval_records_to_csv(&records),
            )?;
        }
        match mode {
            EvalMode::Think => think_accuracy = Some(report.accuracy),
            EvalMode::NoThink => no_think_accuracy = Some(report.accuracy),
        }
    }
    dir.finish("eval", config)?;
    Ok(EvalSummary {
        checkpoint: checkpoint_path.display().to_string(),
        n_items: eval_items.len(),
        think_accuracy,
        no_think_accuracy,
    })
}

pub struct GradcheckLine {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub tolerance: f64,
    pub pass: bool,
}

pub struct GradcheckSummary {
    pub table: String,
    pub all_pass: bool,
}

const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_STEP: f64 = 1e-5;
const GRADCHECK_PROBES: usize = 100;

/// A well-conditioned stand-in for the model inputs that the weighted
/// cross-entropy checks run on. Token embeddings get a per-dimension common
/// drift bounded away from zero: a shift shared by every vocabulary row
/// cancels exactly in the softmax, so it leaves the loss surface unchanged
/// while giving the anchor (the table mean) the same magnitude as the visual
/// features. Without it the anchor-side gate weights carry gradients too
/// small for central differences at h=1e-5 to resolve.
struct ArwFixture {
    table: EmbeddingTable,
    anchor: crate::text::TextAnchor,
    x: Mat,
    targets: Vec<usize>,
    alpha: Vec<f64>,
}

fn arw_fixture(dim: usize, lambda: f64, seed: u64) -> Result<ArwFixture> {
    use rand::Rng;
    use rand_distr::{Distribution, Normal};
    let vocab_size = 48;
    let n_patches = 6;
    let n_targets = 8;
    let mut rng = derive_rng(seed, &[salt::GRADCHECK, 10]);
    let jitter = Normal::new(0.0, 0.02).expect("valid");
    let drift: Vec<f64> = (0..dim)
        .map(|_| {
            let magnitude: f64 = rng.gen_range(0.1..0.3);
            if rng.gen_bool(0.5) { magnitude } else { -magnitude }
        })
        .collect();
    let mut table_mat = Mat::zeros(vocab_size, dim);
    for i in 0..vocab_size {
        for j in 0..dim {
            table_mat.row_mut(i)[j] = drift[j] + jitter.sample(&mut rng);
        }
    }
    let table = EmbeddingTable::from_mat(table_mat);
    let anchor = text_anchor(&table)?;
    let mut xr = derive_rng(seed, &[salt::GRADCHECK, 11]);
    let x = Mat::from_fn(n_patches, dim, |_, _| xr.gen_range(-1.0..1.0));
    let mut tr = derive_rng(seed, &[salt::GRADCHECK, 12]);
    let targets: Vec<usize> = (0..n_targets).map(|_| tr.gen_range(0..vocab_size)).collect();
    let alpha: Vec<f64> = (0..n_targets)
        .map(|t| if t % 3 == 2 { lambda } else { 1.0 })
        .collect();
    Ok(ArwFixture { table, anchor, x, targets, alpha })
}

/// Finite-difference verification of the three analytic gradients that
/// training relies on: the weighted cross entropy through the bridge, the
/// same loss through the decoder, and the full RL objective through both.
/// Runs at the configured model shape on small self-generated fixtures.
pub fn cmd_gradcheck(config: &RunConfig) -> Result<GradcheckSummary> {
    let catalog = AbnormalityCatalog::standard();
    config.validate(&catalog)?;
    let seed = config.seed;
    let policy = PolicyParams::init(config.policy_config(), seed);
    let bridge = BridgeParams::init(config.bridge_config(), seed);
    let fx = arw_fixture(config.dim, config.sft_lambda, seed)?;

    let mut lines = Vec::new();

    // Loss as a function of the bridge, decoder held fixed.
    {
        let (prefix, cache) = bridge_forward(&fx.x, &fx.anchor, &bridge)?;
        let (_, _, dprefix) =
            arw_grads(&policy, &fx.table, Some(&prefix), &fx.targets, &fx.alpha)?;
        let analytic = bridge_backward(&bridge, &cache, &dprefix)?.flat();
        let f = |flat: &[f64]| -> Result<f64> {
            let mut b = BridgeParams::zeros(bridge.config);
            b.set_flat(flat);
            let (prefix, _) = bridge_forward(&fx.x, &fx.anchor, &b)?;
            arw_loss(&policy, &fx.table, Some(&prefix), &fx.targets, &fx.alpha)
        };
        let mut rng = derive_rng(seed, &[salt::GRADCHECK, 0]);
        let report = grad_check(
            f,
            &bridge.flat(),
            &analytic,
            GRADCHECK_STEP,
            GRADCHECK_PROBES,
            &mut rng,
        )?;
        lines.push(line("weighted-ce-bridge", report));
    }

    // Loss as a function of the decoder, bridge held fixed.
    {
        let (prefix, _) = bridge_forward(&fx.x, &fx.anchor, &bridge)?;
        let (_, pgrads, _) =
            arw_grads(&policy, &fx.table, Some(&prefix), &fx.targets, &fx.alpha)?;
        let analytic = pgrads.flat();
        let f = |flat: &[f64]| -> Result<f64> {
            let mut p = PolicyParams::zeros(policy.config);
            p.set_flat(flat);
            arw_loss(&p, &fx.table, Some(&prefix), &fx.targets, &fx.alpha)
        };
        let mut rng = derive_rng(seed, &[salt::GRADCHECK, 1]);
        let report = grad_check(
            f,
            &policy.flat(),
            &analytic,
            GRADCHECK_STEP,
            GRADCHECK_PROBES,
            &mut rng,
        )?;
        lines.push(line("weighted-ce-decoder", report));
    }

    // Full RL objective over decoder and bridge jointly, on real rollouts
    // from a small generated corpus. The rewards are replaced with a spread
    // so the group advantages are nonzero (constant rewards zero out the
    // surrogate term), and the differentiation point is offset slightly from
    // the sampling snapshot so the likelihood ratios and the KL term both
    // carry first-order signal.
    {
        use rand::Rng;
        let fixture = crate::corpus::CorpusConfig {
            n_volumes: 4,
            abnormal_min: 1,
            abnormal_max: 2,
            normal_ratio: config.normal_ratio,
            dims: [8, 8, 8],
        };
        let corpus = generate_corpus(&catalog, &fixture, seed)?;
        let items = build_mmvqa(&catalog, &corpus, seed)?.items;
        let vocab = Vocab::build(&crate::prompts::vocab_corpus(&catalog, &corpus))?;
        let model = Model::init(vocab, config.policy_config(), config.bridge_config(), seed)?;
        let features = model.features(&corpus.volumes[0])?;
        let rl = RlConfig {
            k: 4,
            max_new: 10,
            ..config.rl_config()
        };
        let item = &items[0];
        let (prefix, _) = bridge_forward(&features, &model.anchor, &model.bridge)?;
        let mut group = rollout_group(&model, item, 0, &prefix, &rl, seed, 0)?;
        let scorer = TokenF1Scorer::new(catalog.clone());
        score_group(&model, &mut group, item, &scorer, &config.discretizer_spec(), &rl)?;
        let spread: Vec<f64> = (0..rl.k).map(|k| k as f64).collect();
        group.advantages = crate::grpo::group_advantages(&spread, rl.eps_std)?;
        let groups = vec![group];
        let mut feature_map = BTreeMap::new();
        feature_map.insert(item.volume_id, features.clone());

        let np = model.policy.flat_len();
        let mut joint = model.policy.flat();
        joint.extend(model.bridge.flat());
        let mut orng = derive_rng(seed, &[salt::GRADCHECK, 3]);
        for v in joint.iter_mut() {
            *v += orng.gen_range(-1e-3..1e-3);
        }
        let mut policy_c = PolicyParams::zeros(model.policy.config);
        policy_c.set_flat(&joint[..np]);
        let mut bridge_c = BridgeParams::zeros(model.bridge.config);
        bridge_c.set_flat(&joint[np..]);
        let (_, _, analytic) = crate::grpo::grpo_loss_and_grads(
            &policy_c,
            &bridge_c,
            &model.table,
            &model.anchor,
            &model.policy,
            &model.bridge,
            &groups,
            &feature_map,
            &rl,
        )?;
        let f = |flat: &[f64]| -> Result<f64> {
            let mut p = PolicyParams::zeros(model.policy.config);
            p.set_flat(&flat[..np]);
            let mut b = BridgeParams::zeros(model.bridge.config);
            b.set_flat(&flat[np..]);
            crate::grpo::grpo_loss(
                &p,
                &b,
                &model.table,
                &model.anchor,
                &model.policy,
                &model.bridge,
                &groups,
                &feature_map,
                &rl,
            )
        };
        let mut rng = derive_rng(seed, &[salt::GRADCHECK, 2]);
        let report = grad_check(f, &joint, &analytic, GRADCHECK_STEP, GRADCHECK_PROBES, &mut rng)?;
        lines.push(line("grpo-joint", report));
    }

    let mut table = format!(
        "{:<22} {:>12} {:>11} {:>7} {:>7}\n",
        "check", "max_rel_err", "tolerance", "probes", "status"
    );
    let mut all_pass = true;
    for l in &lines {
        all_pass &= l.pass;
        table.push_str(&format!(
            "{:<22} {:>12.3e} {:>11.1e} {:>7} {:>7}\n",
            l.name,
            l.report.max_rel_err,
            l.tolerance,
            l.report.probes,
            if l.pass { "pass" } else { "FAIL" }
        ));
    }

    let mut dir = RunDir::create(Path::new(&config.out))?;
    dir.write("gradcheck.txt", &table)?;
    dir.finish("gradcheck", config)?;
    Ok(GradcheckSummary { table, all_pass })
}

fn line(name: &'static str, report: GradCheckReport) -> GradcheckLine {
    let pass = report.max_rel_err <= GRADCHECK_TOLERANCE;
    GradcheckLine {
        name,
        report,
        tolerance: GRADCHECK_TOLERANCE,
        pass,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn tiny_config(out: &Path) -> RunConfig {
        RunConfig {
            out: out.display().to_string(),
            seed: 11,
            n_volumes: 12,
            abnormal_max: 2,
            warmup_steps: 3,
            sft_steps: 3,
            rl_steps: 2,
            rl_k: 3,
            rl_max_new: 8,
            rl_probe_size: 4,
            eval_max_new: 8,
            holdout_fraction: 0.25,
            ..RunConfig::default()
        }
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let a = split_volumes(20, 0.25, 5).unwrap();
        let b = split_volumes(20, 0.25, 5).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.holdout, b.holdout);
        assert_eq!(a.holdout.len(), 5);
        let mut all: Vec<usize> = a.train.iter().chain(&a.holdout).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        let c = split_volumes(20, 0.25, 6).unwrap();
        assert_ne!(a.holdout, c.holdout, "different seeds should split differently");
    }

    #[test]
    fn gen_twice_writes_identical_hashes() {
        let tmp = TempDir::new().unwrap();
        let config = tiny_config(&tmp.path().join("run"));
        let first = cmd_gen(&config).unwrap();
        let manifest1 = read_manifest(&tmp.path().join("run/manifest_gen.json")).unwrap();
        let second = cmd_gen(&config).unwrap();
        let manifest2 = read_manifest(&tmp.path().join("run/manifest_gen.json")).unwrap();
        assert_eq!(first.n_items, second.n_items);
        assert_eq!(manifest1.files, manifest2.files);
        assert_eq!(manifest1.config_sha256, manifest2.config_sha256);
        assert!(manifest1.files.contains_key("corpus.jsonl"));
        assert!(manifest1.files.contains_key("config_resolved.txt"));
    }

    #[test]
    fn analyze_reports_leading_normals() {
        let tmp = TempDir::new().unwrap();
        let mut config = tiny_config(&tmp.path().join("run"));
        config.n_volumes = 60;
        cmd_gen(&config).unwrap();
        let summary = cmd_analyze(&config).unwrap();
        assert!(summary.normal_leads, "composition:\n{}", summary.table);
        assert!(tmp.path().join("run/density.csv").exists());
    }

    #[test]
    fn missing_inputs_name_the_path() {
        let tmp = TempDir::new().unwrap();
        let config = tiny_config(&tmp.path().join("empty"));
        let err = cmd_analyze(&config).unwrap_err();
        match err {
            VoxError::MissingFile(path) => assert!(path.contains("corpus.jsonl"), "{path}"),
            other => panic!("expected MissingFile, got {other:?}"),
        }
        let err = cmd_eval(&config).unwrap_err();
        match err {
            VoxError::MissingFile(path) => assert!(path.contains("corpus.jsonl"), "{path}"),
            other => panic!("expected MissingFile, got {other:?}"),
        }
    }

    #[test]
    fn eval_without_checkpoint_names_the_checkpoint() {
        let tmp = TempDir::new().unwrap();
        let config = tiny_config(&tmp.path().join("run"));
        cmd_gen(&config).unwrap();
        let err = cmd_eval(&config).unwrap_err();
        match err {
            VoxError::MissingFile(path) => {
                assert!(path.contains("checkpoint_sft.txt"), "{path}")
            }
            other => panic!("expected MissingFile, got {other:?}"),
        }
    }

    #[test]
    fn full_pipeline_runs_and_reruns_identically() {
        let tmp = TempDir::new().unwrap();
        let config = tiny_config(&tmp.path().join("run"));
        cmd_gen(&config).unwrap();
        cmd_analyze(&config).unwrap();
        let sft = cmd_sft(&config).unwrap();
        assert!(sft.warmup_final_loss.is_finite());
        assert_eq!(sft.n_train_volumes, 9);
        let rl = cmd_rl(&config).unwrap();
        assert!(rl.final_mean_reward.is_finite());
        let eval = cmd_eval(&config).unwrap();
        assert!(eval.checkpoint.contains("checkpoint_rl.txt"));
        assert_eq!(eval.n_items, 3);
        assert!(eval.think_accuracy.is_some() && eval.no_think_accuracy.is_some());

        // second pass over the same inputs reproduces every artifact
        let manifests: Vec<Manifest> = ["sft", "rl", "eval"]
            .iter()
            .map(|c| read_manifest(&tmp.path().join(format!("run/manifest_{c}.json"))).unwrap())
            .collect();
        cmd_sft(&config).unwrap();
        cmd_rl(&config).unwrap();
        cmd_eval(&config).unwrap();
        for m in manifests {
            let again = read_manifest(&tmp.path().join(format!("run/manifest_{}.json", m.command)))
                .unwrap();
            assert_eq!(m.files, again.files, "command {} not reproducible", m.command);
        }
    }

    #[test]
    fn gradcheck_passes_at_default_shape() {
        let tmp = TempDir::new().unwrap();
        let config = tiny_config(&tmp.path().join("run"));
        let summary = cmd_gradcheck(&config).unwrap();
        assert!(summary.all_pass, "gradcheck table:\n{}", summary.table);
        assert!(tmp.path().join("run/gradcheck.txt").exists());
    }
}
