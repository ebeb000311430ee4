//! Synthetic volume/report corpus with the two structural biases under study:
//! normal sentences precede abnormal ones inside every report, and the
//! corpus-wide abnormal:normal sentence ratio is held near a configured
//! target (default 1:1.22) by balancing how many healthy regions each
//! report mentions.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VoxError};
use crate::rng::{derive_rng, salt};
use crate::text::split_text;

pub type LabelId = usize;
pub type VolumeId = usize;

/// One abnormality: a single-token trigger, a home region phrase, and the
/// partition block its box signature occupies.
#[derive(Debug, Clone)]
pub struct LabelSpec {
    pub name: String,
    pub triggers: Vec<String>,
    pub region: String,
    block: [usize; 3],
}

/// Voxel box, half-open on each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxRegion {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

/// Fixed label inventory. The standard catalog partitions the grid into
/// 3x3x2 blocks, one per label.
#[derive(Debug, Clone)]
pub struct AbnormalityCatalog {
    labels: Vec<LabelSpec>,
}

const BLOCKS: [usize; 3] = [3, 3, 2];

/// (name, region phrase) for the standard catalog, in anatomical order.
/// Trigger words are the names; none appears in any region phrase,
/// sentence template, or the question template.
const STANDARD_LABELS: [(&str, &str); 18] = [
    ("effusion", "right pleural space"),
    ("pneumothorax", "left pleural space"),
    ("nodule", "right upper zone"),
    ("mass", "left upper zone"),
    ("consolidation", "right middle zone"),
    ("atelectasis", "left middle zone"),
    ("fibrosis", "right lower zone"),
    ("emphysema", "left lower zone"),
    ("edema", "central vasculature"),
    ("cardiomegaly", "cardiac silhouette"),
    ("calcification", "aortic arch"),
    ("opacity", "right apex"),
    ("bronchiectasis", "left apex"),
    ("thickening", "right hilum"),
    ("stenosis", "left hilum"),
    ("granuloma", "right base"),
    ("hernia", "diaphragm"),
    ("aneurysm", "descending aorta"),
];

/// Signature brightness added inside a present label's box.
pub const SIGNATURE_AMPLITUDE: f64 = 0.5;
/// Background intensities are uniform on [0, BACKGROUND_MAX].
pub const BACKGROUND_MAX: f64 = 0.2;

impl AbnormalityCatalog {
    pub fn standard() -> AbnormalityCatalog {
        let labels = STANDARD_LABELS
            .iter()
            .enumerate()
            .map(|(i, (name, region))| LabelSpec {
                name: name.to_string(),
                triggers: vec![name.to_string()],
                region: region.to_string(),
                block: [i % BLOCKS[0], (i / BLOCKS[0]) % BLOCKS[1], i / (BLOCKS[0] * BLOCKS[1])],
            })
            .collect();
        AbnormalityCatalog { labels }
    }

    /// Custom catalog; triggers may be multi-token phrases.
    pub fn from_lexicon(entries: &[(&str, &[&str], &str)]) -> AbnormalityCatalog {
        let labels = entries
            .iter()
            .enumerate()
            .map(|(i, (name, triggers, region))| LabelSpec {
                name: name.to_string(),
                triggers: triggers.iter().map(|t| t.to_string()).collect(),
                region: region.to_string(),
                block: [i % BLOCKS[0], (i / BLOCKS[0]) % BLOCKS[1], i / (BLOCKS[0] * BLOCKS[1])],
            })
            .collect();
        AbnormalityCatalog { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, id: LabelId) -> &LabelSpec {
        &self.labels[id]
    }

    pub fn labels(&self) -> &[LabelSpec] {
        &self.labels
    }

    pub fn id_of(&self, name: &str) -> Option<LabelId> {
        self.labels.iter().position(|l| l.name == name)
    }

    /// Axis-aligned box for a label's partition block in a given grid.
    pub fn signature_box(&self, id: LabelId, dims: [usize; 3]) -> BoxRegion {
        let block = self.labels[id].block;
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        for a in 0..3 {
            lo[a] = block[a] * dims[a] / BLOCKS[a];
            hi[a] = (block[a] + 1) * dims[a] / BLOCKS[a];
        }
        BoxRegion { lo, hi }
    }
}

/// Words that carry no abnormality content in the sentence templates or the
/// question template. Consistency scoring and recall ignore them.
pub const TEMPLATE_STOPWORDS: [&str; 22] = [
    "the", "is", "in", "no", "there", "seen", "appears", "normal", "clear", "shows", "noted",
    "abnormality", "which", "present", "this", "scan", "what", "answer", "option", ".", ",", "?",
];

const NORMAL_TEMPLATES: [&str; 3] = [
    "the {region} is clear .",
    "the {region} appears normal .",
    "no abnormality is seen in the {region} .",
];

const ABNORMAL_TEMPLATES: [&str; 3] = [
    "there is {label} in the {region} .",
    "{label} is noted in the {region} .",
    "the {region} shows {label} .",
];

pub const QUESTION_TEMPLATE: &str = "which abnormality is present in this scan ?";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentenceKind {
    Normal,
    Abnormal,
}

/// One report sentence with its token span in the flattened report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sentence {
    pub text: String,
    pub kind: SentenceKind,
    /// Half-open token range [start, end) in the flat token sequence.
    pub span: [usize; 2],
}

/// Sentence-segmented report. Spans tile the flat token sequence: contiguous,
/// non-overlapping, in order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledReport {
    pub sentences: Vec<Sentence>,
}

impl LabeledReport {
    pub fn flat_text(&self) -> String {
        self.sentences
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn token_len(&self) -> usize {
        self.sentences.last().map_or(0, |s| s.span[1])
    }

    /// Space-joined text of the abnormal sentences only.
    pub fn abnormal_text(&self) -> String {
        self.sentences
            .iter()
            .filter(|s| s.kind == SentenceKind::Abnormal)
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn count(&self, kind: SentenceKind) -> usize {
        self.sentences.iter().filter(|s| s.kind == kind).count()
    }
}

/// Dense scalar grid plus the ground-truth label set.
#[derive(Debug, Clone)]
pub struct SynthVolume {
    pub id: VolumeId,
    pub dims: [usize; 3],
    pub grid: Vec<f64>,
    pub present: Vec<LabelId>,
}

impl SynthVolume {
    pub fn voxel(&self, x: usize, y: usize, z: usize) -> f64 {
        self.grid[(x * self.dims[1] + y) * self.dims[2] + z]
    }

    /// Mean intensity inside a box.
    pub fn box_mean(&self, b: &BoxRegion) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for x in b.lo[0]..b.hi[0] {
            for y in b.lo[1]..b.hi[1] {
                for z in b.lo[2]..b.hi[2] {
                    sum += self.voxel(x, y, z);
                    n += 1;
                }
            }
        }
        sum / n.max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub n_volumes: usize,
    /// Present labels per volume, inclusive bounds.
    pub abnormal_min: usize,
    pub abnormal_max: usize,
    /// Target normal sentences per abnormal sentence, corpus-wide.
    pub normal_ratio: f64,
    pub dims: [usize; 3],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_volumes: 500,
            abnormal_min: 1,
            abnormal_max: 4,
            normal_ratio: 1.22,
            dims: [16, 16, 16],
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self, catalog: &AbnormalityCatalog) -> Result<()> {
        if self.n_volumes == 0 {
            return Err(VoxError::invalid("corpus size must be at least 1"));
        }
        if self.abnormal_min == 0 || self.abnormal_min > self.abnormal_max {
            return Err(VoxError::invalid(
                "abnormal label bounds must satisfy 1 <= min <= max",
            ));
        }
        if self.abnormal_max > catalog.len() {
            return Err(VoxError::invalid(
                "abnormal label count exceeds catalog size",
            ));
        }
        if !(self.normal_ratio > 0.0) {
            return Err(VoxError::invalid("normal ratio must be positive"));
        }
        if self.dims[0] < BLOCKS[0] || self.dims[1] < BLOCKS[1] || self.dims[2] < BLOCKS[2] {
            return Err(VoxError::invalid("grid too small for the region partition"));
        }
        Ok(())
    }
}

/// Paired volumes and reports; index i of each vector is one item.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub volumes: Vec<SynthVolume>,
    pub reports: Vec<LabeledReport>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    /// Texts that feed vocabulary construction: every report plus the
    /// question template (tags and option letters are reserved tokens).
    pub fn vocab_texts(&self) -> Vec<String> {
        let mut texts: Vec<String> = self.reports.iter().map(|r| r.flat_text()).collect();
        texts.push(QUESTION_TEMPLATE.to_string());
        texts
    }
}

fn quantized_background(rng: &mut impl Rng) -> f64 {
    // Three-decimal quantization keeps JSONL output compact and the
    // generate/write/read cycle exact.
    let millis = rng.gen_range(0..=(BACKGROUND_MAX * 1000.0) as u32);
    millis as f64 / 1000.0
}

fn sample_indices(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    pool.shuffle(rng);
    let mut picked: Vec<usize> = pool.into_iter().take(k).collect();
    picked.sort_unstable();
    picked
}

fn generate_volume(
    catalog: &AbnormalityCatalog,
    config: &CorpusConfig,
    seed: u64,
    id: VolumeId,
) -> SynthVolume {
    let mut rng = derive_rng(seed, &[salt::VOLUME, id as u64]);
    let [dx, dy, dz] = config.dims;
    let mut grid = Vec::with_capacity(dx * dy * dz);
    for _ in 0..dx * dy * dz {
        grid.push(quantized_background(&mut rng));
    }
    let k = rng.gen_range(config.abnormal_min..=config.abnormal_max);
    let present = sample_indices(&mut rng, catalog.len(), k);
    let mut volume = SynthVolume {
        id,
        dims: config.dims,
        grid,
        present,
    };
    for &label in volume.present.clone().iter() {
        let b = catalog.signature_box(label, config.dims);
        for x in b.lo[0]..b.hi[0] {
            for y in b.lo[1]..b.hi[1] {
                for z in b.lo[2]..b.hi[2] {
                    let idx = (x * dy + y) * dz + z;
                    volume.grid[idx] = (volume.grid[idx] + SIGNATURE_AMPLITUDE).min(1.0);
                }
            }
        }
    }
    volume
}

/// Every sentence the generator can emit, rendered for every label. Seeding
/// the vocabulary with these keeps token coverage independent of which
/// templates a particular corpus happened to sample.
pub fn template_texts(catalog: &AbnormalityCatalog) -> Vec<String> {
    let mut texts = Vec::new();
    for label in catalog.labels() {
        for t in NORMAL_TEMPLATES {
            texts.push(fill_template(t, None, &label.region));
        }
        for t in ABNORMAL_TEMPLATES {
            texts.push(fill_template(t, Some(&label.name), &label.region));
        }
    }
    texts
}

fn fill_template(template: &str, label: Option<&str>, region: &str) -> String {
    let mut s = template.replace("{region}", region);
    if let Some(l) = label {
        s = s.replace("{label}", l);
    }
    s
}

fn assemble_report(texts_and_kinds: Vec<(String, SentenceKind)>) -> LabeledReport {
    let mut sentences = Vec::with_capacity(texts_and_kinds.len());
    let mut offset = 0usize;
    for (text, kind) in texts_and_kinds {
        let len = split_text(&text).len();
        sentences.push(Sentence {
            text,
            kind,
            span: [offset, offset + len],
        });
        offset += len;
    }
    LabeledReport { sentences }
}

/// Build the paired corpus. Per-item randomness comes from streams derived
/// from (seed, item id), so items are independent of corpus size.
pub fn generate_corpus(
    catalog: &AbnormalityCatalog,
    config: &CorpusConfig,
    seed: u64,
) -> Result<Corpus> {
    config.validate(catalog)?;
    let mut volumes = Vec::with_capacity(config.n_volumes);
    let mut reports = Vec::with_capacity(config.n_volumes);
    // Running sentence totals drive the per-report healthy-region count so
    // the corpus converges on the configured normal:abnormal ratio.
    let mut normal_total = 0usize;
    let mut abnormal_total = 0usize;
    for id in 0..config.n_volumes {
        let volume = generate_volume(catalog, config, seed, id);
        let k = volume.present.len();
        let avail = catalog.len() - k;
        let want = config.normal_ratio * (abnormal_total + k) as f64 - normal_total as f64;
        let n_normal = (want.round().max(1.0) as usize).min(avail);

        let mut rng = derive_rng(seed, &[salt::REPORT, id as u64]);
        let present: BTreeSet<LabelId> = volume.present.iter().copied().collect();
        let absent: Vec<LabelId> = (0..catalog.len()).filter(|l| !present.contains(l)).collect();
        let picks = sample_indices(&mut rng, absent.len(), n_normal);
        let healthy: Vec<LabelId> = picks.into_iter().map(|i| absent[i]).collect();

        // Normal sentences first, then abnormal; both in catalog order.
        let mut parts = Vec::with_capacity(n_normal + k);
        for &l in &healthy {
            let t = NORMAL_TEMPLATES[rng.gen_range(0..NORMAL_TEMPLATES.len())];
            parts.push((fill_template(t, None, &catalog.label(l).region), SentenceKind::Normal));
        }
        for &l in &volume.present {
            let t = ABNORMAL_TEMPLATES[rng.gen_range(0..ABNORMAL_TEMPLATES.len())];
            let spec = catalog.label(l);
            parts.push((
                fill_template(t, Some(&spec.name), &spec.region),
                SentenceKind::Abnormal,
            ));
        }
        normal_total += n_normal;
        abnormal_total += k;
        volumes.push(volume);
        reports.push(assemble_report(parts));
    }
    Ok(Corpus { volumes, reports })
}

/// Split arbitrary report text into sentences (periods end a sentence) and
/// classify each by the catalog's trigger lexicon, case-insensitively.
/// Sentence text is the detokenized normal form, so spans and texts agree
/// with the module tokenizer.
pub fn label_sentences(report_text: &str, catalog: &AbnormalityCatalog) -> Result<LabeledReport> {
    let tokens = split_text(report_text);
    if tokens.is_empty() {
        return Err(VoxError::EmptyInput("report text"));
    }
    let mut groups: Vec<Vec<String>> = Vec::new();
    let mut cur: Vec<String> = Vec::new();
    for tok in tokens {
        let is_period = tok == ".";
        cur.push(tok);
        if is_period {
            groups.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        groups.push(cur);
    }

    let triggers: Vec<Vec<String>> = catalog
        .labels()
        .iter()
        .flat_map(|l| l.triggers.iter())
        .map(|t| split_text(t).iter().map(|w| w.to_lowercase()).collect())
        .collect();

    let mut parts = Vec::with_capacity(groups.len());
    for group in groups {
        let lowered: Vec<String> = group.iter().map(|w| w.to_lowercase()).collect();
        let abnormal = triggers.iter().any(|phrase| {
            !phrase.is_empty()
                && lowered
                    .windows(phrase.len())
                    .any(|w| w.iter().zip(phrase).all(|(a, b)| a == b))
        });
        let kind = if abnormal { SentenceKind::Abnormal } else { SentenceKind::Normal };
        parts.push((group.join(" "), kind));
    }
    Ok(assemble_report(parts))
}

/// Where normal and abnormal sentences sit inside reports, as histograms
/// over normalized token position.
#[derive(Debug, Clone)]
pub struct PositionDensity {
    pub bin_edges: Vec<f64>,
    pub normal: Vec<f64>,
    pub abnormal: Vec<f64>,
    pub normal_mean_pos: f64,
    pub abnormal_mean_pos: f64,
    pub skipped_reports: usize,
}

/// Histogram of sentence midpoints (span midpoint / report token length),
/// normalized per kind. Reports with zero tokens are skipped and counted.
pub fn position_density(reports: &[LabeledReport], bins: usize) -> Result<PositionDensity> {
    if bins == 0 {
        return Err(VoxError::invalid("bins must be at least 1"));
    }
    if reports.is_empty() {
        return Err(VoxError::EmptyInput("reports"));
    }
    let mut normal = vec![0.0; bins];
    let mut abnormal = vec![0.0; bins];
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    let mut skipped = 0usize;
    for report in reports {
        let len = report.token_len();
        if len == 0 {
            skipped += 1;
            continue;
        }
        for s in &report.sentences {
            let mid = (s.span[0] + s.span[1]) as f64 / 2.0 / len as f64;
            let bin = ((mid * bins as f64) as usize).min(bins - 1);
            let (hist, slot) = match s.kind {
                SentenceKind::Normal => (&mut normal, 0),
                SentenceKind::Abnormal => (&mut abnormal, 1),
            };
            hist[bin] += 1.0;
            sums[slot] += mid;
            counts[slot] += 1;
        }
    }
    for (kind, count) in [("normal", counts[0]), ("abnormal", counts[1])] {
        if count == 0 {
            return Err(VoxError::invalid(match kind {
                "normal" => "no normal sentences in reports",
                _ => "no abnormal sentences in reports",
            }));
        }
    }
    for v in normal.iter_mut() {
        *v /= counts[0] as f64;
    }
    for v in abnormal.iter_mut() {
        *v /= counts[1] as f64;
    }
    let bin_edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    Ok(PositionDensity {
        bin_edges,
        normal,
        abnormal,
        normal_mean_pos: sums[0] / counts[0] as f64,
        abnormal_mean_pos: sums[1] / counts[1] as f64,
        skipped_reports: skipped,
    })
}

impl PositionDensity {
    /// CSV with header `bin_lo,bin_hi,normal,abnormal`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,normal,abnormal\n");
        for i in 0..self.normal.len() {
            s.push_str(&format!(
                "{:?},{:?},{:?},{:?}\n",
                self.bin_edges[i],
                self.bin_edges[i + 1],
                self.normal[i],
                self.abnormal[i]
            ));
        }
        s
    }
}

/// Per-token loss weights: `lambda` inside abnormal sentence spans, 1
/// elsewhere. Output length equals the report's token length.
pub fn token_weights(report: &LabeledReport, lambda: f64) -> Result<Vec<f64>> {
    if !(lambda > 0.0) {
        return Err(VoxError::invalid("lambda must be positive"));
    }
    let mut w = vec![1.0; report.token_len()];
    for s in &report.sentences {
        if s.kind == SentenceKind::Abnormal {
            for t in s.span[0]..s.span[1] {
                w[t] = lambda;
            }
        }
    }
    Ok(w)
}

/// One four-option question about a volume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McOption {
    pub letter: char,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MmvqaItem {
    pub volume_id: VolumeId,
    pub question: String,
    pub options: Vec<McOption>,
    pub correct_letter: char,
    pub reference_report: String,
}

#[derive(Debug, Clone)]
pub struct MmvqaBuild {
    pub items: Vec<MmvqaItem>,
    /// Volume ids skipped because fewer than three labels were absent.
    pub skipped: Vec<VolumeId>,
}

/// One question per eligible volume: the correct option names a present
/// label, three distractors name absent ones, letters assigned by shuffle.
pub fn build_mmvqa(catalog: &AbnormalityCatalog, corpus: &Corpus, seed: u64) -> Result<MmvqaBuild> {
    let mut items = Vec::with_capacity(corpus.len());
    let mut skipped = Vec::new();
    for (volume, report) in corpus.volumes.iter().zip(&corpus.reports) {
        if volume.present.is_empty() {
            return Err(VoxError::invalid("volume has no present labels"));
        }
        let present: BTreeSet<LabelId> = volume.present.iter().copied().collect();
        let absent: Vec<LabelId> = (0..catalog.len()).filter(|l| !present.contains(l)).collect();
        if absent.len() < 3 {
            skipped.push(volume.id);
            continue;
        }
        let mut rng = derive_rng(seed, &[salt::MMVQA, volume.id as u64]);
        let correct = volume.present[rng.gen_range(0..volume.present.len())];
        let picks = sample_indices(&mut rng, absent.len(), 3);
        let mut candidates: Vec<LabelId> = vec![correct];
        candidates.extend(picks.into_iter().map(|i| absent[i]));
        candidates.shuffle(&mut rng);
        let letters = ['A', 'B', 'C', 'D'];
        let options: Vec<McOption> = candidates
            .iter()
            .zip(letters)
            .map(|(&l, letter)| McOption {
                letter,
                text: catalog.label(l).name.clone(),
            })
            .collect();
        let correct_letter = options
            .iter()
            .find(|o| catalog.id_of(&o.text) == Some(correct))
            .map(|o| o.letter)
            .expect("correct option present");
        items.push(MmvqaItem {
            volume_id: volume.id,
            question: QUESTION_TEMPLATE.to_string(),
            options,
            correct_letter,
            reference_report: report.flat_text(),
        });
    }
    Ok(MmvqaBuild { items, skipped })
}

/// JSONL record pairing a volume with its report.
#[derive(Debug, Serialize, Deserialize)]
struct CorpusRecord {
    id: VolumeId,
    dims: [usize; 3],
    grid: Vec<f64>,
    present_labels: Vec<String>,
    report: Vec<Sentence>,
}

pub fn corpus_to_jsonl(catalog: &AbnormalityCatalog, corpus: &Corpus) -> Result<String> {
    let mut out = String::new();
    for (volume, report) in corpus.volumes.iter().zip(&corpus.reports) {
        let rec = CorpusRecord {
            id: volume.id,
            dims: volume.dims,
            grid: volume.grid.clone(),
            present_labels: volume
                .present
                .iter()
                .map(|&l| catalog.label(l).name.clone())
                .collect(),
            report: report.sentences.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).map_err(|e| VoxError::Parse(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn corpus_from_jsonl(catalog: &AbnormalityCatalog, contents: &str) -> Result<Corpus> {
    let mut volumes = Vec::new();
    let mut reports = Vec::new();
    for (i, line) in contents.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(line)
            .map_err(|e| VoxError::Parse(format!("corpus line {}: {e}", i + 1)))?;
        let mut present = Vec::with_capacity(rec.present_labels.len());
        for name in &rec.present_labels {
            present.push(
                catalog
                    .id_of(name)
                    .ok_or_else(|| VoxError::Parse(format!("unknown label {name:?}")))?,
            );
        }
        let expected = rec.dims[0] * rec.dims[1] * rec.dims[2];
        if rec.grid.len() != expected {
            return Err(VoxError::Parse(format!(
                "corpus line {}: grid holds {} voxels, dims imply {}",
                i + 1,
                rec.grid.len(),
                expected
            )));
        }
        volumes.push(SynthVolume {
            id: rec.id,
            dims: rec.dims,
            grid: rec.grid,
            present,
        });
        reports.push(LabeledReport {
            sentences: rec.report,
        });
    }
    if volumes.is_empty() {
        return Err(VoxError::EmptyInput("corpus jsonl"));
    }
    Ok(Corpus { volumes, reports })
}

pub fn mmvqa_to_jsonl(items: &[MmvqaItem]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(|e| VoxError::Parse(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn mmvqa_from_jsonl(contents: &str) -> Result<Vec<MmvqaItem>> {
    let mut items = Vec::new();
    for (i, line) in contents.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        items.push(
            serde_json::from_str(line)
                .map_err(|e| VoxError::Parse(format!("mmvqa line {}: {e}", i + 1)))?,
        );
    }
    if items.is_empty() {
        return Err(VoxError::EmptyInput("mmvqa jsonl"));
    }
    Ok(items)
}
