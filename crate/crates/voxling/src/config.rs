//! Run configuration: a flat `key = value` file with `[section]` headers.
//! Every field has a default, unknown sections or keys are rejected, and the
//! resolved configuration can be echoed back out in canonical form, so a run
//! directory always records exactly what it ran with.

use crate::bridge::BridgeConfig;
use crate::corpus::CorpusConfig;
use crate::error::{Result, VoxError};
use crate::grpo::RlConfig;
use crate::policy::PolicyConfig;
use crate::rewards::DiscretizerSpec;
use crate::sft::{SftConfig, WarmupConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [run]
    pub seed: u64,
    pub out: String,
    pub threads: usize,
    // [corpus]
    pub n_volumes: usize,
    pub abnormal_min: usize,
    pub abnormal_max: usize,
    pub normal_ratio: f64,
    pub dims: [usize; 3],
    // [model]
    pub dim: usize,
    pub n_layers: usize,
    pub ff: usize,
    pub t_max: usize,
    pub prefix_len: usize,
    pub logit_scale: f64,
    pub gate_hidden: usize,
    pub patch: usize,
    // [warmup]
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    pub warmup_batch_size: usize,
    // [sft]
    pub sft_lambda: f64,
    pub sft_lr: f64,
    pub sft_batch_size: usize,
    pub sft_steps: usize,
    // [rl]
    pub rl_k: usize,
    pub rl_eps_clip: f64,
    pub rl_beta: f64,
    pub rl_eps_std: f64,
    pub rl_lr: f64,
    pub rl_steps: usize,
    pub rl_temperature: f64,
    pub rl_max_new: usize,
    pub rl_items_per_step: usize,
    pub rl_data_fraction: f64,
    pub rl_use_consistency: bool,
    pub rl_probe_every: usize,
    pub rl_probe_size: usize,
    pub rl_log_transcripts: bool,
    // [rewards]
    pub reward_t1: f64,
    pub reward_t2: f64,
    pub reward_t3: f64,
    pub restrict_to_abnormal: bool,
    // [eval]
    pub eval_max_new: usize,
    pub holdout_fraction: f64,
    pub eval_mode: String,
    pub eval_checkpoint: String,
    pub per_item_records: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        let model = PolicyConfig::default();
        let bridge = BridgeConfig::default();
        let warmup = WarmupConfig::default();
        let sft = SftConfig::default();
        let rl = RlConfig::default();
        let spec = DiscretizerSpec::default();
        RunConfig {
            seed: 7,
            out: "runs/out".to_string(),
            threads: 1,
            n_volumes: corpus.n_volumes,
            abnormal_min: corpus.abnormal_min,
            abnormal_max: corpus.abnormal_max,
            normal_ratio: corpus.normal_ratio,
            dims: corpus.dims,
            dim: model.dim,
            n_layers: model.n_layers,
            ff: model.ff,
            t_max: model.t_max,
            prefix_len: model.prefix_len,
            logit_scale: model.logit_scale,
            gate_hidden: bridge.hidden,
            patch: bridge.patch,
            warmup_steps: warmup.steps,
            warmup_lr: warmup.lr,
            warmup_batch_size: warmup.batch_size,
            sft_lambda: sft.lambda,
            sft_lr: sft.lr,
            sft_batch_size: sft.batch_size,
            sft_steps: sft.steps,
            rl_k: rl.k,
            rl_eps_clip: rl.eps_clip,
            rl_beta: rl.beta,
            rl_eps_std: rl.eps_std,
            rl_lr: rl.lr,
            rl_steps: rl.steps,
            rl_temperature: rl.temperature,
            rl_max_new: rl.max_new,
            rl_items_per_step: rl.items_per_step,
            rl_data_fraction: rl.data_fraction,
            rl_use_consistency: rl.use_consistency,
            rl_probe_every: rl.probe_every,
            rl_probe_size: rl.probe_size,
            rl_log_transcripts: rl.log_transcripts,
            reward_t1: spec.thresholds.0,
            reward_t2: spec.thresholds.1,
            reward_t3: spec.thresholds.2,
            restrict_to_abnormal: true,
            eval_max_new: 48,
            holdout_fraction: 0.2,
            eval_mode: "both".to_string(),
            eval_checkpoint: "auto".to_string(),
            per_item_records: true,
        }
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| VoxError::Parse(format!("key {key}: expected an integer, got {v:?}")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| VoxError::Parse(format!("key {key}: expected an integer, got {v:?}")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| VoxError::Parse(format!("key {key}: expected a number, got {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(VoxError::Parse(format!(
            "key {key}: expected true or false, got {v:?}"
        ))),
    }
}

fn parse_dims(key: &str, v: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(VoxError::Parse(format!(
            "key {key}: expected three comma-separated sizes, got {v:?}"
        )));
    }
    Ok([
        parse_usize(key, parts[0])?,
        parse_usize(key, parts[1])?,
        parse_usize(key, parts[2])?,
    ])
}

impl RunConfig {
    pub fn from_str(text: &str) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        let mut section = String::new();
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| VoxError::Parse(format!("line {}: unterminated section header", lineno + 1)))?
                    .trim();
                if !matches!(
                    name,
                    "run" | "corpus" | "model" | "warmup" | "sft" | "rl" | "rewards" | "eval"
                ) {
                    return Err(VoxError::Parse(format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                VoxError::Parse(format!("line {}: expected key = value, got {line:?}", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if section.is_empty() {
                return Err(VoxError::Parse(format!(
                    "key {key} appears before any [section] header"
                )));
            }
            let qualified = format!("{section}.{key}");
            if seen.contains(&qualified) {
                return Err(VoxError::Parse(format!("duplicate key {qualified}")));
            }
            seen.push(qualified.clone());
            config.apply(&section, key, value)?;
        }
        Ok(config)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let unknown = || VoxError::Parse(format!("unknown key {key} in section [{section}]"));
        match section {
            "run" => match key {
                "seed" => self.seed = parse_u64(key, value)?,
                "out" => self.out = value.to_string(),
                "threads" => self.threads = parse_usize(key, value)?,
                _ => return Err(unknown()),
            },
            "corpus" => match key {
                "n_volumes" => self.n_volumes = parse_usize(key, value)?,
                "abnormal_min" => self.abnormal_min = parse_usize(key, value)?,
                "abnormal_max" => self.abnormal_max = parse_usize(key, value)?,
                "normal_ratio" => self.normal_ratio = parse_f64(key, value)?,
                "dims" => self.dims = parse_dims(key, value)?,
                _ => return Err(unknown()),
            },
            "model" => match key {
                "dim" => self.dim = parse_usize(key, value)?,
                "n_layers" => self.n_layers = parse_usize(key, value)?,
                "ff" => self.ff = parse_usize(key, value)?,
                "t_max" => self.t_max = parse_usize(key, value)?,
                "prefix_len" => self.prefix_len = parse_usize(key, value)?,
                "logit_scale" => self.logit_scale = parse_f64(key, value)?,
                "gate_hidden" => self.gate_hidden = parse_usize(key, value)?,
                "patch" => self.patch = parse_usize(key, value)?,
                _ => return Err(unknown()),
            },
            "warmup" => match key {
                "steps" => self.warmup_steps = parse_usize(key, value)?,
                "lr" => self.warmup_lr = parse_f64(key, value)?,
                "batch_size" => self.warmup_batch_size = parse_usize(key, value)?,
                _ => return Err(unknown()),
            },
            "sft" => match key {
                "lambda" => self.sft_lambda = parse_f64(key, value)?,
                "lr" => self.sft_lr = parse_f64(key, value)?,
                "batch_size" => self.sft_batch_size = parse_usize(key, value)?,
                "steps" => self.sft_steps = parse_usize(key, value)?,
                _ => return Err(unknown()),
            },
            "rl" => match key {
                "k" => self.rl_k = parse_usize(key, value)?,
                "eps_clip" => self.rl_eps_clip = parse_f64(key, value)?,
                "beta" => self.rl_beta = parse_f64(key, value)?,
                "eps_std" => self.rl_eps_std = parse_f64(key, value)?,
                "lr" => self.rl_lr = parse_f64(key, value)?,
                "steps" => self.rl_steps = parse_usize(key, value)?,
                "temperature" => self.rl_temperature = parse_f64(key, value)?,
                "max_new" => self.rl_max_new = parse_usize(key, value)?,
                "items_per_step" => self.rl_items_per_step = parse_usize(key, value)?,
                "data_fraction" => self.rl_data_fraction = parse_f64(key, value)?,
                "use_consistency" => self.rl_use_consistency = parse_bool(key, value)?,
                "probe_every" => self.rl_probe_every = parse_usize(key, value)?,
                "probe_size" => self.rl_probe_size = parse_usize(key, value)?,
                "log_transcripts" => self.rl_log_transcripts = parse_bool(key, value)?,
                _ => return Err(unknown()),
            },
            "rewards" => match key {
                "t1" => self.reward_t1 = parse_f64(key, value)?,
                "t2" => self.reward_t2 = parse_f64(key, value)?,
                "t3" => self.reward_t3 = parse_f64(key, value)?,
                "restrict_to_abnormal" => self.restrict_to_abnormal = parse_bool(key, value)?,
                _ => return Err(unknown()),
            },
            "eval" => match key {
                "max_new" => self.eval_max_new = parse_usize(key, value)?,
                "holdout_fraction" => self.holdout_fraction = parse_f64(key, value)?,
                "mode" => self.eval_mode = value.to_string(),
                "checkpoint" => self.eval_checkpoint = value.to_string(),
                "per_item_records" => self.per_item_records = parse_bool(key, value)?,
                _ => return Err(unknown()),
            },
            _ => return Err(VoxError::Parse(format!("unknown section [{section}]"))),
        }
        Ok(())
    }

    /// Canonical echo: every key in every section, current values.
    pub fn to_file_string(&self) -> String {
        format!(
            "[run]\n\
             seed = {}\n\
             out = {}\n\
             threads = {}\n\
             \n\
             [corpus]\n\
             n_volumes = {}\n\
             abnormal_min = {}\n\
             abnormal_max = {}\n\
             normal_ratio = {:?}\n\
             dims = {},{},{}\n\
             \n\
             [model]\n\
             dim = {}\n\
             n_layers = {}\n\
             ff = {}\n\
             t_max = {}\n\
             prefix_len = {}\n\
             logit_scale = {:?}\n\
             gate_hidden = {}\n\
             patch = {}\n\
             \n\
             [warmup]\n\
             steps = {}\n\
             lr = {:?}\n\
             batch_size = {}\n\
             \n\
             [sft]\n\
             lambda = {:?}\n\
             lr = {:?}\n\
             batch_size = {}\n\
             steps = {}\n\
             \n\
             [rl]\n\
             k = {}\n\
             eps_clip = {:?}\n\
             beta = {:?}\n\
             eps_std = {:?}\n\
             lr = {:?}\n\
             steps = {}\n\
             temperature = {:?}\n\
             max_new = {}\n\
             items_per_step = {}\n\
             data_fraction = {:?}\n\
             use_consistency = {}\n\
             probe_every = {}\n\
             probe_size = {}\n\
             log_transcripts = {}\n\
             \n\
             [rewards]\n\
             t1 = {:?}\n\
             t2 = {:?}\n\
             t3 = {:?}\n\
             restrict_to_abnormal = {}\n\
             \n\
             [eval]\n\
             max_new = {}\n\
             holdout_fraction = {:?}\n\
             mode = {}\n\
             checkpoint = {}\n\
             per_item_records = {}\n",
            self.seed,
            self.out,
            self.threads,
            self.n_volumes,
            self.abnormal_min,
            self.abnormal_max,
            self.normal_ratio,
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.dim,
            self.n_layers,
            self.ff,
            self.t_max,
            self.prefix_len,
            self.logit_scale,
            self.gate_hidden,
            self.patch,
            self.warmup_steps,
            self.warmup_lr,
            self.warmup_batch_size,
            self.sft_lambda,
            self.sft_lr,
            self.sft_batch_size,
            self.sft_steps,
            self.rl_k,
            self.rl_eps_clip,
            self.rl_beta,
            self.rl_eps_std,
            self.rl_lr,
            self.rl_steps,
            self.rl_temperature,
            self.rl_max_new,
            self.rl_items_per_step,
            self.rl_data_fraction,
            self.rl_use_consistency,
            self.rl_probe_every,
            self.rl_probe_size,
            self.rl_log_transcripts,
            self.reward_t1,
            self.reward_t2,
            self.reward_t3,
            self.restrict_to_abnormal,
            self.eval_max_new,
            self.holdout_fraction,
            self.eval_mode,
            self.eval_checkpoint,
            self.per_item_records,
        )
    }

    /// Cross-field checks that need the abnormality catalog (the corpus
    /// bounds depend on how many labels exist).
    pub fn validate(&self, catalog: &crate::corpus::AbnormalityCatalog) -> Result<()> {
        self.corpus_config().validate(catalog)?;
        self.sft_config().validate()?;
        self.rl_config().validate()?;
        self.discretizer_spec().validate()?;
        if self.threads == 0 {
            return Err(VoxError::config("threads must be at least 1"));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(VoxError::config("holdout_fraction must lie in (0,1)"));
        }
        if !matches!(self.eval_mode.as_str(), "think" | "no_think" | "both") {
            return Err(VoxError::config(
                "eval mode must be think, no_think, or both",
            ));
        }
        if !matches!(self.eval_checkpoint.as_str(), "auto" | "sft" | "rl") {
            return Err(VoxError::config(
                "eval checkpoint must be auto, sft, or rl",
            ));
        }
        if self.dim == 0 || self.prefix_len == 0 {
            return Err(VoxError::config("model dim and prefix_len must be positive"));
        }
        Ok(())
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            n_volumes: self.n_volumes,
            abnormal_min: self.abnormal_min,
            abnormal_max: self.abnormal_max,
            normal_ratio: self.normal_ratio,
            dims: self.dims,
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            dim: self.dim,
            n_layers: self.n_layers,
            ff: self.ff,
            t_max: self.t_max,
            prefix_len: self.prefix_len,
            logit_scale: self.logit_scale,
        }
    }

    pub fn bridge_config(&self) -> BridgeConfig {
        BridgeConfig {
            dim: self.dim,
            hidden: self.gate_hidden,
            slots: self.prefix_len,
            patch: self.patch,
        }
    }

    pub fn warmup_config(&self) -> WarmupConfig {
        WarmupConfig {
            steps: self.warmup_steps,
            lr: self.warmup_lr,
            batch_size: self.warmup_batch_size,
        }
    }

    pub fn sft_config(&self) -> SftConfig {
        SftConfig {
            lambda: self.sft_lambda,
            lr: self.sft_lr,
            batch_size: self.sft_batch_size,
            steps: self.sft_steps,
        }
    }

    pub fn rl_config(&self) -> RlConfig {
        RlConfig {
            k: self.rl_k,
            eps_clip: self.rl_eps_clip,
            beta: self.rl_beta,
            eps_std: self.rl_eps_std,
            lr: self.rl_lr,
            steps: self.rl_steps,
            temperature: self.rl_temperature,
            max_new: self.rl_max_new,
            items_per_step: self.rl_items_per_step,
            data_fraction: self.rl_data_fraction,
            use_consistency: self.rl_use_consistency,
            probe_every: self.rl_probe_every,
            probe_size: self.rl_probe_size,
            log_transcripts: self.rl_log_transcripts,
        }
    }

    pub fn discretizer_spec(&self) -> DiscretizerSpec {
        DiscretizerSpec {
            thresholds: (self.reward_t1, self.reward_t2, self.reward_t3),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_defaults() {
        let config = RunConfig::from_str("").unwrap();
        assert_eq!(config, RunConfig::default());
    }

    #[test]
    fn parses_overrides_and_comments() {
        let text = "# a comment\n[run]\nseed = 42\n\n[sft]\nlambda = 1.5\n[rl]\nuse_consistency = false\n[corpus]\ndims = 8, 8, 8\n";
        let config = RunConfig::from_str(text).unwrap();
        assert_eq!(config.seed, 42);
        assert_eq!(config.sft_lambda, 1.5);
        assert!(!config.rl_use_consistency);
        assert_eq!(config.dims, [8, 8, 8]);
        // everything else stays at its default
        assert_eq!(config.rl_k, RunConfig::default().rl_k);
    }

    #[test]
    fn rejects_unknown_sections_and_keys() {
        assert!(RunConfig::from_str("[nope]\nx = 1\n").is_err());
        assert!(RunConfig::from_str("[run]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_str("seed = 1\n").is_err(), "key before section");
        assert!(RunConfig::from_str("[run]\nseed = abc\n").is_err());
    }

    #[test]
    fn rejects_duplicate_keys() {
        assert!(RunConfig::from_str("[run]\nseed = 1\nseed = 2\n").is_err());
        // same key name in different sections is fine
        assert!(RunConfig::from_str("[sft]\nlr = 0.1\n[rl]\nlr = 0.2\n").is_ok());
    }

    #[test]
    fn echo_round_trips_exactly() {
        let text = "[run]\nseed = 99\n[sft]\nlambda = 1.25\n[rl]\nbeta = 0.1\n";
        let config = RunConfig::from_str(text).unwrap();
        let echoed = config.to_file_string();
        let reparsed = RunConfig::from_str(&echoed).unwrap();
        assert_eq!(config, reparsed);
        // the echo lists every known key
        for key in ["seed =", "lambda =", "eps_clip =", "holdout_fraction ="] {
            assert!(echoed.contains(key), "echo missing {key}");
        }
    }

    #[test]
    fn sub_config_views_carry_values() {
        let config = RunConfig::from_str("[model]\ndim = 16\nprefix_len = 4\n").unwrap();
        assert_eq!(config.policy_config().dim, 16);
        assert_eq!(config.bridge_config().dim, 16);
        assert_eq!(config.bridge_config().slots, 4);
        let catalog = crate::corpus::AbnormalityCatalog::standard();
        assert!(config.validate(&catalog).is_ok());
        let bad = RunConfig::from_str("[eval]\nmode = sideways\n").unwrap();
        assert!(bad.validate(&catalog).is_err());
    }
}
