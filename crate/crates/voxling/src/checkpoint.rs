//! Plain-text checkpoints for the decoder and bridge.
//!
//! The format is sectioned like the run config: `[meta]` and the two
//! `[*.config]` sections hold `key = value` lines, while `[policy.flat]` and
//! `[bridge.flat]` hold a count followed by whitespace-separated values in
//! the canonical `flat()` order. Floats are written with Rust's shortest
//! round-trip formatting, so a save followed by a load reproduces every
//! parameter bit for bit.

use crate::bridge::{BridgeConfig, BridgeParams};
use crate::error::{Result, VoxError};
use crate::policy::{PolicyConfig, PolicyParams};
use std::fmt::Write as _;

pub const CHECKPOINT_FORMAT: &str = "voxling-checkpoint-v1";

/// Provenance carried alongside the weights: which pipeline stage produced
/// them and under which seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub stage: String,
    pub seed: u64,
}

fn write_flat(out: &mut String, name: &str, flat: &[f64]) {
    let _ = writeln!(out, "[{name}]");
    let _ = writeln!(out, "{}", flat.len());
    for chunk in flat.chunks(8) {
        let line: Vec<String> = chunk.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out.push('\n');
}

pub fn checkpoint_to_string(
    meta: &CheckpointMeta,
    policy: &PolicyParams,
    bridge: &BridgeParams,
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "[meta]");
    let _ = writeln!(out, "format = {CHECKPOINT_FORMAT}");
    let _ = writeln!(out, "stage = {}", meta.stage);
    let _ = writeln!(out, "seed = {}", meta.seed);
    out.push('\n');

    let pc = policy.config;
    let _ = writeln!(out, "[policy.config]");
    let _ = writeln!(out, "dim = {}", pc.dim);
    let _ = writeln!(out, "n_layers = {}", pc.n_layers);
    let _ = writeln!(out, "ff = {}", pc.ff);
    let _ = writeln!(out, "t_max = {}", pc.t_max);
    let _ = writeln!(out, "prefix_len = {}", pc.prefix_len);
    let _ = writeln!(out, "logit_scale = {:?}", pc.logit_scale);
    out.push('\n');

    let bc = bridge.config;
    let _ = writeln!(out, "[bridge.config]");
    let _ = writeln!(out, "dim = {}", bc.dim);
    let _ = writeln!(out, "hidden = {}", bc.hidden);
    let _ = writeln!(out, "slots = {}", bc.slots);
    let _ = writeln!(out, "patch = {}", bc.patch);
    out.push('\n');

    write_flat(&mut out, "policy.flat", &policy.flat());
    write_flat(&mut out, "bridge.flat", &bridge.flat());
    out
}

struct Section<'a> {
    name: &'a str,
    lines: Vec<&'a str>,
}

fn split_sections(text: &str) -> Result<Vec<Section<'_>>> {
    let mut sections: Vec<Section> = Vec::new();
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| VoxError::Parse("unterminated section header".to_string()))?;
            sections.push(Section { name, lines: Vec::new() });
        } else {
            let section = sections
                .last_mut()
                .ok_or_else(|| VoxError::Parse("content before first section".to_string()))?;
            section.lines.push(line);
        }
    }
    Ok(sections)
}

fn kv_lookup<'a>(section: &'a Section, key: &str) -> Result<&'a str> {
    for line in &section.lines {
        if let Some((k, v)) = line.split_once('=') {
            if k.trim() == key {
                return Ok(v.trim());
            }
        }
    }
    Err(VoxError::Parse(format!(
        "checkpoint section [{}] is missing key {key}",
        section.name
    )))
}

fn kv_usize(section: &Section, key: &str) -> Result<usize> {
    let v = kv_lookup(section, key)?;
    v.parse()
        .map_err(|_| VoxError::Parse(format!("checkpoint key {key}: bad integer {v:?}")))
}

fn kv_f64(section: &Section, key: &str) -> Result<f64> {
    let v = kv_lookup(section, key)?;
    v.parse()
        .map_err(|_| VoxError::Parse(format!("checkpoint key {key}: bad number {v:?}")))
}

fn parse_flat(section: &Section) -> Result<Vec<f64>> {
    let mut tokens = section.lines.iter().flat_map(|l| l.split_whitespace());
    let count: usize = tokens
        .next()
        .ok_or_else(|| VoxError::Parse(format!("[{}] is empty", section.name)))?
        .parse()
        .map_err(|_| VoxError::Parse(format!("[{}]: bad value count", section.name)))?;
    let mut flat = Vec::with_capacity(count);
    for tok in tokens {
        let v: f64 = tok
            .parse()
            .map_err(|_| VoxError::Parse(format!("[{}]: bad float {tok:?}", section.name)))?;
        flat.push(v);
    }
    if flat.len() != count {
        return Err(VoxError::Parse(format!(
            "[{}] declares {count} values but holds {}",
            section.name,
            flat.len()
        )));
    }
    Ok(flat)
}

pub fn checkpoint_from_string(
    text: &str,
) -> Result<(CheckpointMeta, PolicyParams, BridgeParams)> {
    let sections = split_sections(text)?;
    let find = |name: &str| -> Result<&Section> {
        sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| VoxError::Parse(format!("checkpoint is missing section [{name}]")))
    };

    let meta_section = find("meta")?;
    let format = kv_lookup(meta_section, "format")?;
    if format != CHECKPOINT_FORMAT {
        return Err(VoxError::Parse(format!(
            "unsupported checkpoint format {format:?}"
        )));
    }
    let meta = CheckpointMeta {
        stage: kv_lookup(meta_section, "stage")?.to_string(),
        seed: kv_lookup(meta_section, "seed")?
            .parse()
            .map_err(|_| VoxError::Parse("checkpoint key seed: bad integer".to_string()))?,
    };

    let pc_section = find("policy.config")?;
    let policy_config = PolicyConfig {
        dim: kv_usize(pc_section, "dim")?,
        n_layers: kv_usize(pc_section, "n_layers")?,
        ff: kv_usize(pc_section, "ff")?,
        t_max: kv_usize(pc_section, "t_max")?,
        prefix_len: kv_usize(pc_section, "prefix_len")?,
        logit_scale: kv_f64(pc_section, "logit_scale")?,
    };

    let bc_section = find("bridge.config")?;
    let bridge_config = BridgeConfig {
        dim: kv_usize(bc_section, "dim")?,
        hidden: kv_usize(bc_section, "hidden")?,
        slots: kv_usize(bc_section, "slots")?,
        patch: kv_usize(bc_section, "patch")?,
    };

    let mut policy = PolicyParams::zeros(policy_config);
    let policy_flat = parse_flat(find("policy.flat")?)?;
    if policy_flat.len() != policy.flat_len() {
        return Err(VoxError::Parse(format!(
            "[policy.flat] holds {} values but the config needs {}",
            policy_flat.len(),
            policy.flat_len()
        )));
    }
    policy.set_flat(&policy_flat);

    let mut bridge = BridgeParams::zeros(bridge_config);
    let bridge_flat = parse_flat(find("bridge.flat")?)?;
    if bridge_flat.len() != bridge.flat_len() {
        return Err(VoxError::Parse(format!(
            "[bridge.flat] holds {} values but the config needs {}",
            bridge_flat.len(),
            bridge.flat_len()
        )));
    }
    bridge.set_flat(&bridge_flat);

    Ok((meta, policy, bridge))
}
