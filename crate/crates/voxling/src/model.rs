//! Model bundle: the frozen embedding table and anchor, the decoder, and the
//! trainable vision bridge, constructed together so their dimensions agree.

use std::collections::BTreeMap;

use crate::bridge::{bridge_forward, encode_volume, BridgeCache, BridgeConfig, BridgeParams};
use crate::corpus::{SynthVolume, VolumeId};
use crate::error::{Result, VoxError};
use crate::linalg::Mat;
use crate::policy::{PolicyConfig, PolicyParams};
use crate::text::{text_anchor, EmbeddingTable, TextAnchor, Vocab};

pub struct Model {
    pub vocab: Vocab,
    pub table: EmbeddingTable,
    pub anchor: TextAnchor,
    pub policy: PolicyParams,
    pub bridge: BridgeParams,
    /// Seed of the frozen encoder stream; fixed for the model's lifetime so
    /// repeated feature extraction is reproducible.
    pub encoder_seed: u64,
}

impl Model {
    pub fn init(
        vocab: Vocab,
        policy_config: PolicyConfig,
        bridge_config: BridgeConfig,
        seed: u64,
    ) -> Result<Model> {
        if policy_config.dim != bridge_config.dim {
            return Err(VoxError::DimensionMismatch("policy dim != bridge dim"));
        }
        if policy_config.prefix_len != bridge_config.slots {
            return Err(VoxError::DimensionMismatch(
                "policy prefix length != bridge slot count",
            ));
        }
        let table = EmbeddingTable::init(vocab.size(), policy_config.dim, seed);
        let anchor = text_anchor(&table)?;
        Ok(Model {
            vocab,
            table,
            anchor,
            policy: PolicyParams::init(policy_config, seed),
            bridge: BridgeParams::init(bridge_config, seed),
            encoder_seed: seed,
        })
    }

    /// Frozen patch features for one volume.
    pub fn features(&self, volume: &SynthVolume) -> Result<Mat> {
        encode_volume(volume, &self.bridge.config, self.encoder_seed)
    }

    /// Frozen patch features for many volumes, keyed by id. Encoding is the
    /// most expensive per-volume step, so training loops do it once up front.
    pub fn feature_map(&self, volumes: &[SynthVolume]) -> Result<BTreeMap<VolumeId, Mat>> {
        let mut map = BTreeMap::new();
        for v in volumes {
            map.insert(v.id, self.features(v)?);
        }
        Ok(map)
    }

    /// Current bridge output for precomputed features.
    pub fn prefix(&self, features: &Mat) -> Result<(Mat, BridgeCache)> {
        bridge_forward(features, &self.anchor, &self.bridge)
    }

    /// Vision-free prefix: every slot holds the text anchor. Used where a
    /// sequence must be conditioned on "no image" without changing shape.
    pub fn anchor_prefix(&self) -> Mat {
        let m = self.policy.config.prefix_len;
        let d = self.policy.config.dim;
        Mat::from_fn(m, d, |_, j| self.anchor.as_slice()[j])
    }
}
