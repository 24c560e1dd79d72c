use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::BlockId;
use crate::error::{Error, Result};

/// Number of stride-2 downsamplings between IN0 and IN3.
pub const DOWNSAMPLES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub resblocks_per_block: usize,
    pub attention_blocks: BTreeSet<BlockId>,
    pub cond_dim: usize,
    pub time_embed_dim: usize,
    pub norm_groups: usize,
    pub max_tokens: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            image_size: 32,
            in_channels: 3,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4, 4],
            resblocks_per_block: 2,
            attention_blocks: [BlockId::In1, BlockId::In2, BlockId::Mid, BlockId::Out1, BlockId::Out2]
                .into_iter()
                .collect(),
            cond_dim: 64,
            time_embed_dim: 128,
            norm_groups: 8,
            max_tokens: 16,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.channel_multipliers.len() != 4 {
            return fail(format!(
                "channel_multipliers must have length 4, got {}",
                self.channel_multipliers.len()
            ));
        }
        let factor = 1 << DOWNSAMPLES;
        if self.image_size == 0 || self.image_size % factor != 0 {
            return fail(format!("image_size {} must be a positive multiple of {factor}", self.image_size));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.cond_dim == 0 || self.max_tokens == 0 {
            return fail("channel, condition and token counts must be positive".into());
        }
        if self.channel_multipliers.contains(&0) {
            return fail("channel multipliers must be positive".into());
        }
        if self.resblocks_per_block == 0 {
            return fail("resblocks_per_block must be at least 1".into());
        }
        if self.time_embed_dim == 0 || self.base_channels % 2 != 0 {
            return fail("base_channels must be even and time_embed_dim positive".into());
        }
        if self.norm_groups == 0 {
            return fail("norm_groups must be positive".into());
        }
        for level in 0..4 {
            let c = self.channels(level);
            if c % self.norm_groups != 0 {
                return fail(format!("channels {c} at level {level} not divisible by norm_groups {}", self.norm_groups));
            }
        }
        Ok(())
    }

    /// Feature channels of `IN{level}` and `OUT{3-level}`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    /// Spatial side length at which a block operates.
    pub fn block_resolution(&self, block: BlockId) -> usize {
        self.image_size >> block.level()
    }

    /// Output channels of a block.
    pub fn block_channels(&self, block: BlockId) -> usize {
        match block {
            BlockId::Mid => self.channels(3),
            b => self.channels(b.level()),
        }
    }

    /// A very small configuration for double-precision gradient tests.
    pub fn tiny() -> Self {
        UNetConfig {
            image_size: 16,
            base_channels: 8,
            channel_multipliers: vec![1, 1, 2, 2],
            resblocks_per_block: 2,
            cond_dim: 8,
            time_embed_dim: 16,
            norm_groups: 4,
            max_tokens: 4,
            ..UNetConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        UNetConfig::default().validate().unwrap();
        UNetConfig::tiny().validate().unwrap();
    }

    #[test]
    fn rejects_bad_image_size() {
        let cfg = UNetConfig {
            image_size: 36,
            ..UNetConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("image_size"), "{err}");
    }

    #[test]
    fn rejects_wrong_multiplier_count() {
        let cfg = UNetConfig {
            channel_multipliers: vec![1, 2, 4],
            ..UNetConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("channel_multipliers"));
    }

    #[test]
    fn resolutions_per_block() {
        let cfg = UNetConfig::default();
        let sizes: Vec<usize> = BlockId::ALL.iter().map(|b| cfg.block_resolution(*b)).collect();
        assert_eq!(sizes, vec![32, 16, 8, 4, 4, 4, 8, 16, 32]);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<UNetConfig>(r#"{"image_size": 32, "bogus": 1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }
}
