use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// The nine addressable segments of the U-Net, in forward order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockId {
    In0,
    In1,
    In2,
    In3,
    Mid,
    Out0,
    Out1,
    Out2,
    Out3,
}

impl BlockId {
    pub const ALL: [BlockId; 9] = [
        BlockId::In0,
        BlockId::In1,
        BlockId::In2,
        BlockId::In3,
        BlockId::Mid,
        BlockId::Out0,
        BlockId::Out1,
        BlockId::Out2,
        BlockId::Out3,
    ];

    pub const fn as_str(self) -> &'static str {
        match self {
            BlockId::In0 => "IN0",
            BlockId::In1 => "IN1",
            BlockId::In2 => "IN2",
            BlockId::In3 => "IN3",
            BlockId::Mid => "MID",
            BlockId::Out0 => "OUT0",
            BlockId::Out1 => "OUT1",
            BlockId::Out2 => "OUT2",
            BlockId::Out3 => "OUT3",
        }
    }

    /// Position in forward order, 0..9.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn in_block(level: usize) -> Option<BlockId> {
        [BlockId::In0, BlockId::In1, BlockId::In2, BlockId::In3].get(level).copied()
    }

    pub fn out_block(level: usize) -> Option<BlockId> {
        [BlockId::Out0, BlockId::Out1, BlockId::Out2, BlockId::Out3].get(level).copied()
    }

    /// Resolution level: number of downsamplings applied to the input of
    /// this block (0 = full resolution).
    pub fn level(self) -> usize {
        match self {
            BlockId::In0 | BlockId::Out3 => 0,
            BlockId::In1 | BlockId::Out2 => 1,
            BlockId::In2 | BlockId::Out1 => 2,
            BlockId::In3 | BlockId::Mid | BlockId::Out0 => 3,
        }
    }

    /// `INi <-> OUT(3-i)`; `MID` has no partner.
    pub fn skip_partner(self) -> Option<BlockId> {
        match self {
            BlockId::In0 => Some(BlockId::Out3),
            BlockId::In1 => Some(BlockId::Out2),
            BlockId::In2 => Some(BlockId::Out1),
            BlockId::In3 => Some(BlockId::Out0),
            BlockId::Mid => None,
            BlockId::Out0 => Some(BlockId::In3),
            BlockId::Out1 => Some(BlockId::In2),
            BlockId::Out2 => Some(BlockId::In1),
            BlockId::Out3 => Some(BlockId::In0),
        }
    }

    /// Block owning a layer path such as `"IN1.res0.conv1"`.
    pub fn from_path(path: &str) -> Option<BlockId> {
        path.split('.').next()?.parse().ok()
    }

    /// Parses a comma-separated list like `"IN0,OUT3"`.
    pub fn parse_list(list: &str) -> Result<Vec<BlockId>, Error> {
        list.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BlockId::ALL
            .into_iter()
            .find(|b| b.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown block '{s}' (expected IN0..IN3, MID, OUT0..OUT3)")))
    }
}

impl Serialize for BlockId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for BlockId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// What an adaptable layer computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    AttentionLinear,
    Conv,
}

/// One adaptable layer of a built model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerEntry {
    pub path: String,
    pub block: BlockId,
    pub kind: LayerKind,
    /// `[out, in]` for linear layers, `[c_out, c_in, k, k]` for convs.
    pub weight_shape: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_order_matches_forward_order() {
        let mut shuffled = BlockId::ALL;
        shuffled.reverse();
        shuffled.sort();
        assert_eq!(shuffled, BlockId::ALL);
        assert!(BlockId::In3 < BlockId::Mid && BlockId::Mid < BlockId::Out0);
    }

    #[test]
    fn skip_pairs_share_level() {
        for b in BlockId::ALL {
            if let Some(p) = b.skip_partner() {
                assert_eq!(p.level(), b.level());
                assert_eq!(p.skip_partner(), Some(b));
            }
        }
    }

    #[test]
    fn parse_and_display() {
        for b in BlockId::ALL {
            assert_eq!(b.to_string().parse::<BlockId>().unwrap(), b);
        }
        assert_eq!(BlockId::parse_list("IN0, OUT3").unwrap(), vec![BlockId::In0, BlockId::Out3]);
        assert!("IN9".parse::<BlockId>().is_err());
        assert_eq!(BlockId::from_path("MID.attn1.to_q"), Some(BlockId::Mid));
    }
}
