//! Layer naming for the VGG-19 convolutional trunk.
//!
//! Layers follow the `conv<block>_<i>`, `relu<block>_<i>`, `pool<block>`
//! scheme. The trunk has 16 conv, 16 relu and 5 max-pool layers; the fully
//! connected head is never part of it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerKind {
    Conv,
    Relu,
    Pool,
}

/// Convolutions per block in VGG-19.
pub const VGG19_BLOCK_DEPTHS: [usize; 5] = [2, 2, 4, 4, 4];
/// Output channels per block in VGG-19.
pub const VGG19_BLOCK_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];

/// A named trunk layer. Only the 37 VGG-19 trunk names can be constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerId {
    kind: LayerKind,
    block: u8,
    index: u8,
}

impl LayerId {
    pub fn conv(block: usize, index: usize) -> Result<Self> {
        Self::checked(LayerKind::Conv, block, index)
    }

    pub fn relu(block: usize, index: usize) -> Result<Self> {
        Self::checked(LayerKind::Relu, block, index)
    }

    pub fn pool(block: usize) -> Result<Self> {
        Self::checked(LayerKind::Pool, block, 0)
    }

    fn checked(kind: LayerKind, block: usize, index: usize) -> Result<Self> {
        let valid = match kind {
            LayerKind::Pool => (1..=5).contains(&block) && index == 0,
            _ => (1..=5).contains(&block) && index >= 1 && index <= VGG19_BLOCK_DEPTHS[block - 1],
        };
        if !valid {
            let name = match kind {
                LayerKind::Conv => format!("conv{block}_{index}"),
                LayerKind::Relu => format!("relu{block}_{index}"),
                LayerKind::Pool => format!("pool{block}"),
            };
            return Err(Error::UnknownLayer(name));
        }
        Ok(Self {
            kind,
            block: block as u8,
            index: index as u8,
        })
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn block(&self) -> usize {
        self.block as usize
    }

    /// Position within the block (1-based); 0 for pooling layers.
    pub fn index(&self) -> usize {
        self.index as usize
    }

    pub fn is_relu(&self) -> bool {
        self.kind == LayerKind::Relu
    }

    /// Every trunk layer in forward order.
    pub fn vgg19_all() -> Vec<LayerId> {
        let mut out = Vec::with_capacity(37);
        for (b, &depth) in VGG19_BLOCK_DEPTHS.iter().enumerate() {
            let block = b + 1;
            for i in 1..=depth {
                out.push(Self::conv(block, i).unwrap());
                out.push(Self::relu(block, i).unwrap());
            }
            out.push(Self::pool(block).unwrap());
        }
        out
    }

    pub fn vgg19_relus() -> Vec<LayerId> {
        Self::vgg19_all().into_iter().filter(|l| l.is_relu()).collect()
    }

    /// Parses a comma separated list such as `relu1_1,relu2_1`.
    pub fn parse_list(s: &str) -> Result<Vec<LayerId>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            LayerKind::Conv => write!(f, "conv{}_{}", self.block, self.index),
            LayerKind::Relu => write!(f, "relu{}_{}", self.block, self.index),
            LayerKind::Pool => write!(f, "pool{}", self.block),
        }
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownLayer(s.to_string());
        let (kind, rest) = if let Some(r) = s.strip_prefix("conv") {
            (LayerKind::Conv, r)
        } else if let Some(r) = s.strip_prefix("relu") {
            (LayerKind::Relu, r)
        } else if let Some(r) = s.strip_prefix("pool") {
            (LayerKind::Pool, r)
        } else {
            return Err(unknown());
        };
        let digits = |t: &str| -> Result<usize> {
            if t.len() != 1 || !t.bytes().all(|b| b.is_ascii_digit()) {
                return Err(unknown());
            }
            t.parse().map_err(|_| unknown())
        };
        let (block, index) = match kind {
            LayerKind::Pool => (digits(rest)?, 0),
            _ => {
                let (b, i) = rest.split_once('_').ok_or_else(unknown)?;
                (digits(b)?, digits(i)?)
            }
        };
        Self::checked(kind, block, index).map_err(|_| unknown())
    }
}

impl Serialize for LayerId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trunk_has_37_layers() {
        let all = LayerId::vgg19_all();
        assert_eq!(all.len(), 37);
        let count = |k| all.iter().filter(|l| l.kind() == k).count();
        assert_eq!(count(LayerKind::Conv), 16);
        assert_eq!(count(LayerKind::Relu), 16);
        assert_eq!(count(LayerKind::Pool), 5);
    }

    #[test]
    fn names_round_trip() {
        for l in LayerId::vgg19_all() {
            assert_eq!(l.to_string().parse::<LayerId>().unwrap(), l);
        }
    }

    #[test]
    fn rejects_unknown_names() {
        for bad in [
            "relu1_3", "conv6_1", "pool0", "pool6", "relu2_0", "fc6", "relu", "relu3_10", "",
        ] {
            assert!(bad.parse::<LayerId>().is_err(), "{bad} accepted");
        }
    }

    #[test]
    fn parse_list_trims() {
        let l = LayerId::parse_list("relu1_1, relu2_1,").unwrap();
        assert_eq!(l, vec![LayerId::relu(1, 1).unwrap(), LayerId::relu(2, 1).unwrap()]);
    }
}
